"""Binary checkpoint format.

Layout::

    b"SABW" | version u32 LE | header length u64 LE | JSON header | blobs

The header lists ``name``, ``dtype``, ``shape`` and byte ``offset`` (relative
to the first blob) for every parameter, plus the model config. Blobs are
little-endian float32 in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Params, param_shapes
from .tensor import Tensor

MAGIC = b"SABW"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


def encode_checkpoint(params: Params, cfg: ModelConfig) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise CheckpointError(f"parameter {name} has non-finite values")
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "float32", "shape": list(t.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": cfg.to_dict(), "params": entries}, sort_keys=True, indent=1).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def save_checkpoint(params: Params, cfg: ModelConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(params, cfg))
    tmp.replace(path)


def decode_checkpoint(raw: bytes) -> tuple[Params, ModelConfig]:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint: missing prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError("truncated checkpoint: header incomplete")
    try:
        header = json.loads(raw[_PREFIX.size:start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    cfg = ModelConfig.from_dict(header["config"])
    params: Params = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 4
        lo = start + e["offset"]
        if lo + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: blob for {e['name']} incomplete")
        data = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=lo).reshape(e["shape"])
        params[e["name"]] = Tensor(data.astype(np.float32), requires_grad=True, name=e["name"])
    check_compatible(params, cfg)
    return params, cfg


def load_checkpoint(path) -> tuple[Params, ModelConfig]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def check_compatible(params: Params, cfg: ModelConfig) -> None:
    """Raise naming the first parameter whose presence or shape disagrees with ``cfg``."""
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointError(f"missing parameter {name} (expected shape {shape})")
        if tuple(params[name].shape) != shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tuple(params[name].shape)} vs model {shape}")
    extra = [n for n in params if n not in expected]
    if extra:
        raise CheckpointError(f"unexpected parameter {extra[0]}")


def load_into(path, cfg: ModelConfig) -> Params:
    """Load a checkpoint for a model built from ``cfg`` (a stand-in for pretrained weights)."""
    params, _ = load_checkpoint(path)
    check_compatible(params, cfg)
    return params


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
