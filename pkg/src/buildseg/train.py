"""AdamW training with linear warmup and polynomial decay.

The loop is bitwise reproducible for a given (seed, corpus, config): batch
composition, flips and initial weights all derive from the seed.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Manifest, PatchEntry, load_patch
from .metrics import cross_entropy
from .model import SegModel, normalize_images

log = logging.getLogger(__name__)

PAPER_WARMUP = 1500
PAPER_BATCH = 32


class TrainError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    base_lr: float = 0.0006
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    warmup_iters: int = PAPER_WARMUP
    warmup_ratio: float = 1e-6
    power: float = 1.0
    min_lr: float = 0.0
    max_iters: int = 2000
    batch_size: int = 8
    eps: float = 1e-8
    seed: int = 0
    flip: bool = False
    balanced: bool = False
    grad_clip: float | None = None

    def __post_init__(self):
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ValueError("need 0 < beta1 < beta2 < 1")
        if self.warmup_iters > self.max_iters:
            raise ValueError(f"warmup_iters {self.warmup_iters} exceeds max_iters {self.max_iters}")
        if not self.base_lr > self.min_lr >= 0:
            raise ValueError("need base_lr > min_lr >= 0")

    @classmethod
    def desk(cls, max_iters: int = 2000, **kw) -> "OptimConfig":
        """Desk profile: batch 8 and warmup min(1500, max_iters / 10)."""
        kw.setdefault("batch_size", 8)
        return cls(max_iters=max_iters, warmup_iters=min(PAPER_WARMUP, max_iters // 10), **kw)

    @classmethod
    def paper(cls, max_iters: int, **kw) -> "OptimConfig":
        kw.setdefault("batch_size", PAPER_BATCH)
        return cls(max_iters=max_iters, warmup_iters=PAPER_WARMUP, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(t: int, cfg: OptimConfig) -> float:
    """Learning rate for iteration ``t`` (linear warmup, then polynomial decay)."""
    if not 0 <= t <= cfg.max_iters:
        raise ValueError(f"iteration {t} outside [0, {cfg.max_iters}]")
    if t < cfg.warmup_iters:
        k = (1 - t / cfg.warmup_iters) * (1 - cfg.warmup_ratio)
        return cfg.base_lr * (1 - k)
    span = cfg.max_iters - cfg.warmup_iters
    if span == 0:
        return cfg.min_lr
    coeff = (1 - (t - cfg.warmup_iters) / span) ** cfg.power
    return (cfg.base_lr - cfg.min_lr) * coeff + cfg.min_lr


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: OptimState,
               lr: float, cfg: OptimConfig) -> None:
    """One AdamW update with decoupled weight decay, computed in float64."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient for parameter {name}")
        if g.shape != params[name].shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads.get(name, np.zeros(p.shape)), dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w = p.data.astype(np.float64)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (w - lr * update - lr * cfg.weight_decay * w).astype(p.dtype)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


@dataclass
class Batch:
    images: np.ndarray  # B×H×W×3 uint8
    masks: np.ndarray  # B×H×W
    valid: np.ndarray  # B×H×W
    sources: list[str]


def train_step(model: SegModel, batch: Batch, state: OptimState, cfg: OptimConfig) -> float:
    """Forward, masked cross-entropy, backward and one AdamW update at ``lr_at(state.t)``."""
    if len(batch.images) == 0:
        raise TrainError("empty batch")
    lr = lr_at(state.t, cfg)
    x = normalize_images(batch.images)
    with T.Tape() as tape:
        loss = cross_entropy(model.forward(x), batch.masks, batch.valid)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainError(f"non-finite loss at iteration {state.t}")
    T.backward(loss, tape)
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    if cfg.grad_clip:
        clip_grads(grads, cfg.grad_clip)
    adamw_step(model.params, grads, state, lr, cfg)
    for p in model.params.values():
        p.grad = None
    return value


# --------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class PoolItem:
    root: Path
    entry: PatchEntry
    source: str


def build_pool(manifests: list[Manifest], mode: str = "fusion", split: str = "train") -> list[PoolItem]:
    """Training patches: the first manifest only in ``self`` mode, all of them in ``fusion``."""
    if not manifests:
        raise TrainError("no manifests given")
    if mode not in ("self", "fusion"):
        raise ValueError(f"mode must be 'self' or 'fusion', got {mode!r}")
    chosen = manifests[:1] if mode == "self" else manifests
    pool = [PoolItem(m.root, e, f"{e.dataset}@{i}")
            for i, m in enumerate(chosen) for e in m.select(split=split)]
    if not pool:
        raise TrainError(f"empty training corpus (no '{split}' patches)")
    return pool


class Sampler:
    """Seeded batch index stream.

    Proportional mode walks a fresh permutation of the pool each epoch, so
    every patch is equally likely. Balanced mode first picks a source
    uniformly, then a patch within it.
    """

    def __init__(self, pool: list[PoolItem], batch_size: int, seed: int, balanced: bool = False):
        self.pool = pool
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 1])
        self.balanced = balanced
        self.groups: dict[str, list[int]] = {}
        for i, item in enumerate(pool):
            self.groups.setdefault(item.source, []).append(i)
        self._order: list[int] = []

    def next_indices(self) -> list[int]:
        if self.balanced:
            keys = sorted(self.groups)
            out = []
            for _ in range(self.batch_size):
                g = self.groups[keys[int(self.rng.integers(len(keys)))]]
                out.append(g[int(self.rng.integers(len(g)))])
            return out
        out = []
        while len(out) < self.batch_size:
            if not self._order:
                self._order = [int(i) for i in self.rng.permutation(len(self.pool))]
            out.append(self._order.pop(0))
        return out


def assemble_batch(pool: list[PoolItem], indices: list[int], rng: np.random.Generator | None) -> Batch:
    imgs, masks, valid, sources = [], [], [], []
    for i in indices:
        item = pool[i]
        p = load_patch(item.root, item.entry)
        img, msk, vm = p.image, p.mask, p.valid_mask()
        if rng is not None and rng.random() < 0.5:
            img, msk, vm = img[:, ::-1], msk[:, ::-1], vm[:, ::-1]
        imgs.append(img)
        masks.append(msk)
        valid.append(vm)
        sources.append(item.source)
    return Batch(np.stack(imgs), np.stack(masks), np.stack(valid), sources)


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: SegModel
    log_rows: list[dict]
    checkpoint: Path | None


def train_loop(manifests: list[Manifest], model: SegModel, cfg: OptimConfig,
               out_dir=None, checkpoint_every: int = 0, mode: str = "fusion",
               progress: bool = False) -> TrainResult:
    """Train for ``cfg.max_iters`` iterations, logging one row per iteration.

    With ``out_dir`` set, writes ``logs/loss.csv``, periodic
    ``checkpoints/iter_NNNNNN.sabw`` and ``checkpoints/final.sabw``.
    """
    pool = build_pool(manifests, mode)
    sources = sorted({p.source for p in pool})
    sampler = Sampler(pool, cfg.batch_size, cfg.seed, cfg.balanced)
    flip_rng = np.random.default_rng([cfg.seed, 2]) if cfg.flip else None
    state = OptimState()
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    for t in range(cfg.max_iters):
        batch = assemble_batch(pool, sampler.next_indices(), flip_rng)
        lr = lr_at(t, cfg)
        loss = train_step(model, batch, state, cfg)
        row = {"iter": t, "lr": lr, "loss": loss}
        for s in sources:
            row[s] = batch.sources.count(s)
        rows.append(row)
        if progress and (t % 25 == 0 or t == cfg.max_iters - 1):
            log.info("iter %d lr %.3g loss %.5f", t, lr, loss)
        if out is not None and checkpoint_every and (t + 1) % checkpoint_every == 0:
            save_checkpoint(model.params, model.config, out / "checkpoints" / f"iter_{t + 1:06d}.sabw")
    final = None
    if out is not None:
        final = out / "checkpoints" / "final.sabw"
        save_checkpoint(model.params, model.config, final)
        write_loss_log(rows, out / "logs" / "loss.csv")
    return TrainResult(model, rows, final)


def write_loss_log(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys()) if rows else ["iter", "lr", "loss"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def with_overrides(cfg: OptimConfig, **kw) -> OptimConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
