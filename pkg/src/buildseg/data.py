"""Dataset adapters, class harmonisation, tiling and the on-disk patch store.

Every source dataset is reduced to 256×256 RGB patches with binary building
masks. Adapters read a generic layout: ``<root>/images`` and ``<root>/masks``
holding files with matching stems, optionally split into
``<root>/{train,val,test}/...``. Masks are single-channel label images whose
values are mapped to {0, 1} by the adapter's class mapping.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

PATCH = 256
DATASET_TAGS = ("mapai", "inria", "whu", "floodnet", "synthetic")
SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm"}


class DataError(RuntimeError):
    """Raised for unusable dataset roots, images or patch stores."""


@dataclass(frozen=True)
class SampleRecord:
    id: str
    dataset: str
    image_uri: str
    mask_uri: str
    width: int
    height: int
    split: str


@dataclass
class ClassMapping:
    dataset: str
    mapping: dict[int, int]
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not any(v == 1 for v in self.mapping.values()):
            raise DataError(f"{self.dataset}: class mapping has no building label")
        if any(v not in (0, 1) for v in self.mapping.values()):
            raise DataError(f"{self.dataset}: class mapping targets must be 0 or 1")

    def label_id(self, name: str) -> int:
        for k, v in self.names.items():
            if v == name:
                return k
        raise KeyError(name)


@dataclass
class AdapterConfig:
    tag: str
    images: str = "images"
    masks: str = "masks"
    rescale: float = 1.0
    strict: bool = True
    classes: ClassMapping | None = None

    @classmethod
    def parse(cls, text: str) -> "AdapterConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.read_string(text)
        ds = cp["dataset"]
        tag = ds.get("tag")
        if tag not in DATASET_TAGS:
            raise DataError(f"unknown dataset tag {tag!r}")
        names = {int(k): v for k, v in cp["labels"].items()} if cp.has_section("labels") else {}
        mapping = {int(k): int(v) for k, v in cp["classes"].items()}
        return cls(
            tag=tag,
            images=ds.get("images", "images"),
            masks=ds.get("masks", "masks"),
            rescale=ds.getfloat("rescale", 1.0),
            strict=ds.getboolean("strict", True),
            classes=ClassMapping(tag, mapping, names),
        )

    @classmethod
    def load(cls, path) -> "AdapterConfig":
        return cls.parse(Path(path).read_text())

    @classmethod
    def builtin(cls, tag: str) -> "AdapterConfig":
        if tag not in DATASET_TAGS:
            raise DataError(f"unknown adapter {tag!r}; choose from {', '.join(DATASET_TAGS)}")
        return cls.parse(resources.files("buildseg").joinpath("adapters", f"{tag}.ini").read_text())


# --------------------------------------------------------------------------
# ingest


def _stems(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def hash_split(record_id: str, seed: int = 0) -> str:
    """Seeded 80/10/10 assignment from a hash of the record id."""
    u = int(hashlib.sha256(f"{seed}:{record_id}".encode()).hexdigest()[:8], 16) / 2**32
    return "train" if u < 0.8 else "val" if u < 0.9 else "test"


def ingest(root, adapter: str | AdapterConfig, seed: int = 0) -> tuple[list[SampleRecord], list[str]]:
    """List image/mask pairs under ``root``.

    Returns the records sorted by id and a list of warnings for orphan files.
    """
    root = Path(root)
    cfg = adapter if isinstance(adapter, AdapterConfig) else AdapterConfig.builtin(adapter)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    layouts = [(s, root / s) for s in SPLITS if (root / s / cfg.images).is_dir()]
    if not layouts:
        layouts = [(None, root)]
    records, warnings = [], []
    for split, base in layouts:
        images, masks = _stems(base / cfg.images), _stems(base / cfg.masks)
        for stem in sorted(images.keys() ^ masks.keys()):
            kind = "image" if stem in images else "mask"
            warnings.append(f"{cfg.tag}: {kind} {stem!r} in {base} has no counterpart, skipped")
        for stem in sorted(images.keys() & masks.keys()):
            try:
                with Image.open(images[stem]) as im:
                    width, height = im.size
            except OSError as exc:
                raise DataError(f"unreadable image {images[stem]}: {exc}") from None
            records.append(SampleRecord(
                id=stem,
                dataset=cfg.tag,
                image_uri=str(images[stem]),
                mask_uri=str(masks[stem]),
                width=width,
                height=height,
                split=split or hash_split(stem, seed),
            ))
    for w in warnings:
        log.warning(w)
    if not records:
        raise DataError(f"no image/mask pairs found under {root}")
    records.sort(key=lambda r: r.id)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate record ids under {root}")
    return records, warnings


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from None


def read_label_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise DataError(f"unreadable mask {path}: {exc}") from None
    if arr.ndim != 2:
        raise DataError(f"mask {path} must be single-channel, got shape {arr.shape}")
    return arr.astype(np.int64)


def map_classes_binary(mask_raw, mapping: ClassMapping, strict: bool = True) -> tuple[np.ndarray, int]:
    """Map raw labels to {0, 1}.

    In strict mode an unmapped label raises; otherwise it becomes 0 and the
    number of such pixels is returned alongside the mask.
    """
    raw = np.asarray(mask_raw)
    values = np.unique(raw)
    unknown = [int(v) for v in values if int(v) not in mapping.mapping]
    if unknown and strict:
        raise DataError(f"{mapping.dataset}: unmapped label(s) {unknown}")
    out = np.zeros(raw.shape, dtype=np.uint8)
    for v in values:
        if mapping.mapping.get(int(v), 0) == 1:
            out[raw == v] = 1
    n_unknown = int(np.isin(raw, unknown).sum()) if unknown else 0
    return out, n_unknown


# --------------------------------------------------------------------------
# tiling


@dataclass
class PatchPair:
    image: np.ndarray  # PATCH×PATCH×3 uint8
    mask: np.ndarray  # PATCH×PATCH uint8 in {0, 1}
    record_id: str
    row: int
    col: int
    valid: tuple[int, int, int, int]  # top, left, height, width inside the patch

    def valid_mask(self) -> np.ndarray:
        t, l, h, w = self.valid
        m = np.zeros(self.mask.shape, dtype=np.uint8)
        m[t:t + h, l:l + w] = 1
        return m


def tile_grid(size: int, patch: int = PATCH, stride: int = PATCH) -> int:
    return max(0, math.ceil((size - patch) / stride)) + 1


def _pad_reflect(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    widths = [(0, ph), (0, pw)] + [(0, 0)] * (a.ndim - 2)
    mode = "reflect" if min(a.shape[:2]) > 1 else "edge"
    return np.pad(a, widths, mode=mode)


def rescale_pair(image: np.ndarray, mask: np.ndarray, factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear for the image, nearest neighbour for the mask."""
    h, w = mask.shape
    size = (max(1, round(w * factor)), max(1, round(h * factor)))
    img = np.asarray(Image.fromarray(image).resize(size, Image.BILINEAR))
    msk = np.asarray(Image.fromarray(mask).resize(size, Image.NEAREST))
    return img, msk


def tile_to_patches(image: np.ndarray, mask: np.ndarray, record_id: str = "",
                    stride: int = PATCH, rescale: float = 1.0, patch: int = PATCH) -> list[PatchPair]:
    """Cut an image/mask pair into patch×patch tiles.

    The image is reflect-padded on the right/bottom (mask padded with 0) so
    the grid covers it; each patch records the unpadded extent it holds.
    """
    image, mask = np.asarray(image, dtype=np.uint8), np.asarray(mask, dtype=np.uint8)
    if image.shape[:2] != mask.shape:
        raise DataError(f"{record_id}: image {image.shape[:2]} and mask {mask.shape} differ")
    if rescale != 1.0:
        image, mask = rescale_pair(image, mask, rescale)
    H, W = mask.shape
    nr, nc = tile_grid(H, patch, stride), tile_grid(W, patch, stride)
    ph, pw = (nr - 1) * stride + patch - H, (nc - 1) * stride + patch - W
    img = _pad_reflect(image, ph, pw)
    msk = np.pad(mask, ((0, ph), (0, pw)))
    out = []
    for r in range(nr):
        for c in range(nc):
            y, x = r * stride, c * stride
            out.append(PatchPair(
                image=np.ascontiguousarray(img[y:y + patch, x:x + patch]),
                mask=np.ascontiguousarray(msk[y:y + patch, x:x + patch]),
                record_id=record_id,
                row=r,
                col=c,
                valid=(0, 0, min(patch, H - y), min(patch, W - x)),
            ))
    return out


def reassemble_mask(patches: list[PatchPair], height: int, width: int, stride: int = PATCH) -> np.ndarray:
    """Inverse of tiling for labels: paste every valid region back in place."""
    out = np.zeros((height, width), dtype=np.uint8)
    for p in patches:
        t, l, h, w = p.valid
        y, x = p.row * stride + t, p.col * stride + l
        out[y:y + h, x:x + w] = p.mask[t:t + h, l:l + w]
    return out


# --------------------------------------------------------------------------
# patch store


@dataclass(frozen=True)
class PatchEntry:
    """One manifest line: the source record plus per-patch provenance."""

    id: str
    dataset: str
    image_uri: str
    mask_uri: str
    width: int
    height: int
    split: str
    tile_row: int
    tile_col: int
    valid: tuple[int, int, int, int]
    image_file: str
    mask_file: str
    image_sha256: str
    mask_sha256: str

    @property
    def key(self) -> str:
        return f"{self.id}_{self.tile_row}_{self.tile_col}"

    def record(self) -> SampleRecord:
        return SampleRecord(self.id, self.dataset, self.image_uri, self.mask_uri, self.width, self.height, self.split)

    def to_json(self) -> str:
        d = asdict(self)
        d["valid"] = list(self.valid)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "PatchEntry":
        d = json.loads(line)
        d["valid"] = tuple(d["valid"])
        return cls(**d)


@dataclass
class Manifest:
    root: Path
    entries: list[PatchEntry]

    @property
    def records(self) -> list[SampleRecord]:
        seen: dict[str, SampleRecord] = {}
        for e in self.entries:
            seen.setdefault(e.id, e.record())
        return list(seen.values())

    def select(self, split: str | None = None, dataset: str | None = None) -> list[PatchEntry]:
        return [e for e in self.entries
                if (split is None or e.split == split) and (dataset is None or e.dataset == dataset)]

    def stats(self) -> dict:
        per_dataset: dict[str, int] = {}
        building = total = 0
        for e in self.entries:
            per_dataset[e.dataset] = per_dataset.get(e.dataset, 0) + 1
            m = load_mask(self.root, e)
            t, l, h, w = e.valid
            building += int(m[t:t + h, l:l + w].sum())
            total += h * w
        return {"patches": len(self.entries), "records": len(self.records),
                "per_dataset": dict(sorted(per_dataset.items())),
                "building_fraction": building / total if total else 0.0}

    def corpus_id(self) -> str:
        digest = hashlib.sha256("".join(e.to_json() for e in self.entries).encode())
        return digest.hexdigest()[:12]


def _patch_paths(split: str, dataset: str, key: str) -> tuple[str, str]:
    base = f"patches/{split}/{dataset}/{key}"
    return base + ".img", base + ".msk"


def write_patch_store(items: list[tuple[SampleRecord, list[PatchPair]]], root) -> Manifest:
    """Write patches and then ``manifest.jsonl`` (last, so its presence means completeness)."""
    root = Path(root)
    ids = [rec.id for rec, _ in items]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"duplicate record ids in store: {dup[:5]}")
    manifest = root / "manifest.jsonl"
    if manifest.exists():
        manifest.unlink()
    entries = []
    for rec, patches in sorted(items, key=lambda it: it[0].id):
        for p in sorted(patches, key=lambda q: (q.row, q.col)):
            if p.image.shape != (PATCH, PATCH, 3) or p.mask.shape != (PATCH, PATCH):
                raise DataError(f"{rec.id}: patch has wrong shape {p.image.shape}/{p.mask.shape}")
            if not np.isin(p.mask, (0, 1)).all():
                raise DataError(f"{rec.id}: non-binary mask values")
            img_b = np.ascontiguousarray(p.image, dtype=np.uint8).tobytes()
            msk_b = np.ascontiguousarray(p.mask, dtype=np.uint8).tobytes()
            img_rel, msk_rel = _patch_paths(rec.split, rec.dataset, f"{rec.id}_{p.row}_{p.col}")
            for rel, blob in ((img_rel, img_b), (msk_rel, msk_b)):
                path = root / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(blob)
            entries.append(PatchEntry(
                **asdict(rec), tile_row=p.row, tile_col=p.col, valid=tuple(int(v) for v in p.valid),
                image_file=img_rel, mask_file=msk_rel,
                image_sha256=hashlib.sha256(img_b).hexdigest(),
                mask_sha256=hashlib.sha256(msk_b).hexdigest(),
            ))
    root.mkdir(parents=True, exist_ok=True)
    tmp = root / "manifest.jsonl.tmp"
    tmp.write_text("".join(e.to_json() + "\n" for e in entries))
    tmp.replace(manifest)
    return Manifest(root, entries)


def read_manifest(root) -> Manifest:
    root = Path(root)
    path = root / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"no manifest.jsonl in {root} (store missing or incomplete)")
    entries = [PatchEntry.from_json(line) for line in path.read_text().splitlines() if line.strip()]
    return Manifest(root, entries)


def _read_checked(root: Path, rel: str, size: int, digest: str) -> bytes:
    path = root / rel
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read patch file {path}: {exc}") from None
    if len(blob) != size:
        raise DataError(f"patch file {path} has {len(blob)} bytes, expected {size}")
    if hashlib.sha256(blob).hexdigest() != digest:
        raise DataError(f"checksum mismatch for patch file {path}")
    return blob


def load_mask(root, e: PatchEntry) -> np.ndarray:
    blob = _read_checked(Path(root), e.mask_file, PATCH * PATCH, e.mask_sha256)
    return np.frombuffer(blob, dtype=np.uint8).reshape(PATCH, PATCH)


def load_patch(root, e: PatchEntry) -> PatchPair:
    root = Path(root)
    img = np.frombuffer(_read_checked(root, e.image_file, PATCH * PATCH * 3, e.image_sha256),
                        dtype=np.uint8).reshape(PATCH, PATCH, 3)
    return PatchPair(image=img, mask=load_mask(root, e), record_id=e.id,
                     row=e.tile_row, col=e.tile_col, valid=e.valid)


def fuse(sources: list[tuple[str | Path, str | AdapterConfig]], out_root, seed: int = 0,
         stride: int = PATCH) -> tuple[Manifest, list[str]]:
    """Ingest, harmonise and tile every source dataset into one patch store."""
    items, warnings = [], []
    for root, adapter in sources:
        cfg = adapter if isinstance(adapter, AdapterConfig) else AdapterConfig.builtin(adapter)
        records, warns = ingest(root, cfg, seed)
        warnings.extend(warns)
        for rec in records:
            binary, n_unknown = map_classes_binary(read_label_mask(rec.mask_uri), cfg.classes, cfg.strict)
            if n_unknown:
                warnings.append(f"{rec.id}: {n_unknown} pixels with unmapped labels set to background")
            items.append((rec, tile_to_patches(read_image(rec.image_uri), binary, rec.id,
                                               stride=stride, rescale=cfg.rescale)))
    return write_patch_store(items, out_root), warnings


# --------------------------------------------------------------------------
# synthetic scenes

SCENE = 512
_PALETTES = {
    # background base RGB, roof base RGB
    "A": ((70, 110, 60), (205, 185, 170)),
    "B": ((125, 105, 80), (150, 170, 205)),
}


def _background(rng: np.random.Generator, base) -> np.ndarray:
    coarse = rng.normal(0.0, 18.0, (SCENE // 32 + 1, SCENE // 32 + 1, 3))
    smooth = np.asarray(Image.fromarray(((coarse + 128).clip(0, 255)).astype(np.uint8)).resize(
        (SCENE, SCENE), Image.BILINEAR), dtype=np.float64) - 128
    fine = rng.normal(0.0, 10.0, (SCENE, SCENE, 3))
    return np.asarray(base, dtype=np.float64) + smooth + fine


def rasterize_rect(shape, top: int, left: int, height: int, width: int) -> np.ndarray:
    m = np.zeros(shape, dtype=np.uint8)
    m[max(top, 0):max(top + height, 0), max(left, 0):max(left + width, 0)] = 1
    return m


def rasterize_rotated_rect(shape, cy: float, cx: float, height: float, width: float, angle: float) -> np.ndarray:
    """Pixels whose centre falls inside the rotated rectangle."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return ((np.abs(u) <= width / 2) & (np.abs(v) <= height / 2)).astype(np.uint8)


def synth_scene(seed: int, index: int, domain: str) -> tuple[np.ndarray, np.ndarray]:
    """One deterministic 512×512 scene and its exact footprint mask."""
    if domain not in _PALETTES:
        raise ValueError(f"domain must be 'A' or 'B', got {domain!r}")
    rng = np.random.default_rng([seed, index, ord(domain)])
    bg, roof = _PALETTES[domain]
    img = _background(rng, bg)
    mask = np.zeros((SCENE, SCENE), dtype=np.uint8)
    for _ in range(int(rng.integers(3, 11))):
        h, w = (int(v) for v in rng.integers(20, 121, size=2))
        if domain == "A":
            top, left = int(rng.integers(0, SCENE - h + 1)), int(rng.integers(0, SCENE - w + 1))
            fp = rasterize_rect(mask.shape, top, left, h, w)
        else:
            r = math.hypot(h, w) / 2
            cy, cx = rng.uniform(r, SCENE - r, size=2)
            fp = rasterize_rotated_rect(mask.shape, cy, cx, h, w, rng.uniform(0, math.pi))
        tint = np.asarray(roof, dtype=np.float64) + rng.normal(0.0, 12.0, 3)
        img[fp == 1] = tint + rng.normal(0.0, 6.0, (int(fp.sum()), 3))
        mask |= fp
    return img.round().clip(0, 255).astype(np.uint8), mask


def generate_synthetic(root, seed: int, n_scenes: int, domain: str = "A") -> Path:
    """Write ``n_scenes`` scenes under ``root/{train,val,test}/{images,masks}``.

    Roughly 10% of scenes go to val and 10% to test (at least one each when
    ``n_scenes >= 3``), chosen by index.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    root = Path(root)
    n_test = max(1, round(0.1 * n_scenes)) if n_scenes >= 3 else 0
    n_val = max(1, round(0.1 * n_scenes)) if n_scenes >= 3 else 0
    for i in range(n_scenes):
        split = "test" if i < n_test else "val" if i < n_test + n_val else "train"
        img, mask = synth_scene(seed, i, domain)
        stem = f"{domain.lower()}{seed}_{i:04d}"
        for sub, arr in (("images", img), ("masks", mask)):
            d = root / split / sub
            d.mkdir(parents=True, exist_ok=True)
            Image.fromarray(arr).save(d / f"{stem}.png", optimize=False)
    return root
