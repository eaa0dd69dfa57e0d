"""Dataset-level IoU/BIoU reports, the self-vs-fusion ablation and overlays."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .data import PATCH, Manifest, PatchPair, load_patch
from .metrics import ConfusionCounts, accumulate, default_band_width
from .model import ModelConfig, SegModel, normalize_images
from .train import OptimConfig, train_loop

log = logging.getLogger(__name__)

RED = np.array([255.0, 0.0, 0.0])


class Predictor(Protocol):
    def predict_patch(self, patch: PatchPair) -> np.ndarray: ...


@dataclass
class ModelPredictor:
    model: SegModel

    def predict_patch(self, patch: PatchPair) -> np.ndarray:
        return self.model.predict(normalize_images(patch.image[None]))[0]


class GroundTruthEcho:
    """Predicts the reference mask itself; scores 1.0 on any corpus."""

    def predict_patch(self, patch: PatchPair) -> np.ndarray:
        return patch.mask.copy()


class InvertedTruth:
    def predict_patch(self, patch: PatchPair) -> np.ndarray:
        return (1 - patch.mask).astype(np.uint8)


class Background:
    def predict_patch(self, patch: PatchPair) -> np.ndarray:
        return np.zeros_like(patch.mask)


@dataclass
class ReportRow:
    label: str
    iou: float | None
    biou: float | None
    n: int
    skipped: int


@dataclass
class MetricsReport:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)

    def row(self, label: str) -> ReportRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def _row(label: str, c: ConfusionCounts, averaging: str) -> ReportRow:
    return ReportRow(label, c.iou(averaging), c.biou(averaging), c.samples, c.samples_skipped)


def _crop_valid(a: np.ndarray, valid) -> np.ndarray:
    t, l, h, w = valid
    return a[t:t + h, l:l + w]


def score_patch(predictor: Predictor, root, entry, d: int, overlays: Path | None = None,
                alpha: float = 0.5) -> ConfusionCounts:
    patch = load_patch(root, entry)
    pred = np.asarray(predictor.predict_patch(patch), dtype=np.uint8)
    if pred.shape != patch.mask.shape:
        raise ValueError(f"predictor returned {pred.shape} for patch {entry.key}")
    if overlays is not None:
        write_ppm(overlays / f"{entry.key}.ppm", render_overlay(patch.image, pred, alpha))
    return accumulate(ConfusionCounts(), _crop_valid(pred, entry.valid), _crop_valid(patch.mask, entry.valid), d)


def evaluate_counts(predictor: Predictor, manifests: list[Manifest], d: int | None = None,
                    split: str = "test", workers: int = 1, overlays=None,
                    alpha: float = 0.5) -> dict[str, ConfusionCounts]:
    """Per-dataset confusion counts over the ``split`` patches of every manifest."""
    d = default_band_width(PATCH, PATCH) if d is None else d
    jobs = [(m.root, e) for m in manifests for e in m.select(split=split)]
    if not jobs:
        raise ValueError(f"no '{split}' patches to evaluate")
    overlays = Path(overlays) if overlays is not None else None
    if overlays is not None:
        overlays.mkdir(parents=True, exist_ok=True)

    def run(job):
        return job[1].dataset, score_patch(predictor, job[0], job[1], d, overlays, alpha)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    per: dict[str, ConfusionCounts] = {}
    for tag, c in results:
        per[tag] = per.get(tag, ConfusionCounts()).merge(c)
    return dict(sorted(per.items()))


def evaluate(predictor: Predictor, manifests: list[Manifest], d: int | None = None,
             averaging: str = "micro", split: str = "test", workers: int = 1,
             overlays=None, alpha: float = 0.5, metadata: dict | None = None) -> MetricsReport:
    """One report row per dataset tag found in the evaluated patches."""
    d = default_band_width(PATCH, PATCH) if d is None else d
    per = evaluate_counts(predictor, manifests, d, split, workers, overlays, alpha)
    meta = {"corpus": "+".join(m.corpus_id() for m in manifests), "d": d, "averaging": averaging}
    meta.update(metadata or {})
    return MetricsReport([_row(tag, c, averaging) for tag, c in per.items()], meta)


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationReport:
    self_row: ReportRow
    fusion_row: ReportRow
    metadata: dict = field(default_factory=dict)

    @property
    def delta_iou(self) -> float | None:
        a, b = self.self_row.iou, self.fusion_row.iou
        return None if a is None or b is None else b - a

    @property
    def delta_biou(self) -> float | None:
        a, b = self.self_row.biou, self.fusion_row.biou
        return None if a is None or b is None else b - a

    def as_report(self) -> MetricsReport:
        return MetricsReport([self.self_row, self.fusion_row], dict(self.metadata))


def check_disjoint(train: list[Manifest], test: Manifest) -> None:
    test_ids = {e.id for e in test.select(split="test")}
    for m in train:
        overlap = test_ids & {e.id for e in m.select(split="train")}
        if overlap:
            raise ValueError(f"train/test overlap on record ids: {sorted(overlap)[:5]}")


def run_ablation(corpus_a: Manifest, corpus_b: Manifest, model_cfg: ModelConfig, optim: OptimConfig,
                 out_dir=None, d: int | None = None, averaging: str = "micro",
                 workers: int = 1) -> tuple[AblationReport, dict[str, SegModel]]:
    """Train self (A) and fusion (A ∪ B) models with identical seeds and budgets; score both on A's test split."""
    check_disjoint([corpus_a, corpus_b], corpus_a)
    d = default_band_width(PATCH, PATCH) if d is None else d
    out = Path(out_dir) if out_dir is not None else None
    rows, models = {}, {}
    for mode in ("self", "fusion"):
        model = SegModel.create(model_cfg, optim.seed)
        train_loop([corpus_a, corpus_b], model, optim, out / mode if out else None, mode=mode)
        per = evaluate_counts(ModelPredictor(model), [corpus_a], d, workers=workers)
        total = ConfusionCounts()
        for c in per.values():
            total = total.merge(c)
        rows[mode] = _row(mode, total, averaging)
        models[mode] = model
    meta = {"corpus": corpus_a.corpus_id(), "d": d, "averaging": averaging,
            "iters": optim.max_iters, "seed": optim.seed}
    return AblationReport(rows["self"], rows["fusion"], meta), models


# --------------------------------------------------------------------------
# overlays


def render_overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend red into masked pixels: (1 - alpha)·src + alpha·(255, 0, 0), rounded half up."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    image = np.asarray(image, dtype=np.uint8)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} differ")
    blend = np.floor((1.0 - alpha) * image.astype(np.float64) + alpha * RED + 0.5)
    return np.where(mask[..., None] == 1, blend.clip(0, 255).astype(np.uint8), image)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


# --------------------------------------------------------------------------
# report files


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def format_table(report: MetricsReport, first_column: str = "Dataset") -> str:
    """Aligned text table: first column, IOU, BIOU, values to 4 decimals."""
    header = [first_column, "IOU", "BIOU"]
    body = [[r.label, _fmt(r.iou), _fmt(r.biou)] for r in report.rows]
    width = max(len(x[0]) for x in [header] + body)
    lines = [f"{a:<{width}}  {b:>6}  {c:>6}" for a, b, c in [header] + body]
    return "\n".join(lines) + "\n"


def report_to_jsonl(report: MetricsReport) -> str:
    lines = [json.dumps({"metadata": report.metadata}, sort_keys=True)]
    lines += [json.dumps(asdict(r), sort_keys=True) for r in report.rows]
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> MetricsReport:
    meta, rows = {}, []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "metadata" in rec:
            meta = rec["metadata"]
        else:
            rows.append(ReportRow(**rec))
    return MetricsReport(rows, meta)


def emit_report(report: MetricsReport, out_dir, stem: str = "report",
                formats=("jsonl", "txt"), first_column: str = "Dataset") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        path = out / f"{stem}.{fmt}"
        if fmt == "jsonl":
            path.write_text(report_to_jsonl(report))
        elif fmt == "txt":
            path.write_text(format_table(report, first_column))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


def emit_ablation(report: AblationReport, out_dir) -> list[Path]:
    paths = emit_report(report.as_report(), out_dir, stem="ablation", first_column="Model")
    delta = {"delta": {"iou": report.delta_iou, "biou": report.delta_biou}}
    with paths[0].open("a") as fh:
        fh.write(json.dumps(delta, sort_keys=True) + "\n")
    with paths[1].open("a") as fh:
        fh.write(f"\nfusion - self: IOU {_signed(report.delta_iou)}  BIOU {_signed(report.delta_biou)}\n")
    return paths


def _signed(v: float | None) -> str:
    return "n/a" if v is None else f"{v:+.4f}"
