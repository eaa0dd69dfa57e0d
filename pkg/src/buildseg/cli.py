"""Command-line entry point: ``buildseg <subcommand> [options]``.

Subcommands: synth, fuse, train, eval, ablate, gradcheck, infer.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .checkpoint import checkpoint_id, load_checkpoint
from .config import RunConfig, resolve
from .data import (PATCH, AdapterConfig, fuse, generate_synthetic, read_image, read_manifest,
                   reassemble_mask, tile_to_patches)
from .evaluate import (GroundTruthEcho, ModelPredictor, emit_ablation, emit_report, evaluate,
                       format_table, render_overlay, run_ablation, write_ppm)
from .model import PRESETS, SegModel
from .train import train_loop

log = logging.getLogger("buildseg")

GROUND_TRUTH_STUB = "@ground-truth"


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="INI run config (sections: model, optimizer, data, output, run)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory")
    g.add_argument("--workers", type=int, help="cap on parallel workers (default 1)")
    g.add_argument("--paper-mode", action="store_true", default=None,
                   help="use lr 0.0006, warmup 1500, batch 32")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="buildseg", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene corpus")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--domain", choices=["A", "B"], default="A")

    p = sub.add_parser("fuse", parents=[common], help="adapters -> patch store")
    p.add_argument("--dataset", action="append", required=True, metavar="TAG=ROOT",
                   help="dataset root for an adapter tag (repeatable)")
    p.add_argument("--adapter-config", action="append", default=[], metavar="TAG=FILE",
                   help="override the built-in adapter config for TAG")
    p.add_argument("--stride", type=int, default=PATCH)

    def train_opts(q):
        q.add_argument("--preset", choices=sorted(PRESETS))
        q.add_argument("--max-iters", type=int)
        q.add_argument("--batch-size", type=int)
        q.add_argument("--lr", type=float, dest="base_lr")
        q.add_argument("--warmup-iters", type=int)
        q.add_argument("--flip", action="store_true", default=None)
        q.add_argument("--balanced", action="store_true", default=None)
        q.add_argument("--grad-clip", type=float)

    p = sub.add_parser("train", parents=[common], help="train on one or more patch stores")
    p.add_argument("--manifest", action="append", dest="manifests", metavar="STORE")
    p.add_argument("--mode", choices=["self", "fusion"])
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--init", help="checkpoint with initial (pretrained) weights")
    train_opts(p)

    def eval_opts(q):
        q.add_argument("--biou-d", type=int)
        q.add_argument("--averaging", choices=["micro", "per-image"])

    p = sub.add_parser("eval", parents=[common], help="IoU/BIoU report and overlays")
    p.add_argument("--checkpoint", required=True,
                   help=f"checkpoint file, or {GROUND_TRUTH_STUB} to echo the reference masks")
    p.add_argument("--manifest", action="append", dest="manifests", required=True, metavar="STORE")
    p.add_argument("--split", default="test")
    p.add_argument("--overlays", help="directory for PPM overlays (default <out>/overlays)")
    p.add_argument("--alpha", type=float, default=0.5)
    eval_opts(p)

    p = sub.add_parser("ablate", parents=[common], help="self vs fusion comparison")
    p.add_argument("--corpus-a", required=True, metavar="STORE")
    p.add_argument("--corpus-b", required=True, metavar="STORE")
    train_opts(p)
    eval_opts(p)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference verification")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--skip-ops", action="store_true")
    p.add_argument("--skip-model", action="store_true")

    p = sub.add_parser("infer", parents=[common], help="single image -> mask + overlay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    return parser


def _overrides(args) -> dict:
    keys = ("seed", "out", "workers", "paper_mode", "preset", "max_iters", "batch_size", "base_lr",
            "warmup_iters", "flip", "balanced", "grad_clip", "manifests", "mode", "checkpoint_every",
            "biou_d", "averaging")
    return {k: getattr(args, k, None) for k in keys}


def _echo(cfg: RunConfig) -> None:
    print("# resolved run config")
    print(cfg.to_ini().rstrip())
    print()


def cmd_synth(args, cfg: RunConfig) -> int:
    root = generate_synthetic(cfg.out, cfg.seed, args.scenes, args.domain)
    cfg.write(root)
    print(f"wrote {args.scenes} domain-{args.domain} scenes to {root}")
    return 0


def _pairs(values: list[str], what: str) -> list[tuple[str, str]]:
    out = []
    for v in values:
        if "=" not in v:
            raise ValueError(f"{what} expects TAG=PATH, got {v!r}")
        tag, path = v.split("=", 1)
        out.append((tag, path))
    return out


def cmd_fuse(args, cfg: RunConfig) -> int:
    overrides = dict(_pairs(args.adapter_config, "--adapter-config"))
    sources = []
    for tag, root in _pairs(args.dataset, "--dataset"):
        adapter = AdapterConfig.load(overrides[tag]) if tag in overrides else AdapterConfig.builtin(tag)
        sources.append((root, adapter))
    manifest, warnings = fuse(sources, cfg.out, seed=cfg.seed, stride=args.stride)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    cfg.write(cfg.out)
    stats = manifest.stats()
    print(f"patch store {cfg.out}: {stats['patches']} patches from {stats['records']} records, "
          f"building fraction {stats['building_fraction']:.4f}")
    return 0


def _model_for_training(args, cfg: RunConfig) -> SegModel:
    init = getattr(args, "init", None)
    if init:
        params, mcfg = load_checkpoint(init)
        return SegModel(mcfg, params)
    return SegModel.create(cfg.model, cfg.seed)


def cmd_train(args, cfg: RunConfig) -> int:
    if not cfg.manifests:
        raise ValueError("train needs at least one --manifest")
    manifests = [read_manifest(m) for m in cfg.manifests]
    out = Path(cfg.out)
    cfg.write(out)
    t0 = time.time()
    result = train_loop(manifests, _model_for_training(args, cfg), cfg.optim, out,
                        checkpoint_every=cfg.checkpoint_every, mode=cfg.mode, progress=True)
    last = result.log_rows[-1] if result.log_rows else {}
    print(f"trained {cfg.optim.max_iters} iterations in {time.time() - t0:.1f}s; "
          f"final loss {last.get('loss', float('nan')):.5f}; checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    manifests = [read_manifest(m) for m in cfg.manifests]
    if args.checkpoint == GROUND_TRUTH_STUB:
        predictor, ckpt = GroundTruthEcho(), GROUND_TRUTH_STUB
    else:
        params, mcfg = load_checkpoint(args.checkpoint)
        predictor, ckpt = ModelPredictor(SegModel(mcfg, params)), checkpoint_id(args.checkpoint)
    out = Path(cfg.out)
    cfg.write(out)
    report = evaluate(predictor, manifests, cfg.biou_d, cfg.averaging, split=args.split,
                      workers=cfg.workers, overlays=args.overlays or out / "overlays", alpha=args.alpha,
                      metadata={"checkpoint": ckpt})
    emit_report(report, out / "reports")
    print(format_table(report), end="")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    a, b = read_manifest(args.corpus_a), read_manifest(args.corpus_b)
    out = Path(cfg.out)
    cfg.write(out)
    report, _ = run_ablation(a, b, cfg.model, cfg.optim, out, cfg.biou_d, cfg.averaging, cfg.workers)
    paths = emit_ablation(report, out / "reports")
    print(paths[1].read_text(), end="")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    ok = True
    if not args.skip_ops:
        for dtype, tol in ((np.float64, gc.F64_TOL), (np.float32, gc.F32_TOL)):
            for name, err in gc.op_suite(args.cases, dtype, cfg.seed).items():
                passed = err <= tol
                ok &= passed
                print(f"{'PASS' if passed else 'FAIL'}  {name:<16} {np.dtype(dtype).name}  "
                      f"max rel err {err:.3e} (tol {tol:g})")
    if not args.skip_model:
        for precision, errs in gc.model_gradcheck_multi(seed=cfg.seed).items():
            worst = max(errs, key=errs.get)
            tol = gc.MODEL_TOL if precision == "float64" else gc.F32_TOL
            passed = errs[worst] <= tol
            ok &= passed
            print(f"{'PASS' if passed else 'FAIL'}  tiny model {precision} ({len(errs)} parameter tensors)  "
                  f"max rel err {errs[worst]:.3e} at {worst} (tol {tol:g})")
    return 0 if ok else 1


def cmd_infer(args, cfg: RunConfig) -> int:
    params, mcfg = load_checkpoint(args.checkpoint)
    model = SegModel(mcfg, params)
    image = read_image(args.image)
    h, w = image.shape[:2]
    patches = tile_to_patches(image, np.zeros((h, w), np.uint8), Path(args.image).stem)
    predictor = ModelPredictor(model)
    for p in patches:
        p.mask = predictor.predict_patch(p)
    mask = reassemble_mask(patches, h, w)
    out = Path(cfg.out)
    cfg.write(out)
    stem = Path(args.image).stem
    (out / "overlays").mkdir(exist_ok=True)
    (out / f"{stem}_mask.pgm").write_bytes(f"P5\n{w} {h}\n255\n".encode() + (mask * 255).astype(np.uint8).tobytes())
    write_ppm(out / "overlays" / f"{stem}_overlay.ppm", render_overlay(image, mask, args.alpha))
    print(f"building fraction {mask.mean():.4f}; wrote {stem}_mask.pgm and overlays/{stem}_overlay.ppm under {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "fuse": cmd_fuse,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "infer": cmd_infer,
}


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad input
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.config, _overrides(args))
        _echo(cfg)
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:  # one-line diagnostic, exit 1
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
