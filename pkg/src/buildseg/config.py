"""Run configuration: INI file sections plus command-line overrides.

Sections are ``[model]``, ``[optimizer]``, ``[data]``, ``[output]`` and
``[run]``. Precedence is defaults < config file < flags. The resolved config
is written back as ``config.ini`` in the output directory and is enough to
repeat the run.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import PRESETS, ModelConfig
from .train import PAPER_BATCH, PAPER_WARMUP, OptimConfig

_LIST_FIELDS = {f.name for f in fields(ModelConfig) if f.name not in
                ("num_stages", "ffn_expansion", "decoder_dim", "num_classes", "in_channels")}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig.desk(2000))
    manifests: list[str] = field(default_factory=list)
    mode: str = "fusion"
    out: str = "runs/default"
    seed: int = 0
    workers: int = 1
    paper_mode: bool = False
    checkpoint_every: int = 0
    biou_d: int | None = None
    averaging: str = "micro"

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["model"] = {k: ",".join(map(str, v)) if isinstance(v, list) else str(v)
                       for k, v in self.model.to_dict().items()}
        cp["optimizer"] = {k: "" if v is None else repr(v) if isinstance(v, float) else str(v)
                           for k, v in self.optim.to_dict().items()}
        cp["data"] = {"manifests": ",".join(self.manifests), "mode": self.mode}
        cp["output"] = {"root": self.out, "checkpoint_every": str(self.checkpoint_every)}
        cp["run"] = {"seed": str(self.seed), "workers": str(self.workers),
                     "paper_mode": str(self.paper_mode).lower(),
                     "biou_d": "" if self.biou_d is None else str(self.biou_d),
                     "averaging": self.averaging}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "config.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def _parse_model(section) -> ModelConfig:
    base = PRESETS[section.get("preset", "tiny")]().to_dict()
    for k, v in section.items():
        if k == "preset":
            continue
        if k not in base:
            raise ValueError(f"unknown [model] key {k!r}")
        base[k] = [int(x) for x in v.split(",")] if k in _LIST_FIELDS else int(v)
    return ModelConfig(**base)


def _parse_optim(section) -> dict:
    out = {}
    types = {f.name: f.type for f in fields(OptimConfig)}
    for k, v in section.items():
        if k not in types:
            raise ValueError(f"unknown [optimizer] key {k!r}")
        if v == "":
            out[k] = None
        elif k in ("flip", "balanced"):
            out[k] = v.lower() in ("1", "true", "yes", "on")
        elif k in ("warmup_iters", "max_iters", "batch_size", "seed"):
            out[k] = int(v)
        else:
            out[k] = float(v)
    return out


def resolve(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional INI file and flag overrides (``None`` = unset)."""
    cp = configparser.ConfigParser()
    if config_path is not None:
        if not Path(config_path).exists():
            raise FileNotFoundError(f"config file not found: {config_path}")
        cp.read(config_path)
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}

    model_sec = dict(cp["model"]) if cp.has_section("model") else {}
    if "preset" in ov:
        model_sec = {"preset": ov["preset"]}
    model = _parse_model(model_sec)

    run = cp["run"] if cp.has_section("run") else {}
    paper = bool(ov.get("paper_mode", str(run.get("paper_mode", "false")).lower() == "true"))
    seed = int(ov.get("seed", run.get("seed", 0)))

    opt = _parse_optim(cp["optimizer"]) if cp.has_section("optimizer") else {}
    for key in ("max_iters", "batch_size", "base_lr", "warmup_iters", "flip", "balanced", "grad_clip"):
        if key in ov:
            opt[key] = ov[key]
    opt["seed"] = seed
    if paper:
        if "max_iters" not in opt:
            raise ValueError("paper mode needs an explicit max_iters (config or --max-iters)")
        opt.update(base_lr=0.0006, warmup_iters=PAPER_WARMUP, batch_size=PAPER_BATCH)
        optim = OptimConfig(**opt)
    else:
        max_iters = opt.pop("max_iters", 2000)
        warmup = opt.pop("warmup_iters", None)
        optim = OptimConfig.desk(max_iters, **opt)
        if warmup is not None:
            optim = OptimConfig(**{**optim.to_dict(), "warmup_iters": warmup})

    data = cp["data"] if cp.has_section("data") else {}
    manifests = ov.get("manifests") or [m for m in data.get("manifests", "").split(",") if m]
    output = cp["output"] if cp.has_section("output") else {}
    biou_d = ov.get("biou_d", run.get("biou_d") or None)
    return RunConfig(
        model=model,
        optim=optim,
        manifests=list(manifests),
        mode=ov.get("mode", data.get("mode", "fusion")),
        out=ov.get("out", output.get("root", "runs/default")),
        seed=seed,
        workers=int(ov.get("workers", run.get("workers", 1))),
        paper_mode=paper,
        checkpoint_every=int(ov.get("checkpoint_every", output.get("checkpoint_every", 0))),
        biou_d=None if biou_d is None else int(biou_d),
        averaging=ov.get("averaging", run.get("averaging", "micro")),
    )
