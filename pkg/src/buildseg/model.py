"""Hierarchical attention encoder with an all-MLP decode head.

Parameters live in a flat ordered ``dict`` of name -> :class:`Tensor`.
Features travel between stages as channel-first maps (B×C×h×w) and inside
transformer blocks as token sequences (B×(h·w)×C).

Linear weights are stored as (in, out). The query/key/value projections of
all heads are stored as one d×d matrix each; head ``i`` uses the column block
``[i·d_h, (i+1)·d_h)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

Params = dict[str, Tensor]


@dataclass
class ModelConfig:
    num_stages: int = 4
    patch_kernel: list[int] = field(default_factory=lambda: [7, 3, 3, 3])
    patch_stride: list[int] = field(default_factory=lambda: [4, 2, 2, 2])
    patch_pad: list[int] = field(default_factory=lambda: [3, 1, 1, 1])
    embed_dims: list[int] = field(default_factory=lambda: [32, 64, 160, 256])
    num_heads: list[int] = field(default_factory=lambda: [1, 2, 5, 8])
    sr_ratios: list[int] = field(default_factory=lambda: [8, 4, 2, 1])
    depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    ffn_expansion: int = 4
    decoder_dim: int = 256
    num_classes: int = 2
    in_channels: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n = self.num_stages
        for name in ("patch_kernel", "patch_stride", "patch_pad", "embed_dims", "num_heads", "sr_ratios", "depths"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have {n} entries")
        for i, (d, h) in enumerate(zip(self.embed_dims, self.num_heads)):
            if d % h:
                raise ValueError(f"stage {i}: embed dim {d} not divisible by {h} heads")
        if any(s < 2 for s in self.patch_stride[1:]):
            raise ValueError("stages after the first must downsample (stride >= 2)")
        if self.num_classes != 2:
            raise ValueError("only binary segmentation (num_classes == 2) is supported")

    @property
    def total_stride(self) -> int:
        return math.prod(self.patch_stride)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def small(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(
            num_stages=2,
            patch_kernel=[7, 3],
            patch_stride=[4, 2],
            patch_pad=[3, 1],
            embed_dims=[8, 16],
            num_heads=[1, 2],
            sr_ratios=[4, 2],
            depths=[1, 1],
            ffn_expansion=4,
            decoder_dim=32,
        )


PRESETS = {"tiny": ModelConfig.tiny, "small": ModelConfig.small}


# --------------------------------------------------------------------------
# parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every model parameter."""
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = cfg.in_channels
    for s in range(cfg.num_stages):
        d, k = cfg.embed_dims[s], cfg.patch_kernel[s]
        p = f"stage{s}"
        shapes[f"{p}.patch.weight"] = (d, in_ch, k, k)
        shapes[f"{p}.patch.bias"] = (d,)
        shapes[f"{p}.patch_norm.gamma"] = (d,)
        shapes[f"{p}.patch_norm.beta"] = (d,)
        for b in range(cfg.depths[s]):
            q = f"{p}.block{b}"
            shapes[f"{q}.norm1.gamma"] = (d,)
            shapes[f"{q}.norm1.beta"] = (d,)
            shapes[f"{q}.attn.wq"] = (d, d)
            shapes[f"{q}.attn.wk"] = (d, d)
            shapes[f"{q}.attn.wv"] = (d, d)
            if cfg.sr_ratios[s] > 1:
                shapes[f"{q}.attn.sr.weight"] = (d, d)
                shapes[f"{q}.attn.sr.bias"] = (d,)
            shapes[f"{q}.attn.wo"] = (d, d)
            shapes[f"{q}.attn.bo"] = (d,)
            shapes[f"{q}.norm2.gamma"] = (d,)
            shapes[f"{q}.norm2.beta"] = (d,)
            hidden = d * cfg.ffn_expansion
            shapes[f"{q}.ffn.fc1.weight"] = (d, hidden)
            shapes[f"{q}.ffn.fc1.bias"] = (hidden,)
            shapes[f"{q}.ffn.fc2.weight"] = (hidden, d)
            shapes[f"{q}.ffn.fc2.bias"] = (d,)
        shapes[f"{p}.norm.gamma"] = (d,)
        shapes[f"{p}.norm.beta"] = (d,)
        in_ch = d
    e = cfg.decoder_dim
    for s in range(cfg.num_stages):
        shapes[f"head.proj{s}.weight"] = (cfg.embed_dims[s], e)
        shapes[f"head.proj{s}.bias"] = (e,)
    shapes["head.fuse.weight"] = (cfg.num_stages * e, e)
    shapes["head.fuse.bias"] = (e,)
    shapes["head.cls.weight"] = (e, cfg.num_classes)
    shapes["head.cls.bias"] = (cfg.num_classes,)
    return shapes


def init_weights(cfg: ModelConfig, seed: int) -> Params:
    """Truncated-normal (std 0.02, ±2 std) weights, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape, np.float32)
        elif leaf in ("beta", "bias", "bo"):
            data = np.zeros(shape, np.float32)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def cast_params(params: Params, dtype) -> Params:
    return {k: v.astype(dtype) for k, v in params.items()}


# --------------------------------------------------------------------------
# attention


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(Q·Kᵀ/√d_k)·V over the last two axes (leading axes are batch)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: Q {q.shape} and K {k.shape} differ in key dim")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: K {k.shape} and V {v.shape} differ in length")
    logits = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = T.softmax_rows(logits)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    B, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (B, d, h, w))


def map_to_tokens(x: Tensor) -> Tensor:
    B, d, h, w = x.shape
    return T.transpose(T.reshape(x, (B, d, h * w)), (0, 2, 1))


def spatial_reduction(x: Tensor, r: int, spatial: tuple[int, int],
                      weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Shrink a B×(h·w)×d sequence by r×r mean pooling and a learned d×d mix."""
    h, w = spatial
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1] != h * w:
        raise ShapeError(f"spatial_reduction: sequence length {x.shape[1]} != {h}*{w}")
    if r == 1:
        out = x
    else:
        if h % r or w % r:
            raise ShapeError(f"spatial_reduction: ratio {r} does not divide {h}x{w}")
        pooled = T.avg_pool(tokens_to_map(x, h, w), r)
        out = map_to_tokens(pooled)
        if weight is not None:
            out = T.linear(out, weight, bias)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, d = x.shape
    return T.transpose(T.reshape(x, (B, n, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         heads: int, sr_ratio: int, spatial: tuple[int, int],
                         bo: Tensor | None = None, sr_weight: Tensor | None = None,
                         sr_bias: Tensor | None = None, return_weights: bool = False):
    """Concat(head_1..head_n)·W_O with keys/values taken from the reduced sequence."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    B, n, d = x.shape
    h, w = spatial
    if n != h * w:
        raise ShapeError(f"multi_head_attention: {n} tokens but spatial size {h}x{w}")
    if d % heads:
        raise ShapeError(f"multi_head_attention: dim {d} not divisible by {heads} heads")
    kv = spatial_reduction(x, sr_ratio, spatial, sr_weight, sr_bias)
    q = _split_heads(T.linear(x, wq), heads)
    k = _split_heads(T.linear(kv, wk), heads)
    v = _split_heads(T.linear(kv, wv), heads)
    ctx, weights = scaled_dot_attention(q, k, v, return_weights=True)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, n, d))
    out = T.linear(merged, wo, bo)
    if squeeze:
        out = T.reshape(out, (n, d))
    return (out, weights) if return_weights else out


# --------------------------------------------------------------------------
# network


def _ln(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def transformer_block(x: Tensor, params: Params, prefix: str, heads: int,
                      sr_ratio: int, spatial: tuple[int, int]) -> Tensor:
    """Pre-norm residual block: x + MHA(LN(x)), then + FFN(LN(.))."""
    a = f"{prefix}.attn"
    attn = multi_head_attention(
        _ln(x, params, f"{prefix}.norm1"),
        params[f"{a}.wq"], params[f"{a}.wk"], params[f"{a}.wv"], params[f"{a}.wo"],
        heads, sr_ratio, spatial, bo=params[f"{a}.bo"],
        sr_weight=params.get(f"{a}.sr.weight"), sr_bias=params.get(f"{a}.sr.bias"),
    )
    x = T.add(x, attn)
    f = f"{prefix}.ffn"
    y = T.linear(_ln(x, params, f"{prefix}.norm2"), params[f"{f}.fc1.weight"], params[f"{f}.fc1.bias"])
    y = T.linear(T.gelu(y), params[f"{f}.fc2.weight"], params[f"{f}.fc2.bias"])
    return T.add(x, y)


def check_input_size(cfg: ModelConfig, h: int, w: int) -> None:
    stride = cfg.total_stride
    if h % stride or w % stride:
        raise ShapeError(f"input {h}x{w} must be divisible by {stride}")
    fh, fw = h, w
    for s in range(cfg.num_stages):
        fh, fw = fh // cfg.patch_stride[s], fw // cfg.patch_stride[s]
        r = cfg.sr_ratios[s]
        if fh % r or fw % r:
            raise ShapeError(f"stage {s} feature map {fh}x{fw} not divisible by sr_ratio {r}")


def encoder_forward(img: Tensor, cfg: ModelConfig, params: Params) -> list[Tensor]:
    """Return one B×C_i×h_i×w_i feature map per stage (input B×3×H×W or 3×H×W)."""
    x = img if img.ndim == 4 else T.reshape(img, (1,) + img.shape)
    check_input_size(cfg, x.shape[2], x.shape[3])
    feats = []
    for s in range(cfg.num_stages):
        p = f"stage{s}"
        x = T.conv2d(x, params[f"{p}.patch.weight"], cfg.patch_stride[s], cfg.patch_pad[s],
                     bias=params[f"{p}.patch.bias"])
        _, _, h, w = x.shape
        tok = _ln(map_to_tokens(x), params, f"{p}.patch_norm")
        for b in range(cfg.depths[s]):
            tok = transformer_block(tok, params, f"{p}.block{b}", cfg.num_heads[s], cfg.sr_ratios[s], (h, w))
        x = tokens_to_map(_ln(tok, params, f"{p}.norm"), h, w)
        feats.append(x)
    return feats


def decode_head_forward(features: list[Tensor], cfg: ModelConfig, params: Params,
                        out_size: tuple[int, int]) -> Tensor:
    """Project, upsample to stage-1 resolution, fuse, classify, resize to ``out_size``."""
    if len(features) != cfg.num_stages:
        raise ShapeError(f"decode head expects {cfg.num_stages} feature maps, got {len(features)}")
    h0, w0 = features[0].shape[-2:]
    parts = []
    for s, f in enumerate(features):
        y = T.linear(map_to_tokens(f), params[f"head.proj{s}.weight"], params[f"head.proj{s}.bias"])
        y = tokens_to_map(y, f.shape[2], f.shape[3])
        parts.append(T.bilinear_resize(y, h0, w0, align_corners=False))
    fused = map_to_tokens(T.concat(parts, axis=1))
    fused = T.gelu(T.linear(fused, params["head.fuse.weight"], params["head.fuse.bias"]))
    logits = T.linear(fused, params["head.cls.weight"], params["head.cls.bias"])
    logits = tokens_to_map(logits, h0, w0)
    return T.bilinear_resize(logits, out_size[0], out_size[1], align_corners=False)


def model_forward(img: Tensor, cfg: ModelConfig, params: Params) -> Tensor:
    """Logits B×2×H×W (or 2×H×W for an unbatched image); channel 1 is building."""
    batched = img.ndim == 4
    feats = encoder_forward(img, cfg, params)
    logits = decode_head_forward(feats, cfg, params, img.shape[-2:])
    return logits if batched else T.reshape(logits, logits.shape[1:])


def predict_mask(img: Tensor, cfg: ModelConfig, params: Params) -> np.ndarray:
    """Argmax decision, ties go to background. Returns uint8 masks."""
    logits = model_forward(img, cfg, params).data
    return (logits[..., 1, :, :] > logits[..., 0, :, :]).astype(np.uint8)


@dataclass
class SegModel:
    """A config together with its parameters."""

    config: ModelConfig
    params: Params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "SegModel":
        return cls(config, init_weights(config, seed))

    def forward(self, img: Tensor) -> Tensor:
        return model_forward(img, self.config, self.params)

    def predict(self, img: Tensor) -> np.ndarray:
        return predict_mask(img, self.config, self.params)


def normalize_images(images: np.ndarray, dtype=np.float32) -> Tensor:
    """uint8 B×H×W×3 (or H×W×3) -> channel-first tensor scaled to roughly [-2, 2]."""
    x = np.asarray(images, dtype=dtype) / dtype(255.0)
    x = (x - dtype(0.5)) / dtype(0.25)
    axes = (0, 3, 1, 2) if x.ndim == 4 else (2, 0, 1)
    return Tensor(np.ascontiguousarray(x.transpose(axes)), dtype=dtype)
