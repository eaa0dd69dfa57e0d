"""Finite-difference verification of every differentiable kernel and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .metrics import cross_entropy
from .model import ModelConfig, cast_params, init_weights, model_forward

F64_TOL = 1e-6
F32_TOL = 1e-3
MODEL_TOL = 1e-4


@dataclass
class OpCase:
    """Inputs for one kernel plus the kernel closed over its fixed arguments."""

    fn: Callable[..., T.Tensor]
    inputs: list[np.ndarray]


def _dims(rng, lo=1, hi=8, n=2):
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


def _case_add(rng):
    s = _dims(rng)
    return OpCase(T.add, [rng.standard_normal(s), rng.standard_normal(s)])


def _case_mul(rng):
    s = _dims(rng)
    return OpCase(T.mul, [rng.standard_normal(s), rng.standard_normal(s)])


def _case_scale(rng):
    c = float(rng.uniform(-3, 3))
    return OpCase(lambda x: T.scale(x, c), [rng.standard_normal(_dims(rng))])


def _case_matmul(rng):
    m, k, n = _dims(rng, n=3)
    if rng.random() < 0.5:
        return OpCase(T.matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, n))])
    b = int(rng.integers(1, 4))
    return OpCase(T.matmul, [rng.standard_normal((b, m, k)), rng.standard_normal((b, k, n))])


def _case_linear(rng):
    b, n, i, o = _dims(rng, n=4)
    return OpCase(T.linear, [rng.standard_normal((b, n, i)), rng.standard_normal((i, o)), rng.standard_normal(o)])


def _case_softmax(rng):
    return OpCase(T.softmax_rows, [rng.standard_normal(_dims(rng, n=int(rng.integers(1, 4)))) * 2])


def _case_layer_norm(rng):
    s = _dims(rng, lo=2)
    d = s[-1]
    return OpCase(T.layer_norm, [rng.standard_normal(s), rng.standard_normal(d), rng.standard_normal(d)])


def _case_gelu(rng):
    return OpCase(T.gelu, [rng.standard_normal(_dims(rng)) * 2])


def _case_conv2d(rng):
    c_in, c_out = _dims(rng, hi=3)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = (int(v) for v in rng.integers(k, 9, size=2))
    x = rng.standard_normal((c_in, h, w))
    if rng.random() < 0.5:
        x = x[None]
    return OpCase(lambda a, kk, b: T.conv2d(a, kk, stride, pad, bias=b),
                  [x, rng.standard_normal((c_out, c_in, k, k)), rng.standard_normal(c_out)])


def _case_resize(rng):
    c, h, w = _dims(rng, n=3)
    oh, ow = _dims(rng)
    align = bool(rng.random() < 0.3)
    return OpCase(lambda x: T.bilinear_resize(x, oh, ow, align), [rng.standard_normal((c, h, w))])


def _case_avg_pool(rng):
    r = int(rng.integers(1, 4))
    c, h, w = int(rng.integers(1, 4)), r * int(rng.integers(1, 3)), r * int(rng.integers(1, 3))
    return OpCase(lambda x: T.avg_pool(x, r), [rng.standard_normal((c, h, w))])


def _case_transpose(rng):
    s = _dims(rng, n=3)
    axes = [int(a) for a in rng.permutation(3)]
    return OpCase(lambda x: T.transpose(x, axes), [rng.standard_normal(s)])


def _case_reshape(rng):
    a, b = _dims(rng)
    return OpCase(lambda x: T.reshape(x, (b, a)), [rng.standard_normal((a, b))])


def _case_concat(rng):
    a, b, c = _dims(rng, n=3)
    return OpCase(lambda x, y: T.concat([x, y], axis=1), [rng.standard_normal((a, b)), rng.standard_normal((a, c))])


def _case_cross_entropy(rng):
    h, w = _dims(rng)
    target = (rng.random((h, w)) < 0.5).astype(np.uint8)
    valid = (rng.random((h, w)) < 0.8).astype(np.uint8)
    valid[0, 0] = 1
    return OpCase(lambda z: cross_entropy(z, target, valid), [rng.standard_normal((2, h, w)) * 2])


OP_CASES: dict[str, Callable[[np.random.Generator], OpCase]] = {
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "softmax_rows": _case_softmax,
    "layer_norm": _case_layer_norm,
    "gelu": _case_gelu,
    "conv2d": _case_conv2d,
    "bilinear_resize": _case_resize,
    "avg_pool": _case_avg_pool,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "concat": _case_concat,
    "cross_entropy": _case_cross_entropy,
}


def check_case(case: OpCase, dtype, rng: np.random.Generator, h: float = 1e-6) -> float:
    """Max relative error over all inputs of one case.

    The kernel output is contracted with a fixed random tensor so every
    output element carries a distinct weight. Errors are scaled by the
    largest reference gradient of the case, so an input whose true gradient
    is ~0 (layer norm over two features) is judged on the case's scale.
    """
    probe_shape = case.fn(*[T.Tensor(a, dtype=np.float64) for a in case.inputs]).shape
    probe = rng.standard_normal(probe_shape)

    def scalar(*tensors):
        out = case.fn(*tensors)
        return T.total(T.mul(out, T.Tensor(probe, dtype=out.dtype)))

    leaves = [T.Tensor(a, requires_grad=True, dtype=dtype) for a in case.inputs]
    with T.Tape() as tape:
        loss = scalar(*leaves)
    T.backward(loss, tape)
    diffs, scale = [], 1e-8
    for i, a in enumerate(case.inputs):
        def f(x, i=i):
            args = [T.Tensor(b, dtype=np.float64) for b in case.inputs]
            args[i] = x
            return scalar(*args)

        ref = T.finite_diff_grad(f, T.Tensor(a, dtype=np.float64), h)
        got = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(ref)
        diffs.append(float(np.abs(got.astype(np.float64) - ref).max(initial=0.0)))
        scale = max(scale, float(np.abs(ref).max(initial=0.0)))
    return max(diffs) / scale


def op_suite(cases: int = 100, dtype=np.float64, seed: int = 0,
             ops: list[str] | None = None) -> dict[str, float]:
    """Worst relative error per kernel over ``cases`` seeded random cases."""
    results = {}
    for k, name in enumerate(ops or OP_CASES):
        worst = 0.0
        for c in range(cases):
            rng = np.random.default_rng([seed, k, c])
            worst = max(worst, check_case(OP_CASES[name](rng), dtype, rng))
        results[name] = worst
    return results


def tiny_gradcheck_config() -> ModelConfig:
    return ModelConfig.tiny()


def model_gradcheck(cfg: ModelConfig | None = None, size: int = 32, seed: int = 0,
                    h: float = 1e-6, names: list[str] | None = None,
                    dtype=np.float64) -> dict[str, float]:
    """Relative error of backward() vs 64-bit central differences for each parameter."""
    return model_gradcheck_multi(cfg, size, seed, h, names, (dtype,))[np.dtype(dtype).name]


def model_gradcheck_multi(cfg: ModelConfig | None = None, size: int = 32, seed: int = 0,
                          h: float = 1e-6, names: list[str] | None = None,
                          dtypes=(np.float64, np.float32)) -> dict[str, dict[str, float]]:
    """Per-precision, per-parameter relative errors sharing one finite-difference pass.

    Weights use a wider init than the training default so no gradient is
    vanishingly small relative to round-off.
    """
    cfg = cfg or tiny_gradcheck_config()
    rng = np.random.default_rng(seed)
    params = cast_params(init_weights(cfg, seed), np.float64)
    for name, p in params.items():
        p.data = p.data + rng.standard_normal(p.shape) * 0.3
    img = rng.standard_normal((3, size, size))
    target = (rng.random((size, size)) < 0.5).astype(np.uint8)

    def loss_of(ps, x):
        return cross_entropy(model_forward(x, cfg, ps), target)

    analytic = {}
    for dtype in dtypes:
        work = cast_params(params, dtype)
        with T.Tape() as tape:
            loss = loss_of(work, T.Tensor(img, dtype=dtype))
        T.backward(loss, tape)
        analytic[np.dtype(dtype).name] = {k: p.grad for k, p in work.items()}
    results: dict[str, dict[str, float]] = {k: {} for k in analytic}
    x64 = T.Tensor(img, dtype=np.float64)
    for name in names or list(params):
        def f(t, name=name):
            ps = dict(params)
            ps[name] = t
            return loss_of(ps, x64)

        ref = T.finite_diff_grad(f, params[name], h)
        for key, grads in analytic.items():
            results[key][name] = T.relative_error(grads[name], ref)
    return results
