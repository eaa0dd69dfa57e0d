"""Dense tensors with a reverse-mode differentiation tape.

Only the kernels the segmentation network needs are provided. Every
differentiable kernel records a closure on the active :class:`Tape`; calling
:func:`backward` replays the tape in reverse and fills ``grad`` on the leaf
tensors that require it.

Usage::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = total(mul(w, w))
    backward(loss, tape)
"""

from __future__ import annotations

import contextvars
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)

_node_ids = itertools.count(1)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward kernel produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised for invalid backward requests."""


class Tensor:
    """A shaped numeric array with an optional gradient buffer.

    ``data`` is never mutated by kernels; ``grad`` is written by
    :func:`backward`. ``node`` is a process-unique id used by the tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def astype(self, dtype) -> "Tensor":
        """Fresh leaf copy in another precision (keeps ``requires_grad``)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ShapeError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class TapeRecord:
    kind: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Activating a tape (``with Tape() as tape``) makes kernels append a
    record for every output that depends on a tensor requiring gradients.
    Tapes are bound per context, so independent tapes can run in separate
    threads.
    """

    records: list[TapeRecord] = field(default_factory=list)
    tensors: dict[int, Tensor] = field(default_factory=dict)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, fn) -> None:
        for t in inputs:
            self.tensors.setdefault(t.node, t)
        self.tensors[out.node] = out
        self.records.append(TapeRecord(kind, tuple(t.node for t in inputs), out.node, fn))

    def produced(self) -> set[int]:
        return {r.output for r in self.records}


def active_tape() -> Tape | None:
    return _active_tape.get()


def make_op(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap a forward result and register its backward rule on the active tape.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{kind}: non-finite values in forward output")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad, dtype=out_data.dtype)
    tape = _active_tape.get()
    if needs_grad and tape is not None:
        tape.record(kind, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Gradients accumulate over fan-out within one pass; each call overwrites
    the buffers of the previous pass, so repeated calls are idempotent.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node not in tape.produced():
        raise TapeError("loss tensor was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        for node, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not tape.tensors[node].requires_grad:
                continue
            if node in grads:
                grads[node] = grads[node] + gi
            else:
                grads[node] = gi
    produced = tape.produced()
    for node, g in grads.items():
        t = tape.tensors[node]
        if node not in produced and t.requires_grad:
            t.grad = np.asarray(g, dtype=t.dtype).reshape(t.shape)


# --------------------------------------------------------------------------
# elementwise and structural kernels


def _check_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_op("add_scalar", [a], a.data + a.data.dtype.type(c), lambda g: (g,))
    _check_same("add", a, b)
    return make_op("add", [a, b], a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return make_op("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_op("scale", [a], a.data * c, lambda g: (g * c,))


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Dispatch ``add`` / ``mul`` / ``scale`` by name."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = a.shape
    return make_op("sum", [a], np.asarray(a.data.sum(), dtype=a.dtype),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(total(a), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_op("reshape", [a], a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op("transpose", [a], np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (g.transpose(inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_op("concat", list(parts), data, bw)


def flip_last(a: Tensor) -> Tensor:
    return make_op("flip", [a], np.ascontiguousarray(a.data[..., ::-1]), lambda g: (g[..., ::-1],))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared across
    the batch) or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2 and a.ndim > 2

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op("matmul", [a, b], ad @ bd, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return make_op("linear", inputs, out, bw)


# --------------------------------------------------------------------------
# normalisation and nonlinearities


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-slice max subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax_rows: empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op("softmax", [x], y, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs feature dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op("layer_norm", [x, gamma, beta], xhat * gd + beta.data, bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    t = np.tanh(c * (xd + k * (xd * xd * xd)))
    half = xd.dtype.type(0.5)

    def bw(g):
        dt = (1 - t * t) * c * (1 + 3 * k * xd * xd)
        return (g * (half * (1 + t) + half * xd * dt),)

    return make_op("gelu", [x], half * xd * (1 + t), bw)


# --------------------------------------------------------------------------
# spatial kernels (channel-first maps, optional leading batch axis)


def _batched(x: Tensor) -> bool:
    if x.ndim == 4:
        return True
    if x.ndim == 3:
        return False
    raise ShapeError(f"expected C×H×W or B×C×H×W, got {x.shape}")


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: Tensor, k: int, stride: int, pad: int) -> Tensor:
    """Unfold B×C×H×W into B×(H'·W')×(C·k·k) patch rows."""
    B, C, H, W = x.shape
    Ho, Wo = conv_out_size(H, k, stride, pad), conv_out_size(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: output size {Ho}x{Wo} < 1 for input {H}x{W}, k={k}, stride={stride}, pad={pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho * Wo, C * k * k)

    def bw(g):
        g6 = g.reshape(B, Ho, Wo, C, k, k)
        gx = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return (gx[:, :, pad:pad + H, pad:pad + W],)

    return make_op("im2col", [x], cols, bw)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation via im2col followed by a matrix product."""
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    batched = _batched(x)
    xb = x if batched else reshape(x, (1,) + x.shape)
    O, C, k, k2 = kernels.shape
    if k != k2 or k < 1:
        raise ShapeError(f"conv2d: kernels must be square, got {kernels.shape}")
    if xb.shape[1] != C:
        raise ShapeError(f"conv2d: input channels {xb.shape[1]} vs kernel channels {C} ({x.shape} vs {kernels.shape})")
    B, _, H, W = xb.shape
    Ho, Wo = conv_out_size(H, k, stride, pad), conv_out_size(W, k, stride, pad)
    cols = im2col(xb, k, stride, pad)
    kmat = transpose(reshape(kernels, (O, C * k * k)), (1, 0))
    y = linear(cols, kmat, bias)  # B×(Ho·Wo)×O
    y = reshape(transpose(y, (0, 2, 1)), (B, O, Ho, Wo))
    return y if batched else reshape(y, (O, Ho, Wo))


def _interp_matrix(n_in: int, n_out: int, align_corners: bool, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        if align_corners:
            src = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        else:
            src = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """Bilinear resampling of the last two axes.

    With ``align_corners=False`` output pixel ``i`` samples source coordinate
    ``(i + 0.5) * in / out - 0.5`` clamped at zero, indices clamped at the edge.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: invalid output size {out_h}x{out_w}")
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return make_op("resize", [x], x.data.copy(), lambda g: (g,))
    ry = _interp_matrix(H, out_h, align_corners, x.dtype)
    rx = _interp_matrix(W, out_w, align_corners, x.dtype)
    out = ry @ x.data @ rx.T
    return make_op("resize", [x], out, lambda g: (ry.T @ g @ rx,))


def avg_pool(x: Tensor, r: int) -> Tensor:
    """Non-overlapping r×r mean pooling of the last two axes."""
    H, W = x.shape[-2:]
    if H % r or W % r:
        raise ShapeError(f"avg_pool: ratio {r} does not divide {H}x{W}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (H // r, r, W // r, r)).mean(axis=(-3, -1))
    inv = x.dtype.type(1.0 / (r * r))

    def bw(g):
        return (np.repeat(np.repeat(g, r, axis=-2), r, axis=-1) * inv,)

    return make_op("avg_pool", [x], out, bw)


# --------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    if h <= 0:
        raise ValueError("finite_diff_grad: step must be positive")
    base = x.data.astype(np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(Tensor(base.copy(), dtype=np.float64)).item()
        flat[i] = old - h
        fm = f(Tensor(base.copy(), dtype=np.float64)).item()
        flat[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-8) -> float:
    """Max absolute deviation scaled by the reference's largest magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = max(float(np.abs(reference).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)), floor)
    return float(np.abs(analytic - reference).max(initial=0.0)) / denom
