"""Reverse-mode automatic differentiation on dense float64 arrays.

A `Tape` records every differentiable operation whose inputs require
gradients; `backward` replays the records in exact reverse order and
accumulates gradients on the participating tensors. One tape and the tensors
recorded on it form a single-threaded unit; parallelism belongs at the level
of independent samples, each with its own tape.

Numerics contract: everything is float64, every operation checks its output
for NaN/Inf, and binary elementwise operations demand equal shapes (the only
sanctioned broadcast is scalar-with-tensor).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DomainError, NumericError, ShapeError

_DIV_FLOOR = 1e-300
_LOG10 = np.log(10.0)


class Tape:
    """Ordered record of operations; backward walks it in reverse."""

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], object]] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        Tape._active.pop()
        return False

    @staticmethod
    def current() -> "Tape | None":
        return Tape._active[-1] if Tape._active else None


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor '{name or '<unnamed>'}' contains non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, cut off from the tape (no gradient flows through)."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _out(data, inputs, backfn, name=None) -> Tensor:
    """Wrap an op result; record it when a tape is active and grads are needed."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"operation '{name or backfn.__name__}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = name
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, tuple(inputs), backfn))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate .grad of every leaf `loss` depends on.

    Intermediate flows live only for the duration of the call; leaf gradients
    accumulate across calls until explicitly zeroed (the training harness
    resets them after each optimizer step).
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or Tape.current()
    if tape is None:
        raise ShapeError("backward called with no active tape")
    produced = {id(out) for out, _, _ in tape.nodes}
    flows: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for out, inputs, backfn in reversed(tape.nodes):
        g = flows.pop(id(out), None)
        if g is None:
            continue
        grads = backfn(g)
        for inp, gi in zip(inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                cur = flows.get(id(inp))
                flows[id(inp)] = gi if cur is None else cur + gi
            elif inp.grad is None:
                inp.grad = np.array(gi)
            else:
                inp.grad += gi


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar-tensor mixing is allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if shape == () and g.shape != ():
        return np.sum(g)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _out(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _out(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _out(ad * bd, (a, b), back, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "div")
    if np.min(np.abs(b.data)) < _DIV_FLOOR:
        raise NumericError(f"div: denominator magnitude below {_DIV_FLOOR}")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _out(ad / bd, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    def back(g):
        return (-g,)

    return _out(-a.data, (a,), back, "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a compile-time scalar constant."""
    c = float(c)

    def back(g):
        return (g * c,)

    return _out(a.data * c, (a,), back, "scale")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        return (g * s * (1.0 - s),)

    return _out(s, (a,), back, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - t * t),)

    return _out(t, (a,), back, "tanh")


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    x = a.data
    pos = x > 0

    def back(g):
        return (g * np.where(pos, 1.0, alpha),)

    return _out(np.where(pos, x, alpha * x), (a,), back, "leaky_relu")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape

    def back(g):
        return (g.reshape(src),)

    return _out(a.data.reshape(shape), (a,), back, "reshape")


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d needs a matrix, got shape {a.shape}")

    def back(g):
        return (g.T,)

    return _out(np.ascontiguousarray(a.data.T), (a,), back, "transpose2d")


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts)))

    return _out(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis {axis} of shape {a.shape}")
    idx = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(a.ndim))

    def back(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _out(np.ascontiguousarray(a.data[idx]), (a,), back, "narrow")


def take_row(table: Tensor, idx: int) -> Tensor:
    """Pick one row of a 2-D table (embedding lookup)."""
    if table.ndim != 2:
        raise ShapeError(f"take_row needs a matrix, got {table.shape}")
    if not (0 <= idx < table.shape[0]):
        raise DomainError(f"take_row: row {idx} outside table with {table.shape[0]} rows")

    def back(g):
        full = np.zeros(table.shape)
        full[idx] = g
        return (full,)

    return _out(table.data[idx].copy(), (table,), back, "take_row")


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _out(np.sum(a.data), (a,), back, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size

    def back(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _out(np.mean(a.data), (a,), back, "mean_all")


def spatial_mean(a: Tensor) -> Tensor:
    """(C, H, W) -> (C,) global average pool."""
    if a.ndim != 3:
        raise ShapeError(f"spatial_mean needs (C, H, W), got {a.shape}")
    _, h, w = a.shape
    n = h * w

    def back(g):
        return (np.repeat(g[:, None], n, axis=1).reshape(a.shape) / n,)

    return _out(a.data.mean(axis=(1, 2)), (a,), back, "spatial_mean")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equal-shape tensors."""
    return sum_all(mul(a, b))


# ---------------------------------------------------------------------------
# sequence ops


def _check_vector(a: Tensor, op: str) -> None:
    if a.ndim != 1 or a.size == 0:
        raise ShapeError(f"{op} needs a nonempty 1-D vector, got shape {a.shape}")


def cumsum(a: Tensor) -> Tensor:
    _check_vector(a, "cumsum")

    def back(g):
        return (np.cumsum(g[::-1])[::-1].copy(),)

    return _out(np.cumsum(a.data), (a,), back, "cumsum")


def reverse(a: Tensor) -> Tensor:
    _check_vector(a, "reverse")

    def back(g):
        return (g[::-1].copy(),)

    return _out(a.data[::-1].copy(), (a,), back, "reverse")


def softmax(a: Tensor) -> Tensor:
    _check_vector(a, "softmax")
    shifted = a.data - np.max(a.data)
    e = np.exp(shifted)
    s = e / np.sum(e)

    def back(g):
        return (s * (g - np.dot(g, s)),)

    return _out(s, (a,), back, "softmax")


# ---------------------------------------------------------------------------
# dense / convolutional


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _out(ad @ bd, (a, b), back, "matmul")


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * p, w + 2 * p))
    out[:, p:p + h, p:p + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = as_strided(xp, shape=(c, kh, kw, ho, wo), strides=(s0, s1, s2, s1 * stride, s2 * stride))
    return np.ascontiguousarray(view).reshape(c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, c: int, hp: int, wp: int, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    out = np.zeros((c, hp, wp))
    cols = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return out


def _conv_geometry(x_shape, w_shape, stride, padding, op):
    ci, h, w = x_shape
    co, wci, kh, kw = w_shape
    if wci != ci:
        raise ShapeError(f"{op}: kernel expects {wci} input channels, tensor has {ci}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"{op}: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"{op}: non-positive output extent {ho}x{wo}")
    return co, ho, wo


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of (C_in, H, W) with (C_out, C_in, kH, kW).

    An optional per-output-channel bias is fused into the same tape node.
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: need (C,H,W) input and (Co,Ci,kh,kw) kernels, got {x.shape}, {kernels.shape}")
    co, ho, wo = _conv_geometry(x.shape, kernels.shape, stride, padding, "conv2d")
    ci, h, w = x.shape
    _, _, kh, kw = kernels.shape
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {co} output channels")
    cols = _im2col(_pad2d(x.data, padding), kh, kw, stride, ho, wo)
    wflat = kernels.data.reshape(co, -1)
    out = wflat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(co, ho, wo)

    def back(g):
        gflat = g.reshape(co, -1)
        dw = (gflat @ cols.T).reshape(kernels.shape)
        dcols = wflat.T @ gflat
        dxp = _col2im(dcols, ci, h + 2 * padding, w + 2 * padding, kh, kw, stride, ho, wo)
        dx = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
        if bias is None:
            return dx, dw
        return dx, dw, gflat.sum(axis=1)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _out(out, inputs, back, "conv2d")


def conv_transpose2d(y: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
                     output_hw: tuple[int, int] | None = None,
                     bias: Tensor | None = None) -> Tensor:
    """Exact adjoint of conv2d with the same kernels.

    Maps (C_out, H', W') back to (C_in, H, W). When stride > 1 several input
    heights map to the same output height, so `output_hw` pins the intended
    one; the default is the minimal consistent size. An optional bias over
    the C_in outputs is fused into the node.
    """
    if y.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv_transpose2d: need (C,H,W) input and (Co,Ci,kh,kw) kernels, got {y.shape}, {kernels.shape}")
    co, ci, kh, kw = kernels.shape
    if y.shape[0] != co:
        raise ShapeError(f"conv_transpose2d: tensor has {y.shape[0]} channels, kernel expects {co}")
    if bias is not None and bias.shape != (ci,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match {ci} output channels")
    ho, wo = y.shape[1], y.shape[2]
    if output_hw is None:
        h = stride * (ho - 1) + kh - 2 * padding
        w = stride * (wo - 1) + kw - 2 * padding
    else:
        h, w = output_hw
    if h <= 0 or w <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output extent {h}x{w}")
    if (h + 2 * padding - kh) // stride + 1 != ho or (w + 2 * padding - kw) // stride + 1 != wo:
        raise ShapeError(f"conv_transpose2d: output {h}x{w} inconsistent with input {ho}x{wo} at stride {stride}")
    yflat = y.data.reshape(co, -1)
    wflat = kernels.data.reshape(co, -1)
    cols = wflat.T @ yflat
    xp = _col2im(cols, ci, h + 2 * padding, w + 2 * padding, kh, kw, stride, ho, wo)
    out = xp[:, padding:padding + h, padding:padding + w] if padding else xp
    if bias is not None:
        out += bias.data[:, None, None]

    def back(g):
        gcols = _im2col(_pad2d(g, padding), kh, kw, stride, ho, wo)
        dy = (wflat @ gcols).reshape(y.shape)
        dw = (yflat @ gcols.T).reshape(kernels.shape)
        if bias is None:
            return dy, dw
        return dy, dw, g.sum(axis=(1, 2))

    inputs = (y, kernels) if bias is None else (y, kernels, bias)
    return _out(out, inputs, back, "conv_transpose2d")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (C,) across the spatial extent of (C, H, W)."""
    if x.ndim != 3 or b.ndim != 1 or b.shape[0] != x.shape[0]:
        raise ShapeError(f"add_bias: got {x.shape} and {b.shape}")

    def back(g):
        return g, g.sum(axis=(1, 2))

    return _out(x.data + b.data[:, None, None], (x, b), back, "add_bias")


# ---------------------------------------------------------------------------
# losses and divergences


def bce_loss(p: Tensor, y) -> Tensor:
    """Binary cross-entropy of a scalar probability against a {0,1} label."""
    if p.shape != ():
        raise ShapeError(f"bce_loss needs a scalar probability, got shape {p.shape}")
    yv = float(y)
    if yv not in (0.0, 1.0):
        raise DomainError(f"bce_loss: label must be 0 or 1, got {y!r}")
    pc = min(max(p.item(), 1e-7), 1.0 - 1e-7)
    val = -(yv * np.log(pc) + (1.0 - yv) * np.log(1.0 - pc))

    def back(g):
        return (g * (pc - yv) / (pc * (1.0 - pc)), None)

    return _out(np.asarray(val), (p, _lift(yv)), back, "bce_loss")


def psnr(a: Tensor, b: Tensor, max_val: float = 1.0) -> Tensor:
    """Peak signal-to-noise ratio in dB, capped at 100 when MSE < 1e-10.

    The cap is a plateau: gradient is zero there (non-differentiable point).
    """
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    lo = min(a.data.min(), b.data.min())
    hi = max(a.data.max(), b.data.max())
    if lo < -1e-9 or hi > max_val + 1e-9:
        raise DomainError(f"psnr: pixel values [{lo:.3g}, {hi:.3g}] outside [0, {max_val}]")
    diff = a.data - b.data
    n = diff.size
    mse = float(np.mean(diff * diff))
    if mse < 1e-10:
        def back_cap(g):
            return np.zeros(a.shape), np.zeros(b.shape)

        return _out(np.asarray(100.0), (a, b), back_cap, "psnr")
    val = 10.0 * np.log10(max_val * max_val / mse)
    coeff = -10.0 / (_LOG10 * mse) * (2.0 / n)

    def back(g):
        da = g * coeff * diff
        return da, -da

    return _out(np.asarray(val), (a, b), back, "psnr")


def psnr_loss(a: Tensor, b: Tensor, max_val: float = 1.0) -> Tensor:
    """Negated PSNR; minimizing it maximizes reconstruction quality."""
    return neg(psnr(a, b, max_val))


def generalized_jsd(dists: list[Tensor]) -> Tensor:
    """Generalized Jensen-Shannon divergence (nats) with uniform mixture weights.

    H(mean of inputs) minus mean of input entropies, with 0*ln(0) taken as 0.
    Lies in [0, ln(S)] and is 0 iff all inputs coincide.
    """
    s = len(dists)
    if s < 2:
        raise DomainError(f"generalized_jsd needs at least 2 distributions, got {s}")
    length = dists[0].shape
    for d in dists:
        if d.ndim != 1:
            raise ShapeError(f"generalized_jsd: need 1-D vectors, got shape {d.shape}")
        if d.shape != length:
            raise ShapeError(f"generalized_jsd: length mismatch {d.shape} vs {length}")
        if np.min(d.data) < -1e-12:
            raise DomainError("generalized_jsd: negative probability mass")
        if abs(float(np.sum(d.data)) - 1.0) > 1e-6:
            raise DomainError(f"generalized_jsd: distribution sums to {float(np.sum(d.data)):.9f}, not 1")

    stack = np.stack([d.data for d in dists])
    m = stack.mean(axis=0)

    def entropy(p):
        return -float(np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)))

    val = max(entropy(m) - sum(entropy(p) for p in stack) / s, 0.0)
    safe_log = lambda p: np.log(np.maximum(p, 1e-300))
    log_m = safe_log(m)

    def back(g):
        return tuple(g * (safe_log(stack[i]) - log_m) / s for i in range(s))

    return _out(np.asarray(val), tuple(dists), back, "generalized_jsd")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moment buffers and step counter for a named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One Adam update with bias correction; mutates params and state in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter '{name}'")
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
