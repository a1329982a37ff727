"""Dense-tensor algebra with reverse-mode differentiation.

Exactly the primitive set the denoiser and its losses need: matmul, add/sub,
mul, scale, concat/split, reshape/transpose, masked softmax, layernorm, gelu,
silu, embedding lookup, mean, mse, rotary pair rotation, and fused
modulate/gated-add for timestep conditioning. Tensors are immutable after
construction; a Tape records executed primitives in order and replays them
backwards exactly once each.

Compute precision is whatever dtype the inputs carry (float32 for training,
float64 for verification); gradient checks require float64.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operands with incompatible shapes, naming the op and the shapes."""


class MaskError(ValueError):
    """Malformed attention mask (e.g. a fully-masked row)."""


class NumericsError(ArithmeticError):
    """Non-finite value detected while the numeric guard is enabled."""


_NAN_GUARD = False


def set_nan_guard(enabled: bool) -> None:
    """Toggle non-finite output detection on every primitive (verification mode)."""
    global _NAN_GUARD
    _NAN_GUARD = bool(enabled)


def _guard(op: str, *arrays: np.ndarray) -> None:
    if _NAN_GUARD:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NumericsError(f"{op}: non-finite value in output")


class Tensor:
    """A numpy array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tracked = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class _Node:
    __slots__ = ("name", "outs", "bwd")

    def __init__(self, name: str, outs: tuple, bwd: Callable):
        self.name = name
        self.outs = outs
        self.bwd = bwd


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed primitives; enter to record, then backward()."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into .grad of every tracked tensor."""
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if any(o.grad is not None for o in node.outs):
                node.bwd()


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad or t._tracked:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape` by summing expanded axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _emit(name: str, outs: tuple[Tensor, ...], inputs: Sequence[Tensor], bwd: Callable) -> None:
    if not _TAPES:
        return
    if not any(t.requires_grad or t._tracked for t in inputs):
        return
    for o in outs:
        o._tracked = True
    _TAPES[-1].nodes.append(_Node(name, outs, bwd))


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}: {exc}") from None
    _guard("matmul", data)
    out = Tensor(data)

    def bwd():
        g = out.grad
        _acc(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape))
        _acc(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape))

    _emit("matmul", (out,), (a, b), bwd)
    return out


def _binary_shapes_ok(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a.data, b.data, "add")
    out = Tensor(a.data + b.data)
    _guard("add", out.data)

    def bwd():
        g = out.grad
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    _emit("add", (out,), (a, b), bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)
    _guard("sub", out.data)

    def bwd():
        g = out.grad
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    _emit("sub", (out,), (a, b), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a.data, b.data, "mul")
    out = Tensor(a.data * b.data)
    _guard("mul", out.data)

    def bwd():
        g = out.grad
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    _emit("mul", (out,), (a, b), bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)

    def bwd():
        _acc(a, out.grad * s)

    _emit("scale", (out,), (a,), bwd)
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat axis={axis}: {[p.data.shape for p in parts]}: {exc}") from None
    out = Tensor(data)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd():
        g = out.grad
        offs = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(p, g[tuple(idx)])

    _emit("concat", (out,), tuple(parts), bwd)
    return out


def split(t: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if sum(sizes) != t.data.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} != axis extent {t.data.shape[axis]}")
    offs = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offs[:-1], offs[1:]):
        idx = [slice(None)] * t.data.ndim
        idx[axis] = slice(lo, hi)
        outs.append(Tensor(t.data[tuple(idx)]))
    outs_t = tuple(outs)

    def bwd():
        g = np.zeros_like(t.data)
        for o, lo, hi in zip(outs_t, offs[:-1], offs[1:]):
            if o.grad is not None:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                g[tuple(idx)] = o.grad
        _acc(t, g)

    _emit("split", outs_t, (t,), bwd)
    return outs


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = t.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {t.data.shape} -> {tuple(shape)}: {exc}") from None
    out = Tensor(data)

    def bwd():
        _acc(t, out.grad.reshape(t.data.shape))

    _emit("reshape", (out,), (t,), bwd)
    return out


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    data = np.transpose(t.data, axes)
    out = Tensor(data)
    inv = np.argsort(axes)

    def bwd():
        _acc(t, np.transpose(out.grad, inv))

    _emit("transpose", (out,), (t,), bwd)
    return out


def tile_leading(t: Tensor, reps: int) -> Tensor:
    """Repeat a tensor along a new leading axis; gradients sum over copies."""
    out = Tensor(np.broadcast_to(t.data, (reps,) + t.data.shape).copy())

    def bwd():
        _acc(t, out.grad.sum(axis=0))

    _emit("tile_leading", (out,), (t,), bwd)
    return out


def softmax_masked(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    The mask holds 0 for allowed entries and -inf for disallowed ones, shaped
    either like x or like x's trailing two axes. Disallowed positions get
    weight exactly 0; a fully-masked row raises MaskError.
    """
    cols = x.data.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, cols))
    if mask is None:
        y2 = np.empty_like(x2)
        m = x2.max(axis=1, keepdims=True)
        np.subtract(x2, m, out=y2)
    else:
        m = np.asarray(mask, dtype=x.data.dtype)
        if m.shape != x.data.shape and m.shape != x.data.shape[-2:]:
            raise ShapeError(f"softmax mask shape {m.shape} does not match input {x.data.shape}")
        m2 = m.reshape(-1, cols)
        if x2.shape[0] % m2.shape[0] != 0:
            raise ShapeError(f"softmax mask rows {m2.shape[0]} do not tile input rows {x2.shape[0]}")
        if not (m2 > -np.inf).any(axis=1).all():
            raise MaskError("softmax_masked: fully-masked row")
        reps = x2.shape[0] // m2.shape[0]
        y2 = (x2.reshape(reps, m2.shape[0], cols) + m2[None]).reshape(x2.shape)
        rowmax = np.max(y2, axis=1, keepdims=True)
        np.subtract(y2, rowmax, out=y2)
    np.exp(y2, out=y2)  # exp(-inf) is exactly 0: masked weights vanish
    denom = y2.sum(axis=1, keepdims=True)
    y2 /= denom
    _guard("softmax_masked", y2)
    out = Tensor(y2.reshape(x.data.shape))

    def bwd():
        g2 = np.ascontiguousarray(out.grad.reshape(-1, cols))
        _acc(x, kernels.softmax_bwd(y2, g2).reshape(x.data.shape))

    _emit("softmax_masked", (out,), (x,), bwd)
    return out


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean/unit-variance normalization over the last axis, no affine."""
    cols = x.data.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, cols))
    y2, inv_std = kernels.layernorm_fwd(x2, eps)
    _guard("layernorm", y2)
    out = Tensor(y2.reshape(x.data.shape))

    def bwd():
        g2 = np.ascontiguousarray(out.grad.reshape(-1, cols))
        _acc(x, kernels.layernorm_bwd(y2, inv_std, g2).reshape(x.data.shape))

    _emit("layernorm", (out,), (x,), bwd)
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    v = x.data
    inner = _GELU_C * (v + _GELU_A * v * v * v)
    t = np.tanh(inner)
    out = Tensor(0.5 * v * (1.0 + t))
    _guard("gelu", out.data)

    def bwd():
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
        _acc(x, out.grad * local)

    _emit("gelu", (out,), (x,), bwd)
    return out


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)
    _guard("silu", out.data)

    def bwd():
        _acc(x, out.grad * sig * (1.0 + x.data * (1.0 - sig)))

    _emit("silu", (out,), (x,), bwd)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise ShapeError(
            f"embedding: id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = Tensor(table.data[ids])

    def bwd():
        g = out.grad
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _acc(table, dt)

    _emit("embedding", (out,), (table,), bwd)
    return out


def mean(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))

    def bwd():
        _acc(x, np.full_like(x.data, out.grad / x.data.size))

    _emit("mean", (out,), (x,), bwd)
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes differ {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    out = Tensor(np.asarray((diff * diff).mean(), dtype=a.data.dtype))

    def bwd():
        g = out.grad * 2.0 / diff.size
        _acc(a, g * diff)
        _acc(b, -g * diff)

    _emit("mse", (out,), (a, b), bwd)
    return out


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary rotation: pair (x[..., i], x[..., h+i]) rotated by the angle behind (cos, sin)[..., i]."""
    d = x.data.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rotate_pairs: last dim must be even, got {d}")
    h = d // 2
    u = x.data[..., :h]
    v = x.data[..., h:]
    y = np.concatenate([u * cos - v * sin, u * sin + v * cos], axis=-1)
    _guard("rotate_pairs", y)
    out = Tensor(y)

    def bwd():
        g1 = out.grad[..., :h]
        g2 = out.grad[..., h:]
        du = g1 * cos + g2 * sin
        dv = -g1 * sin + g2 * cos
        _acc(x, np.concatenate([du, dv], axis=-1))

    _emit("rotate_pairs", (out,), (x,), bwd)
    return out


def modulate(x: Tensor, scale_vec: Tensor, shift_vec: Tensor) -> Tensor:
    """x * (1 + scale) + shift with per-batch modulation vectors (B, C) on (B, N, C)."""
    if x.data.ndim != 3 or scale_vec.data.shape != (x.data.shape[0], x.data.shape[2]):
        raise ShapeError(
            f"modulate: x {x.data.shape} with scale {scale_vec.data.shape}, shift {shift_vec.data.shape}"
        )
    y = kernels.modulate_fwd(x.data, scale_vec.data, shift_vec.data)
    _guard("modulate", y)
    out = Tensor(y)

    def bwd():
        dx, dscale, dshift = kernels.modulate_bwd(x.data, scale_vec.data, out.grad)
        _acc(x, dx)
        _acc(scale_vec, dscale)
        _acc(shift_vec, dshift)

    _emit("modulate", (out,), (x, scale_vec, shift_vec), bwd)
    return out


def gated_add(x: Tensor, u: Tensor, gate_vec: Tensor) -> Tensor:
    """Residual add x + u * (1 + gate) with per-batch gate vectors (B, C)."""
    if x.data.shape != u.data.shape or gate_vec.data.shape != (x.data.shape[0], x.data.shape[2]):
        raise ShapeError(
            f"gated_add: x {x.data.shape}, u {u.data.shape}, gate {gate_vec.data.shape}"
        )
    y = kernels.gated_add_fwd(x.data, u.data, gate_vec.data)
    _guard("gated_add", y)
    out = Tensor(y)

    def bwd():
        g = out.grad
        du, dgate = kernels.gated_add_bwd(u.data, gate_vec.data, g)
        _acc(x, g)
        _acc(u, du)
        _acc(gate_vec, dgate)

    _emit("gated_add", (out,), (x, u, gate_vec), bwd)
    return out


# ---------------------------------------------------------------------------
# verification and optimization


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    Requires float64 data; f must be scalar-valued and a pure function of x.
    """
    if x.data.dtype != np.float64:
        raise NumericsError("grad_check requires float64 input")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
        if y.data.size != 1:
            raise ShapeError("grad_check: f must be scalar-valued")
        tape.backward(y)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(base)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(base)).data)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * eps)
    if not np.all(np.isfinite(numeric)):
        raise NumericsError("grad_check: non-finite central difference")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


class Adam:
    """Plain Adam over a name->Tensor parameter dict (only requires_grad entries)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[k]
            v = self._v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data = p.data - self.lr * update
