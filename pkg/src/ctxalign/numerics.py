"""Dense float64 tensor engine with reverse-mode autodiff.

Deliberately small: 0-d/1-d/2-d arrays, a thread-local tape, and only the
operations the rest of the package needs.  Every op validates shapes, checks
its output for NaN/Inf, and registers a backward closure on the active tape
when gradients are required.  Gradients accumulate with ``+=`` so tensors
used several times in one forward pass (shared weights, repeated prompt
embeddings) collect contributions from every use.

Thread model: one tape per thread.  Forward/backward for a given model is
single-threaded; independent models on separate threads never share state.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

GELU_CUBIC_COEFF = 0.044715  # cubic term of the tanh-form gelu approximation
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf (treated as an error state)."""


class TapeError(RuntimeError):
    """backward() called without a fresh recorded forward pass."""


def _ensure_finite(arr: np.ndarray, where: str) -> None:
    # min/max reductions instead of isfinite(): NaN poisons min, +/-inf show
    # up as the extremes, and no temporary bool array is allocated
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """A float64 array plus gradient bookkeeping.

    ``data`` is always owned (construction copies); ``grad`` is allocated
    lazily on first accumulation and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-d, got shape {arr.shape}")
        _ensure_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy_(self, other: "Tensor") -> None:
        if self.shape != other.shape:
            raise ShapeError(f"copy_ shape mismatch {self.shape} vs {other.shape}")
        self.data[...] = other.data

    # Operator sugar used throughout the model code.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of executed ops.

    backward() walks the records once, in reverse execution order, then marks
    the tape consumed; the next recorded op starts a fresh tape.
    """

    __slots__ = ("records", "consumed")

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False


_tls = threading.local()


def _active_tape() -> Tape:
    t = getattr(_tls, "tape", None)
    if t is None or t.consumed:
        t = Tape()
        _tls.tape = t
    return t


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Disable recording (and requires_grad propagation) inside the block."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


def _wrap(arr: np.ndarray, track: bool, where: str) -> Tensor:
    _ensure_finite(arr, where)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = track
    out.grad = None
    return out


def _track(*tensors: Tensor) -> bool:
    return _grad_enabled() and any(t.requires_grad for t in tensors)


def _record(out: Tensor, back: Callable[[np.ndarray], None]) -> None:
    if out.requires_grad:
        _active_tape().records.append((out, back))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _accum_owned(t: Tensor, g: np.ndarray) -> None:
    """Like _accum for a freshly allocated g the caller will not reuse."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar (0-d or single element).  The active tape is
    replayed in reverse exactly once and then consumed; calling backward
    again without new forward ops raises TapeError.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = getattr(_tls, "tape", None)
    if tape is None or tape.consumed:
        raise TapeError("no fresh tape: run a forward pass before backward()")
    tape.consumed = True
    if loss.requires_grad:
        _accum(loss, np.ones_like(loss.data))
        for out, back in reversed(tape.records):
            if out.grad is not None:
                back(out.grad)
    tape.records.clear()


# ---------------------------------------------------------------------------
# Ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = _wrap(a.data @ b.data, _track(a, b), "matmul")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    _record(out, back)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also broadcasts a 1-d bias over the rows of a 2-d input."""
    row_broadcast = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if not row_broadcast and a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = _wrap(a.data + b.data, _track(a, b), "add")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0) if row_broadcast else g)

    _record(out, back)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    out = _wrap(a.data - b.data, _track(a, b), "sub")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    _record(out, back)
    return out


def neg(a: Tensor) -> Tensor:
    out = _wrap(-a.data, _track(a), "neg")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, -g)

    _record(out, back)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = _wrap(a.data * b.data, _track(a, b), "mul")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    _record(out, back)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div shape mismatch: {a.shape} / {b.shape}")
    out = _wrap(a.data / b.data, _track(a, b), "div")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g / b.data)
        if b.requires_grad:
            _accum(b, -g * a.data / (b.data * b.data))

    _record(out, back)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _wrap(a.data * c, _track(a), "scale")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * c)

    _record(out, back)
    return out


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = _wrap(a.data + c, _track(a), "add_scalar")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)

    _record(out, back)
    return out


def relu(x: Tensor) -> Tensor:
    out = _wrap(np.maximum(x.data, 0.0), _track(x), "relu")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * (x.data > 0.0))

    _record(out, back)
    return out


def gelu(x: Tensor) -> Tensor:
    """Tanh-form gelu: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    sq = x.data * x.data
    t = np.tanh(_SQRT_2_OVER_PI * (x.data + GELU_CUBIC_COEFF * sq * x.data))
    out = _wrap(0.5 * x.data * (1.0 + t), _track(x), "gelu")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEFF * sq)
            _accum(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    _record(out, back)
    return out


def unary_map(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown unary map kind {kind!r}")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = _wrap(np.exp(x.data), _track(x), "exp")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * out.data)

    _record(out, back)
    return out


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _wrap(np.log(x.data), _track(x), "log")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g / x.data)

    _record(out, back)
    return out


def abs_val(x: Tensor) -> Tensor:
    out = _wrap(np.abs(x.data), _track(x), "abs_val")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * np.sign(x.data))

    _record(out, back)
    return out


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    out = _wrap(np.maximum(x.data, floor), _track(x), "clamp_min")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * (x.data > floor))

    _record(out, back)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-d input, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = _wrap(p, _track(x), "softmax_rows")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * p).sum(axis=1, keepdims=True)
            _accum(x, p * (g - dot))

    _record(out, back)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization (population variance + eps) then affine."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-d input, got {x.shape}")
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError("layer_norm gain/bias must match the row width")
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    m = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xh = xc * ivar
    out = _wrap(xh * gain.data + bias.data, _track(x, gain, bias), "layer_norm")

    def back(g: np.ndarray) -> None:
        if gain.requires_grad:
            _accum(gain, (g * xh).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            gxh = g * gain.data
            dvar = (gxh * xc).sum(axis=1, keepdims=True) * (-0.5) * ivar**3
            dmu = -(gxh * ivar).sum(axis=1, keepdims=True) + dvar * (-2.0 / m) * xc.sum(
                axis=1, keepdims=True
            )
            _accum(x, gxh * ivar + dvar * 2.0 * xc / m + dmu / m)

    _record(out, back)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d input, got {x.shape}")
    out = _wrap(x.data.T.copy(), _track(x), "transpose")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g.T)

    _record(out, back)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _wrap(x.data.reshape(shape).copy(), _track(x), "reshape")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g.reshape(x.shape))

    _record(out, back)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != parts[0].shape[1]:
            raise ShapeError("concat_rows parts must be 2-d with equal widths")
    out = _wrap(np.concatenate([p.data for p in parts], axis=0), _track(*parts), "concat_rows")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g[lo:hi])

    _record(out, back)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != parts[0].shape[0]:
            raise ShapeError("concat_cols parts must be 2-d with equal heights")
    out = _wrap(np.concatenate([p.data for p in parts], axis=1), _track(*parts), "concat_cols")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g[:, lo:hi])

    _record(out, back)
    return out


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo <= hi <= x.shape[0]):
        raise ShapeError(f"slice_rows [{lo}:{hi}] invalid for shape {x.shape}")
    out = _wrap(x.data[lo:hi].copy(), _track(x), "slice_rows")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[lo:hi] = g
            _accum_owned(x, full)

    _record(out, back)
    return out


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo <= hi <= x.shape[1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] invalid for shape {x.shape}")
    out = _wrap(x.data[:, lo:hi].copy(), _track(x), "slice_cols")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            _accum_owned(x, full)

    _record(out, back)
    return out


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup (embedding); duplicate ids accumulate gradient into one row."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("gather_rows needs a 2-d table and 1-d ids")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather_rows ids out of range")
    out = _wrap(table.data[idx].copy(), _track(table), "gather_rows")

    def back(g: np.ndarray) -> None:
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            _accum_owned(table, full)

    _record(out, back)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _wrap(np.asarray(x.data.sum()), _track(x), "sum_all")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, np.full_like(x.data, float(g)))

    _record(out, back)
    return out


def mean_all(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise ShapeError("mean_all of an empty tensor")
    return scale(sum_all(x), 1.0 / x.data.size)


def cosine_similarity(u, v, eps: float = 1e-12) -> float:
    """u.v / (max(|u|, eps) * max(|v|, eps)), clipped to [-1, 1].

    Pure function on the values: no gradient is recorded.  Zero vectors
    degrade to similarity 0 via the eps floor instead of raising.
    """
    if eps <= 0:
        raise ValueError("cosine_similarity eps must be > 0")
    ud = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    vd = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if ud.shape != vd.shape or ud.ndim != 1:
        raise ShapeError(f"cosine_similarity needs equal 1-d vectors, got {ud.shape}, {vd.shape}")
    denom = max(float(np.linalg.norm(ud)), eps) * max(float(np.linalg.norm(vd)), eps)
    return float(np.clip(float(ud @ vd) / denom, -1.0, 1.0))


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_diff_gradient(f: Callable[[], float], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. every element of x.

    f is re-evaluated with x.data perturbed in place; recording is disabled
    so probes never touch the tape.  Independent of the backward machinery.
    """
    g = np.zeros_like(x.data)
    flat_x = x.data.reshape(-1)
    flat_g = g.reshape(-1)
    with no_grad():
        for i in range(flat_x.size):
            orig = flat_x[i]
            flat_x[i] = orig + h
            fp = float(f())
            flat_x[i] = orig - h
            fm = float(f())
            flat_x[i] = orig
            flat_g[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a-b| / max(floor, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))
