"""Dense 2-D tensor algebra with tape-based reverse-mode differentiation.

Supports exactly the operations the rest of the package needs: matrix
products, broadcast add/multiply, concatenation, reductions, a numerically
stable softmax, GELU and a few elementwise maps, row gathering/slicing, and
cross-entropy.  Every op has a registered backward rule; recording happens
only inside an active ``Tape`` context, so frozen-parameter inference pays
no bookkeeping cost.

Two precisions are supported: float64 ("wide", the default, used for
gradient verification because central differences are unreliable in single
precision) and float32 ("standard", used for training).  All arrays are
row-major and transposition is explicit (a copy, never a view).

Reductions that aggregate over token rows (the softmax normalizer and the
``stable=True`` matmul contraction) accumulate in ascending value order.
The summation order is then canonical, which makes those results invariant
to permutations of the aggregated rows rather than merely close.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STANDARD_DTYPE = np.float32
WIDE_DTYPE = np.float64

_TAPES: list["Tape"] = []


class Tensor:
    """Dense array with optional gradient accumulation.

    ``data`` is treated as immutable while a forward/backward pass is in
    flight; only an optimizer may mutate parameter data between steps.
    ``grad`` is populated on requires_grad leaves by :func:`backward` and
    accumulates across calls until cleared.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(WIDE_DTYPE)
        if arr.ndim not in (0, 2):
            raise ValueError(f"tensors are scalars or 2-D, got shape {arr.shape}")
        _require_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add_broadcast(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add_broadcast(self, scale(other, -1.0))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul_broadcast(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


class Tape:
    """Execution-ordered record of differentiable operations.

    Order of recording is execution order, so the list is topological by
    construction: an entry's inputs were recorded (or are leaves) before it.
    Replaying the entries in reverse visits each one exactly once.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tape contexts must nest"

    def __len__(self) -> int:
        return len(self._entries)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1]._entries.append((out, inputs, vjp))


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar recorded on the given (or innermost active)
    tape.  Repeated calls without clearing grads accumulate.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ValueError("backward() requires an active or explicit tape")
    if not tape._entries:
        raise ValueError("backward() on an empty tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    # Scratch map keeps per-call flows separate so repeated backward calls
    # accumulate correctly into leaf .grad.
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(out) for out, _, _ in tape._entries}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    for out, inputs, vjp in reversed(tape._entries):
        g = flows.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            key = id(t)
            if key in flows:
                flows[key] = flows[key] + gi
            else:
                flows[key] = gi
            if t.requires_grad and key not in produced:
                leaf_grads[key] = (t, flows[key])

    for t, g in leaf_grads.values():
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in {what}")


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp, what: str) -> Tensor:
    _require_finite(out_data, what)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    _record(out, inputs, vjp)
    return out


def _check_2d(t: Tensor, what: str) -> None:
    if t.data.ndim != 2:
        raise ValueError(f"{what} requires 2-D operands, got shape {t.shape}")


def _broadcast_shapes(sa: tuple[int, ...], sb: tuple[int, ...], what: str) -> None:
    # Broadcasting only expands unit extents; ranks must already agree.
    if len(sa) != len(sb):
        raise ValueError(f"{what}: rank mismatch {sa} vs {sb}")
    for da, db in zip(sa, sb):
        if da != db and 1 not in (da, db):
            raise ValueError(f"{what}: incompatible shapes {sa} vs {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sorted_contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a: M x K, b: K x N.  Products along K are summed in ascending order,
    # so the result does not depend on how the K rows were ordered.
    prods = a[:, :, None] * b[None, :, :]
    prods.sort(axis=1)
    return prods.sum(axis=1)


def matmul(a: Tensor, b: Tensor, stable: bool = False) -> Tensor:
    """Matrix product; ``stable=True`` contracts in sorted value order."""
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = _sorted_contract(a.data, b.data) if stable else a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    _check_2d(a, "transpose")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T.copy(),), "transpose")


def add_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; unit extents broadcast, nothing else does."""
    _broadcast_shapes(a.shape, b.shape, "add_broadcast")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp, "add_broadcast")


def mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; unit extents broadcast, nothing else does."""
    _broadcast_shapes(a.shape, b.shape, "mul_broadcast")
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp, "mul_broadcast")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input list")
    if axis not in (0, 1):
        raise ValueError(f"concat: axis must be 0 or 1, got {axis}")
    for t in tensors:
        _check_2d(t, "concat")
    other = 1 - axis
    extents = {t.shape[other] for t in tensors}
    if len(extents) != 1:
        raise ValueError(f"concat: extents along axis {other} differ")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(tensors)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _make(out, tuple(tensors), vjp, "concat")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over ``axis`` (keeping the reduced extent as 1) or over all entries."""
    if axis is None:
        n = a.data.size
        out = np.asarray(a.data.mean())

        def vjp(g):
            return (np.full_like(a.data, float(g) / n),)

        return _make(out, (a,), vjp, "mean")
    _check_2d(a, "mean")
    if axis not in (0, 1):
        raise ValueError(f"mean: axis must be 0 or 1, got {axis}")
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=True)

    def vjp_axis(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), vjp_axis, "mean")


def softmax(a: Tensor, axis: int) -> Tensor:
    """Row/column-stable softmax (max subtraction, sorted normalizer).

    Each slice along ``axis`` is nonnegative and sums to 1.  The normalizer
    sums exponentials in ascending order, so the output is invariant to
    permutations of the entries along ``axis``.
    """
    _check_2d(a, "softmax")
    if axis not in (0, 1):
        raise ValueError(f"softmax: axis must be 0 or 1, got {axis}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = np.sort(e, axis=axis).sum(axis=axis, keepdims=True)
    y = e / denom

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), vjp, "softmax")


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (the exact erf form lives in the tests as an oracle)."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        di = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * di),)

    return _make(out, (a,), vjp, "gelu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t**2),), "tanh")


def softsign(a: Tensor) -> Tensor:
    d = 1.0 + np.abs(a.data)
    return _make(a.data / d, (a,), lambda g: (g / d**2,), "softsign")


def sin(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin")


def powf(a: Tensor, p: float) -> Tensor:
    """Elementwise power; negative bases require an integer exponent."""
    p = float(p)
    if not p.is_integer() and (a.data < 0).any():
        raise ValueError("powf: negative base with non-integer exponent")
    if p < 0 and (a.data == 0).any():
        raise ValueError("powf: zero base with negative exponent")
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), vjp, "powf")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index; backward scatter-adds (duplicates accumulate)."""
    _check_2d(a, "gather_rows")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError("gather_rows: index out of range")
    out = a.data[idx].copy()

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _make(out, (a,), vjp, "gather_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _check_2d(a, "slice_cols")
    if not (0 <= start < stop <= a.shape[1]):
        raise ValueError(f"slice_cols: bad range [{start}, {stop}) for shape {a.shape}")
    out = a.data[:, start:stop].copy()

    def vjp(g):
        acc = np.zeros_like(a.data)
        acc[:, start:stop] = g
        return (acc,)

    return _make(out, (a,), vjp, "slice_cols")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ broadcast bias row)."""
    out = matmul(x, w)
    if b is not None:
        out = add_broadcast(out, b)
    return out


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Mean or summed next-token cross-entropy over rows of ``logits``."""
    _check_2d(logits, "cross_entropy")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")
    tgt = np.asarray(targets, dtype=np.intp)
    if tgt.ndim != 1 or tgt.shape[0] != logits.shape[0]:
        raise ValueError("cross_entropy: targets must be one index per logits row")
    if tgt.size == 0:
        raise ValueError("cross_entropy: empty targets")
    if tgt.min() < 0 or tgt.max() >= logits.shape[1]:
        raise ValueError("cross_entropy: target index out of range")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    per_row = lse - z[np.arange(z.shape[0]), tgt]
    out = np.asarray(per_row.mean() if reduction == "mean" else per_row.sum())
    w = 1.0 / z.shape[0] if reduction == "mean" else 1.0

    def vjp(g):
        sm = np.exp(z - m)
        sm /= sm.sum(axis=1, keepdims=True)
        sm[np.arange(z.shape[0]), tgt] -= 1.0
        return (sm * (float(g) * w),)

    return _make(out, (logits,), vjp, "cross_entropy")


def straight_through(values: np.ndarray, surrogate: Tensor) -> Tensor:
    """Forward takes ``values``; backward passes gradients to ``surrogate``.

    Deliberately a biased estimator: the forward value is treated as if it
    were the surrogate, which is what lets hard selections train.
    """
    vals = np.asarray(values, dtype=surrogate.data.dtype)
    if vals.shape != surrogate.shape:
        raise ValueError(f"straight_through: shape {vals.shape} != surrogate {surrogate.shape}")
    return _make(vals.copy(), (surrogate,), lambda g: (g,), "straight_through")


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class FiniteDiffEntry:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...] | None


@dataclass
class FiniteDiffReport:
    """Per-parameter comparison of analytic vs central-difference gradients."""

    tolerance: float
    entries: list[FiniteDiffEntry] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tolerance)

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            status = "PASS" if e.max_rel_error < self.tolerance else "FAIL"
            out.append(f"{status}  {e.name}: max_rel={e.max_rel_error:.3e}")
        return out


# Denominator floor for the relative-error ratio; keeps near-zero gradient
# pairs from amplifying finite-difference noise into spurious failures.
_REL_FLOOR = 1e-3


def finite_diff_check(f, params: dict[str, Tensor], eps: float = 1e-5,
                      tol: float = 1e-4) -> FiniteDiffReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must be a deterministic scalar-valued function of the given
    parameters (re-running the forward pass on each call).  Use wide-mode
    (float64) parameters; single precision drowns the differences in noise.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"finite_diff_check: parameter {name!r} must be float64")
        p.zero_grad()

    with Tape() as t:
        loss = f()
        backward(loss, t)
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    report = FiniteDiffReport(tolerance=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        worst_idx = None
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), _REL_FLOOR)
            if rel > worst:
                worst = rel
                worst_idx = np.unravel_index(i, p.data.shape)
        report.entries.append(FiniteDiffEntry(name, worst, worst_idx))
    return report
