"""Dense float64 tensors with a define-by-run tape for reverse-mode gradients.

Only the operations the attention/ranking math needs are provided. Storage is
numpy; there is no broadcasting beyond what those operations require, no
sparse tensors and no device notion. Ops record onto the currently active
Tape (``with Tape() as tape:``); code run without an active tape is
forward-only, which is what evaluation uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for a primitive."""


_active_tape: "Tape | None" = None


class Tensor:
    """Dense float64 array, optionally tracked for gradients.

    ``grad`` is an accumulator with the same shape as ``data``; it is filled
    by Tape.backward and holds sums across repeated backward calls, so
    d(L1+L2)/dx == dL1/dx + dL2/dx falls out of the accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracked = self.requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _TapeEntry:
    out: Tensor
    inputs: tuple
    # maps the output gradient to a tuple of input gradients (None allowed)
    backward: Callable


class Tape:
    """Ordered record of executed ops.

    Entries are appended in execution order, so the list is already a
    topological order of the computation: every node's inputs precede it.
    backward() walks it once in reverse.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a Tape is already active; nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def backward(self, root: Tensor) -> None:
        if root.data.shape != ():
            raise ShapeError(f"backward root must be a scalar, got shape {root.data.shape}")
        # clear transient grads from any earlier backward over this tape;
        # leaves are never entry outputs so their accumulators survive
        for entry in self.entries:
            entry.out.grad = None
        root.grad = np.ones((), dtype=np.float64)
        for entry in reversed(self.entries):
            g = entry.out.grad
            if g is None:
                continue
            grads = entry.backward(g)
            for inp, gi in zip(entry.inputs, grads):
                if gi is None or not isinstance(inp, Tensor) or not inp._tracked:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad += gi


def _record(out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    tape = _active_tape
    if tape is not None and any(isinstance(i, Tensor) and i._tracked for i in inputs):
        out._tracked = True
        tape.entries.append(_TapeEntry(out, inputs, backward))
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# elementwise / scalar ops


def _same_or_scalar(a: Tensor, b: Tensor, name: str) -> None:
    _require(
        a.shape == b.shape or a.shape == () or b.shape == (),
        f"{name}: shapes {a.shape} and {b.shape} must match (or one be scalar)",
    )


def _reduce_like(g: np.ndarray, t: Tensor) -> np.ndarray:
    # collapse a full-shape gradient onto a scalar operand
    if t.shape == () and g.shape != ():
        return np.sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_reduce_like(g, a), _reduce_like(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_reduce_like(g, a), _reduce_like(-g, b)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product; shapes must match (or one operand be scalar)."""
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b), lambda g: (_reduce_like(g * b.data, a), _reduce_like(g * a.data, b))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_or_scalar(a, b, "div")
    out = Tensor(a.data / b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _reduce_like(g / b.data, a),
            _reduce_like(-g * a.data / (b.data * b.data), b),
        ),
    )


def scale(a, c: float) -> Tensor:
    """Multiply by a python float constant (not differentiated through c)."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable in both tails
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * 0.5 / y,))


def softplus(a) -> Tensor:
    """log(1 + e^x), the stable form of -log(sigmoid(-x))."""
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))
    def bwd(g):
        s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                     np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
        return (g * s,)
    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require(a.ndim == 2 and b.ndim == 2, f"matmul: operands must be 2-D, got {a.shape} and {b.shape}")
    _require(a.shape[1] == b.shape[0], f"matmul: shapes {a.shape} and {b.shape} incompatible")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def matvec(m, v) -> Tensor:
    m, v = as_tensor(m), as_tensor(v)
    _require(m.ndim == 2 and v.ndim == 1, f"matvec: need matrix and vector, got {m.shape} and {v.shape}")
    _require(m.shape[1] == v.shape[0], f"matvec: shapes {m.shape} and {v.shape} incompatible")
    out = Tensor(m.data @ v.data)
    return _record(out, (m, v), lambda g: (np.outer(g, v.data), m.data.T @ g))


def linear(x, w) -> Tensor:
    """Rows of x transformed by w: out = x @ w.T (x is n x k, w is m x k)."""
    x, w = as_tensor(x), as_tensor(w)
    _require(x.ndim == 2 and w.ndim == 2, f"linear: operands must be 2-D, got {x.shape} and {w.shape}")
    _require(x.shape[1] == w.shape[1], f"linear: shapes {x.shape} and {w.shape} incompatible")
    out = Tensor(x.data @ w.data.T)
    return _record(out, (x, w), lambda g: (g @ w.data, g.T @ x.data))


def dot(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    _require(u.ndim == 1 and v.ndim == 1 and u.shape == v.shape,
             f"dot: need equal-length vectors, got {u.shape} and {v.shape}")
    out = Tensor(np.dot(u.data, v.data))
    return _record(out, (u, v), lambda g: (g * v.data, g * u.data))


def sum(a) -> Tensor:  # noqa: A001 - deliberate, module is used via a prefix
    a = as_tensor(a)
    out = Tensor(np.sum(a.data))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape),))


def row_sum(a) -> Tensor:
    """Sum a 2-D tensor along axis 1."""
    a = as_tensor(a)
    _require(a.ndim == 2, f"row_sum: need a 2-D tensor, got {a.shape}")
    out = Tensor(np.sum(a.data, axis=1))
    return _record(out, (a,), lambda g: (np.broadcast_to(g[:, None], a.shape),))


def l2_norm_sq(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data * a.data))
    return _record(out, (a,), lambda g: (g * 2.0 * a.data,))


def softmax(v) -> Tensor:
    """Softmax of a 1-D vector, computed with max subtraction."""
    v = as_tensor(v)
    _require(v.ndim == 1, f"softmax: need a 1-D vector, got {v.shape}")
    _require(v.shape[0] > 0, "softmax: empty vector")
    e = np.exp(v.data - np.max(v.data))
    y = e / np.sum(e)
    out = Tensor(y)
    return _record(out, (v,), lambda g: (y * (g - np.dot(g, y)),))


# ---------------------------------------------------------------------------
# indexed ops used to run attention over edge lists


def gather_rows(a, idx) -> Tensor:
    """Select rows (or elements of a 1-D tensor) by integer index."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    _require(idx.ndim == 1, f"gather_rows: index must be 1-D, got shape {idx.shape}")
    out = Tensor(a.data[idx])

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _record(out, (a,), bwd)


def put(values, idx, size: int) -> Tensor:
    """Scatter rows/elements into a zero tensor of leading dimension ``size``.

    Indices must be unique; this is the inverse of gather_rows on those
    positions.
    """
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.intp)
    _require(idx.shape[0] == values.shape[0],
             f"put: {idx.shape[0]} indices for {values.shape[0]} rows")
    out_data = np.zeros((size,) + values.shape[1:], dtype=np.float64)
    out_data[idx] = values.data
    out = Tensor(out_data)
    return _record(out, (values,), lambda g: (g[idx],))


def segment_sum(a, segments, num_segments: int) -> Tensor:
    """Sum rows (or elements) of ``a`` grouped by a sorted segment-id array."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.intp)
    _require(seg.ndim == 1 and seg.shape[0] == a.shape[0],
             f"segment_sum: {seg.shape} segment ids for leading dim {a.shape}")
    if seg.shape[0] and np.any(np.diff(seg) < 0):
        raise ShapeError("segment_sum: segment ids must be non-decreasing")
    out = Tensor(_segment_sum_data(a.data, seg, num_segments))
    return _record(out, (a,), lambda g: (g[seg],))


def _segment_sum_data(data: np.ndarray, seg: np.ndarray, num_segments: int) -> np.ndarray:
    out_shape = (num_segments,) + data.shape[1:]
    if data.shape[0] == 0:
        return np.zeros(out_shape, dtype=np.float64)
    # cumulative-sum differences over segment boundaries; handles empty segments
    csum = np.concatenate([np.zeros((1,) + data.shape[1:], dtype=np.float64),
                           np.cumsum(data, axis=0)], axis=0)
    indptr = np.searchsorted(seg, np.arange(num_segments + 1))
    return csum[indptr[1:]] - csum[indptr[:-1]]


def _segment_max_data(data: np.ndarray, seg: np.ndarray, num_segments: int) -> np.ndarray:
    out = np.zeros(num_segments, dtype=np.float64)
    if data.shape[0] == 0:
        return out
    indptr = np.searchsorted(seg, np.arange(num_segments + 1))
    starts = np.minimum(indptr[:-1], data.shape[0] - 1)
    maxes = np.maximum.reduceat(data, starts)
    nonempty = indptr[1:] > indptr[:-1]
    out[nonempty] = maxes[nonempty]
    return out


def segment_softmax(logits, segments, num_segments: int) -> Tensor:
    """Softmax within each segment of a sorted segment-id array.

    The per-segment max is subtracted as a constant before exponentiation;
    softmax is shift invariant so values and gradients are unaffected.
    """
    logits = as_tensor(logits)
    seg = np.asarray(segments, dtype=np.intp)
    _require(logits.ndim == 1, f"segment_softmax: logits must be 1-D, got {logits.shape}")
    shift = _segment_max_data(logits.data, seg, num_segments)
    shifted = add(logits, Tensor(-shift[seg]))
    e = exp(shifted)
    totals = segment_sum(e, seg, num_segments)
    return div(e, gather_rows(totals, seg))


def scale_rows(a, w) -> Tensor:
    """Multiply each row of a 2-D tensor by the matching entry of a vector."""
    a, w = as_tensor(a), as_tensor(w)
    _require(a.ndim == 2 and w.ndim == 1 and a.shape[0] == w.shape[0],
             f"scale_rows: shapes {a.shape} and {w.shape} incompatible")
    out = Tensor(a.data * w.data[:, None])
    return _record(
        out, (a, w),
        lambda g: (g * w.data[:, None], np.sum(g * a.data, axis=1)),
    )


def add_rowvec(a, v) -> Tensor:
    """Add one vector to every row of a 2-D tensor."""
    a, v = as_tensor(a), as_tensor(v)
    _require(a.ndim == 2 and v.ndim == 1 and a.shape[1] == v.shape[0],
             f"add_rowvec: shapes {a.shape} and {v.shape} incompatible")
    out = Tensor(a.data + v.data[None, :])
    return _record(out, (a, v), lambda g: (g, np.sum(g, axis=0)))


def mul_rowvec(a, v) -> Tensor:
    """Multiply every row of a 2-D tensor elementwise by one vector."""
    a, v = as_tensor(a), as_tensor(v)
    _require(a.ndim == 2 and v.ndim == 1 and a.shape[1] == v.shape[0],
             f"mul_rowvec: shapes {a.shape} and {v.shape} incompatible")
    out = Tensor(a.data * v.data[None, :])
    return _record(
        out, (a, v),
        lambda g: (g * v.data[None, :], np.sum(g * a.data, axis=0)),
    )


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    n_probed: int
    per_param: dict
    worst: tuple | None = None

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return (f"grad_check {state}: max rel error {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.1e}, {self.n_probed} coordinates)")


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-5,
    max_probes_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of a scalar ``f()`` against central differences.

    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|). When
    ``max_probes_per_param`` is set, a deterministic random subset of
    coordinates per parameter is probed instead of every coordinate.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    if out.data.shape != ():
        raise ShapeError(f"grad_check: f() must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data):
        raise ValueError("grad_check: f() returned a non-finite value")
    tape.backward(out)

    rng = np.random.default_rng(seed)
    max_err = 0.0
    worst = None
    n_probed = 0
    per_param: dict = {}
    for pi, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        if max_probes_per_param is not None and n > max_probes_per_param:
            coords = np.sort(rng.choice(n, size=max_probes_per_param, replace=False))
        else:
            coords = np.arange(n)
        a_flat = analytic.reshape(-1)
        p_err = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            f_plus = f().item()
            flat[c] = orig - epsilon
            f_minus = f().item()
            flat[c] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ValueError("grad_check: non-finite value during finite differencing")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(a_flat[c])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            n_probed += 1
            if rel > p_err:
                p_err = rel
            if rel > max_err:
                max_err = rel
                worst = (pi, int(c), a, numeric)
        per_param[pi] = p_err
    return GradCheckReport(
        max_rel_error=max_err,
        tolerance=tolerance,
        passed=max_err < tolerance,
        n_probed=n_probed,
        per_param=per_param,
        worst=worst,
    )
