"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything the planner network needs and nothing more: matmul, broadcasting
add/mul, softmax, layer norm, gelu, embedding lookup, dropout, cross-entropy,
and a handful of structural ops (concat, slice, transpose, stack, reshape).

A :class:`Tape` records executed operations while active; :func:`backward`
replays them in exact reverse order. Gradients accumulate (never overwrite),
so separate loss terms can be backpropagated independently before one
optimizer step. Outside any tape, ops run in inference mode and record
nothing.

Every op validates its output for NaN/Inf via a single-pass sum check; a
non-finite value anywhere raises :class:`~toporl.errors.NumericalError`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .. import kernels
from ..errors import (
    ContractError,
    ConfigError,
    DegenerateDistributionError,
    NumericalError,
    ShapeError,
)

_TAPE_STACK: list[Optional["Tape"]] = []


def _active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def tape_active() -> bool:
    """True when ops executed now would be recorded for backward."""
    return _active_tape() is not None


def _assert_finite(arr: np.ndarray, opname: str) -> None:
    # Sum is a single pass and propagates any NaN/Inf to the result.
    if not math.isfinite(arr.sum()):
        raise NumericalError(f"non-finite values produced by {opname}")


class Tensor:
    """Row-major float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _assert_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self.is_leaf = True
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; constants are accepted on either side
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of executed ops, replayed backward in reverse.

    Use as a context manager; ops executed inside record themselves when
    their output needs a gradient. Exiting clears the records and drops all
    intermediate gradients (leaf gradients persist).
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray, dict], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()
        self.clear()

    def clear(self) -> None:
        for out, _ in self._records:
            out.grad = None
        self._records.clear()

    def __len__(self) -> int:
        return len(self._records)


class no_grad:
    """Context manager disabling recording (inference mode)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(
    out_data: np.ndarray, opname: str, inputs: Sequence[Tensor], vjp, check: bool = True
) -> Tensor:
    """Wrap op output, recording the vjp closure if a tape is active.

    check=False is reserved for structural ops (gather, slice, concat,
    reshape, transpose) that cannot introduce non-finite values.
    """
    if check:
        _assert_finite(out_data, opname)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.is_leaf = True
    out.requires_grad = False
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        out._tape = tape
        tape._records.append((out, vjp))
    return out


def _accum(t: Tensor, g: np.ndarray, flow: dict) -> None:
    """Route a gradient contribution to a leaf accumulator or the flow."""
    if not t.requires_grad:
        return
    if t.is_leaf:
        acc = t.ensure_grad()
        acc += g
    else:
        key = id(t)
        if key in flow:
            flow[key] += g
        else:
            flow[key] = np.array(g, copy=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into every requires_grad tensor upstream.

    Each call replays the tape once; leaf gradients add across calls while
    the per-call flow through intermediates starts fresh (so calling twice
    exactly doubles leaf gradients).
    """
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward() requires an active Tape")
    if loss.data.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad or loss.is_leaf or loss._tape is not tape:
        raise ContractError("loss was not produced on the current tape")
    flow: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for out, vjp in reversed(tape._records):
        g = flow.pop(id(out), None)
        if g is None:
            continue
        acc = out.ensure_grad()
        acc += g
        vjp(g, flow)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def vjp(g, flow):
        _accum(a, g @ b.data.T, flow)
        _accum(b, a.data.T @ g, flow)

    return _make(out_data, "matmul", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def vjp(g, flow):
        _accum(a, _unbroadcast(g, a.data.shape), flow)
        _accum(b, _unbroadcast(g, b.data.shape), flow)

    return _make(out_data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def vjp(g, flow):
        _accum(a, _unbroadcast(g, a.data.shape), flow)
        _accum(b, _unbroadcast(-g, b.data.shape), flow)

    return _make(out_data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def vjp(g, flow):
        _accum(a, _unbroadcast(g * b.data, a.data.shape), flow)
        _accum(b, _unbroadcast(g * a.data, b.data.shape), flow)

    return _make(out_data, "mul", (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def vjp(g, flow):
        _accum(a, g * c, flow)

    return _make(out_data, "scale", (a,), vjp)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def vjp(g, flow):
        _accum(a, g * out_data, flow)

    return _make(out_data, "exp", (a,), vjp)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; the subgradient follows a on ties."""
    out_data = np.minimum(a.data, b.data)

    def vjp(g, flow):
        take_a = a.data <= b.data
        _accum(a, _unbroadcast(g * take_a, a.data.shape), flow)
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape), flow)

    return _make(out_data, "minimum", (a, b), vjp)


def clip_const(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)

    def vjp(g, flow):
        inside = (a.data > lo) & (a.data < hi)
        _accum(a, g * inside, flow)

    return _make(out_data, "clip", (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def vjp(g, flow):
        _accum(a, np.broadcast_to(g, a.data.shape).copy(), flow)

    return _make(out_data, "sum", (a,), vjp)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0 of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows needs a 2-D tensor, got {a.data.shape}")
    n = a.data.shape[0]
    out_data = a.data.mean(axis=0)

    def vjp(g, flow):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy(), flow)

    return _make(out_data, "mean_rows", (a,), vjp)


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D x."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shapes disagree: {x.data.shape} @ {w.data.shape}")
    out_data = x.data @ w.data + b.data

    def vjp(g, flow):
        _accum(x, g @ w.data.T, flow)
        _accum(w, x.data.T @ g, flow)
        _accum(b, _unbroadcast(g, b.data.shape), flow)

    return _make(out_data, "linear", (x, w, b), vjp)


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int, mask: Optional[np.ndarray] = None
) -> Tensor:
    """Scaled dot-product attention over already-projected q/k/v.

    q is (N, d), k and v are (M, d); the head split is on the last axis.
    mask, when given, is (N, M) with True marking attendable pairs; each
    query row must keep at least one key.
    """
    n, d = q.data.shape
    m = k.data.shape[0]
    if d % heads or k.data.shape != (m, d) or v.data.shape != (m, d):
        raise ShapeError(
            f"attention shapes disagree: q{q.data.shape} k{k.data.shape} v{v.data.shape} heads={heads}"
        )
    dh = d // heads
    inv = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(n, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(m, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(m, heads, dh).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * inv  # (h, n, m)
    if mask is not None:
        if mask.shape != (n, m):
            raise ShapeError(f"attention mask must be {(n, m)}, got {mask.shape}")
        if not mask.any(axis=1).all():
            raise DegenerateDistributionError("attention row fully masked")
        scores = np.where(mask[None], scores, -np.inf)
    shift = scores.max(axis=2, keepdims=True)
    with np.errstate(invalid="ignore"):
        att = np.exp(scores - shift)
    if mask is not None:
        att = np.where(mask[None], att, 0.0)
    att /= att.sum(axis=2, keepdims=True)
    out_data = (att @ vh).transpose(1, 0, 2).reshape(n, d)

    def vjp(g, flow):
        do = g.reshape(n, heads, dh).transpose(1, 0, 2)
        da = do @ vh.transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ do
        ds = att * (da - (da * att).sum(axis=2, keepdims=True)) * inv
        dq = ds @ kh
        dk = ds.transpose(0, 2, 1) @ qh
        _accum(q, dq.transpose(1, 0, 2).reshape(n, d), flow)
        _accum(k, dk.transpose(1, 0, 2).reshape(m, d), flow)
        _accum(v, dv.transpose(1, 0, 2).reshape(m, d), flow)

    return _make(out_data, "multi_head_attention", (q, k, v), vjp)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax with max-subtraction; mask=True marks kept entries.

    Excluded entries are exactly zero in the output and receive zero
    gradient. A row with no kept entry is degenerate.
    """
    data = x.data
    squeeze = data.ndim == 1
    if squeeze:
        data = data[None, :]
    if data.ndim != 2:
        raise ShapeError(f"softmax needs a 1-D or 2-D tensor, got {x.data.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if squeeze and m.ndim == 1:
            m = m[None, :]
        if m.shape != data.shape:
            raise ShapeError(f"mask shape {m.shape} does not match logits {data.shape}")
        if not m.any(axis=1).all():
            raise DegenerateDistributionError("softmax row fully masked")
        shifted = np.where(m, data, -np.inf)
        row_max = shifted.max(axis=1, keepdims=True)
        e = np.exp(np.where(m, data - row_max, -np.inf))
        e = np.where(m, e, 0.0)
    else:
        row_max = data.max(axis=1, keepdims=True)
        e = np.exp(data - row_max)
    out = e / e.sum(axis=1, keepdims=True)
    out_data = out[0] if squeeze else out

    def vjp(g, flow):
        g2 = g[None, :] if squeeze else g
        inner = (g2 * out).sum(axis=1, keepdims=True)
        dx = out * (g2 - inner)
        _accum(x, dx[0] if squeeze else dx, flow)

    return _make(out_data, "softmax", (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D tensor, got {x.data.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data

    def vjp(g, flow):
        gg = g * gain.data
        term = gg - gg.mean(axis=1, keepdims=True) - xhat * (gg * xhat).mean(axis=1, keepdims=True)
        _accum(x, term * inv, flow)
        _accum(gain, (g * xhat).sum(axis=0), flow)
        _accum(bias, g.sum(axis=0), flow)

    return _make(out_data, "layer_norm", (x, gain, bias), vjp)


def gelu(x: Tensor) -> Tensor:
    out_data = kernels.gelu_forward(x.data)

    def vjp(g, flow):
        _accum(x, kernels.gelu_backward(x.data, g), flow)

    return _make(out_data, "gelu", (x,), vjp)


def take_rows(x: Tensor, ids) -> Tensor:
    """Gather rows by integer index; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"row ids must be 1-D, got shape {idx.shape}")
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row id out of range for table with {n} rows")
    out_data = x.data[idx]

    def vjp(g, flow):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _accum(x, dx, flow)

    return _make(out_data, "take_rows", (x,), vjp, check=False)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return take_rows(table, ids)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, enabled: bool = True) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate).

    The mask consumes one rng draw per call even when all entries survive,
    so replay under a fixed seed is bit-identical.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not enabled or rate == 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    factor = 1.0 / (1.0 - rate)
    out_data = x.data * keep * factor

    def vjp(g, flow):
        _accum(x, g * keep * factor, flow)

    return _make(out_data, "dropout", (x,), vjp, check=False)


def cross_entropy(logits: Tensor, target: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """-log softmax(logits)[target]; mask=True marks admissible entries."""
    data = logits.data
    if data.ndim != 1:
        raise ShapeError(f"cross_entropy needs 1-D logits, got {data.shape}")
    n = data.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} logits")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            raise DegenerateDistributionError("cross_entropy with fully masked logits")
        if not m[target]:
            raise ContractError("cross_entropy target is masked out")
        kept = np.where(m, data, -np.inf)
    else:
        m = None
        kept = data
    mx = kept.max()
    e = np.exp(kept - mx)
    if m is not None:
        e = np.where(m, e, 0.0)
    z = e.sum()
    out_data = np.asarray(mx + np.log(z) - data[target])

    def vjp(g, flow):
        p = e / z
        p[target] -= 1.0
        _accum(logits, g * p, flow)

    return _make(out_data, "cross_entropy", (logits,), vjp)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols needs matching row counts: {a.data.shape}, {b.data.shape}")
    da = a.data.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def vjp(g, flow):
        _accum(a, g[:, :da], flow)
        _accum(b, g[:, da:], flow)

    return _make(out_data, "concat_cols", (a, b), vjp, check=False)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"concat_rows needs matching widths: {a.data.shape}, {b.data.shape}")
    na = a.data.shape[0]
    out_data = np.concatenate([a.data, b.data], axis=0)

    def vjp(g, flow):
        _accum(a, g[:na], flow)
        _accum(b, g[na:], flow)

    return _make(out_data, "concat_rows", (a, b), vjp, check=False)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {x.data.shape}")
    out_data = np.ascontiguousarray(x.data[:, j0:j1])

    def vjp(g, flow):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        dx[:, j0:j1] = g
        _accum(x, dx, flow)

    return _make(out_data, "slice_cols", (x,), vjp, check=False)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.data.shape}")
    out_data = np.ascontiguousarray(x.data.T)

    def vjp(g, flow):
        _accum(x, np.ascontiguousarray(g.T), flow)

    return _make(out_data, "transpose", (x,), vjp, check=False)


def stack_rows(parts: Iterable[Tensor]) -> Tensor:
    rows = list(parts)
    if not rows:
        raise ShapeError("stack_rows needs at least one row")
    for r in rows:
        if r.data.shape != rows[0].data.shape or r.data.ndim != 1:
            raise ShapeError("stack_rows needs equal-length 1-D tensors")
    out_data = np.stack([r.data for r in rows])

    def vjp(g, flow):
        for i, r in enumerate(rows):
            _accum(r, g[i], flow)

    return _make(out_data, "stack_rows", rows, vjp, check=False)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)

    def vjp(g, flow):
        _accum(x, g.reshape(x.data.shape), flow)

    return _make(out_data, "reshape", (x,), vjp, check=False)


def parameter(data, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Leaf tensor with gradient tracking enabled."""
    return Tensor(data, requires_grad=True)


def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a deterministic scalar function.

    Perturbs x in place coordinate by coordinate and restores it; f must not
    hold stale copies of x.data across calls.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")

    def evaluate() -> float:
        with no_grad():
            r = f(x)
        return r.item() if isinstance(r, Tensor) else float(r)

    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate()
        flat[i] = orig - eps
        fm = evaluate()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.data.shape)
