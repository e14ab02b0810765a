"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable computation in this package runs on the small engine in
this module.  A :class:`Tensor` wraps a C-contiguous float64 numpy array.
Each operation that has to be differentiated records a :class:`TapeEntry`
holding its inputs and a backward closure; :func:`backward` collects the
entries reachable from a scalar loss into a :class:`GradTape` and replays
them exactly once in reverse topological order, accumulating gradients into
the leaves.

The engine is deliberately plain: no broadcasting beyond row-vector bias
addition, no views, no dtype zoo.  :func:`grad_check` provides the
independent central-difference oracle the test suite compares against.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


_OP_IDS = itertools.count()

# Backward closures take the gradient flowing into the op's output and return
# one gradient array per input (None for inputs that need no gradient).
BackwardFn = Callable[[np.ndarray], tuple]


@dataclass
class TapeEntry:
    """One recorded operation: monotone id, name, inputs, backward closure."""

    op_id: int
    name: str
    inputs: tuple["Tensor", ...]
    backward: BackwardFn


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    ``grad`` is populated by :func:`backward` for leaves with
    ``requires_grad=True``.  Non-leaf tensors keep a reference to the tape
    entry that produced them; leaves have ``entry None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "entry")

    def __init__(self, data, requires_grad: bool = False):
        # order="C" keeps 0-d scalars 0-d, unlike ascontiguousarray
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.entry: TapeEntry | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar so layer code reads like the math.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, neg(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _result(data: np.ndarray, name: str, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap an op result, recording a tape entry only when a gradient can flow."""
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.entry = TapeEntry(next(_OP_IDS), name, inputs, backward)
    return out


class GradTape:
    """The ordered record of operations behind one tensor.

    Entries are sorted by creation id, which is a valid topological order by
    construction: an op's inputs always exist before its output.
    """

    def __init__(self, entries: list[TapeEntry]):
        self.entries = entries

    @classmethod
    def trace(cls, output: Tensor) -> "GradTape":
        """Collect every tape entry that ``output`` depends on, exactly once."""
        seen: set[int] = set()
        entries: list[TapeEntry] = []
        stack = [output]
        while stack:
            t = stack.pop()
            e = t.entry
            if e is None or e.op_id in seen:
                continue
            seen.add(e.op_id)
            entries.append(e)
            stack.extend(e.inputs)
        entries.sort(key=lambda e: e.op_id)
        return cls(entries)


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> None:
    """Populate ``grad`` on every requires-grad leaf that ``loss`` depends on.

    ``loss`` must hold a single element.  When ``params`` is given, each
    listed tensor gets its gradient zero-initialised first, so parameters the
    loss does not touch come back with exact zeros instead of ``None``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    if loss.entry is None:
        return  # constant loss: nothing depends on anything

    tape = GradTape.trace(loss)
    # Pending gradients: keyed by producing op id for non-leaves, by object id
    # for leaves.  Each entry of the tape is visited exactly once below.
    pending: dict[int, np.ndarray] = {loss.entry.op_id: np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        if t.entry is not None:
            key = t.entry.op_id
            if key in pending:
                pending[key] = pending[key] + g
            else:
                pending[key] = g
        elif t.requires_grad:
            key = id(t)
            if key in leaf_grads:
                leaf_grads[key] = leaf_grads[key] + g
            else:
                leaf_grads[key] = g
                leaves[key] = t

    for entry in reversed(tape.entries):
        g_out = pending.pop(entry.op_id)
        for t, g in zip(entry.inputs, entry.backward(g_out)):
            if g is not None:
                accumulate(t, g)

    for key, t in leaves.items():
        g = leaf_grads[key]
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a (d,) or (1, d) row added to an (n, d) matrix."""
    if a.shape == b.shape:
        return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _result(a.data + b.data, "add_row", (a, b), lambda g: (g, g.sum(axis=0)))
    if a.data.ndim == 2 and b.shape == (1, a.shape[1]):
        return _result(a.data + b.data, "add_row", (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python float (the float is a constant, not a tensor)."""
    c = float(factor)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    return _result(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")
    return _result(np.ascontiguousarray(a.data.T), "transpose", (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken to be 0."""
    mask = a.data > 0.0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Copy of the row slice [start, stop); gradient scatters back into place."""
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"rows: slice [{start}, {stop}) out of range for shape {a.shape}")
    n = a.shape[0]

    def back(g: np.ndarray) -> tuple:
        full = np.zeros((n,) + g.shape[1:])
        full[start:stop] = g
        return (full,)

    return _result(a.data[start:stop].copy(), "rows", (a,), back)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows by integer index (repeats allowed); gradient accumulates."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows needs a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def back(g: np.ndarray) -> tuple:
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], "gather_rows", (a,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    counts = [p.shape[0] for p in parts]
    splits = np.cumsum(counts)[:-1]

    def back(g: np.ndarray) -> tuple:
        return tuple(np.split(g, splits, axis=0))

    return _result(np.concatenate([p.data for p in parts], axis=0), "concat_rows", tuple(parts), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    counts = [p.shape[1] for p in parts]
    splits = np.cumsum(counts)[:-1]

    def back(g: np.ndarray) -> tuple:
        return tuple(np.split(g, splits, axis=1))

    return _result(np.concatenate([p.data for p in parts], axis=1), "concat_cols", tuple(parts), back)


def indexed_weighted_sum(x: Tensor, out_index: np.ndarray, in_index: np.ndarray,
                         weights: np.ndarray, num_out_rows: int) -> Tensor:
    """out[out_index[k]] += weights[k] * x[in_index[k]] for every k.

    This is the sparse linear aggregation used by the message-passing layers;
    the adjacency structure lives in the constant index/weight arrays, so the
    backward pass is the same aggregation run through the transposed indices.
    """
    oi = np.asarray(out_index, dtype=np.intp)
    ii = np.asarray(in_index, dtype=np.intp)
    w = np.asarray(weights, dtype=np.float64)
    if not (oi.shape == ii.shape == w.shape) or oi.ndim != 1:
        raise ShapeError("indexed_weighted_sum: index and weight arrays must be equal-length 1-D")
    out = np.zeros((num_out_rows, x.shape[1]))
    np.add.at(out, oi, w[:, None] * x.data[ii])

    def back(g: np.ndarray) -> tuple:
        gx = np.zeros_like(x.data)
        np.add.at(gx, ii, w[:, None] * g[oi])
        return (gx,)

    return _result(out, "indexed_weighted_sum", (x,), back)


# ---------------------------------------------------------------------------
# Reductions and normalisation
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, as a 0-d scalar tensor."""
    return _result(np.asarray(a.data.sum()), "sum_all", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_rows(a: Tensor) -> Tensor:
    """Column means of an (n, d) matrix, shape (1, d)."""
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows needs a non-empty rank-2 tensor, got {a.shape}")
    n = a.shape[0]
    return _result(a.data.mean(axis=0, keepdims=True), "mean_rows", (a,),
                   lambda g: (np.repeat(g / n, n, axis=0),))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with the max subtracted before exponentiation."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a rank-2 tensor, got {a.shape}")
    # the shift may underflow to -inf for pathologically spread rows;
    # exp then gives the correct limit 0, so the overflow flag is noise
    with np.errstate(over="ignore"):
        shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g: np.ndarray) -> tuple:
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, "softmax_rows", (a,), back)


def attention_scores(queries: Tensor, keys: Tensor, inv_scale: float) -> Tensor:
    """Row softmax of ``inv_scale * queries @ keys.T`` as a single tape op.

    Equivalent to softmax_rows(scale(matmul(queries, transpose(keys)), c))
    but fused: this sits on the per-graph attention hot path, and one tape
    entry instead of four keeps forward and backward overhead down.
    """
    if queries.data.ndim != 2 or keys.data.ndim != 2 \
            or queries.shape[1] != keys.shape[1]:
        raise ShapeError(
            f"attention_scores: queries {queries.shape} vs keys {keys.shape}")
    c = float(inv_scale)
    logits = c * (queries.data @ keys.data.T)
    # same -inf-shift tolerance as softmax_rows
    with np.errstate(over="ignore"):
        shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g: np.ndarray) -> tuple:
        d_logits = y * (g - (g * y).sum(axis=1, keepdims=True))
        return c * (d_logits @ keys.data), c * (d_logits.T @ queries.data)

    return _result(y, "attention_scores", (queries, keys), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise standardisation of an (n, d) matrix followed by gain and bias.

    Each row is shifted to mean 0 and scaled by 1/sqrt(variance + eps); the
    variance is the biased (divide by d) estimate.
    """
    if eps <= 0.0:
        raise ContractError("layer_norm: eps must be positive")
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"layer_norm needs an (n, d) tensor with d >= 1, got {x.shape}")
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({x.shape[1]},)")
    mu = x.data.mean(axis=1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def back(g: np.ndarray) -> tuple:
        d_gain = (g * xhat).sum(axis=0)
        d_bias = g.sum(axis=0)
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, d_gain, d_bias

    return _result(out, "layer_norm", (x, gain, bias), back)


# ---------------------------------------------------------------------------
# Losses (fused scalar ops with hand-derived, numerically stable backwards)
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    lab = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or lab.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= logits.shape[1]):
        raise ContractError("softmax_cross_entropy: label outside class range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    n = z.shape[0]
    loss = (lse - z[np.arange(n), lab]).mean()
    probs = np.exp(z - zmax)
    probs /= probs.sum(axis=1, keepdims=True)

    def back(g: np.ndarray) -> tuple:
        d = probs.copy()
        d[np.arange(n), lab] -= 1.0
        return (d * (float(g.reshape(())) / n),)

    return _result(np.asarray(loss), "softmax_cross_entropy", (logits,), back)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw scores, computed in stable form."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {t.shape}")
    z = logits.data
    # max(z, 0) - z*t + log(1 + exp(-|z|)) is exact and never overflows
    loss = (np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    sig = 1.0 / (1.0 + np.exp(-z))
    n = z.size

    def back(g: np.ndarray) -> tuple:
        return ((sig - t) * (float(g.reshape(())) / n),)

    return _result(np.asarray(loss), "bce_with_logits", (logits,), back)


def mse_loss(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared error against constant targets."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs targets {t.shape}")
    diff = pred.data - t
    n = diff.size

    def back(g: np.ndarray) -> tuple:
        return (diff * (2.0 * float(g.reshape(())) / n),)

    return _result(np.asarray((diff * diff).mean()), "mse_loss", (pred,), back)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` rebuilds the scalar loss from scratch on every call (it closes over
    ``params``).  Returns the worst relative error
    ``|analytic - numeric| / max(1, |analytic|)`` over every parameter entry.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    loss = f()
    backward(loss, params=params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ref in zip(params, analytic):
        flat = p.data.reshape(-1)
        ref_flat = ref.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = f().item()
            flat[i] = saved - eps
            f_minus = f().item()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ref_flat[i] - numeric) / max(1.0, abs(ref_flat[i]))
            worst = max(worst, err)
    return worst


def parameter(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02) -> Tensor:
    """A trainable tensor with i.i.d. normal(0, std) entries."""
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)
