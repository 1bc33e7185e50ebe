"""Dense float64 arithmetic and a small reverse-mode gradient tape.

The tape only knows the handful of operations the classifier and the
mixup losses need: row gather from an embedding table, segment mean
pooling, affine maps, tanh, convex row mixing, soft-target softmax
cross-entropy and weighted scalar sums.  Every node keeps its forward
value and, after :meth:`GradTape.backward`, its gradient, so callers can
read gradients at any cut point (pooled embeddings, hidden state, logits).
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, StateError

DTYPE = np.float64


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")
    return arr


# ---------------------------------------------------------------------------
# plain functions


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction (works on 1-D or 2-D input)."""
    z = np.asarray(z, dtype=DTYPE)
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    >>> softmax(np.array([0.0, 0.0]))
    array([0.5, 0.5])
    """
    z = np.asarray(z, dtype=DTYPE)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError("softmax needs at least two logits")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax input must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def check_distribution(target: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    target = np.asarray(target, dtype=DTYPE)
    if np.any(target < 0) or not np.all(np.isfinite(target)):
        raise InvalidInputError("target entries must be finite and nonnegative")
    if np.any(np.abs(target.sum(axis=-1) - 1.0) > atol):
        raise InvalidInputError("target rows must sum to 1")
    return target


def cross_entropy_soft(logits: np.ndarray, target: np.ndarray) -> float:
    """-sum_k target_k * log softmax(logits)_k for a single example."""
    logits = np.asarray(logits, dtype=DTYPE)
    target = check_distribution(target)
    if logits.shape != target.shape or logits.ndim != 1:
        raise InvalidInputError("logits and target must be vectors of equal length")
    if logits.shape[0] < 2:
        raise InvalidInputError("need at least two classes")
    return float(-(target * log_softmax(logits)).sum())


def mixing_weights(lam) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(w_first, w_second)`` with ``w_first ~= lam`` and exact sum 1.

    Whichever weight is >= 0.5 is derived from the other by an exact
    subtraction, so swapping the operands and passing ``1 - lam`` yields
    the very same pair of weights.
    """
    lam = np.asarray(lam, dtype=DTYPE)
    if np.any((lam < 0) | (lam > 1)) or not np.all(np.isfinite(lam)):
        raise InvalidInputError("mixing ratio must lie in [0, 1]")
    comp = 1.0 - lam
    w_first = np.where(lam >= 0.5, lam, 1.0 - comp)
    return w_first, comp


def convex_mix(a: np.ndarray, b: np.ndarray, w_a, w_b) -> np.ndarray:
    """``w_a*a + w_b*b`` clipped into the componentwise envelope of a and b."""
    out = w_a * a + w_b * b
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def segment_mean_values(x: np.ndarray, segments: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Mean of the rows of ``x`` grouped by segment id 0..len(counts)-1."""
    scale = 1.0 / np.asarray(counts, dtype=DTYPE)
    sums = np.zeros((scale.shape[0], x.shape[1]), dtype=DTYPE)
    np.add.at(sums, segments, x)
    return sums * scale[:, None]


# ---------------------------------------------------------------------------
# tape


class Parameter:
    """A trainable array with an additive gradient accumulator.

    ``sparse=True`` is meant for embedding tables: gradients arrive as
    (row indices, row gradients) chunks and are only densified on demand.
    """

    def __init__(self, name: str, value: np.ndarray, sparse: bool = False):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.sparse = sparse
        self.zero_grad()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self._dense = None
        self._rows: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def accumulate(self, g: np.ndarray, rows: np.ndarray | None = None) -> None:
        if rows is not None:
            self._rows.append(rows)
            self._vals.append(g)
        elif self._dense is None:
            self._dense = np.array(g, dtype=DTYPE)
        else:
            self._dense += g

    def row_grad(self) -> tuple[np.ndarray, np.ndarray]:
        """Aggregated sparse gradient as (unique rows, summed row gradients)."""
        if not self._rows:
            return np.zeros(0, dtype=np.int64), np.zeros((0,) + self.shape[1:])
        rows = np.concatenate(self._rows)
        vals = np.concatenate(self._vals)
        uniq, inv = np.unique(rows, return_inverse=True)
        buf = np.zeros((uniq.shape[0],) + self.shape[1:], dtype=DTYPE)
        np.add.at(buf, inv, vals)
        return uniq, buf

    @property
    def grad(self) -> np.ndarray:
        out = np.zeros_like(self.value) if self._dense is None else self._dense.copy()
        if self._rows:
            uniq, buf = self.row_grad()
            out[uniq] += buf
        return out

    def sgd_step(self, lr: float) -> None:
        if self._dense is not None:
            self.value -= lr * self._dense
        if self._rows:
            uniq, buf = self.row_grad()
            self.value[uniq] -= lr * buf

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Node:
    """One recorded value on a tape."""

    __slots__ = ("_tape", "grad", "value")

    def __init__(self, tape: GradTape, value: np.ndarray):
        self._tape = tape
        self.value = value
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)


def _accum(target, g: np.ndarray) -> None:
    if isinstance(target, Parameter):
        target.accumulate(g)
    elif target.grad is None:
        target.grad = g
    else:
        target.grad = target.grad + g


class GradTape:
    """Records operations in execution order and replays them backwards once.

    A tape is single-use and single-owner: build the forward pass through
    its methods, call :meth:`backward` on a scalar node, then discard it.
    """

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._done = False

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, value: np.ndarray, what: str, backward_fn) -> Node:
        if self._done:
            raise StateError("tape already consumed by backward()")
        node = Node(self, _check_finite(value, what))
        self._ops.append(lambda: backward_fn(node))
        return node

    def leaf(self, value) -> Node:
        """Constant input whose gradient is still collected."""
        return Node(self, np.asarray(value, dtype=DTYPE))

    # -- ops --------------------------------------------------------------

    def gather(self, table: Parameter, ids: np.ndarray) -> Node:
        ids = np.asarray(ids, dtype=np.int64)

        def back(node):
            if node.grad is not None:
                table.accumulate(node.grad, rows=ids)

        return self._record(table.value[ids], "gather", back)

    def segment_mean(self, x: Node, segments: np.ndarray, counts: np.ndarray) -> Node:
        """Mean of the rows of ``x`` sharing a segment id (ids 0..len(counts)-1)."""
        segments = np.asarray(segments, dtype=np.int64)
        scale = 1.0 / np.asarray(counts, dtype=DTYPE)

        def back(node):
            if node.grad is not None:
                _accum(x, (node.grad * scale[:, None])[segments])

        return self._record(segment_mean_values(x.value, segments, counts), "segment_mean", back)

    def affine(self, x: Node, w: Parameter, b: Parameter) -> Node:
        def back(node):
            g = node.grad
            if g is None:
                return
            _accum(w, x.value.T @ g)
            _accum(b, g.sum(axis=0))
            if not isinstance(x, Parameter):
                _accum(x, g @ w.value.T)

        return self._record(x.value @ w.value + b.value, "affine", back)

    def tanh(self, x: Node) -> Node:
        def back(node):
            if node.grad is not None:
                _accum(x, node.grad * (1.0 - node.value * node.value))

        return self._record(np.tanh(x.value), "tanh", back)

    def mix(self, a: Node, b: Node, w_a: np.ndarray, w_b: np.ndarray) -> Node:
        """Row-wise convex combination ``w_a[i]*a[i] + w_b[i]*b[i]``."""
        w_a = np.asarray(w_a, dtype=DTYPE).reshape(-1, 1)
        w_b = np.asarray(w_b, dtype=DTYPE).reshape(-1, 1)
        if a.shape != b.shape:
            raise InvalidInputError("mix operands differ in shape")

        def back(node):
            if node.grad is not None:
                _accum(a, node.grad * w_a)
                _accum(b, node.grad * w_b)

        return self._record(convex_mix(a.value, b.value, w_a, w_b), "mix", back)

    def softmax_xent(self, logits: Node, targets: np.ndarray) -> Node:
        """Mean soft-target cross-entropy over the rows of ``logits``."""
        targets = check_distribution(targets)
        if targets.shape != logits.shape:
            raise InvalidInputError("targets and logits differ in shape")
        logp = log_softmax(logits.value)
        n = logits.value.shape[0]
        loss = -(targets * logp).sum() / n

        def back(node):
            if node.grad is not None:
                _accum(logits, (np.exp(logp) - targets) * (node.grad / n))

        return self._record(np.asarray(loss), "softmax_xent", back)

    def weighted_sum(self, terms: Sequence[tuple[float, Node]]) -> Node:
        total = sum(float(w) * t.value for w, t in terms)

        def back(node):
            if node.grad is not None:
                for w, t in terms:
                    _accum(t, float(w) * node.grad)

        return self._record(np.asarray(total, dtype=DTYPE), "weighted_sum", back)

    # -- reverse pass -----------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Propagate d(loss)/d(.) to every recorded node and parameter."""
        if self._done:
            raise StateError("backward() already ran on this tape")
        if not self._ops or loss._tape is not self:
            raise StateError("backward() called before a forward pass on this tape")
        if np.ndim(loss.value) != 0:
            raise InvalidInputError("backward() needs a scalar loss")
        loss.grad = np.asarray(1.0, dtype=DTYPE)
        self._done = True
        for op in reversed(self._ops):
            op()
        self._ops.clear()


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst: tuple[str, tuple[int, ...]] | None = None
    errors: list[float] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    fn: Callable[[], object],
    params: Sequence[Parameter],
    h: float = 1e-4,
    tol: float = 1e-4,
    coords: Sequence[tuple[Parameter, tuple[int, ...]]] | None = None,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare gradients with central finite differences.

    ``fn`` evaluates the loss from the current parameter values.  It may
    return a tape :class:`Node` (analytic gradients then come from a
    backward pass) or a plain float, in which case ``analytic`` must map
    parameter names to gradient arrays.  ``coords`` restricts the check to
    chosen (parameter, index) pairs; by default every entry is checked.
    """

    def evaluate() -> float:
        out = fn()
        v = float(out.value if isinstance(out, Node) else out)
        if not np.isfinite(v):
            raise InvalidInputError("grad_check function returned a non-finite value")
        return v

    if analytic is None:
        for p in params:
            p.zero_grad()
        out = fn()
        if not isinstance(out, Node):
            raise InvalidInputError("analytic gradients required for non-tape functions")
        out._tape.backward(out)
        analytic = {p.name: p.grad for p in params}
        for p in params:
            p.zero_grad()
    else:
        evaluate()

    if coords is None:
        coords = [(p, idx) for p in params for idx in np.ndindex(p.shape)]

    errs = []
    worst, worst_err = None, -1.0
    for p, idx in coords:
        orig = p.value[idx]
        p.value[idx] = orig + h
        up = evaluate()
        p.value[idx] = orig - h
        down = evaluate()
        p.value[idx] = orig
        numeric = (up - down) / (2.0 * h)
        err = relative_error(float(analytic[p.name][idx]), numeric)
        errs.append(err)
        if err > worst_err:
            worst, worst_err = (p.name, tuple(int(i) for i in idx)), err
    return GradCheckReport(max(errs, default=0.0), len(errs), tol, worst, errs)
