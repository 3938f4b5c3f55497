"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records primitive operations in execution order.  backward() replays
the records in reverse, accumulating adjoints, and reports gradients for the
watched leaf tensors.  Tensors built without a tape are constants: the same
ops work on them but record nothing, which is how inference paths run.
"""
from __future__ import annotations

import numpy as np


class ContractViolation(ValueError):
    """An operation was called outside its documented domain."""


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense row-major float64 array, optionally tracked on a Tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = _f64(data)
        self.tape = tape
        self.node_id = tape.alloc() if tape is not None else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tape={'yes' if self.tape else 'no'})"

    # Operator sugar for the elementwise primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of primitive ops; append order is topological."""

    def __init__(self):
        self._records: list[tuple[int, tuple, object]] = []
        self._n_nodes = 0
        self._watched: list[Tensor] = []

    def alloc(self) -> int:
        i = self._n_nodes
        self._n_nodes += 1
        return i

    def leaf(self, data) -> Tensor:
        """Create a watched leaf (a parameter from backward's point of view)."""
        t = Tensor(data, self)
        self._watched.append(t)
        return t

    def watch(self, t: Tensor) -> Tensor:
        if t.tape is not self:
            raise ContractViolation("cannot watch a tensor from another tape")
        self._watched.append(t)
        return t

    def record(self, out: Tensor, inputs: tuple, backward_fn) -> None:
        ids = tuple(t.node_id if isinstance(t, Tensor) else None for t in inputs)
        self._records.append((out.node_id, ids, backward_fn))

    @property
    def n_records(self) -> int:
        return len(self._records)


def _lift(x, tape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, tape)


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractViolation("operands recorded on different tapes")
    return tape


def _check_elementwise(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ContractViolation(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to `shape` (covers the scalar-broadcast case)."""
    if g.shape == shape:
        return g.copy()
    return np.full(shape, g.sum()) if shape == () else np.broadcast_to(g, shape).copy()


class Gradients:
    """Gradient map produced by backward(); keyed by watched-leaf node id."""

    def __init__(self, tape: Tape, raw: list):
        self._tape = tape
        self._raw = raw
        self._by_id = {}
        for t in tape._watched:
            g = raw[t.node_id]
            self._by_id[t.node_id] = Tensor(np.zeros(t.shape) if g is None else g)

    def __getitem__(self, node_id: int) -> Tensor:
        return self._by_id[node_id]

    def __iter__(self):
        return iter(self._by_id)

    def __len__(self):
        return len(self._by_id)

    def items(self):
        return self._by_id.items()

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient array for any tensor on the tape (zeros if unreached)."""
        if t.tape is not self._tape:
            raise ContractViolation("tensor does not belong to this tape")
        g = self._raw[t.node_id]
        return np.zeros(t.shape) if g is None else g


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Gradients of a scalar loss w.r.t. every watched leaf on the tape.

    Walks the record list in reverse (valid because append order is
    topological), visiting each node once.  Leaves that do not influence the
    loss get zero gradients.
    """
    if loss.tape is not tape:
        raise ContractViolation("loss was not recorded on this tape")
    if loss.shape != ():
        raise ContractViolation("loss must be a scalar")
    raw: list = [None] * tape._n_nodes
    raw[loss.node_id] = np.ones(())
    for out_id, in_ids, fn in reversed(tape._records):
        g = raw[out_id]
        if g is None:
            continue
        for iid, gi in zip(in_ids, fn(g)):
            if iid is None or gi is None:
                continue
            acc = raw[iid]
            if acc is None:
                # Copy: backward fns may hand back views or shared buffers.
                raw[iid] = np.array(gi)
            else:
                acc += gi
    return Gradients(tape, raw)


def detach(x: Tensor) -> Tensor:
    """Constant copy of x; gradients do not flow past it."""
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data, tape)
    if tape is not None:
        ash, bsh = a.shape, b.shape
        tape.record(out, (a, b), lambda g: (_reduce_to(g, ash), _reduce_to(g, bsh)))
    return out


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "sub")
    out = Tensor(a.data - b.data, tape)
    if tape is not None:
        ash, bsh = a.shape, b.shape
        tape.record(out, (a, b), lambda g: (_reduce_to(g, ash), _reduce_to(-g, bsh)))
    return out


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data, tape)
    if tape is not None:
        ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
        tape.record(out, (a, b), lambda g: (_reduce_to(g * bd, ash), _reduce_to(g * ad, bsh)))
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, x.tape)
    if x.tape is not None:
        x.tape.record(out, (x,), lambda g: (g * (1.0 - y * y),))
    return out


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a plain array."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_values(x.data)
    out = Tensor(y, x.tape)
    if x.tape is not None:
        x.tape.record(out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)
    out = Tensor(y, x.tape)
    if x.tape is not None:
        s = sigmoid_values(x.data)
        x.tape.record(out, (x,), lambda g: (g * s,))
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y, x.tape)
    if x.tape is not None:
        x.tape.record(out, (x,), lambda g: (g * y,))
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractViolation("log: inputs must be positive")
    out = Tensor(np.log(x.data), x.tape)
    if x.tape is not None:
        xd = x.data
        x.tape.record(out, (x,), lambda g: (g / xd,))
    return out


# ---------------------------------------------------------------------------
# Reductions and shape ops


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), x.tape)
    if x.tape is not None:
        sh = x.shape
        x.tape.record(out, (x,), lambda g: (np.full(sh, float(g)),))
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.data.ndim != 1:
        raise ContractViolation(f"dot: need matching vectors, got {a.shape} and {b.shape}")
    tape = _tape_of(a, b)
    out = Tensor(a.data @ b.data, tape)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def concat(parts: list) -> Tensor:
    """Concatenate 1-d tensors; backward splits the adjoint."""
    if not parts:
        raise ContractViolation("concat: need at least one part")
    for p in parts:
        if p.data.ndim != 1:
            raise ContractViolation("concat: all parts must be vectors")
    tape = _tape_of(*parts)
    out = Tensor(np.concatenate([p.data for p in parts]), tape)
    if tape is not None:
        sizes = [p.size for p in parts]
        offs = np.cumsum([0] + sizes)

        def bwd(g):
            return tuple(g[offs[i] : offs[i + 1]] for i in range(len(sizes)))

        tape.record(out, tuple(parts), bwd)
    return out


def stack_rows(rows: list) -> Tensor:
    """Stack equal-length vectors into a (T, D) matrix."""
    if not rows:
        raise ContractViolation("stack_rows: need at least one row")
    tape = _tape_of(*rows)
    out = Tensor(np.stack([r.data for r in rows]), tape)
    if tape is not None:
        tape.record(out, tuple(rows), lambda g: tuple(g[i] for i in range(len(rows))))
    return out


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector as n rows; backward sums the rows."""
    if v.data.ndim != 1:
        raise ContractViolation("tile_rows: need a vector")
    out = Tensor(np.tile(v.data, (n, 1)), v.tape)
    if v.tape is not None:
        v.tape.record(out, (v,), lambda g: (g.sum(axis=0),))
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ContractViolation(f"concat_cols: bad shapes {a.shape}, {b.shape}")
    tape = _tape_of(a, b)
    out = Tensor(np.concatenate([a.data, b.data], axis=1), tape)
    if tape is not None:
        ka = a.shape[1]
        tape.record(out, (a, b), lambda g: (g[:, :ka], g[:, ka:]))
    return out


# ---------------------------------------------------------------------------
# Linear maps and embedding lookups


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for a vector x, with w of shape (out, in)."""
    if x.data.ndim != 1 or w.data.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ContractViolation(f"affine: bad shapes x{x.shape} w{w.shape} b{b.shape}")
    tape = _tape_of(x, w, b)
    out = Tensor(w.data @ x.data + b.data, tape)
    if tape is not None:
        xd, wd = x.data, w.data
        tape.record(out, (x, w, b), lambda g: (wd.T @ g, np.outer(g, xd), g.copy()))
    return out


def affine_rows(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map: x (T, in) -> x @ w.T + b, w of shape (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ContractViolation(f"affine_rows: bad shapes x{x.shape} w{w.shape} b{b.shape}")
    tape = _tape_of(x, w, b)
    out = Tensor(x.data @ w.data.T + b.data, tape)
    if tape is not None:
        xd, wd = x.data, w.data
        tape.record(out, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))
    return out


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of an embedding table; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ContractViolation("gather_rows: need a 2-d table and 1-d index list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractViolation("gather_rows: index out of range")
    out = Tensor(table.data[idx], table.tape)
    if table.tape is not None:
        shape = table.shape

        def bwd(g):
            gt = np.zeros(shape)
            np.add.at(gt, idx, g)
            return (gt,)

        table.tape.record(out, (table,), bwd)
    return out


def embedding_row(table: Tensor, i: int) -> Tensor:
    """Single row of an embedding table as a vector."""
    if not 0 <= i < table.shape[0]:
        raise ContractViolation("embedding_row: index out of range")
    out = Tensor(table.data[i].copy(), table.tape)
    if table.tape is not None:
        shape = table.shape

        def bwd(g):
            gt = np.zeros(shape)
            gt[i] = g
            return (gt,)

        table.tape.record(out, (table,), bwd)
    return out


# ---------------------------------------------------------------------------
# Softmax losses (fused for stability and speed)


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    """Row-wise (or vector) log-softmax on a plain array."""
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_values(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_values(logits))


def softmax_xent(logits: Tensor, target: int) -> Tensor:
    """Cross-entropy of one softmax row against an integer class."""
    if logits.data.ndim != 1:
        raise ContractViolation("softmax_xent: logits must be a vector")
    if not 0 <= target < logits.shape[0]:
        raise ContractViolation("softmax_xent: target out of range")
    logp = log_softmax_values(logits.data)
    out = Tensor(-logp[target], logits.tape)
    if logits.tape is not None:
        p = np.exp(logp)

        def bwd(g):
            gi = p * float(g)
            gi[target] -= float(g)
            return (gi,)

        logits.tape.record(out, (logits,), bwd)
    return out


def softmax_xent_rows(logits: Tensor, targets) -> Tensor:
    """Summed cross-entropy of each row of (T, V) logits against targets."""
    idx = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ContractViolation("softmax_xent_rows: need (T, V) logits and T targets")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise ContractViolation("softmax_xent_rows: target out of range")
    logp = log_softmax_values(logits.data)
    rows = np.arange(idx.shape[0])
    out = Tensor(-logp[rows, idx].sum(), logits.tape)
    if logits.tape is not None:
        p = np.exp(logp)

        def bwd(g):
            gi = p * float(g)
            gi[rows, idx] -= float(g)
            return (gi,)

        logits.tape.record(out, (logits,), bwd)
    return out
