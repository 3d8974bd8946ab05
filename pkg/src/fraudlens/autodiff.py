"""Reverse-mode automatic differentiation over dense float64 matrices.

Deliberately small: the detector and the mask optimizer only ever need 2-D
tensors, so everything is eager numpy with a per-tensor operation record
that ``backward`` replays in reverse topological order. Every primitive
checks its result for non-finite values and raises ``NumericOverflowError``
naming the offending operation.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericOverflowError

__all__ = [
    "Tensor",
    "backward",
    "matmul",
    "add",
    "mul",
    "concat",
    "mean_rows",
    "softmax",
    "relu",
    "tanh",
    "sigmoid",
    "layer_norm",
    "dropout",
    "cross_entropy",
    "gather_adjoint",
    "gather_rows",
    "scatter_rows",
    "segment_mean",
    "xavier_init",
    "Adam",
]


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"tensors are 2-D matrices, got ndim={arr.ndim}")
    return arr


class Tensor:
    """A 2-D float64 value, optionally tracked for gradients.

    Tensors produced by primitives carry a reference to their parents and a
    gradient closure; that linked record is the tape. Leaf tensors created
    with ``requires_grad=True`` receive a ``.grad`` array after ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_matrix(values)
        if not np.isfinite(self.data.sum()) and not np.isfinite(self.data).all():
            raise NumericOverflowError("leaf")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def recorded(self) -> bool:
        """True when this tensor participates in gradient tracking."""
        return self.requires_grad or self._grad_fn is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, grad={self.requires_grad})"

    # Operator sugar for the handful of spots where it reads better.
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        return mul(self, other if isinstance(other, Tensor) else Tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _record(op: str, out_data: np.ndarray, parents: tuple[Tensor, ...], grad_fn,
            check: bool = True) -> Tensor:
    """Wrap an op result, attaching the backward closure when any parent is tracked.

    ``check=False`` is reserved for ops that provably cannot produce a
    non-finite value from finite inputs (pure data movement, bounded maps);
    leaves are validated at construction, so the invariant holds everywhere.
    The screen itself is two-tier: a finite sum implies all entries finite,
    and the exact elementwise check decides the rare screen positives.
    """
    if check and not np.isfinite(out_data.sum()) and not np.isfinite(out_data).all():
        raise NumericOverflowError(op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out._op = op
    if any(p.recorded for p in parents):
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def backward(loss: Tensor, leaves: list[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    ``loss`` must be a recorded scalar. When ``leaves`` is given, leaves the
    loss does not reach get an explicit zero gradient of matching shape.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.recorded:
        raise ValueError("backward on a detached tensor: nothing was recorded")

    # Iterative topological sort; tapes from large batches overflow recursion.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.recorded and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._grad_fn is None:
            node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is not None:
            for parent, pg in node._grad_fn(g):
                if not parent.recorded:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    for ax in (0, 1):
        da, db = a.shape[ax], b.shape[ax]
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def grad_fn(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _record("matmul", a.data @ b.data, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def grad_fn(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _record("add", a.data + b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def grad_fn(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _record("mul", a.data * b.data, (a, b), grad_fn)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if axis not in (0, 1):
        raise ValueError("concat axis must be 0 (rows) or 1 (cols)")
    if not tensors:
        raise ValueError("concat of zero tensors")
    other = 1 - axis
    first = tensors[0].shape[other]
    if any(t.shape[other] != first for t in tensors):
        raise ValueError("concat: mismatched shapes off the concat axis")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            out.append((t, g[lo:hi, :] if axis == 0 else g[:, lo:hi]))
        return out

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn, check=False)


def mean_rows(x: Tensor) -> Tensor:
    n = x.shape[0]

    def grad_fn(g):
        return ((x, np.broadcast_to(g / n, x.shape).copy()),)

    return _record("mean", x.data.mean(axis=0, keepdims=True), (x,), grad_fn)


def _segment_starts(segments: np.ndarray, n: int) -> np.ndarray:
    if segments.shape != (n,):
        raise ValueError(f"softmax segments must be 1-D of length {n}")
    if n and np.any(np.diff(segments) < 0):
        raise ValueError("softmax segments must be non-decreasing (contiguous runs)")
    return np.flatnonzero(np.r_[True, np.diff(segments) != 0])


def softmax(x: Tensor, segments: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    Without ``segments`` each row is normalized across its columns. With
    ``segments`` (a non-decreasing int array with one entry per row) each
    column is normalized independently within every row segment; this is how
    attention weights are normalized per target node and per head.
    """
    if segments is None:
        z = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)

        def grad_fn(g):
            dot = (g * s).sum(axis=1, keepdims=True)
            return ((x, s * (g - dot)),)

        return _record("softmax", s, (x,), grad_fn, check=False)

    seg = np.asarray(segments)
    starts = _segment_starts(seg, x.shape[0])
    counts = np.diff(np.r_[starts, x.shape[0]])
    rep = lambda v: np.repeat(v, counts, axis=0)
    z = x.data - rep(np.maximum.reduceat(x.data, starts, axis=0))
    e = np.exp(z)
    s = e / rep(np.add.reduceat(e, starts, axis=0))

    def grad_fn(g):
        dot = rep(np.add.reduceat(g * s, starts, axis=0))
        return ((x, s * (g - dot)),)

    return _record("softmax", s, (x,), grad_fn, check=False)


def relu(x: Tensor) -> Tensor:
    def grad_fn(g):
        return ((x, g * (x.data > 0)),)

    return _record("relu", np.maximum(x.data, 0.0), (x,), grad_fn, check=False)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def grad_fn(g):
        return ((x, g * (1.0 - t * t)),)

    return _record("tanh", t, (x,), grad_fn, check=False)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def grad_fn(g):
        return ((x, g * s * (1.0 - s)),)

    return _record("sigmoid", s, (x,), grad_fn, check=False)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean and unit variance, then affine."""
    if gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
        raise ValueError("layer_norm gain/bias must be (1, cols)")
    c = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def grad_fn(g):
        dxhat = g * gain.data
        dx = inv / c * (c * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        dg = (g * xhat).sum(axis=0, keepdims=True)
        db = g.sum(axis=0, keepdims=True)
        return ((x, dx), (gain, dg), (bias, db))

    return _record("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), grad_fn)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train-time survivors are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def grad_fn(g):
        return ((x, g * keep),)

    return _record("dropout", x.data * keep, (x,), grad_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row softmax cross-entropy, returned as a (rows, 1) tensor.

    ``labels`` is an int (single row) or an int array with one class index
    per row; the scalar loss for one example is the one-row case.
    """
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = logits.shape
    if y.shape != (n,):
        raise ValueError(f"cross_entropy: {n} rows need {n} labels, got {y.shape}")
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError("cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    out = -logp[rows, y].reshape(n, 1)

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return ((logits, p * g),)

    return _record("cross_entropy", out, (logits,), grad_fn, check=False)


def gather_adjoint(index, n_rows: int):
    """Precompute the scatter-add plan for gather_rows' backward: a sort
    permutation, segment starts, and the unique target rows."""
    idx = np.asarray(index, dtype=np.int64).ravel()
    perm = np.argsort(idx, kind="stable")
    sorted_idx = idx[perm]
    starts = np.flatnonzero(np.r_[True, np.diff(sorted_idx) != 0])
    uniq = sorted_idx[starts] if sorted_idx.size else sorted_idx
    return perm, starts, uniq, n_rows


def gather_rows(x: Tensor, index, adjoint=None) -> Tensor:
    """Row gather: out[i] = x[index[i]].

    Equivalent to matmul by the one-hot selection matrix S with
    S[i, index[i]] = 1; implemented with indexing because the dense product
    dominated runtime. Backward scatter-adds into duplicate source rows;
    ``adjoint`` (from gather_adjoint) replaces np.add.at with a sorted
    reduceat plan, which matters on hot paths.
    """
    idx = np.asarray(index, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ValueError("gather_rows: index out of range")

    if adjoint is None:
        def grad_fn(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return ((x, gx),)
    else:
        perm, starts, uniq, n_rows = adjoint
        if n_rows != x.shape[0] or perm.size != idx.size:
            raise ValueError("gather_rows: adjoint does not match index/input")

        def grad_fn(g):
            gx = np.zeros_like(x.data)
            if idx.size:
                gx[uniq] = np.add.reduceat(g[perm], starts, axis=0)
            return ((x, gx),)

    return _record("gather_rows", x.data[idx], (x,), grad_fn, check=False)


def scatter_rows(x: Tensor, index, n_rows: int) -> Tensor:
    """Place x's rows at unique positions ``index`` in an (n_rows, cols)
    zero matrix; the transpose counterpart of gather_rows."""
    idx = np.asarray(index, dtype=np.int64).ravel()
    if idx.shape[0] != x.shape[0]:
        raise ValueError("scatter_rows: one target position per row required")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ValueError("scatter_rows: index out of range")
    if idx.size > 1:
        diffs = np.diff(idx)
        if np.any(diffs <= 0) and np.unique(idx).size != idx.size:
            raise ValueError("scatter_rows: duplicate target positions")
    out = np.zeros((n_rows, x.shape[1]))
    out[idx] = x.data

    def grad_fn(g):
        return ((x, g[idx]),)

    return _record("scatter_rows", out, (x,), grad_fn, check=False)


def segment_mean(x: Tensor, seg_starts, seg_counts, out_index, n_rows: int) -> Tensor:
    """Mean of contiguous row segments, scattered to ``out_index`` rows of an
    (n_rows, cols) zero matrix. Equivalent to matmul by the constant matrix
    holding 1/segment-size at each member column."""
    starts = np.asarray(seg_starts, dtype=np.int64)
    counts = np.asarray(seg_counts, dtype=np.float64)
    oidx = np.asarray(out_index, dtype=np.int64)
    if starts.size == 0 or starts[0] != 0 or counts.sum() != x.shape[0]:
        raise ValueError("segment_mean: segments must tile the rows")
    sums = np.add.reduceat(x.data, starts, axis=0)
    out = np.zeros((n_rows, x.shape[1]))
    out[oidx] = sums / counts[:, None]

    def grad_fn(g):
        return ((x, np.repeat(g[oidx] / counts[:, None], counts.astype(np.int64), axis=0)),)

    return _record("segment_mean", out, (x,), grad_fn)


def xavier_init(rows: int, cols: int, seed) -> Tensor:
    """Uniform init on [-L, L] with L = sqrt(6 / (rows + cols)), deterministic per seed."""
    if rows < 1 or cols < 1:
        raise ValueError("xavier_init needs rows, cols >= 1")
    limit = np.sqrt(6.0 / (rows + cols))
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-limit, limit, size=(rows, cols)), requires_grad=True)


class Adam:
    """Adam over a fixed parameter list, consuming ``.grad`` left by backward."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("optimizer step: grads do not align with params")
        self.step_count += 1
        t = self.step_count
        for p, m, v, g in zip(self.params, self._m, self._v, grads):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"optimizer step: grad shape {g.shape} vs param {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
