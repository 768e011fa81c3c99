"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A ``Tensor`` wraps an ``np.ndarray`` plus an optional backward closure and the
tuple of parent tensors that produced it.  Calling :func:`backward` on a scalar
loss topologically sorts the graph that was built during the forward pass and
runs each closure exactly once, accumulating gradients into ``.grad``.  The
graph ("tape") is rebuilt from scratch on every forward pass; nothing is cached
between steps.

Design rules:

* every array is float64; integer inputs (token ids) stay plain numpy arrays
  and never enter the graph,
* elementwise ops broadcast only when one operand's shape is a trailing suffix
  of the other's (bias against silent shape bugs),
* ops are plain functions; ``Tensor`` carries thin operator sugar.
"""

from __future__ import annotations

import itertools

import numpy as np

_ids = itertools.count()


class ContractViolation(ValueError):
    """Raised when an op is called outside its documented contract."""


def _suffix_broadcast_check(sa: tuple, sb: tuple, op: str) -> None:
    """Allow equal shapes or one shape being a trailing suffix of the other."""
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ContractViolation(f"{op}: shapes {sa} and {sb} do not align")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes that broadcasting introduced."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad: bool = False, _prev=(), _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_ids)
        self._backward = None
        self._prev = _prev
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, cut from the tape.  Gradients stop here."""
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: np.ndarray) -> None:
        # First contribution borrows the array; later ones allocate a fresh
        # sum so a gradient shared between parents is never mutated in place.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _needs(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def _make(data, parents, op, backward_fn) -> Tensor:
    """Create a result tensor, attaching the closure only if a parent needs it."""
    track = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _prev=tuple(parents) if track else (), _op=op)
    if track:
        out._backward = backward_fn(out)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _suffix_broadcast_check(a.shape, b.shape, "add")
    data = a.data + b.data

    def bk(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        return run

    return _make(data, (a, b), "add", bk)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _suffix_broadcast_check(a.shape, b.shape, "sub")
    data = a.data - b.data

    def bk(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))
        return run

    return _make(data, (a, b), "sub", bk)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _suffix_broadcast_check(a.shape, b.shape, "mul")
    data = a.data * b.data

    def bk(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        return run

    return _make(data, (a, b), "mul", bk)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def bk(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * s)
        return run

    return _make(a.data * s, (a,), "scale", bk)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def bk(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * mask)
        return run

    return _make(a.data * mask, (a,), "relu", bk)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bk(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * data)
        return run

    return _make(data, (a,), "exp", bk)


def log(a: Tensor) -> Tensor:
    """Natural log.  The caller guarantees strictly positive inputs."""
    a = _as_tensor(a)
    data = np.log(a.data)

    def bk(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad / a.data)
        return run

    return _make(data, (a,), "log", bk)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bk(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * data * (1.0 - data))
        return run

    return _make(data, (a,), "sigmoid", bk)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ContractViolation(f"matmul: needs >=1-d operands, got {a.shape} and {b.shape}")
    # promote 1-d operands through reshape so the core stays 2-d-or-batched
    if a.ndim == 1:
        out = matmul(reshape(a, (1,) + a.shape), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, b.shape + (1,)))
        return reshape(out, out.shape[:-1])
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not align") from err

    def bk(out):
        def run():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape))
        return run

    return _make(data, (a, b), "matmul", bk)


# ---------------------------------------------------------------------------
# normalization and softmax


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    p = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=axis, keepdims=True)

    def bk(out):
        def run():
            if a.requires_grad:
                g = out.grad
                dot = (g * p).sum(axis=axis, keepdims=True)
                a._accumulate(p * (g - dot))
        return run

    return _make(p, (a,), "softmax", bk)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    p = np.exp(data)

    def bk(out):
        def run():
            if a.requires_grad:
                g = out.grad
                a._accumulate(g - p * g.sum(axis=axis, keepdims=True))
        return run

    return _make(data, (a,), "log_softmax", bk)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean, unit variance along ``axis``.  No affine here;
    scale and shift are applied by the caller so they can be token-aware."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def bk(out):
        def run():
            if a.requires_grad:
                g = out.grad
                gm = g.mean(axis=axis, keepdims=True)
                gy = (g * y).mean(axis=axis, keepdims=True)
                a._accumulate(inv * (g - gm - y * gy))
        return run

    return _make(y, (a,), "layer_norm", bk)


# ---------------------------------------------------------------------------
# reductions and losses


def _axis_size(shape: tuple, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def tsum(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis)

    def bk(out):
        def run():
            if a.requires_grad:
                g = out.grad
                if axis is not None:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.shape).copy())
        return run

    return _make(data, (a,), "sum", bk)


def tmean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = _axis_size(a.shape, axis)
    data = a.data.mean(axis=axis)

    def bk(out):
        def run():
            if a.requires_grad:
                g = out.grad
                if axis is not None:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.shape) / n)
        return run

    return _make(data, (a,), "mean", bk)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over every element; returns a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    data = np.float64((diff * diff).mean())

    def bk(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g * 2.0 * diff / n)
            if b.requires_grad:
                b._accumulate(g * -2.0 * diff / n)
        return run

    return _make(data, (a, b), "mse", bk)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    Args:
        logits: shape (N, V), unnormalized.
        targets: integer array of shape (N,).
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ContractViolation(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, v = logits.shape
    if targets.min() < 0 or targets.max() >= v:
        raise ContractViolation("cross_entropy: target id outside vocabulary")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    data = np.float64(-logp[np.arange(n), targets].mean())

    def bk(out):
        def run():
            if logits.requires_grad:
                p = np.exp(logp)
                p[np.arange(n), targets] -= 1.0
                logits._accumulate(out.grad * p / n)
        return run

    return _make(data, (logits,), "cross_entropy", bk)


# ---------------------------------------------------------------------------
# shape surgery


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat: empty input list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bk(out):
        def run():
            g = out.grad
            offset = 0
            for t, size in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(offset, offset + size)
                    t._accumulate(g[tuple(idx)])
                offset += size
        return run

    return _make(data, tuple(tensors), "concat", bk)


def tslice(a: Tensor, idx) -> Tensor:
    """Basic indexing (ints and slices).  Backward scatters into zeros."""
    a = _as_tensor(a)
    data = a.data[idx]

    def bk(out):
        def run():
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.add.at(full, idx, out.grad)
                a._accumulate(full)
        return run

    return _make(data, (a,), "slice", bk)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def bk(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad.reshape(a.shape))
        return run

    return _make(data, (a,), "reshape", bk)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def bk(out):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad.transpose(inverse))
        return run

    return _make(data, (a,), "transpose", bk)


# ---------------------------------------------------------------------------
# lookups


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: result[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ContractViolation(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation("embedding_lookup: id outside table")
    data = table.data[ids]

    def bk(out):
        def run():
            if table.requires_grad:
                full = np.zeros_like(table.data)
                np.add.at(full, ids.ravel(), out.grad.reshape(-1, table.shape[1]))
                table._accumulate(full)
        return run

    return _make(data, (table,), "embedding_lookup", bk)


def take_last_axis(a: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry along the last axis: out[...] = a[..., ids[...]]."""
    a = _as_tensor(a)
    ids = np.asarray(ids)
    if ids.shape != a.shape[:-1]:
        raise ContractViolation(
            f"take_last_axis: ids {ids.shape} must match leading shape of {a.shape}")
    data = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def bk(out):
        def run():
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.put_along_axis(full, ids[..., None], out.grad[..., None], axis=-1)
                a._accumulate(full)
        return run

    return _make(data, (a,), "take_last_axis", bk)


def straight_through(x: Tensor, target: Tensor) -> Tensor:
    """Forward emits ``target`` bit-exactly; backward passes gradients to ``x``.

    Fused form of ``x + (target - x).detach()`` without the floating-point
    round-off of the two adds.
    """
    x, target = _as_tensor(x), _as_tensor(target)
    if x.shape != target.shape:
        raise ContractViolation(
            f"straight_through: shapes {x.shape} and {target.shape} differ")

    def bk(out):
        def run():
            if x.requires_grad:
                x._accumulate(out.grad)
        return run

    return _make(target.data.copy(), (x,), "straight_through", bk)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity between rows: (N, D) x (M, D) -> (N, M)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation(
            f"cosine_similarity: expected (N,D) and (M,D), got {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data, axis=1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=1, keepdims=True)
    an = a.data / na
    bn = b.data / nb
    s = an @ bn.T

    def bk(out):
        def run():
            g = out.grad
            if a.requires_grad:
                ga = (g @ bn - an * (g * s).sum(axis=1, keepdims=True)) / na
                a._accumulate(ga)
            if b.requires_grad:
                gb = (g.T @ an - bn * (g * s).sum(axis=0)[:, None]) / nb
                b._accumulate(gb)
        return run

    return _make(s, (a, b), "cosine_similarity", bk)


# ---------------------------------------------------------------------------
# backward driver


def topo_order(root: Tensor) -> list:
    """Depth-first topological order of the graph below ``root``."""
    order, seen, stack = [], set(), [(root, iter(root._prev))]
    seen.add(id(root))
    while stack:
        node, children = stack[-1]
        advanced = False
        for child in children:
            if id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor) -> dict:
    """Run reverse mode from a scalar ``loss``.

    Populates ``.grad`` on every tensor in the graph that requires it and
    returns ``{node_id: grad}`` for the leaf parameters.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward: loss must be scalar-shaped, got {loss.shape}")
    order = topo_order(loss)
    for node in order:
        if node.requires_grad:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    return {
        node.node_id: node.grad
        for node in order
        if node.requires_grad and not node._prev and node.grad is not None
    }
