"""A minimal reverse-mode differentiation engine over numpy arrays.

Only what the toy restoration network needs: affine maps (matmul, bias add,
3x3 patch extraction), ``tanh``, means and sums, softmax, top-k masking with
renormalization, row gather/scatter for sparse expert evaluation, elementwise
arithmetic and an L1 loss.

Each op returns a :class:`Tensor` that remembers its parents and a closure
that pushes the upstream gradient to them. ``Tensor.backward`` walks that
tape in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class TapeError(RuntimeError):
    """backward() called on a value with no recorded operations."""


class Tensor:
    __slots__ = ("_backward", "_parents", "data", "grad", "name", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise TapeError("tensor has no recorded tape; nothing requires a gradient")
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grad = np.asarray(grad, dtype=self.data.dtype)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if _is_scalar(other) else mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # never mutate in place: upstream gradients may be shared between parents
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _is_scalar(x) -> bool:
    return not isinstance(x, (Tensor, np.ndarray)) and np.ndim(x) == 0


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a, b = _lift(a), float(b)
        return _result(a.data + b, (a,), lambda g: _accumulate(a, g))
    a, b = _lift(a), _lift(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        # python scalars stay weakly typed so float32 graphs remain float32
        a, b = _lift(a), float(b)
        return _result(a.data * b, (a,), lambda g: _accumulate(a, g * b))
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for 2-D ``x`` as a single tape node."""
    x, weight, bias = _lift(x), _lift(weight), _lift(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"affine shape mismatch: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data
    out += bias.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias.requires_grad:
            # a ones-vector product is much faster than sum(axis=0) on tall, narrow g
            _accumulate(bias, np.ones(g.shape[0], dtype=g.dtype) @ g)

    return _result(out, (x, weight, bias), backward)


def tanh(x) -> Tensor:
    x = _lift(x)
    y = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - y * y))

    return _result(y, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _lift(x)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _lift(x)
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), backward)


def getitem(x, key) -> Tensor:
    x = _lift(x)

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, slice)) or k is None or k is Ellipsis for k in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            # basic indexing never repeats an element
            full[key] = g
        else:
            np.add.at(full, key, g)
        _accumulate(x, full)

    return _result(x.data[key], (x,), backward)


def take_rows(x, idx: np.ndarray) -> Tensor:
    """Gather along axis 0."""
    x = _lift(x)
    idx = np.asarray(idx, dtype=np.intp)

    unique = np.unique(idx).size == idx.size

    def backward(g):
        full = np.zeros_like(x.data)
        if unique:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accumulate(x, full)

    return _result(x.data[idx], (x,), backward)


def scatter_rows(x, idx: np.ndarray, n: int) -> Tensor:
    """Place rows of ``x`` at positions ``idx`` of a zero tensor with ``n`` rows."""
    x = _lift(x)
    idx = np.asarray(idx, dtype=np.intp)
    if np.unique(idx).size != idx.size:
        raise ValueError("scatter_rows needs distinct row indices")
    out = np.zeros((n,) + x.shape[1:], dtype=x.data.dtype)
    out[idx] = x.data

    def backward(g):
        _accumulate(x, g[idx])

    return _result(out, (x,), backward)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


def topk_mask(weights: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row; ties go to the lowest index."""
    n = weights.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k needs 1 <= k <= {n}, got k={k}")
    order = np.argsort(-weights, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(weights.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_renormalize(w, k: int) -> tuple[Tensor, np.ndarray]:
    """Zero all but the top-k entries per row and rescale survivors to sum to 1.

    The selection mask is treated as a constant, so gradients reach only the
    surviving weights (through the renormalization).
    """
    w = _lift(w)
    mask = topk_mask(w.data, k)
    kept = np.where(mask, w.data, 0.0)
    total = kept.sum(axis=-1, keepdims=True)
    y = kept / total

    def backward(g):
        # d(y_j)/d(w_i) = (delta_ij - y_j) / total on surviving i
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(w, np.where(mask, (g - inner) / total, 0.0))

    return _result(y, (w,), backward), mask


def im2col3x3(x) -> Tensor:
    """Zero-padded 3x3 patches of an NHWC tensor, shape ``(N, H, W, 9 * C)``.

    Patch layout is ``(dy, dx, c)`` with ``c`` fastest.
    """
    x = _lift(x)
    n, h, w, c = x.shape
    padded = np.zeros((n, h + 2, w + 2, c), dtype=x.data.dtype)
    padded[:, 1:-1, 1:-1, :] = x.data
    # windows come out as (n, h, w, c, dy, dx); reorder to (dy, dx, c)
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))

    def backward(g):
        # one contiguous (n, h, w, c) slab per offset scatters much faster than strided views
        g = np.ascontiguousarray(g.reshape(n, h, w, 9, c).transpose(3, 0, 1, 2, 4))
        gp = np.zeros_like(padded)
        for k in range(9):
            dy, dx = divmod(k, 3)
            gp[:, dy:dy + h, dx:dx + w, :] += g[k]
        _accumulate(x, gp[:, 1:-1, 1:-1, :])

    return _result(cols.reshape(n, h, w, 9 * c), (x,), backward)


def l1_per_sample(pred, target) -> Tensor:
    """Mean absolute error per leading-axis sample; ``target`` is a constant."""
    pred = _lift(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    diff = pred.data - target
    n = diff[0].size

    def backward(g):
        _accumulate(pred, np.sign(diff) * (g.reshape((-1,) + (1,) * (diff.ndim - 1)) / n))

    return _result(np.abs(diff).reshape(diff.shape[0], -1).mean(axis=1), (pred,), backward)


def l1_loss(pred, target) -> Tensor:
    return mean(l1_per_sample(pred, target))
