"""
Dense float64 tensors with reverse-mode differentiation.

Every operation records a closure that maps the output gradient to the input
gradients. ``Tensor.backward`` walks the recorded graph in reverse topological
order and accumulates gradients into leaf tensors (and into intermediates that
called ``retain_grad``).
"""

import logging
from contextlib import contextmanager
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.special import erf

from .errors import ContractError, ShapeError, TargetIndexError


logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]

_grad_enabled = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn", "_retain")

    # numpy defers binary operators with a Tensor on the right to Tensor's reflected methods
    __array_ufunc__ = None

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_fn: Optional[GradFn] = None
        self._retain = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        """Populate grads of every reachable tensor that requires them."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topological_order()):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._grad_fn is None:
                node._accumulate(grad)
                continue
            if node._retain:
                node._accumulate(grad)
            for parent, parent_grad in zip(node._parents, node._grad_fn(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad

    def _topological_order(self) -> List["Tensor"]:
        # Iterative post-order DFS; deep graphs would overflow recursion.
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Operators delegate to the module-level ops.
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        return permute(self, axes)

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        return swapaxes(self, axis1, axis2)


def as_tensor(value: Operand) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    out._retain = False
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._grad_fn = grad_fn if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn)


def neg(a: Operand) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), grad_fn)


def matmul(a: Operand, b: Operand) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                flat_a = a.data.reshape(-1, a.shape[-1])
                gb = flat_a.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), grad_fn)


def linear(x: Operand, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` as one node; leading axes are flattened into a single GEMM."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    in_dim, out_dim = weight.shape
    flat = x.data.reshape(-1, in_dim)
    out = flat @ weight.data
    if bias is not None:
        out += bias.data

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        g2 = g.reshape(-1, out_dim)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out.reshape(x.shape[:-1] + (out_dim,)), parents, grad_fn)


def reduce_sum(x: Operand, axis: Optional[Union[int, Tuple[int, ...]]] = None,
               keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn)


def reduce_mean(x: Operand, axis: Optional[Union[int, Tuple[int, ...]]] = None,
                keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[i] for i in axes]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Operand, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Operand, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, axis1, axis2), (x,),
                   lambda g: (np.swapaxes(g, axis1, axis2),))


def _is_basic_index(index: Any) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
        for i in items
    )


def getitem(x: Operand, index: Any) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), grad_fn)


def gather(x: Operand, indices: np.ndarray) -> Tensor:
    """Per-row selection along axis 1: ``out[b, k] = x[b, indices[b, k]]``."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    if x.ndim < 2 or indices.ndim != 2 or indices.shape[0] != x.shape[0]:
        raise ShapeError(f"gather: indices {indices.shape} do not match tensor {x.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[1]):
        raise TargetIndexError(f"gather: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])[:, None]

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        width, tail = x.shape[1], x.shape[2:]
        flat_ids = (rows * width + indices).reshape(-1)
        summed = scatter_add_rows(x.shape[0] * width, flat_ids, g.reshape(flat_ids.size, int(np.prod(tail))))
        return (summed.reshape(x.shape[:2] + tail),)

    return _result(x.data[rows, indices], (x,), grad_fn)


def scatter_add_rows(num_rows: int, ids: np.ndarray, values: np.ndarray) -> np.ndarray:
    """
    ``out[ids[i]] += values[i]`` into a zero (num_rows, D) array, duplicates summed.

    Computed as a sparse selection-matrix product.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    values = np.asarray(values, dtype=np.float64)
    if ids.size == 0:
        return np.zeros((num_rows,) + values.shape[1:])
    selection = sparse.csr_matrix((np.ones(ids.size), (ids, np.arange(ids.size))), shape=(num_rows, ids.size))
    return np.asarray(selection @ values)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TargetIndexError(f"embedding: id out of range [0, {table.shape[0]})")

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        summed = scatter_add_rows(table.shape[0], ids, g.reshape(ids.size, int(np.prod(table.shape[1:]))))
        return (summed.reshape(table.shape),)

    return _result(table.data[ids], (table,), grad_fn)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise ShapeError(f"concat: shapes {shapes} do not align on axis {axis}") from None
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return np.split(g, offsets, axis=axis)

    return _result(out, parts, grad_fn)


def split(x: Operand, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not add up to {x.shape[axis]} on axis {axis} of {x.shape}")
    axis = axis % x.ndim
    pieces = []
    start = 0
    for size in sizes:
        index = (slice(None),) * axis + (slice(start, start + size),)
        pieces.append(getitem(x, index))
        start += size
    return pieces


def broadcast_to(x: Operand, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _result(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def layer_norm(x: Operand, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    x = as_tensor(x)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    affine = weight is not None and bias is not None
    out = x_hat * weight.data + bias.data if affine else x_hat

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        dim = x.shape[-1]
        g_hat = g * weight.data if affine else g
        gx = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        if not affine:
            return (gx,)
        gw = (g * x_hat).reshape(-1, dim).sum(axis=0)
        gb = g.reshape(-1, dim).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight, bias) if affine else (x,)
    return _result(out, parents, grad_fn)


def gelu(x: Operand) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``. The derivative reuses the cached cdf."""
    x = as_tensor(x)
    cdf = erf(x.data * _INV_SQRT2)
    cdf += 1.0
    cdf *= 0.5

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        slope = np.square(x.data)
        slope *= -0.5
        np.exp(slope, out=slope)
        slope *= x.data
        slope *= _INV_SQRT_2PI
        slope += cdf
        slope *= g
        return (slope,)

    return _result(x.data * cdf, (x,), grad_fn)


def _softmax_inplace(values: np.ndarray, axis: int = -1) -> np.ndarray:
    values -= values.max(axis=axis, keepdims=True)
    np.exp(values, out=values)
    values /= values.sum(axis=axis, keepdims=True)
    return values


def _softmax_backward(g: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """``probs * (g - sum(g * probs))`` over the last axis, reusing ``g``'s buffer."""
    g -= np.einsum("...i,...i->...", g, probs)[..., None]
    g *= probs
    return g


def softmax(x: Operand, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    probs = _softmax_inplace(np.array(x.data, dtype=np.float64), axis)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        moved = np.moveaxis(np.array(g, dtype=np.float64), axis, -1)
        return (np.moveaxis(_softmax_backward(moved, np.moveaxis(probs, axis, -1)), -1, axis),)

    return _result(probs, (x,), grad_fn)


def attention(qkv: Operand, heads: int, scale: Optional[float] = None) -> Tensor:
    """
    Multi-head self-attention from a fused (B, T, 3·D) query/key/value tensor.

    Scores, softmax and the value mix form one node with a hand-written
    backward; only the attention probabilities are kept for it. Returns
    (B, T, D) with heads concatenated in order.
    """
    qkv = as_tensor(qkv)
    if qkv.ndim != 3 or heads < 1 or qkv.shape[-1] % (3 * heads):
        raise ShapeError(f"attention: cannot split {qkv.shape} into query/key/value over {heads} heads")
    batch, tokens, width = qkv.shape
    dim = width // 3
    head_dim = dim // heads
    if scale is None:
        scale = head_dim ** -0.5
    parts = qkv.data.reshape(batch, tokens, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
    q = parts[0] * scale
    k, v = parts[1], parts[2]
    probs = _softmax_inplace(q @ k.swapaxes(-1, -2))
    mixed = probs @ v

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        g_mixed = g.reshape(batch, tokens, heads, head_dim).transpose(0, 2, 1, 3)
        gv = probs.swapaxes(-1, -2) @ g_mixed
        g_scores = _softmax_backward(g_mixed @ v.swapaxes(-1, -2), probs)
        gq = g_scores @ k
        gq *= scale
        gk = g_scores.swapaxes(-1, -2) @ q
        stacked = np.stack([gq, gk, gv])
        return (stacked.transpose(1, 3, 0, 2, 4).reshape(batch, tokens, width),)

    return _result(mixed.transpose(0, 2, 1, 3).reshape(batch, tokens, dim), (qkv,), grad_fn)


def cross_entropy(logits: Operand, targets: Any, weights: Optional[np.ndarray] = None) -> Tensor:
    """
    Weighted negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` has shape (..., M) and ``targets`` the leading shape. Without
    ``weights`` every position gets 1/count, i.e. the mean. Positions with zero
    weight contribute neither loss nor gradient.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    num_classes = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise TargetIndexError(f"cross_entropy: targets must be integer class indices, got {targets.dtype}")
    flat_targets = targets.reshape(-1).astype(np.int64)
    if flat_targets.size and (flat_targets.min() < 0 or flat_targets.max() >= num_classes):
        raise TargetIndexError(f"cross_entropy: target index out of range [0, {num_classes})")

    if weights is None:
        flat_weights = np.full(flat_targets.shape, 1.0 / max(1, flat_targets.size))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != targets.shape:
            raise ShapeError(f"cross_entropy: weights {weights.shape} do not match targets {targets.shape}")
        flat_weights = weights.reshape(-1)

    flat = logits.data.reshape(-1, num_classes)
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(flat.shape[0])
    nll = log_norm - shifted[rows, flat_targets]
    loss = np.sum(flat_weights * nll)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, flat_targets] -= 1.0
        return ((g * flat_weights[:, None] * probs).reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), grad_fn)


def mse(pred: Operand, target: Operand) -> Tensor:
    """Mean of squared element differences."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred.data - target.data
    count = max(1, diff.size)

    def grad_fn(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        gp = g * 2.0 * diff / count
        return gp, -gp

    return _result(np.asarray(np.sum(diff * diff) / count), (pred, target), grad_fn)


def detach(x: Operand) -> Tensor:
    """Same values, no graph."""
    x = as_tensor(x)
    return Tensor(x.data)
