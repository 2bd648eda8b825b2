"""
Tensor core for EquiQuant
Dense float32 tensors, a dynamic reverse-mode tape and straight-through rounding
"""

import logging
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np


logger = logging.getLogger('EquiQuant.TensorCore')

# Added inside the square root of l2norm so its gradient stays finite at zero
L2_EPS = 1e-12

_dtype = np.float32
_tape_stack: List['Tape'] = []


class ShapeError(ValueError):
    """Raised when op inputs do not conform to the op-kind"""


class Tensor:
    """Dense row-major tensor holding float32 values"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.name = name
        self._tracked = False

    @classmethod
    def parameter(cls, data, name: Optional[str] = None) -> 'Tensor':
        """Create a trainable leaf tensor"""
        return cls(np.array(data, dtype=_dtype), requires_grad=True, name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{label})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded primitive operation"""

    __slots__ = ('kind', 'inputs', 'output', 'vjp')

    def __init__(self, kind: str, inputs: Sequence[Tensor], output: Tensor, vjp: Callable):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of the primitive operations of one forward pass"""

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> 'Tape':
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def kinds(self) -> List[str]:
        return [node.kind for node in self.nodes]


class Gradients:
    """Gradient map keyed by tensor identity"""

    def __init__(self):
        self._grads: Dict[int, np.ndarray] = {}
        self._tensors: Dict[int, Tensor] = {}

    def _put(self, tensor: Tensor, grad: np.ndarray):
        self._grads[id(tensor)] = grad
        self._tensors[id(tensor)] = tensor

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._grads.get(id(tensor))
        if grad is None:
            return np.zeros(tensor.shape, dtype=tensor.data.dtype)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self) -> Iterator[Tuple[Tensor, np.ndarray]]:
        for key, grad in self._grads.items():
            yield self._tensors[key], grad


def _active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad or t._tracked for t in inputs):
        out._tracked = True
        tape.nodes.append(Node(kind, inputs, out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return np.asarray(grad)


def _check_broadcast(kind: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {list(a.shape)} and {list(b.shape)} do not conform")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero"""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast('add', a, b)
    return _emit('add', (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast('sub', a, b)
    return _emit('sub', (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast('mul', a, b)
    return _emit('mul', (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast('div', a, b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _emit('div', (a, b), out, vjp)


def abs(x) -> Tensor:
    x = _as_tensor(x)
    return _emit('abs', (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    return _emit('relu', (x,), np.maximum(x.data, 0), lambda g: (g * (x.data > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -x))


def silu(x) -> Tensor:
    x = _as_tensor(x)
    sig = _sigmoid(x.data)
    return _emit('silu', (x,), x.data * sig,
                 lambda g: (g * sig * (1 + x.data * (1 - sig)),))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only inside the closed range"""
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit('clamp', (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _emit('where', (a, b), out,
                 lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)))


def ste_round(x) -> Tensor:
    """Round half away from zero; backward is the identity"""
    x = _as_tensor(x)
    return _emit('ste_round', (x,), round_half_away(x.data), lambda g: (g,))


# Linear algebra and reductions

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not conform")

    def vjp(g):
        return (g @ b.data.T,
                _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    return _emit('matmul', (a, b), np.matmul(a.data, b.data), vjp)


def sum(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _emit('sum', (x,), np.sum(x.data, axis=axis, keepdims=keepdims), vjp)


def mean(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return _emit('mean', (x,), np.mean(x.data, axis=axis, keepdims=keepdims), vjp)


def squared_norm(data: np.ndarray) -> np.ndarray:
    """Sum of squares over the last axis, invariant to permutations and sign flips"""
    return np.sort(data * data, axis=-1).sum(axis=-1, keepdims=True)


def l2norm(x) -> Tensor:
    """Euclidean norm over the last axis (kept as a size-1 axis)"""
    x = _as_tensor(x)
    norm = np.sqrt(squared_norm(x.data) + L2_EPS)
    return _emit('l2norm', (x,), norm, lambda g: (g * x.data / norm,))


def softmax_neighbors(logits, receivers: np.ndarray, n_nodes: int) -> Tensor:
    """Softmax of per-edge logits over the edges that share a receiver"""
    logits = _as_tensor(logits)
    receivers = np.asarray(receivers, dtype=np.int64)
    if logits.ndim != 1 or logits.shape[0] != receivers.shape[0]:
        raise ShapeError(f"softmax_neighbors: logits {list(logits.shape)} vs "
                         f"receivers {list(receivers.shape)}")
    peak = np.full(n_nodes, -np.inf, dtype=logits.data.dtype)
    np.maximum.at(peak, receivers, logits.data)
    ex = np.exp(logits.data - peak[receivers])
    total = np.zeros(n_nodes, dtype=logits.data.dtype)
    np.add.at(total, receivers, ex)
    out = ex / total[receivers]

    def vjp(g):
        dot = np.zeros(n_nodes, dtype=g.dtype)
        np.add.at(dot, receivers, g * out)
        return (out * (g - dot[receivers]),)
    return _emit('softmax_neighbors', (logits,), out, vjp)


# Indexing and layout

def gather(x, index: np.ndarray) -> Tensor:
    """Select rows of x by index (first axis)"""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"gather: index out of range for shape {list(x.shape)}")

    def vjp(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(grad, index, g)
        return (grad,)
    return _emit('gather', (x,), x.data[index], vjp)


def scatter_add(x, index: np.ndarray, n_rows: int) -> Tensor:
    """Sum rows of x into n_rows buckets given by index"""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter: {index.shape[0]} indices for shape {list(x.shape)}")
    out = np.zeros((n_rows,) + x.shape[1:], dtype=x.data.dtype)
    if index.size and np.all(index[1:] >= index[:-1]):
        starts = np.flatnonzero(np.r_[True, index[1:] != index[:-1]])
        out[index[starts]] = np.add.reduceat(x.data, starts, axis=0)
    else:
        np.add.at(out, index, x.data)
    return _emit('scatter', (x,), out, lambda g: (g[index],))


def slice_last(x, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of the last axis"""
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice: [{start}, {stop}) outside last axis of {list(x.shape)}")

    def vjp(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        grad[..., start:stop] = g
        return (grad,)
    return _emit('slice', (x,), x.data[..., start:stop].copy(), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[list(t.shape) for t in tensors]} do not conform")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit('concat', tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
    return _emit('reshape', (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    inverse = np.argsort(axes)
    return _emit('transpose', (x,), np.transpose(x.data, axes),
                 lambda g: (np.transpose(g, inverse),))


OPS: Dict[str, Callable[..., Tensor]] = {
    'matmul': matmul,
    'add': add,
    'sub': sub,
    'mul': mul,
    'div': div,
    'abs': abs,
    'relu': relu,
    'silu': silu,
    'clamp': clamp,
    'where': where,
    'ste_round': ste_round,
    'sum': sum,
    'mean': mean,
    'l2norm': l2norm,
    'softmax_neighbors': softmax_neighbors,
    'gather': gather,
    'scatter': scatter_add,
    'concat': concat,
    'slice': slice_last,
    'reshape': reshape,
    'transpose': transpose,
}


def record(kind: str, *inputs, **attrs) -> Tensor:
    """
    Run a primitive op by kind and append it to the active tape

    Args:
        kind: Op-kind name (see OPS)
        inputs: Input tensors (plain arrays/scalars become constants)
        attrs: Op attributes such as axis or index

    Returns:
        Output tensor
    """
    op = OPS.get(kind)
    if op is None:
        raise ShapeError(f"Unknown op-kind: {kind}")
    return op(*inputs, **attrs)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> Gradients:
    """
    Reverse-mode sweep over the tape

    Args:
        tape: Tape that recorded the forward pass
        loss: Scalar output of that pass
        params: Trainable tensors that must appear in the result (zero if unreached)

    Returns:
        Gradients for every trainable tensor reached from loss
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result = Gradients()
    leaves: Dict[int, Tensor] = {}
    if loss.requires_grad:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, grad in zip(node.inputs, node.vjp(g)):
            if grad is None or not (tensor.requires_grad or tensor._tracked):
                continue
            key = id(tensor)
            pending[key] = pending[key] + grad if key in pending else grad
            if tensor.requires_grad:
                leaves[key] = tensor

    for key, tensor in leaves.items():
        result._put(tensor, pending[key].astype(tensor.data.dtype, copy=False))
    for tensor in params:
        if tensor not in result:
            result._put(tensor, np.zeros(tensor.shape, dtype=tensor.data.dtype))
    return result


@contextmanager
def float64_oracle():
    """Evaluate new tensors in 64-bit; used by finite-difference checks and equivariance measurement"""
    global _dtype
    previous = _dtype
    _dtype = np.float64
    try:
        yield
    finally:
        _dtype = previous


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of the scalar fn() with respect to param"""
    base = param.data
    grad = np.zeros(base.shape, dtype=np.float64)
    try:
        with float64_oracle():
            wide = base.astype(np.float64)
            for index in np.ndindex(base.shape):
                shifted = wide.copy()
                shifted[index] += step
                param.data = shifted
                upper = float(np.sum(fn().data, dtype=np.float64))
                shifted[index] -= 2 * step
                param.data = shifted
                lower = float(np.sum(fn().data, dtype=np.float64))
                grad[index] = (upper - lower) / (2 * step)
    finally:
        param.data = base
    return grad


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-3) -> float:
    """
    Compare tape gradients of fn() against central finite differences

    Returns:
        Worst norm-wise relative error over params
    """
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss, params)
    worst = 0.0
    for param in params:
        analytic = grads[param].astype(np.float64)
        numeric = numerical_gradient(fn, param, step)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        error = float(np.linalg.norm(analytic - numeric) / scale)
        logger.debug(f"gradcheck {param.name or list(param.shape)}: relative error {error:.3e}")
        worst = max(worst, error)
    return worst
