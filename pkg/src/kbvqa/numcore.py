"""Dense tensors with reverse-mode differentiation.

Every model equation in :mod:`kbvqa` is written in terms of the functions in this module.
A :class:`Tensor` wraps a :class:`numpy.ndarray`. Operations on tensors that require a
gradient record their parents together with a backward rule, which builds a per-forward-pass
tape. :func:`backward` walks that tape once in reverse topological order, accumulates
``grad`` on the leaves and consumes the tape.

.. doctest::

    >>> import kbvqa
    >>> x = kbvqa.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> loss = kbvqa.reduce_sum(x * x)
    >>> kbvqa.backward(loss)
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]

Binary operations follow numpy broadcasting; gradients are summed back to the shape of each
operand. Reductions (matrix products, sums, softmax normalisers) are accumulated in 64 bit
even if the storage precision is 32 bit.
"""
import contextlib
import itertools
import logging

import numpy as np

__all__ = ['Tensor', 'DimensionError', 'GradientError', 'as_tensor', 'set_default_dtype', 'get_default_dtype',
           'no_grad', 'is_grad_enabled', 'matmul', 'add', 'sub', 'mul', 'neg', 'power', 'exp', 'log', 'tanh',
           'sigmoid', 'softmax', 'elementwise', 'concat', 'stack', 'gather', 'reshape', 'transpose',
           'reduce_sum', 'reduce_mean', 'cross_entropy', 'backward', 'CE_FLOOR']

logger = logging.getLogger(__name__)

CE_FLOOR = 1e-12
"""Probability floor of :func:`cross_entropy`."""

_DTYPES = {'float64': np.float64, 'float32': np.float32}
_default_dtype = np.float64
_grad_enabled = True
_node_ids = itertools.count()


class DimensionError(ValueError):
    """Raised when the shapes of operands are incompatible."""
    pass


class GradientError(RuntimeError):
    """Raised when gradients cannot be computed or are missing."""
    pass


def set_default_dtype(dtype):
    """Set the storage precision of new tensors.

    :param dtype: ``float64``, ``float32`` or the matching numpy type
    :raises: :class:`ValueError` for any other precision
    """
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError("Unsupported dtype %s, expected one of %s" % (dtype, sorted(_DTYPES)))
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in _DTYPES.values():
        raise ValueError("Unsupported dtype %s" % dtype)
    _default_dtype = dtype


def get_default_dtype():
    """The numpy type used for new tensors."""
    return _default_dtype


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording, e.g. for evaluation.

    Results created inside the block never require a gradient.
    """
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor(object):
    """A dense array that takes part in reverse-mode differentiation.

    :param data: array-like values
    :param requires_grad: if True, :func:`backward` populates :attr:`grad`
    :type requires_grad: :class:`bool`
    :param name: optional name, set for parameters
    :type name: :class:`str`
    :param dtype: storage precision, defaults to :func:`get_default_dtype`

    ``data`` is always a numpy array and ``grad`` is either ``None`` or an array of the
    same shape. ``node_id`` is unique per tensor and identifies it on the tape.
    """
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=_default_dtype if dtype is None else dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return "Tensor(shape={0}, requires_grad={1}{2})".format(
            self.shape, self.requires_grad, ", name={0!r}".format(self.name) if self.name else "")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        """Return a copy of the values."""
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _index(self, key)


def as_tensor(value):
    """Return ``value`` if it is a :class:`Tensor`, else wrap it in a constant tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, parents, backward_rule):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, dtype=data.dtype, _parents=tuple(parents), _backward=backward_rule)
    return Tensor(data, dtype=data.dtype)


def _storage(array):
    return np.asarray(array, dtype=_default_dtype)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError("shapes {0} and {1} are not compatible".format(a.shape, b.shape))


def matmul(a, b):
    """Matrix product with numpy batching rules.

    :param a: tensor of shape ``[..., m, k]``
    :param b: tensor of shape ``[..., k, n]``
    :returns: tensor of shape ``[..., m, n]``
    :raises: :class:`DimensionError` naming both shapes if the inner dimensions differ

    .. doctest::

        >>> import kbvqa
        >>> kbvqa.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]).data.tolist()
        [[19.0, 22.0], [43.0, 50.0]]
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("cannot multiply shapes {0} and {1}".format(a.shape, b.shape))
    adata = a.data.astype(np.float64, copy=False)
    bdata = b.data.astype(np.float64, copy=False)

    def _backward(grad):
        grad_a = grad_b = None
        if a.requires_grad:
            grad_a = _unbroadcast(np.matmul(grad, np.swapaxes(bdata, -1, -2)), a.shape)
        if b.requires_grad:
            grad_b = _unbroadcast(np.matmul(np.swapaxes(adata, -1, -2), grad), b.shape)
        return grad_a, grad_b

    return _result(_storage(np.matmul(adata, bdata)), (a, b), _backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def _backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result(_storage(a.data + b.data), (a, b), _backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def _backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return _result(_storage(a.data - b.data), (a, b), _backward)


def mul(a, b):
    """Element-wise product (with broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def _backward(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _result(_storage(a.data * b.data), (a, b), _backward)


def neg(x):
    return mul(x, -1.0)


def power(x, exponent):
    """Raise ``x`` to a constant real ``exponent``."""
    x = as_tensor(x)
    exponent = float(exponent)

    def _backward(grad):
        return (grad * exponent * np.power(x.data, exponent - 1.0),)

    return _result(_storage(np.power(x.data, exponent)), (x,), _backward)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def _backward(grad):
        return (grad * out,)

    return _result(_storage(out), (x,), _backward)


def log(x):
    """Natural logarithm, ``x`` has to be positive."""
    x = as_tensor(x)

    def _backward(grad):
        return (grad / x.data,)

    return _result(_storage(np.log(x.data)), (x,), _backward)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def _backward(grad):
        return (grad * (1.0 - out * out),)

    return _result(_storage(out), (x,), _backward)


def sigmoid(x):
    """Logistic function, computed as ``(1 + tanh(x / 2)) / 2`` so it never overflows."""
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _backward(grad):
        return (grad * out * (1.0 - out),)

    return _result(_storage(out), (x,), _backward)


def softmax(x, axis=-1, mask=None):
    """Normalise ``x`` into probability distributions along ``axis``.

    :param x: the scores
    :param axis: the axis to normalise over
    :type axis: :class:`int`
    :param mask: optional boolean array broadcastable to ``x``; ``False`` entries get zero probability
    :returns: tensor of the same shape whose slices along ``axis`` sum to one
    :raises: :class:`DimensionError` for an empty axis or a fully masked slice

    The maximum of each slice is subtracted before exponentiation, so the result is
    invariant to additive shifts and does not overflow.

    .. doctest::

        >>> import kbvqa
        >>> kbvqa.softmax([0.0, 0.0, 0.0]).data.tolist() == [1 / 3.0] * 3
        True
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis of shape {0}".format(x.shape))
    scores = x.data.astype(np.float64, copy=False)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise DimensionError("softmax over a fully masked slice")
        scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=axis, keepdims=True)
    weights = np.exp(shifted)
    out = weights / weights.sum(axis=axis, keepdims=True)

    def _backward(grad):
        inner = (grad * out).sum(axis=axis, keepdims=True)
        return (out * (grad - inner),)

    return _result(_storage(out), (x,), _backward)


def concat(tensors, axis=-1):
    """Concatenate tensors along ``axis`` (the last one by default), preserving order."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("nothing to concatenate")
    ndim = tensors[0].ndim
    axis = axis % ndim if ndim else 0
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise DimensionError("cannot concatenate shapes {0} and {1} along axis {2}".format(
                tensors[0].shape, t.shape, axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(grad):
        return tuple(np.split(grad, splits, axis=axis))

    return _result(_storage(np.concatenate([t.data for t in tensors], axis=axis)), tensors, _backward)


def stack(tensors, axis=0):
    """Stack equally shaped tensors along a new ``axis``."""
    tensors = [as_tensor(t) for t in tensors]
    shapes = set(t.shape for t in tensors)
    if len(shapes) != 1:
        raise DimensionError("cannot stack shapes {0}".format(sorted(shapes)))

    def _backward(grad):
        return tuple(np.take(grad, i, axis=axis) for i in range(len(tensors)))

    return _result(_storage(np.stack([t.data for t in tensors], axis=axis)), tensors, _backward)


def _index(x, key):
    x = as_tensor(x)

    def _backward(grad):
        full = np.zeros(x.shape, dtype=np.float64)
        np.add.at(full, key, grad)
        return (full,)

    return _result(_storage(x.data[key]), (x,), _backward)


def gather(table, ids):
    """Look up rows of ``table`` for an integer array ``ids``.

    :param table: tensor of shape ``[V, d]``
    :param ids: integer array of any shape
    :returns: tensor of shape ``ids.shape + (d,)``
    :raises: :class:`IndexError` for ids outside ``[0, V)``

    Rows that are not looked up receive a zero gradient.
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("ids out of range for a table with {0} rows".format(table.shape[0]))

    def _backward(grad):
        full = np.zeros(table.shape, dtype=np.float64)
        np.add.at(full, ids, grad)
        return (full,)

    return _result(_storage(table.data[ids]), (table,), _backward)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("cannot reshape {0} into {1}".format(x.shape, shape))

    def _backward(grad):
        return (grad.reshape(x.shape),)

    return _result(out, (x,), _backward)


def transpose(x, axes=None):
    """Swap the last two axes, or permute by ``axes``."""
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2) if x.ndim >= 2 else tuple(range(x.ndim))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(grad):
        return (np.transpose(grad, inverse),)

    return _result(np.transpose(x.data, axes), (x,), _backward)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.astype(np.float64, copy=False).sum(axis=axis, keepdims=keepdims)

    def _backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, x.shape),)

    return _result(_storage(out), (x,), _backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def elementwise(kind, x, y=None):
    """Dispatch the element-wise operations by name.

    :param kind: one of ``tanh``, ``sigmoid``, ``mul``, ``add``, ``concat``
    :param x: first operand
    :param y: second operand for binary kinds
    """
    unary = {'tanh': tanh, 'sigmoid': sigmoid}
    binary = {'mul': mul, 'add': add, 'concat': lambda a, b: concat([a, b], axis=-1)}
    if kind in unary:
        return unary[kind](x)
    if kind in binary:
        if y is None:
            raise DimensionError("%s needs two operands" % kind)
        return binary[kind](x, y)
    raise ValueError("Unknown element-wise operation %s" % kind)


def cross_entropy(probabilities, labels, floor=CE_FLOOR):
    """Negative log-likelihood of ``labels`` under predicted distributions.

    :param probabilities: tensor ``[..., C]`` whose last axis sums to one
    :param labels: class index (or integer array matching the leading axes)
    :param floor: probabilities below this value are clipped before the logarithm
    :type floor: :class:`float`
    :returns: ``-log(max(p[label], floor))`` with the shape of ``labels``
    :raises: :class:`IndexError` for labels outside ``[0, C)``, :class:`ValueError`
             if a distribution does not sum to one within ``1e-6``

    .. doctest::

        >>> import kbvqa
        >>> round(kbvqa.cross_entropy([0.25, 0.75], 1).item(), 4)
        0.2877
    """
    probabilities = as_tensor(probabilities)
    labels = np.asarray(labels, dtype=np.int64)
    classes = probabilities.shape[-1]
    if labels.shape != probabilities.shape[:-1]:
        raise DimensionError("labels of shape {0} do not match probabilities {1}".format(
            labels.shape, probabilities.shape))
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError("label out of range [0, {0}): {1}".format(classes, labels.tolist()))
    totals = probabilities.data.astype(np.float64).sum(axis=-1)
    if np.any(np.abs(totals - 1.0) > 1e-6):
        raise ValueError("predicted distribution does not sum to one: {0}".format(totals.tolist()))
    picked = np.take_along_axis(probabilities.data, labels[..., None], axis=-1)[..., 0]
    clipped = np.maximum(picked, floor)

    def _backward(grad):
        local = np.where(picked > floor, -1.0 / clipped, 0.0) * grad
        full = np.zeros(probabilities.shape, dtype=np.float64)
        np.put_along_axis(full, labels[..., None], np.asarray(local)[..., None], axis=-1)
        return (full,)

    return _result(_storage(-np.log(clipped)), (probabilities,), _backward)


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``grad`` on every leaf tensor that ``loss`` depends on.

    :param loss: scalar tensor produced by recorded operations
    :type loss: :class:`Tensor`
    :raises: :class:`GradientError` if ``loss`` is not a scalar

    Gradients accumulate into existing ``grad`` buffers, so call
    :meth:`kbvqa.ParameterStore.zero_grad` between steps. The tape is consumed:
    intermediate results drop their parents afterwards.
    """
    if loss.size != 1:
        raise GradientError("backward needs a scalar loss but got shape {0}".format(loss.shape))
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires a gradient")
    pending = {loss.node_id: np.ones(loss.shape, dtype=np.float64)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(node.node_id, None)
        if grad is None:
            continue
        if node._backward is None:
            grad = np.array(grad, dtype=node.data.dtype)
            node.grad = grad if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.node_id in pending:
                pending[parent.node_id] = pending[parent.node_id] + parent_grad
            else:
                pending[parent.node_id] = parent_grad
        node._parents = ()
        node._backward = None
