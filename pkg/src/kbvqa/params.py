"""Named parameters, the Adam optimizer and checkpoint files"""
import collections
import io
import json
import logging

import numpy as np

from . import numcore

__all__ = ['ParameterStore', 'Snapshot', 'adam_step', 'save_checkpoint', 'load_checkpoint', 'CHECKPOINT_VERSION']

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class Snapshot(dict):
    """Parameter and buffer values of a :class:`ParameterStore` plus its Adam state."""
    step = 0
    moments = None


class ParameterStore(object):
    """Map of dotted parameter names to leaf :class:`kbvqa.Tensor` objects plus Adam state.

    :param rng: generator used by the initialisers
    :type rng: :class:`numpy.random.RandomState`

    Parameters are created with :meth:`add`. Trainable parameters own first and second
    moment buffers, non-trainable ones (frozen weights and buffers like running batch
    statistics) do not:

    .. doctest::

        >>> import numpy as np
        >>> import kbvqa
        >>> store = kbvqa.ParameterStore(np.random.RandomState(0))
        >>> w = store.add("layer.w", (3, 2))
        >>> b = store.add("layer.b", (2,), init="zeros")
        >>> store.names()
        ['layer.b', 'layer.w']
        >>> store.set_trainable("layer.b", False)
        >>> store.trainable_names()
        ['layer.w']
    """
    def __init__(self, rng=None):
        super(ParameterStore, self).__init__()
        self._rng = rng if rng is not None else np.random.RandomState(0)
        self._params = collections.OrderedDict()
        self._buffers = collections.OrderedDict()
        self._moments = {}
        self.step = 0

    def __repr__(self):
        return "ParameterStore({0} parameters, {1} buffers, step={2})".format(
            len(self._params), len(self._buffers), self.step)

    def __contains__(self, name):
        return name in self._params or name in self._buffers

    def __getitem__(self, name):
        if name in self._params:
            return self._params[name]
        return self._buffers[name]

    def __len__(self):
        return len(self._params)

    def add(self, name, shape, init="uniform", fan_in=None, trainable=True):
        """Create a parameter.

        :param name: unique dotted name
        :type name: :class:`str`
        :param shape: the shape
        :type shape: :class:`tuple`
        :param init: ``uniform`` for ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, ``zeros``, ``ones``
                     or an array with the initial values
        :param fan_in: defaults to the first dimension of ``shape``
        :param trainable: whether :func:`adam_step` updates it
        :returns: the parameter tensor
        :raises: :class:`ValueError` if the name is taken
        """
        if name in self:
            raise ValueError("Parameter %s already exists" % name)
        shape = tuple(int(s) for s in shape)
        if isinstance(init, str):
            if init == "uniform":
                bound = 1.0 / np.sqrt(fan_in or shape[0])
                values = self._rng.uniform(-bound, bound, size=shape)
            elif init == "zeros":
                values = np.zeros(shape)
            elif init == "ones":
                values = np.ones(shape)
            else:
                raise ValueError("Unknown initialiser %s" % init)
        else:
            values = np.asarray(init)
            if values.shape != shape:
                raise numcore.DimensionError("initial value of shape {0} for {1} of shape {2}".format(
                    values.shape, name, shape))
        param = numcore.Tensor(values, requires_grad=True, name=name)
        self._params[name] = param
        if trainable:
            self._moments[name] = (np.zeros(shape), np.zeros(shape))
        return param

    def require(self, name, shape, init="uniform", fan_in=None):
        """Return parameter ``name``, creating it first if it does not exist.

        Models call this so they can be built on a fresh store or on a loaded checkpoint.

        :raises: :class:`kbvqa.DimensionError` if an existing parameter has another shape
        """
        if name not in self._params:
            return self.add(name, shape, init=init, fan_in=fan_in)
        param = self._params[name]
        if param.shape != tuple(shape):
            raise numcore.DimensionError("parameter {0} has shape {1} but {2} was requested".format(
                name, param.shape, tuple(shape)))
        return param

    def require_buffer(self, name, values):
        if name in self._buffers:
            return self._buffers[name]
        return self.add_buffer(name, values)

    def add_buffer(self, name, values):
        """Create a non-trainable state array (e.g. running statistics) that is checkpointed."""
        if name in self:
            raise ValueError("Parameter %s already exists" % name)
        buf = numcore.Tensor(values, name=name)
        self._buffers[name] = buf
        return buf

    def names(self, prefix=None):
        return sorted(n for n in self._params if prefix is None or n.startswith(prefix))

    def buffer_names(self):
        return sorted(self._buffers)

    def trainable_names(self):
        return sorted(self._moments)

    def set_trainable(self, prefix, trainable=True):
        """Freeze or unfreeze every parameter whose name starts with ``prefix``.

        Freezing drops the optimizer state, unfreezing starts it from zero.
        """
        for name in self.names(prefix):
            if trainable and name not in self._moments:
                self._moments[name] = (np.zeros(self._params[name].shape), np.zeros(self._params[name].shape))
            elif not trainable:
                self._moments.pop(name, None)

    def zero_grad(self):
        for param in self._params.values():
            param.grad = None

    def assign(self, name, values):
        """Overwrite the values of a parameter or buffer in place."""
        target = self[name]
        values = np.asarray(values, dtype=target.data.dtype)
        if values.shape != target.shape:
            raise numcore.DimensionError("cannot assign shape {0} to {1} of shape {2}".format(
                values.shape, name, target.shape))
        target.data = values.copy()

    def snapshot(self):
        """Copy all values and the optimizer state, e.g. to restore the last good state later.

        :returns: a dict from parameter and buffer names to arrays; its ``step`` and
                  ``moments`` attributes hold the Adam state
        :rtype: :class:`Snapshot`
        """
        values = Snapshot((n, p.data.copy()) for n, p in self._params.items())
        values.update((n, b.data.copy()) for n, b in self._buffers.items())
        values.step = self.step
        values.moments = dict((n, (m.copy(), v.copy())) for n, (m, v) in self._moments.items())
        return values

    def restore(self, snapshot):
        for name, values in snapshot.items():
            self[name].data = values.copy()
        if getattr(snapshot, "moments", None) is not None:
            self._moments = dict((n, (m.copy(), v.copy())) for n, (m, v) in snapshot.moments.items())
            self.step = snapshot.step

    def all_finite(self, grads=False):
        """Whether every value (or with ``grads`` every present gradient) is finite.

        :returns: ``(True, None)`` or ``(False, name)`` of the first offending entry
        """
        if grads:
            arrays = [(n, self._params[n].grad) for n in self.names() if self._params[n].grad is not None]
        else:
            arrays = [(n, self[n].data) for n in self.names() + self.buffer_names()]
        for name, values in arrays:
            if not np.all(np.isfinite(values)):
                return False, name
        return True, None

    def moments(self, name):
        return self._moments[name]

    def _set_moments(self, name, first, second):
        self._moments[name] = (first, second)


def adam_step(store, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8, decoupled=True):
    """Apply one Adam update with bias correction to every trainable parameter.

    :param store: the parameters, gradients have to be populated
    :type store: :class:`ParameterStore`
    :param lr: learning rate
    :type lr: :class:`float`
    :param weight_decay: decay factor
    :type weight_decay: :class:`float`
    :param betas: decay rates of the first and second moment estimates
    :param eps: added to the denominator
    :param decoupled: if True, the decay is added to the update (AdamW style),
                      else it is added to the gradient (coupled L2)
    :returns: the store
    :raises: :class:`kbvqa.GradientError` naming the first trainable parameter without gradient
    """
    if lr <= 0:
        raise ValueError("Learning rate has to be positive but got %s" % lr)
    if weight_decay < 0:
        raise ValueError("Weight decay has to be non-negative but got %s" % weight_decay)
    names = store.trainable_names()
    for name in names:
        if store[name].grad is None:
            raise numcore.GradientError("Parameter %s has no gradient" % name)
    beta1, beta2 = betas
    store.step += 1
    correction1 = 1.0 - beta1 ** store.step
    correction2 = 1.0 - beta2 ** store.step
    for name in names:
        param = store[name]
        values = param.data.astype(np.float64)
        grad = param.grad.astype(np.float64)
        if weight_decay and not decoupled:
            grad = grad + weight_decay * values
        first, second = store.moments(name)
        first = beta1 * first + (1.0 - beta1) * grad
        second = beta2 * second + (1.0 - beta2) * grad * grad
        update = (first / correction1) / (np.sqrt(second / correction2) + eps)
        if weight_decay and decoupled:
            update = update + weight_decay * values
        store._set_moments(name, first, second)
        param.data = (values - lr * update).astype(param.data.dtype)
    return store


def save_checkpoint(path, store, meta=None):
    """Write parameters, buffers and optimizer state to an ``npz`` archive.

    :param path: target file, written as given (no suffix is appended)
    :param store: the parameters
    :type store: :class:`ParameterStore`
    :param meta: JSON-serialisable metadata (e.g. the configuration)
    :type meta: :class:`dict`

    Values are stored as raw row-major arrays, so :func:`load_checkpoint` restores them
    bit for bit.
    """
    arrays = {
        "__format__": np.array(CHECKPOINT_VERSION),
        "__step__": np.array(store.step),
        "__trainable__": np.array(store.trainable_names(), dtype=np.str_).reshape(-1),
        "__meta__": np.array(json.dumps(meta or {}, sort_keys=True)),
    }
    for name in store.names():
        arrays["param." + name] = store[name].data
    for name in store.buffer_names():
        arrays["buffer." + name] = store[name].data
    for name in store.trainable_names():
        first, second = store.moments(name)
        arrays["adam_m." + name] = first
        arrays["adam_v." + name] = second
    with io.open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.debug("saved %s parameters to %s", len(store), path)


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    :returns: the restored store and the metadata
    :rtype: (:class:`ParameterStore`, :class:`dict`)
    :raises: :class:`ValueError` for an unknown format version
    """
    with np.load(path, allow_pickle=False) as archive:
        version = int(archive["__format__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError("Unsupported checkpoint format %s in %s" % (version, path))
        store = ParameterStore()
        trainable = set(str(n) for n in archive["__trainable__"])
        for key in sorted(archive.files):
            kind, _, name = key.partition(".")
            if kind == "param":
                store.add(name, archive[key].shape, init=archive[key], trainable=name in trainable)
                store[name].data = archive[key].copy()
            elif kind == "buffer":
                store.add_buffer(name, archive[key].copy())
                store[name].data = archive[key].copy()
        for name in trainable:
            store._set_moments(name, archive["adam_m." + name].copy(), archive["adam_v." + name].copy())
        store.step = int(archive["__step__"])
        meta = json.loads(str(archive["__meta__"]))
    logger.debug("loaded %s parameters from %s", len(store), path)
    return store, meta
