"""Encoders for token sequences and image features.

The layers in this module hold references to parameters of a :class:`kbvqa.ParameterStore`
and operate on batches: sequences are ``[B, L, d]`` tensors with a boolean ``[B, L]`` mask,
image features are ``[B, K, F]`` tensors. The module level functions with the names of the
individual operations (:func:`gru_encode`, :func:`top_down_attention`, ...) also accept a
single unbatched sample.

Recurrent cells follow a fixed convention. GRU::

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    n = tanh(x W_n + (r * h) U_n + b_n)
    h' = z * h + (1 - z) * n

LSTM::

    i, f, o = sigmoid(x W_. + h U_. + b_.)
    g = tanh(x W_g + h U_g + b_g)
    c' = f * c + i * g
    h' = o * tanh(c')

Weights are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, recurrent biases start at zero.
"""
import logging

import numpy as np

from . import numcore
from . import vocab
from .validators import ConfigError

__all__ = ['linear', 'GatedLayer', 'GRUCell', 'LSTMCell', 'BiLSTM', 'TopDownAttention', 'SelfAttentiveQuestion',
           'Fusion', 'pad_sequences', 'embed_tokens', 'gru_encode', 'bilstm_encode', 'gated_nonlinear',
           'top_down_attention', 'self_attention_question', 'fuse']

logger = logging.getLogger(__name__)


def linear(x, weight, bias=None):
    """``x W + b`` for ``x`` of shape ``[..., m]`` and ``W`` of shape ``[m, n]``."""
    x = numcore.as_tensor(x)
    if x.ndim == 1:
        out = numcore.reshape(numcore.matmul(numcore.reshape(x, (1, -1)), weight), (-1,))
    else:
        out = numcore.matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


def gated_nonlinear(x, params):
    """Gated non-linear layer ``tanh(x W + b) * sigmoid(x W' + b')``.

    :param x: input of shape ``[..., m]``
    :param params: ``(W, b, W', b')`` with ``W, W'`` of shape ``[m, n]`` and ``b, b'`` of shape ``[n]``
    :returns: output of shape ``[..., n]``
    :raises: :class:`kbvqa.DimensionError` on shape mismatch
    """
    weight, bias, gate_weight, gate_bias = params
    return numcore.tanh(linear(x, weight, bias)) * numcore.sigmoid(linear(x, gate_weight, gate_bias))


class GatedLayer(object):
    """Parameters and application of a :func:`gated_nonlinear` layer."""
    def __init__(self, store, name, in_dim, out_dim):
        super(GatedLayer, self).__init__()
        self.name = name
        self.weight = store.require(name + ".w", (in_dim, out_dim))
        self.bias = store.require(name + ".b", (out_dim,), fan_in=in_dim)
        self.gate_weight = store.require(name + ".w_gate", (in_dim, out_dim))
        self.gate_bias = store.require(name + ".b_gate", (out_dim,), fan_in=in_dim)

    @property
    def params(self):
        return (self.weight, self.bias, self.gate_weight, self.gate_bias)

    def __call__(self, x):
        return gated_nonlinear(x, self.params)


class GRUCell(object):
    """Single GRU step, see the module documentation for the gate convention."""
    def __init__(self, store, name, in_dim, hidden_dim):
        super(GRUCell, self).__init__()
        self.name = name
        self.hidden_dim = hidden_dim
        self.gates = {}
        for gate in ("z", "r", "n"):
            self.gates[gate] = (store.require("%s.w_%s" % (name, gate), (in_dim, hidden_dim)),
                                store.require("%s.u_%s" % (name, gate), (hidden_dim, hidden_dim)),
                                store.require("%s.b_%s" % (name, gate), (hidden_dim,), init="zeros"))

    def step(self, x, h):
        """Advance the state ``h`` ``[B, H]`` by one input ``x`` ``[B, d]``."""
        w_z, u_z, b_z = self.gates["z"]
        w_r, u_r, b_r = self.gates["r"]
        w_n, u_n, b_n = self.gates["n"]
        z = numcore.sigmoid(linear(x, w_z) + linear(h, u_z) + b_z)
        r = numcore.sigmoid(linear(x, w_r) + linear(h, u_r) + b_r)
        n = numcore.tanh(linear(x, w_n) + linear(r * h, u_n) + b_n)
        return z * h + (1.0 - z) * n


class LSTMCell(object):
    """Single LSTM step, see the module documentation for the gate convention."""
    def __init__(self, store, name, in_dim, hidden_dim):
        super(LSTMCell, self).__init__()
        self.name = name
        self.hidden_dim = hidden_dim
        self.gates = {}
        for gate in ("i", "f", "g", "o"):
            self.gates[gate] = (store.require("%s.w_%s" % (name, gate), (in_dim, hidden_dim)),
                                store.require("%s.u_%s" % (name, gate), (hidden_dim, hidden_dim)),
                                store.require("%s.b_%s" % (name, gate), (hidden_dim,), init="zeros"))

    def _gate(self, gate, x, h):
        weight, recurrent, bias = self.gates[gate]
        return linear(x, weight) + linear(h, recurrent) + bias

    def step(self, x, h, c):
        i = numcore.sigmoid(self._gate("i", x, h))
        f = numcore.sigmoid(self._gate("f", x, h))
        g = numcore.tanh(self._gate("g", x, h))
        o = numcore.sigmoid(self._gate("o", x, h))
        c = f * c + i * g
        return o * numcore.tanh(c), c


def _masked(new, old, mask_column):
    if mask_column is None:
        return new
    return new * mask_column + old * (1.0 - mask_column)


def _mask_column(mask, t):
    if mask is None:
        return None
    return numcore.Tensor(np.asarray(mask[:, t], dtype=np.float64)[:, None])


def gru_encode(cell, H, mask=None):
    """Run ``cell`` left to right from a zero state and return the final state.

    :param cell: the recurrent cell
    :type cell: :class:`GRUCell`
    :param H: sequence ``[B, L, d]`` or ``[L, d]``
    :param mask: boolean ``[B, L]``; padded steps leave the state unchanged
    :returns: the final hidden state ``[B, hidden]`` (``[hidden]`` for an unbatched input)
    """
    H = numcore.as_tensor(H)
    if H.ndim == 2:
        return numcore.reshape(gru_encode(cell, numcore.reshape(H, (1,) + H.shape), None), (-1,))
    if H.shape[1] < 1:
        raise numcore.DimensionError("cannot encode an empty sequence")
    h = numcore.Tensor(np.zeros((H.shape[0], cell.hidden_dim)))
    for t in range(H.shape[1]):
        h = _masked(cell.step(H[:, t, :], h), h, _mask_column(mask, t))
    return h


class BiLSTM(object):
    """Bidirectional LSTM whose output is the concatenation of the two final states.

    :param out_dim: total output size, split evenly between the directions
    :raises: :class:`kbvqa.ConfigError` for an odd ``out_dim``
    """
    def __init__(self, store, name, in_dim, out_dim):
        super(BiLSTM, self).__init__()
        if out_dim % 2:
            raise ConfigError("BiLSTM output size has to be even but got %s" % out_dim)
        self.name = name
        self.out_dim = out_dim
        self.forward_cell = LSTMCell(store, name + ".fw", in_dim, out_dim // 2)
        self.backward_cell = LSTMCell(store, name + ".bw", in_dim, out_dim // 2)

    def _run(self, cell, H, mask, steps):
        zeros = np.zeros((H.shape[0], cell.hidden_dim))
        h, c = numcore.Tensor(zeros), numcore.Tensor(zeros)
        for t in steps:
            column = _mask_column(mask, t)
            h_new, c_new = cell.step(H[:, t, :], h, c)
            h, c = _masked(h_new, h, column), _masked(c_new, c, column)
        return h

    def __call__(self, H, mask=None):
        length = H.shape[1]
        if length < 1:
            raise numcore.DimensionError("cannot encode an empty sequence")
        forward = self._run(self.forward_cell, H, mask, range(length))
        backward = self._run(self.backward_cell, H, mask, range(length - 1, -1, -1))
        return numcore.concat([forward, backward], axis=-1)


def bilstm_encode(bilstm, H, mask=None):
    """Encode a sequence ``[B, L, d]`` (or ``[L, d]``) with a :class:`BiLSTM`.

    With right padding the backward direction starts at the last real token, because padded
    steps keep the zero initial state.
    """
    H = numcore.as_tensor(H)
    if H.ndim == 2:
        return numcore.reshape(bilstm(numcore.reshape(H, (1,) + H.shape)), (-1,))
    return bilstm(H, mask)


def embed_tokens(table, ids):
    """Look up the embeddings of token ``ids``; unused rows get a zero gradient.

    :raises: :class:`IndexError` for ids outside the vocabulary
    """
    return numcore.gather(table, ids)


def pad_sequences(sequences, max_len):
    """Right-pad (and truncate) id sequences.

    :returns: ``(ids, mask)`` arrays of shape ``[B, L]``, ``L`` the longest kept length
    :raises: :class:`ValueError` for an empty sequence
    """
    if any(len(s) == 0 for s in sequences):
        raise ValueError("Sequences need at least one token")
    length = min(max(len(s) for s in sequences), max_len)
    ids = np.full((len(sequences), length), vocab.PAD, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for row, seq in enumerate(sequences):
        seq = list(seq)[:length]
        ids[row, :len(seq)] = seq
        mask[row, :len(seq)] = True
    return ids, mask


class TopDownAttention(object):
    """Question guided attention over object features.

    ``a_i = W_a f_a([v_i, q])``, ``a = softmax(a)``, ``v_hat = sum_i a_i v_i``
    """
    def __init__(self, store, name, feature_dim, query_dim, hidden_dim):
        super(TopDownAttention, self).__init__()
        self.name = name
        self.f_a = GatedLayer(store, name + ".f_a", feature_dim + query_dim, hidden_dim)
        self.w_a = store.require(name + ".w_a", (hidden_dim, 1))

    def __call__(self, v, q):
        """
        :param v: features ``[B, K, F]``
        :param q: query ``[B, D]``
        :returns: ``(v_hat [B, F], attention [B, K])``
        """
        batch, objects = v.shape[0], v.shape[1]
        tiled = numcore.reshape(q, (batch, 1, q.shape[-1])) * np.ones((1, objects, 1))
        scores = numcore.reshape(linear(self.f_a(numcore.concat([v, tiled], axis=-1)), self.w_a), (batch, objects))
        attention = numcore.softmax(scores, axis=-1)
        weighted = numcore.matmul(numcore.reshape(attention, (batch, 1, objects)), v)
        return numcore.reshape(weighted, (batch, v.shape[-1])), attention


def top_down_attention(layer, v, q):
    """Apply a :class:`TopDownAttention` layer to one sample (``v [K, F]``, ``q [D]``) or a batch."""
    v, q = numcore.as_tensor(v), numcore.as_tensor(q)
    if v.ndim == 2:
        v_hat, attention = layer(numcore.reshape(v, (1,) + v.shape), numcore.reshape(q, (1, -1)))
        return numcore.reshape(v_hat, (-1,)), numcore.reshape(attention, (-1,))
    return layer(v, q)


class SelfAttentiveQuestion(object):
    """Self-attention over word embeddings followed by a BiLSTM.

    Every token attends over all (unpadded) tokens with weights ``softmax(H H^T)``; the attended
    sequence is concatenated with ``H`` and encoded by the BiLSTM.
    """
    def __init__(self, store, name, word_dim, out_dim):
        super(SelfAttentiveQuestion, self).__init__()
        self.name = name
        self.bilstm = BiLSTM(store, name + ".bilstm", 2 * word_dim, out_dim)

    def __call__(self, H, mask=None):
        """
        :param H: word embeddings ``[B, L, d]``
        :param mask: boolean ``[B, L]``
        :returns: ``(q [B, out], attention [B, L, L])`` where row ``j`` of the attention holds
                  the weights token ``j`` assigns to every token
        """
        scores = numcore.matmul(H, numcore.transpose(H))
        key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, :]
        attention = numcore.softmax(scores, axis=-1, mask=key_mask)
        attended = numcore.matmul(attention, H)
        return self.bilstm(numcore.concat([attended, H], axis=-1), mask), attention


def self_attention_question(layer, H, mask=None):
    """Apply a :class:`SelfAttentiveQuestion` layer to ``[L, d]`` or ``[B, L, d]`` embeddings."""
    H = numcore.as_tensor(H)
    if H.ndim == 2:
        q, attention = layer(numcore.reshape(H, (1,) + H.shape))
        return numcore.reshape(q, (-1,)), numcore.reshape(attention, attention.shape[1:])
    return layer(H, mask)


class Fusion(object):
    """Joint embedding ``h = f_v(v) * f_q(q)`` of two gated layers."""
    def __init__(self, store, name, visual_dim, query_dim, out_dim):
        super(Fusion, self).__init__()
        self.name = name
        self.f_v = GatedLayer(store, name + ".f_v", visual_dim, out_dim)
        self.f_q = GatedLayer(store, name + ".f_q", query_dim, out_dim)

    def __call__(self, v_hat, q):
        return self.f_v(v_hat) * self.f_q(q)


def fuse(layer, v_hat, q):
    return layer(v_hat, q)
