"""Key-value memory network over retrieved facts.

A batch flows through the network in a fixed order:

1. The question is encoded with self-attention and a BiLSTM, the object features are
   attended by that encoding and both are fused into the visual-semantic vector ``h``.
2. Every fact in memory is encoded by a BiLSTM over its words and projected into a key and
   a value (:func:`encode_memory`).
3. ``h`` reads the memory into the summary ``m`` (:func:`vs_aware_read`), and ``m`` in turn
   attends the question words and the image objects (:func:`memory_aware_attend`), giving
   the fused ``h^m``.
4. A second read of the memory updates ``h^m`` through one GRU step and batch normalisation
   (:func:`generalize`).
5. Every slot is scored against the result (:func:`answer_scores`); the answer is the first
   term of the best scoring fact.

With ``two_way_attention=False`` the third step is skipped and ``h^m = h``.

Banks of one batch may hold different numbers of facts. Missing slots are masked and get
zero probability.
"""
import collections
import logging

import numpy as np

from . import encoders
from . import numcore
from . import vocab
from .validators import ConfigError

__all__ = ['MemorySlot', 'MemoryBank', 'EncodedMemory', 'ReasoningState', 'ReasoningOutput', 'BatchNorm',
           'MemoryNetwork', 'fill_memory', 'encode_memory', 'memory_read', 'vs_aware_read',
           'memory_aware_attend', 'generalize', 'answer_scores', 'qa_loss', 'fact_token_ids']

logger = logging.getLogger(__name__)


class MemorySlot(collections.namedtuple('MemorySlot', ['key', 'value', 'fact', 'is_ground_truth'])):
    __slots__ = ()


class MemoryBank(object):
    """The facts held in memory for one sample.

    :param facts: oriented facts, one per slot
    :param gt_index: slot of the ground truth or ``None``
    :param retrieved: per slot, whether the fact came from retrieval (and not from refilling
                      or ground truth injection)
    """
    def __init__(self, facts, gt_index=None, retrieved=None):
        super(MemoryBank, self).__init__()
        self.facts = list(facts)
        self.gt_index = gt_index
        self.retrieved = list(retrieved) if retrieved is not None else [True] * len(self.facts)
        if len(self.retrieved) != len(self.facts):
            raise ValueError("Expected one retrieval flag per slot")
        if gt_index is not None and not 0 <= gt_index < len(self.facts):
            raise IndexError("ground truth slot %s out of range for %s slots" % (gt_index, len(self.facts)))

    def __repr__(self):
        return "MemoryBank({0} slots, gt_index={1})".format(len(self.facts), self.gt_index)

    def __len__(self):
        return len(self.facts)

    def __iter__(self):
        return iter(self.facts)

    @property
    def ground_truth(self):
        return None if self.gt_index is None else self.facts[self.gt_index]


class EncodedMemory(collections.namedtuple('EncodedMemory', ['keys', 'values', 'mask'])):
    """Keys and values ``[B, N, D]`` and the boolean slot mask ``[B, N]`` of a batch."""
    __slots__ = ()


class ReasoningState(collections.namedtuple('ReasoningState', ['summary', 'memory_question', 'memory_visual',
                                                               'fused', 'generalized_summary', 'final'])):
    """Intermediate vectors: ``m``, ``q^m``, ``v^m``, ``h^m``, ``m^h`` and ``h_hat``.

    The first three are ``None`` when two-way attention is disabled.
    """
    __slots__ = ()


class ReasoningOutput(collections.namedtuple('ReasoningOutput', ['probabilities', 'state', 'attention'])):
    """Answer distribution ``[B, N]``, the :class:`ReasoningState` and a dict of attention weights.

    ``attention`` maps ``memory``, ``question``, ``visual`` and ``generalization`` to
    tensors (or ``None`` for the disabled steps).
    """
    __slots__ = ()


def _sample_negatives(kb, present, count, rng):
    if count <= 0:
        return []
    taken = sum(1 for f in present if f is not None and f in kb)
    if 2 * len(kb) - taken <= 2 * count:
        pool = [f for fact in kb.facts for f in (fact, fact.reverse()) if f not in present]
        if len(pool) < count:
            logger.warning("knowledge base has only %s negative facts left, %s requested", len(pool), count)
            return [pool[i] for i in rng.permutation(len(pool))]
        return [pool[i] for i in rng.choice(len(pool), count, replace=False)]
    negatives = []
    seen = set(present)
    while len(negatives) < count:
        fact = kb.facts[rng.randint(len(kb))]
        if rng.randint(2):
            fact = fact.reverse()
        if fact not in seen:
            seen.add(fact)
            negatives.append(fact)
    return negatives


def fill_memory(candidates, kb, memory_size, rng, ground_truth=None, inject=True):
    """Select the facts of a memory bank.

    The ground truth is always kept. Larger candidate sets are subsampled uniformly, smaller
    ones are topped up with random oriented facts of the knowledge base that are not already
    present. The slot order is shuffled.

    :param candidates: retrieved facts
    :type candidates: :class:`kbvqa.CandidateFactSet`
    :param kb: source of negative facts
    :type kb: :class:`kbvqa.KnowledgeBase`
    :param memory_size: number of slots
    :param rng: random source
    :type rng: :class:`numpy.random.RandomState`
    :param ground_truth: oriented ground truth fact; defaults to the one marked in ``candidates``
    :param inject: if True, an unretrieved ``ground_truth`` is added to the bank, otherwise
                   it is left out
    :rtype: :class:`MemoryBank`
    :raises: :class:`kbvqa.ConfigError` if ``memory_size < 1``, :class:`ValueError` if no fact is available

    The bank only holds fewer than ``memory_size`` slots if the knowledge base runs out of
    negatives.
    """
    if memory_size < 1:
        raise ConfigError("Memory size has to be at least 1 but got %s" % memory_size)
    facts = list(candidates)
    retrieved = set(facts)
    gt = None
    if ground_truth is not None:
        if ground_truth in retrieved or inject:
            gt = ground_truth
    elif getattr(candidates, "gt_index", None) is not None:
        gt = facts[candidates.gt_index]
    others = [f for f in facts if f != gt]
    room = memory_size - (gt is not None)
    if len(others) >= room:
        chosen = [others[i] for i in sorted(rng.choice(len(others), room, replace=False))] if room else []
    else:
        chosen = others + _sample_negatives(kb, set(others) | set([gt]), room - len(others), rng)
    slots = ([gt] if gt is not None else []) + chosen
    if not slots:
        raise ValueError("No facts available to fill the memory")
    slots = [slots[i] for i in rng.permutation(len(slots))]
    gt_index = slots.index(gt) if gt is not None else None
    return MemoryBank(slots, gt_index, [f in retrieved for f in slots])


def fact_token_ids(fact, words):
    """Ids of the words ``subject relation object`` of an oriented fact; unknown words map to UNK."""
    return words.encode(vocab.tokenize(" ".join(fact.words()), casefold=False))


class BatchNorm(object):
    """Batch normalisation with trainable scale and shift.

    Training uses the batch statistics and updates the running averages
    ``running = momentum * running + (1 - momentum) * batch``; evaluation uses the running
    averages only, so it also works for a single sample.
    """
    def __init__(self, store, name, dim, momentum=0.9, eps=1e-5):
        super(BatchNorm, self).__init__()
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = store.require(name + ".gamma", (dim,), init="ones")
        self.beta = store.require(name + ".beta", (dim,), init="zeros")
        self.running_mean = store.require_buffer(name + ".running_mean", np.zeros(dim))
        self.running_var = store.require_buffer(name + ".running_var", np.ones(dim))

    def __call__(self, x, training=False):
        if training:
            mean = numcore.reduce_mean(x, axis=0, keepdims=True)
            centered = x - mean
            var = numcore.reduce_mean(centered * centered, axis=0, keepdims=True)
            normalized = centered * numcore.power(var + self.eps, -0.5)
            self.running_mean.data = (self.momentum * self.running_mean.data
                                      + (1.0 - self.momentum) * mean.data[0]).astype(self.running_mean.data.dtype)
            self.running_var.data = (self.momentum * self.running_var.data
                                     + (1.0 - self.momentum) * var.data[0]).astype(self.running_var.data.dtype)
        else:
            scale = 1.0 / np.sqrt(self.running_var.data.astype(np.float64) + self.eps)
            normalized = (x - self.running_mean.data) * scale
        return normalized * self.gamma + self.beta


def memory_read(h, keys, values, weights, mask=None):
    """Additive attention read ``a_i = W_s tanh(h W_h + k_i W_k)``, ``m = sum_i softmax(a)_i v_i``.

    :param h: queries ``[B, D]``
    :param keys: ``[B, N, D]``
    :param values: ``[B, N, D]``
    :param weights: ``(W_h, W_k, W_s)``
    :param mask: boolean slot mask ``[B, N]``
    :returns: ``(m [B, D], attention [B, N])``
    """
    w_query, w_key, w_score = weights
    batch, slots = keys.shape[0], keys.shape[1]
    query = encoders.linear(h, w_query)
    hidden = numcore.tanh(numcore.reshape(query, (batch, 1, query.shape[-1])) + encoders.linear(keys, w_key))
    scores = numcore.reshape(encoders.linear(hidden, w_score), (batch, slots))
    attention = numcore.softmax(scores, axis=-1, mask=mask)
    summary = numcore.matmul(numcore.reshape(attention, (batch, 1, slots)), values)
    return numcore.reshape(summary, (batch, values.shape[-1])), attention


class MemoryNetwork(object):
    """The question answering network with its parameters under ``prefix`` in ``store``.

    :param store: parameter store
    :type store: :class:`kbvqa.ParameterStore`
    :param words: vocabulary of question and fact words
    :type words: :class:`kbvqa.Vocabulary`
    :param two_way_attention: use the memory summary to re-attend question and image
    """
    def __init__(self, store, words, word_dim=300, memory_dim=128, feature_dim=2048, two_way_attention=True,
                 bn_momentum=0.9, bn_eps=1e-5, prefix="memnet"):
        super(MemoryNetwork, self).__init__()
        self.store = store
        self.words = words
        self.prefix = prefix
        self.memory_dim = memory_dim
        self.two_way_attention = two_way_attention
        self.embedding = store.require(prefix + ".embedding", (len(words), word_dim))
        self.question = encoders.SelfAttentiveQuestion(store, prefix + ".question", word_dim, memory_dim)
        self.attention = encoders.TopDownAttention(store, prefix + ".attention", feature_dim, memory_dim, memory_dim)
        self.fusion = encoders.Fusion(store, prefix + ".fusion", feature_dim, memory_dim, memory_dim)
        self.fact_encoder = encoders.BiLSTM(store, prefix + ".facts", word_dim, memory_dim)
        self.w_key = store.require(prefix + ".memory.w_key", (memory_dim, memory_dim))
        self.w_value = store.require(prefix + ".memory.w_value", (memory_dim, memory_dim))
        self.read_weights = self._read_weights(prefix + ".read")
        self.w_question = store.require(prefix + ".attend.w_question", (word_dim, memory_dim))
        self.w_image = store.require(prefix + ".attend.w_image", (feature_dim, memory_dim))
        self.f_v = encoders.GatedLayer(store, prefix + ".attend.f_v", feature_dim, memory_dim)
        self.f_q = encoders.GatedLayer(store, prefix + ".attend.f_q", word_dim, memory_dim)
        self.generalize_weights = self._read_weights(prefix + ".generalize.read")
        self.gru = encoders.GRUCell(store, prefix + ".generalize.gru", 2 * memory_dim, memory_dim)
        self.norm = BatchNorm(store, prefix + ".generalize.bn", memory_dim, bn_momentum, bn_eps)
        self.w_answer = store.require(prefix + ".answer.w", (2 * memory_dim, 1))
        self.b_answer = store.require(prefix + ".answer.b", (1,), init="zeros")

    def _read_weights(self, name):
        dim = self.memory_dim
        return (self.store.require(name + ".w_query", (dim, dim)),
                self.store.require(name + ".w_key", (dim, dim)),
                self.store.require(name + ".w_score", (dim, 1)))

    @classmethod
    def from_config(cls, store, config, words):
        return cls(store, words, word_dim=config.word_dim, memory_dim=config.memory_dim,
                   feature_dim=config.feature_dim, two_way_attention=config.use_two_way_attention,
                   bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)

    def unused_prefixes(self):
        """Parameter prefixes the forward pass does not touch in the current mode."""
        if self.two_way_attention:
            return []
        return [self.prefix + ".read.", self.prefix + ".attend."]

    def encode_facts(self, facts):
        """Encode oriented facts into keys and values ``[n, D]``."""
        ids, mask = encoders.pad_sequences([fact_token_ids(f, self.words) for f in facts], max_len=10 ** 6)
        encoded = self.fact_encoder(encoders.embed_tokens(self.embedding, ids), mask)
        return encoders.linear(encoded, self.w_key), encoders.linear(encoded, self.w_value)

    def encode_banks(self, banks):
        """Encode the facts of all banks of a batch in one pass.

        :rtype: :class:`EncodedMemory`
        """
        slots = max(len(b) for b in banks)
        mask = np.zeros((len(banks), slots), dtype=bool)
        sequences = []
        for row, bank in enumerate(banks):
            mask[row, :len(bank)] = True
            sequences.extend(fact_token_ids(f, self.words) for f in bank)
            sequences.extend([[vocab.UNK]] * (slots - len(bank)))
        ids, id_mask = encoders.pad_sequences(sequences, max_len=10 ** 6)
        encoded = self.fact_encoder(encoders.embed_tokens(self.embedding, ids), id_mask)
        shape = (len(banks), slots, self.memory_dim)
        keys = numcore.reshape(encoders.linear(encoded, self.w_key), shape)
        values = numcore.reshape(encoders.linear(encoded, self.w_value), shape)
        return EncodedMemory(keys, values, mask)

    def visual_semantic(self, features, H, mask=None):
        """The joint image-question embedding ``h`` ``[B, D]``."""
        q, _ = self.question(H, mask)
        v_hat, _ = self.attention(features, q)
        return self.fusion(v_hat, q)

    def attend(self, summary, H, question_mask, features):
        """Memory aware attention over question words and image objects.

        :returns: ``(h^m, q^m, v^m, question attention, visual attention)``
        """
        batch = summary.shape[0]
        column = numcore.reshape(summary, (batch, self.memory_dim, 1))
        q_scores = numcore.reshape(numcore.matmul(encoders.linear(H, self.w_question), column), (batch, H.shape[1]))
        q_mask = None if question_mask is None else np.asarray(question_mask, dtype=bool)
        q_attention = numcore.softmax(q_scores, axis=-1, mask=q_mask)
        memory_question = numcore.reshape(numcore.matmul(numcore.reshape(q_attention, (batch, 1, H.shape[1])), H),
                                          (batch, H.shape[-1]))
        objects = features.shape[1]
        v_scores = numcore.reshape(numcore.matmul(encoders.linear(features, self.w_image), column), (batch, objects))
        v_attention = numcore.softmax(v_scores, axis=-1)
        memory_visual = numcore.reshape(numcore.matmul(numcore.reshape(v_attention, (batch, 1, objects)), features),
                                        (batch, features.shape[-1]))
        fused = self.f_v(memory_visual) * self.f_q(memory_question)
        return fused, memory_question, memory_visual, q_attention, v_attention

    def generalize(self, fused, memory, training=False):
        """Second memory read plus one GRU step and batch normalisation.

        :returns: ``(h_hat, m^h, attention)``
        """
        summary, attention = memory_read(fused, memory.keys, memory.values, self.generalize_weights, memory.mask)
        updated = fused + self.gru.step(numcore.concat([fused, summary], axis=-1), fused)
        return self.norm(updated, training), summary, attention

    def answer(self, final, memory):
        """Answer distribution over the slots ``[B, N]``; the bias is shared by all slots."""
        batch, slots = memory.keys.shape[0], memory.keys.shape[1]
        tiled = numcore.reshape(final, (batch, 1, self.memory_dim)) * np.ones((1, slots, 1))
        logits = encoders.linear(numcore.concat([tiled, memory.keys], axis=-1), self.w_answer)
        logits = numcore.reshape(logits, (batch, slots)) + self.b_answer
        return numcore.softmax(logits, axis=-1, mask=memory.mask)

    def __call__(self, features, ids, mask, memory, training=False):
        """Run the network on a batch.

        :param features: object features ``[B, K, F]``
        :param ids: question token ids ``[B, L]``
        :param mask: boolean question mask ``[B, L]``
        :param memory: encoded banks, see :meth:`encode_banks`
        :type memory: :class:`EncodedMemory`
        :param training: use batch statistics in the normalisation
        :rtype: :class:`ReasoningOutput`
        """
        features = numcore.as_tensor(features)
        H = encoders.embed_tokens(self.embedding, ids)
        h = self.visual_semantic(features, H, mask)
        attention = dict.fromkeys(("memory", "question", "visual"))
        summary = memory_question = memory_visual = None
        if self.two_way_attention:
            summary, attention["memory"] = memory_read(h, memory.keys, memory.values, self.read_weights, memory.mask)
            fused, memory_question, memory_visual, attention["question"], attention["visual"] = self.attend(
                summary, H, mask, features)
        else:
            fused = h
        final, generalized, attention["generalization"] = self.generalize(fused, memory, training)
        probabilities = self.answer(final, memory)
        state = ReasoningState(summary, memory_question, memory_visual, fused, generalized, final)
        return ReasoningOutput(probabilities, state, attention)


def _single_memory(slots):
    keys = numcore.stack([s.key for s in slots], axis=0)
    values = numcore.stack([s.value for s in slots], axis=0)
    return EncodedMemory(numcore.reshape(keys, (1,) + keys.shape), numcore.reshape(values, (1,) + values.shape),
                         None)


def _row(x):
    return numcore.reshape(numcore.as_tensor(x), (1, -1))


def encode_memory(network, candidates):
    """Encode the facts of a candidate set or bank into memory slots.

    :type network: :class:`MemoryNetwork`
    :param candidates: :class:`kbvqa.CandidateFactSet`, :class:`MemoryBank` or list of facts
    :rtype: list of :class:`MemorySlot`
    """
    facts = list(candidates)
    if not facts:
        raise ValueError("Cannot encode an empty memory")
    gt_index = getattr(candidates, "gt_index", None)
    keys, values = network.encode_facts(facts)
    return [MemorySlot(keys[i], values[i], fact, i == gt_index) for i, fact in enumerate(facts)]


def vs_aware_read(network, h, slots):
    """Read the memory summary ``m`` for one visual-semantic vector ``h``.

    :returns: ``(m [D], attention [N])``
    """
    summary, attention = memory_read(_row(h), *_single_memory(slots)[:2], weights=network.read_weights)
    return summary[0], attention[0]


def memory_aware_attend(network, summary, H, features):
    """Attend question words ``H [L, d_w]`` and objects ``[K, F]`` with the summary ``m``.

    :returns: ``(h^m, q^m, v^m, question attention, visual attention)``, all unbatched
    """
    H, features = numcore.as_tensor(H), numcore.as_tensor(features)
    outputs = network.attend(_row(summary), numcore.reshape(H, (1,) + H.shape), None,
                             numcore.reshape(features, (1,) + features.shape))
    return tuple(o[0] for o in outputs)


def generalize(network, fused, slots, training=False):
    """The generalization hop for one sample; ``training`` uses batch statistics.

    :returns: ``(h_hat, m^h, attention)``
    """
    outputs = network.generalize(_row(fused), _single_memory(slots), training)
    return tuple(o[0] for o in outputs)


def answer_scores(network, final, slots):
    """Answer probabilities over the slots of one sample."""
    return network.answer(_row(final), _single_memory(slots))[0]


def qa_loss(probabilities, gt_index):
    """Mean negative log-likelihood of the ground truth slots.

    :param probabilities: ``[N]`` or ``[B, N]``
    :param gt_index: slot index or one per sample
    :raises: :class:`ValueError` if a ground truth index is missing

    .. doctest::

        >>> import numpy as np
        >>> import kbvqa
        >>> round(kbvqa.qa_loss(np.full(96, 1 / 96.0), 5).item(), 4)
        4.5643
    """
    indices = np.atleast_1d(np.asarray(gt_index, dtype=object))
    if any(i is None for i in indices):
        raise ValueError("qa_loss needs the ground truth slot of every sample")
    return numcore.reduce_mean(numcore.cross_entropy(probabilities, np.asarray(gt_index, dtype=np.int64)))
