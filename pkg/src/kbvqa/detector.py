"""Relation phrase detector.

The detector reads an image and a question and predicts three distributions: the subject
and the object of the supporting fact over the entity vocabulary, and its relation over the
relation vocabulary. The question is encoded by a GRU, the object features are attended
top-down by that encoding and fused with it, and three softmax classifiers share the fused
vector. The highest ranked entries become the clues for knowledge base retrieval.
"""
import collections
import logging

import numpy as np

from . import encoders
from . import numcore

__all__ = ['RelationPhrasePrediction', 'PhraseLabels', 'ClueSet', 'RelationPhraseDetector', 'detect',
           'detector_loss', 'top_k_indices', 'top_k_clues']

logger = logging.getLogger(__name__)


class RelationPhrasePrediction(collections.namedtuple('RelationPhrasePrediction',
                                                      ['subjects', 'relations', 'objects'])):
    """Subject, relation and object distributions of one sample (1-D) or a batch (2-D)."""
    __slots__ = ()

    def row(self, i):
        """The numpy distributions of sample ``i`` of a batched prediction."""
        return RelationPhrasePrediction(*[np.asarray(numcore.as_tensor(d).data[i]) for d in self])


class PhraseLabels(collections.namedtuple('PhraseLabels', ['subject', 'relation', 'object', 'lambda_subject',
                                                           'lambda_relation', 'lambda_object'])):
    """Class indices of the supporting fact plus the loss weight per head.

    The indices are integers for one sample or integer arrays for a batch.
    """
    __slots__ = ()

    def __new__(cls, subject, relation, object, lambda_subject=1.0, lambda_relation=1.0, lambda_object=1.0):
        return super(PhraseLabels, cls).__new__(cls, subject, relation, object,
                                                lambda_subject, lambda_relation, lambda_object)

    @property
    def weights(self):
        return (self.lambda_subject, self.lambda_relation, self.lambda_object)


class ClueSet(collections.namedtuple('ClueSet', ['subjects', 'objects', 'relations', 'subject_scores',
                                                 'object_scores', 'relation_scores'])):
    """Top ranked subject, object and relation strings with their probabilities."""
    __slots__ = ()

    def to_json(self):
        return dict((k, list(v)) for k, v in self._asdict().items())

    @classmethod
    def from_json(cls, payload):
        return cls(*[list(payload[f]) for f in cls._fields])


class RelationPhraseDetector(object):
    """The detector network with its parameters under ``prefix`` in ``store``.

    :param store: parameter store, shared with a loaded checkpoint if given
    :type store: :class:`kbvqa.ParameterStore`
    :param num_words: size of the question vocabulary
    :param num_entities: number of subject/object classes
    :param num_relations: number of relation classes
    :param word_dim: embedding size
    :param hidden_dim: size of the question encoding and the fused vector
    :param feature_dim: size of one object feature
    """
    def __init__(self, store, num_words, num_entities, num_relations, word_dim=300, hidden_dim=512,
                 feature_dim=2048, prefix="detector"):
        super(RelationPhraseDetector, self).__init__()
        self.store = store
        self.prefix = prefix
        self.embedding = store.require(prefix + ".embedding", (num_words, word_dim))
        self.gru = encoders.GRUCell(store, prefix + ".gru", word_dim, hidden_dim)
        self.attention = encoders.TopDownAttention(store, prefix + ".attention", feature_dim, hidden_dim, hidden_dim)
        self.fusion = encoders.Fusion(store, prefix + ".fusion", feature_dim, hidden_dim, hidden_dim)
        self.heads = collections.OrderedDict()
        for head, size in (("subject", num_entities), ("relation", num_relations), ("object", num_entities)):
            self.heads[head] = (store.require("%s.%s.w" % (prefix, head), (hidden_dim, size)),
                                store.require("%s.%s.b" % (prefix, head), (size,), fan_in=hidden_dim))

    @classmethod
    def from_config(cls, store, config, num_words, num_entities, num_relations):
        return cls(store, num_words, num_entities, num_relations, word_dim=config.word_dim,
                   hidden_dim=config.detector_hidden, feature_dim=config.feature_dim)

    def __call__(self, features, ids, mask=None):
        """Predict the distributions for a batch.

        :param features: object features ``[B, K, F]``
        :param ids: question token ids ``[B, L]``
        :param mask: boolean ``[B, L]`` marking real tokens
        :rtype: :class:`RelationPhrasePrediction` of ``[B, C]`` tensors
        """
        features = numcore.as_tensor(features)
        H = encoders.embed_tokens(self.embedding, ids)
        q = encoders.gru_encode(self.gru, H, mask)
        v_hat, _ = self.attention(features, q)
        h = self.fusion(v_hat, q)
        subjects, relations, objects = [numcore.softmax(encoders.linear(h, w, b), axis=-1)
                                        for w, b in self.heads.values()]
        return RelationPhrasePrediction(subjects, relations, objects)


def detect(detector, features, question_ids):
    """Run the detector on one sample.

    :param features: object features ``[K, F]``
    :param question_ids: token ids of the question
    :returns: 1-D distributions
    :rtype: :class:`RelationPhrasePrediction`
    """
    features = numcore.as_tensor(features)
    ids = np.asarray([list(question_ids)], dtype=np.int64)
    pred = detector(numcore.reshape(features, (1,) + features.shape), ids)
    return RelationPhrasePrediction(*[d[0] for d in pred])


def detector_loss(pred, labels):
    """Weighted sum of the cross-entropies of the three heads, averaged over a batch.

    :type pred: :class:`RelationPhrasePrediction`
    :type labels: :class:`PhraseLabels`
    :returns: scalar loss
    :raises: :class:`IndexError` for labels outside a vocabulary, :class:`ValueError` for negative weights

    .. doctest::

        >>> import numpy as np
        >>> import kbvqa
        >>> uniform = kbvqa.RelationPhrasePrediction(np.full(4, 0.25), np.full(2, 0.5), np.full(4, 0.25))
        >>> loss = kbvqa.detector_loss(uniform, kbvqa.PhraseLabels(0, 1, 3))
        >>> bool(abs(loss.item() - (2 * np.log(4) + np.log(2))) < 1e-12)
        True
    """
    if any(w < 0 for w in labels.weights):
        raise ValueError("Loss weights have to be non-negative but got %s" % (labels.weights,))
    targets = (labels.subject, labels.relation, labels.object)
    loss = None
    for dist, target, weight in zip(pred, targets, labels.weights):
        term = numcore.reduce_mean(numcore.cross_entropy(dist, target)) * weight
        loss = term if loss is None else loss + term
    return loss


def top_k_indices(probabilities, k):
    """Indices of the ``k`` largest probabilities, ties broken by the lower index.

    :raises: :class:`ValueError` if ``k < 1``

    .. doctest::

        >>> import kbvqa
        >>> kbvqa.top_k_indices([0.2, 0.5, 0.3], 2)
        [1, 2]
        >>> kbvqa.top_k_indices([0.25, 0.25, 0.25, 0.25], 2)
        [0, 1]
    """
    if k < 1:
        raise ValueError("K has to be at least 1 but got %s" % k)
    scores = np.asarray(numcore.as_tensor(probabilities).data, dtype=np.float64)
    return np.argsort(-scores, kind="stable")[:k].tolist()


def top_k_clues(pred, k_subjects, k_objects, k_relations, entities, relations):
    """Map the top ranked classes of a single-sample prediction to clue strings.

    :param pred: 1-D distributions
    :type pred: :class:`RelationPhrasePrediction`
    :param entities: subject/object labels
    :type entities: :class:`kbvqa.LabelVocabulary`
    :param relations: relation labels
    :type relations: :class:`kbvqa.LabelVocabulary`
    :returns: clue lists of length ``min(K, vocabulary size)``
    :rtype: :class:`ClueSet`
    """
    ranked = []
    for dist, k, labels in ((pred.subjects, k_subjects, entities), (pred.objects, k_objects, entities),
                            (pred.relations, k_relations, relations)):
        scores = np.asarray(numcore.as_tensor(dist).data, dtype=np.float64)
        indices = top_k_indices(scores, k)
        ranked.append(([labels.label(i) for i in indices], [float(scores[i]) for i in indices]))
    (subjects, subject_scores), (objects, object_scores), (relation_names, relation_scores) = ranked
    return ClueSet(subjects, objects, relation_names, subject_scores, object_scores, relation_scores)
