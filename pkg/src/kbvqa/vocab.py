"""Token and label vocabularies"""
import io
import logging

__all__ = ['Vocabulary', 'LabelVocabulary', 'PAD', 'UNK', 'tokenize']

logger = logging.getLogger(__name__)

PAD = 0
UNK = 1
_RESERVED = ("<pad>", "<unk>")


def tokenize(text, casefold=True):
    """Split text on whitespace, optionally case-folded."""
    tokens = text.split()
    return [t.casefold() for t in tokens] if casefold else tokens


class Vocabulary(object):
    """Word vocabulary where the line number of the vocabulary file is the id.

    Ids ``0`` and ``1`` are reserved for padding and unknown words.

    .. doctest::

        >>> import kbvqa
        >>> vocab = kbvqa.Vocabulary.build([["which", "animal"], ["which", "color"]])
        >>> vocab.encode(["which", "zebra"])
        [4, 1]
        >>> len(vocab)
        5
    """
    def __init__(self, tokens):
        super(Vocabulary, self).__init__()
        tokens = list(tokens)
        if tuple(tokens[:2]) != _RESERVED:
            tokens = list(_RESERVED) + [t for t in tokens if t not in _RESERVED]
        self.tokens = tokens
        self._ids = dict((t, i) for i, t in enumerate(tokens))
        if len(self._ids) != len(tokens):
            raise ValueError("Vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def __repr__(self):
        return "Vocabulary({0} tokens)".format(len(self))

    @classmethod
    def build(cls, sequences):
        """Collect all tokens of the given sequences, sorted for a stable id assignment."""
        words = set()
        for seq in sequences:
            words.update(seq)
        return cls(sorted(words - set(_RESERVED)))

    def encode(self, tokens):
        return [self._ids.get(t, UNK) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def save(self, path):
        with io.open(path, "w", encoding="utf-8") as f:
            for token in self.tokens:
                f.write(token + "\n")

    @classmethod
    def load(cls, path):
        with io.open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


class LabelVocabulary(object):
    """Ordered class labels of a classifier head (entities or relations)."""
    def __init__(self, labels):
        super(LabelVocabulary, self).__init__()
        self.labels = list(labels)
        self._ids = dict((label, i) for i, label in enumerate(self.labels))
        if len(self._ids) != len(self.labels):
            raise ValueError("Label vocabulary contains duplicates")

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self._ids

    def __repr__(self):
        return "LabelVocabulary({0} labels)".format(len(self))

    def index(self, label):
        """Class index of ``label``.

        :raises: :class:`KeyError` for unknown labels
        """
        return self._ids[label]

    def label(self, index):
        return self.labels[index]

    def save(self, path):
        with io.open(path, "w", encoding="utf-8") as f:
            for label in self.labels:
                f.write(label + "\n")

    @classmethod
    def load(cls, path):
        with io.open(path, encoding="utf-8") as f:
            return cls(line.rstrip("\n") for line in f if line.rstrip("\n"))
