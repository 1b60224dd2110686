"""Run and generator configuration in flat ``key = value`` files.

A configuration file lists one field per line. Blank lines and lines starting with ``#``
are ignored, booleans accept ``true/false/yes/no/1/0`` and lists are comma separated:

.. code-block:: ini

    # small run
    memory_size = 32
    use_relation_filter = false
    eval_splits = val, test

Every field has a default, so a file only needs the fields that differ from it. Unknown
and duplicate keys are rejected.
"""
import collections
import io
import logging

from . import validators
from .validators import ConfigError

__all__ = ['RunConfig', 'GeneratorSpec', 'DEFAULT_VALIDATORS']

logger = logging.getLogger(__name__)

_TRUE = ("true", "yes", "1", "on")
_FALSE = ("false", "no", "0", "off")


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError("expected a boolean but got %r" % text)


def _parse_list(text):
    return [item.strip() for item in text.split(",") if item.strip()]


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(value)
    return str(value)


_PARSERS = {bool: _parse_bool, int: int, float: float, str: lambda s: s.strip(), list: _parse_list}


class _FlatConfig(object):
    """Base of the configurations; subclasses declare ``FIELDS`` as ``(name, type, default)``."""
    FIELDS = ()

    def __init__(self, **values):
        super(_FlatConfig, self).__init__()
        known = dict((name, (kind, default)) for name, kind, default in self.FIELDS)
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError("Unknown configuration keys: %s" % ", ".join(unknown))
        for name, kind, default in self.FIELDS:
            value = values.get(name, default)
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if kind is list:
                value = list(value)
            elif not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
                raise ConfigError("%s expects %s but got %r" % (name, kind.__name__, value))
            setattr(self, name, value)
        self.validate()

    def validate(self):  # pragma: no cover
        pass

    def __eq__(self, other):
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        changed = ["{0}={1!r}".format(n, getattr(self, n)) for n, _, d in self.FIELDS if getattr(self, n) != d]
        return "{0}({1})".format(self.__class__.__name__, ", ".join(changed))

    def to_dict(self):
        return collections.OrderedDict((n, getattr(self, n)) for n, _, _ in self.FIELDS)

    def replace(self, **overrides):
        """Return a copy with some fields changed."""
        values = self.to_dict()
        values.update(overrides)
        return self.__class__(**values)

    def dumps(self):
        """Every field in file format."""
        return "".join("{0} = {1}\n".format(n, _format(v)) for n, v in self.to_dict().items())

    @classmethod
    def loads(cls, text, source="<string>"):
        """Parse configuration text.

        :raises: :class:`kbvqa.ConfigError` naming the offending line
        """
        kinds = dict((name, kind) for name, kind, _ in cls.FIELDS)
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError("%s:%s: expected key = value but got %r" % (source, lineno, line))
            if key not in kinds:
                raise ConfigError("%s:%s: unknown key %s" % (source, lineno, key))
            if key in values:
                raise ConfigError("%s:%s: duplicate key %s" % (source, lineno, key))
            try:
                values[key] = _PARSERS[kinds[key]](raw)
            except ValueError as err:
                raise ConfigError("%s:%s: invalid value for %s: %s" % (source, lineno, key, err))
        return cls(**values)

    @classmethod
    def load(cls, path):
        with io.open(path, encoding="utf-8") as f:
            config = cls.loads(f.read(), source=path)
        logger.debug("loaded %r from %s", config, path)
        return config

    def save(self, path):
        with io.open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())


_SIZE_FIELDS = ['word_dim', 'detector_hidden', 'memory_dim', 'feature_dim', 'num_objects', 'max_question_len',
                'topk_subjects', 'topk_objects', 'topk_relations', 'hops', 'memory_size', 'detector_lr',
                'detector_batch', 'memnet_lr', 'memnet_batch', 'bn_eps']

DEFAULT_VALIDATORS = [
    validators.PositiveValidator(_SIZE_FIELDS),
    validators.ClueSourceValidator(),
    validators.EvenValidator(['memory_dim']),
    validators.ChoiceValidator('dtype', ['float32', 'float64']),
]
"""Validators every :class:`RunConfig` passes on construction."""


class RunConfig(_FlatConfig):
    """All settings of a training and evaluation run.

    .. doctest::

        >>> import kbvqa
        >>> config = kbvqa.RunConfig.loads("memory_size = 32\\nuse_relation_filter = no")
        >>> config.memory_size, config.use_relation_filter, config.topk_subjects
        (32, False, 40)
        >>> config.replace(memory_size=8).memory_size
        8

    :raises: :class:`kbvqa.ConfigError` for unknown keys or values rejected by :data:`DEFAULT_VALIDATORS`
    """
    FIELDS = (
        ('word_dim', int, 300),
        ('detector_hidden', int, 512),
        ('memory_dim', int, 128),
        ('feature_dim', int, 2048),
        ('num_objects', int, 36),
        ('max_question_len', int, 20),
        ('topk_subjects', int, 40),
        ('topk_objects', int, 40),
        ('topk_relations', int, 3),
        ('hops', int, 1),
        ('directed_hops', bool, False),
        ('casefold', bool, True),
        ('memory_size', int, 96),
        ('detector_lr', float, 1e-4),
        ('detector_batch', int, 32),
        ('detector_epochs', int, 10),
        ('memnet_lr', float, 1e-3),
        ('memnet_batch', int, 64),
        ('memnet_epochs', int, 10),
        ('weight_decay', float, 1e-6),
        ('decoupled_weight_decay', bool, True),
        ('lambda_subject', float, 1.0),
        ('lambda_relation', float, 1.0),
        ('lambda_object', float, 1.0),
        ('use_subject_clues', bool, True),
        ('use_object_clues', bool, True),
        ('use_relation_filter', bool, True),
        ('use_two_way_attention', bool, True),
        ('share_word_embeddings', bool, False),
        ('preserve_retrieved_gt', bool, True),
        ('bn_momentum', float, 0.9),
        ('bn_eps', float, 1e-5),
        ('dtype', str, 'float64'),
        ('seed', int, 0),
        ('data_dir', str, 'data'),
        ('work_dir', str, 'work'),
        ('eval_splits', list, ['test']),
        ('diagnostics', bool, False),
    )

    def validate(self):
        for validator in DEFAULT_VALIDATORS:
            validator(self)
        for field in ('detector_epochs', 'memnet_epochs'):
            if getattr(self, field) < 0:
                raise ConfigError("%s has to be non-negative but got %s" % (field, getattr(self, field)))
        for field in ('weight_decay', 'lambda_subject', 'lambda_relation', 'lambda_object'):
            if getattr(self, field) < 0:
                raise ConfigError("%s has to be non-negative but got %s" % (field, getattr(self, field)))
        if not 0 <= self.bn_momentum < 1:
            raise ConfigError("bn_momentum has to be in [0, 1) but got %s" % self.bn_momentum)
        if not self.eval_splits:
            raise ConfigError("eval_splits needs at least one split")

    @property
    def loss_weights(self):
        return (self.lambda_subject, self.lambda_relation, self.lambda_object)


class GeneratorSpec(_FlatConfig):
    """Settings of the synthetic dataset generator.

    :raises: :class:`kbvqa.ConfigError` for inconsistent generator settings, e.g. zero relations
    """
    FIELDS = (
        ('entities', int, 50),
        ('relations', int, 5),
        ('facts_per_entity', int, 2),
        ('train_size', int, 500),
        ('val_size', int, 100),
        ('test_size', int, 100),
        ('num_objects', int, 8),
        ('feature_dim', int, 32),
        ('noise', float, 0.1),
        ('distractors', int, 3),
        ('multiword_every', int, 7),
        ('seed', int, 0),
    )

    def validate(self):
        for field in ('entities', 'relations', 'facts_per_entity', 'train_size', 'num_objects', 'feature_dim'):
            if getattr(self, field) < 1:
                raise ConfigError("%s has to be at least 1 but got %s" % (field, getattr(self, field)))
        for field in ('val_size', 'test_size', 'distractors', 'multiword_every'):
            if getattr(self, field) < 0:
                raise ConfigError("%s has to be non-negative but got %s" % (field, getattr(self, field)))
        if self.noise < 0:
            raise ConfigError("noise has to be non-negative but got %s" % self.noise)
        if self.distractors >= self.num_objects:
            raise ConfigError("%s distractors do not fit next to the concept into %s objects" % (
                self.distractors, self.num_objects))
        if self.facts_per_entity > self.relations:
            raise ConfigError("facts_per_entity (%s) cannot exceed the number of relations (%s)" % (
                self.facts_per_entity, self.relations))
