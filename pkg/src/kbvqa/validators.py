"""Collection of configuration validators"""
import abc
import functools
import logging

__all__ = ['ValidatorInterface', 'PositiveValidator', 'ClueSourceValidator', 'EvenValidator', 'ChoiceValidator',
           'FlagValidator', 'ValidationException', 'ConfigError', 'config_wraps', 'validate_config']

logger = logging.getLogger(__name__)

_FUNC_ATTRS = ['validators']


class ValidationException(Exception):
    """Raised when calling :class:`kbvqa.ValidatorInterface` and a configuration is invalid."""
    pass


class ConfigError(ValidationException):
    """Raised for invalid configuration files, values and model sizes."""
    pass


class ValidatorInterface(object, metaclass=abc.ABCMeta):
    """Validator interface

    A validator checks a given :class:`kbvqa.RunConfig` and raises a
    :class:`ConfigError <kbvqa.ConfigError>` if it cannot be used.
    This can be used to check which methods of a provider work with a given configuration
    (see :func:`kbvqa.validate_config`).

    Creating your own validator is simple.
    Just subclass from this class and override :meth:`kbvqa.ValidatorInterface.__call__`.

    .. testcode::

        import kbvqa

        class SmallMemoryValidator(kbvqa.ValidatorInterface):
            def __call__(self, config):
                super(SmallMemoryValidator, self).__call__(config)
                if config.memory_size > 32:
                    raise kbvqa.ConfigError("Expected at most 32 memory slots.")

        val = SmallMemoryValidator()
        val(kbvqa.RunConfig(memory_size=16))

        try:
            val(kbvqa.RunConfig())
        except kbvqa.ConfigError:
            pass
        else:
            assert False, 'Validator should have raised.'

    All validators call ``super``, so they can be combined as mix-ins.
    """
    @abc.abstractmethod
    def __call__(self, config):  # pragma: no cover
        """Validate the given configuration

        :param config: the configuration
        :type config: :class:`kbvqa.RunConfig`
        :raises: :class:`ConfigError <kbvqa.ConfigError>`
        """
        pass


class PositiveValidator(ValidatorInterface):
    """Validate that numeric fields are strictly positive.

    .. doctest::

        >>> import kbvqa
        >>> val = kbvqa.PositiveValidator(["memory_size"])
        >>> val(kbvqa.RunConfig())
        >>> try:
        ...     val(kbvqa.RunConfig(memory_size=0))
        ... except kbvqa.ConfigError as err:
        ...     print(err)
        memory_size has to be positive but got 0
    """
    def __init__(self, fields):
        super(PositiveValidator, self).__init__()
        self.fields = list(fields)

    def __call__(self, config):
        super(PositiveValidator, self).__call__(config)
        for field in self.fields:
            value = getattr(config, field)
            if not value > 0:
                raise ConfigError("%s has to be positive but got %s" % (field, value))


class ClueSourceValidator(ValidatorInterface):
    """Validate that subject clues, object clues or both are used for retrieval."""
    def __call__(self, config):
        super(ClueSourceValidator, self).__call__(config)
        if not (config.use_subject_clues or config.use_object_clues):
            raise ConfigError("At least one of use_subject_clues and use_object_clues has to be enabled.")


class EvenValidator(ValidatorInterface):
    """Validate that size fields are even, e.g. the output of a bidirectional encoder."""
    def __init__(self, fields):
        super(EvenValidator, self).__init__()
        self.fields = list(fields)

    def __call__(self, config):
        super(EvenValidator, self).__call__(config)
        for field in self.fields:
            value = getattr(config, field)
            if value % 2:
                raise ConfigError("%s has to be even but got %s" % (field, value))


class ChoiceValidator(ValidatorInterface):
    """Validate that a field takes one of the given values."""
    def __init__(self, field, choices):
        super(ChoiceValidator, self).__init__()
        self.field = field
        self.choices = list(choices)

    def __call__(self, config):
        super(ChoiceValidator, self).__call__(config)
        value = getattr(config, self.field)
        if value not in self.choices:
            raise ConfigError("%s has to be one of %s but got %s" % (self.field, self.choices, value))


class FlagValidator(ValidatorInterface):
    """Validate that a boolean field has the expected value.

    Used for provider methods that only make sense in one mode, e.g. explaining attention
    weights needs ``use_two_way_attention``.
    """
    def __init__(self, field, expected=True):
        super(FlagValidator, self).__init__()
        self.field = field
        self.expected = expected

    def __call__(self, config):
        super(FlagValidator, self).__call__(config)
        if bool(getattr(config, self.field)) != self.expected:
            raise ConfigError("%s has to be %s" % (self.field, "enabled" if self.expected else "disabled"))


def config_wraps(towrap):
    """Use this when creating decorators instead of :func:`functools.wraps`

    :param towrap: the function to wrap
    :type towrap: :data:`types.FunctionType`
    :returns: the decorator
    :rtype: :data:`types.FunctionType`

    Makes sure to transfer the attached validators to the wrapped function.
    On top of that uses :func:`functools.wraps`.
    """
    def config_wraps_dec(func):
        if towrap:
            func = functools.wraps(towrap)(func)
        for attr in _FUNC_ATTRS:
            setattr(func, attr, getattr(towrap, attr, None))
        return func
    return config_wraps_dec


def validate_config(validators, attr=None):
    """Create decorator that validates the configuration before calling the wrapped function

    :param validators: the validators
    :type validators: :class:`list` of :class:`kbvqa.ValidatorInterface`
    :param attr: if given, the configuration is the attribute of this name of the first argument
                 (e.g. ``config`` of a provider), else the first argument itself
    :type attr: :class:`str` | ``None``

    The validators are also stored in the attribute ``validators`` of the returned function.
    :meth:`kbvqa.ProviderBase.list_methods` uses them to filter out methods that do not work
    with a given configuration.

    .. testcode::

        import kbvqa

        @kbvqa.validate_config([kbvqa.FlagValidator("use_relation_filter")])
        def filtered_recall(config):
            return config.topk_relations

        filtered_recall(kbvqa.RunConfig())  # works

        try:
            filtered_recall(kbvqa.RunConfig(use_relation_filter=False))
        except kbvqa.ConfigError:
            pass
        else:
            assert False, "Validator should have raised"
    """
    def validate_config_dec(func):
        @config_wraps(func)
        def wrapped(first, *args, **kwargs):
            config = getattr(first, attr, None) if attr else first
            if config is None:
                raise ConfigError("No configuration loaded.")
            for v in validators:
                v(config)
            return func(first, *args, **kwargs)
        wrapped.validators = list(wrapped.validators or []) + list(validators)
        return wrapped
    return validate_config_dec
