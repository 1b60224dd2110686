"""Providers expose functionality to a kbvqa server"""
import importlib
import logging
import os
import types

from . import config as configmod
from . import dataset
from . import evaluation
from . import kbstore
from . import numcore
from . import training
from . import validators

__all__ = ['ProviderBase', 'ChainedProvider', 'KBQAProvider', 'get_attr_from_dotted_path']

logger = logging.getLogger(__name__)


class ProviderBase(object):
    """Base class for all Providers.

    A provider exposes methods via the :class:`kbvqa.Server` to clients.
    By default all public methods (that do not start with an underscore) are exposed.

    Creating your own basic provider is very simple:

    .. testcode::

        import kbvqa

        class MyProvider(kbvqa.ProviderBase):
            def exposed(self):
                print("I'm exposed")
            def _private(self):
                print("I'm private")

    .. testcode::

        server = kbvqa.Server()
        provider = MyProvider(server)
        server.set_provider(provider)
        methods = provider.list_methods()
        assert "exposed" in methods
        assert "_private" not in methods
        server.server_close()

    When starting the server from the command line via ``kbvqa serve``,
    it's automatically setup with a :class:`kbvqa.ChainedProvider`
    that combines a :class:`kbvqa.KBQAProvider` with plug-ins.
    """
    def __init__(self, server):
        """Initialize provider

        :param server: the server that is using the provider
        :type server: :class:`kbvqa.Server`
        """
        super(ProviderBase, self).__init__()
        self._server = server

    def __str__(self):
        return "<{classname} at {memloc}>".format(classname=self.__class__.__name__, memloc=hex(id(self)))

    def __repr__(self):
        return "{classname}({server!r})".format(classname=self.__class__.__name__,
                                                server=self.server)

    @property
    def server(self):
        return self._server

    def _get_methods(self, config=None):
        """Return a dictionary of all methods provided.

        :param config: if given, return only methods whose validators accept it
        :type config: :class:`kbvqa.RunConfig`
        :returns: dict method names and methods
        """
        d = {}
        for attrname in dir(self):
            attr = getattr(self, attrname)
            if not attrname.startswith('_') and isinstance(attr, (types.FunctionType, types.MethodType)):
                if config is not None and hasattr(attr, 'validators'):
                    for v in (attr.validators or []):
                        try:
                            v(config)
                        except validators.ValidationException:
                            break
                    else:
                        d[attrname] = attr
                else:
                    d[attrname] = attr
        return d

    def list_methods(self, config_path=None):
        """Return a list of methods that this Provider exposes to clients

        To get more information for each method use :meth:`kbvqa.ProviderBase.help`.

        By default this returns all available methods.
        Given a configuration file only the methods that work with that configuration are
        listed, see :func:`kbvqa.validate_config`.

        :param config_path: path to a run configuration
        :type config_path: :class:`str`
        :returns: list of :class:`str`
        """
        config = configmod.RunConfig.load(config_path) if config_path else None
        return sorted(self._get_methods(config=config).keys())

    def _get_method(self, name):
        return getattr(self, name)

    def help(self, name):
        """Return the docstring of the method

        :param name: the name of the method.
        :type name: :class:`str`
        """
        method = self._get_method(name)
        return method.__doc__

    def kbvqa_version(self):
        """Return the kbvqa version"""
        import kbvqa
        return kbvqa.__version__

    def echo(self, echo):
        """Echo the given object

        Can be used for simple tests.
        For example to test if certain values can be send to
        and received from the server.

        :param echo: the object to echo
        :returns: the given echo
        """
        return echo


class ChainedProvider(ProviderBase):
    """Provider that can chain multiple other providers together

    :meth:`kbvqa.ChainedProvider.add_provider` is a function
    to provide a simple plug-in system.

    Example:

    .. testcode::

        import kbvqa

        class FooProvider(kbvqa.ProviderBase):
            def foo(self): pass

        class BarProvider(kbvqa.ProviderBase):
            def bar(self): pass

        server = kbvqa.Server()
        providers = [FooProvider(server), BarProvider(server)]
        p = kbvqa.ChainedProvider(server, providers)
        methods = p.list_methods()
        assert "foo" in methods
        assert "bar" in methods
        server.server_close()

    Methods are cached in :data:`kbvqa.ChainedProvider._cached_methods`.
    :meth:`kbvqa.ChainedProvider._get_methods` will use the cached value unless it's ``None``.
    :meth:`kbvqa.ChainedProvider.add_provider` will reset the cache.
    """
    def __init__(self, server, providers=None):
        """Initialize a provider which acts as a combination of the given
        providers.

        :param server: the server that is using the provider
        :type server: :class:`kbvqa.Server`
        :param providers: list of providers.
                          A provider's methods at the front of the list will take precedence.
        :type providers: :class:`list` of :class:`ProviderBase`
        """
        super(ChainedProvider, self).__init__(server)
        self._providers = providers or []
        self._cached_methods = None

    def _get_method(self, name):
        return self._get_methods()[name]

    def add_provider(self, dotted_path):
        """Add a new provider

        :param dotted_path: dotted path to provider class.
                            E.g. ``mypkg.mymod.MyProvider``.
        :type dotted_path: :class:`str`

        The module has to be importable.
        If the given provider has methods with the same name as the existing ones,
        its methods will take precedence.

        .. testcode::

            import kbvqa
            server = kbvqa.Server()
            cp = kbvqa.ChainedProvider(server)
            cp.add_provider('kbvqa.KBQAProvider')
            assert "query_kb" in cp.list_methods()
            server.server_close()

        This will invalidate the cached methods on this instance and also on the server.
        """
        providercls = get_attr_from_dotted_path(dotted_path)
        self._providers.insert(0, providercls(self.server))
        self._cached_methods = None
        self.server._set_funcs()

    def _get_methods(self, config=None):
        methods = {}
        if config is not None or self._cached_methods is None:
            for p in reversed(self._providers):
                methods.update(p._get_methods(config=config))
            methods.update(super(ChainedProvider, self)._get_methods(config=config))
            if config is None:
                self._cached_methods = methods
        else:
            methods = self._cached_methods
        return methods


_loaded = validators.validate_config([], attr="config")


class KBQAProvider(ProviderBase):
    """Answers questions of a dataset with the checkpoints of a run.

    Call :meth:`load` with a run configuration first. The knowledge base, vocabularies and
    checkpoints are read from the ``data_dir`` and ``work_dir`` of that configuration.
    All other methods raise :class:`kbvqa.ConfigError` until then.
    """
    def __init__(self, server):
        super(KBQAProvider, self).__init__(server)
        self.config = None
        self._kb = None
        self._vocabularies = None
        self._detector = None
        self._memnet = None
        self._splits = {}

    def load(self, config_path):
        """Load a run configuration together with its knowledge base and checkpoints.

        :param config_path: path to the configuration file
        :type config_path: :class:`str`
        :returns: a summary with the number of facts and the loaded checkpoints
        :rtype: :class:`dict`
        """
        config = configmod.RunConfig.load(config_path)
        kb, vocabularies = training.load_resources(config)
        workspace = training.Workspace(config.work_dir)
        self._detector = None
        self._memnet = None
        if os.path.exists(workspace.detector_checkpoint):
            self._detector = training.load_detector(workspace.detector_checkpoint, config, vocabularies)
        if os.path.exists(workspace.memnet_checkpoint):
            self._memnet = training.load_memnet(workspace.memnet_checkpoint, config, vocabularies)
        self.config, self._kb, self._vocabularies = config, kb, vocabularies
        self._splits = {}
        logger.info("loaded %s with %r", config_path, kb)
        return {"facts": len(kb), "detector": self._detector is not None, "memnet": self._memnet is not None}

    @_loaded
    def query_kb(self, subjects=None, objects=None, relations=None, hops=1):
        """Retrieve candidate facts for the given clues.

        :param subjects: subject clue entities
        :param objects: object clue entities
        :param relations: if given, keep only candidates with these relations
        :param hops: hop count
        :returns: one ``[subject, relation, object, orientation, provenance]`` list per candidate,
                  the provenance is a list of ``[role, clue]`` pairs
        """
        found = kbstore.retrieve_candidates(self._kb, subjects or [], objects or [], relations, int(hops),
                                            self.config.directed_hops)
        return [list(fact) + [sorted(list(p) for p in prov)] for fact, prov in zip(found.candidates,
                                                                                     found.provenance)]

    def _sample(self, split, sample_id):
        if split not in self._splits:
            self._splits[split] = training.load_run_split(self.config, split)
        data = self._splits[split]
        for index, sample in enumerate(data.samples):
            if sample.sample_id == sample_id:
                return data, index
        raise KeyError("No sample %s in split %s" % (sample_id, split))

    def _reason(self, split, sample_id):
        if self._detector is None or self._memnet is None:
            raise validators.ConfigError("Both checkpoints are needed, train the run of %s first"
                                         % self.config.work_dir)
        data, index = self._sample(split, sample_id)
        sample = data.samples[index]
        single = dataset.Split(data.name, [sample], data.features)
        prediction = training.predict_phrases(self._detector, single, self.config, self._vocabularies.words)
        clues = training.clues_from_predictions(prediction, self._vocabularies, self.config.topk_subjects,
                                                self.config.topk_objects, self.config.topk_relations)[0]
        pair = training.retrieve_for_sample(self._kb, sample, clues, self.config)
        bank = evaluation.evaluation_memory(self._kb, pair, self.config, index)
        batch = next(dataset.iter_batches(single, self._vocabularies.words, 1, self.config.max_question_len,
                                          casefold=self.config.casefold))
        with numcore.no_grad():
            output = self._memnet(batch.features, batch.ids, batch.mask, self._memnet.encode_banks([bank]),
                                  training=False)
        outcome = evaluation.score_sample(sample, bank, output.probabilities.data[0], clues, pair,
                                          self.config.use_relation_filter)
        return sample, bank, output, outcome

    @_loaded
    def answer(self, split, sample_id):
        """Answer one sample of a split.

        :param split: split name, e.g. ``test``
        :param sample_id: the sample id
        :returns: the predicted answer, the supporting fact and its probability,
                  plus the expected answer and the failure category
        :rtype: :class:`dict`
        """
        sample, bank, output, outcome = self._reason(split, sample_id)
        best = outcome.ranking[0]
        return {"answer": kbstore.answer_of(bank.facts[best]), "fact": list(bank.facts[best]),
                "probability": float(output.probabilities.data[0][best]), "expected": sample.answer,
                "category": outcome.category}

    @validators.validate_config([validators.FlagValidator("use_two_way_attention")], attr="config")
    def explain(self, split, sample_id):
        """Return the attention weights behind the answer of one sample.

        Only available with ``use_two_way_attention``.

        :returns: the memory facts, the question tokens and one list of weights per attention
                  (``memory``, ``question``, ``visual`` and ``generalization``)
        :rtype: :class:`dict`
        """
        sample, bank, output, outcome = self._reason(split, sample_id)
        attention = {}
        for key, value in output.attention.items():
            attention[key] = None if value is None else value.data[0].tolist()
        return {"memory": [list(f) for f in bank.facts], "question": list(sample.question),
                "attention": attention, "ranking": outcome.ranking}


def get_attr_from_dotted_path(path):
    """Return the imported object from the given path.

    :param path: a dotted path where the last segement is the attribute of the module to return.
                 E.g. ``mypkg.mymod.MyClass``.
    :type path: str
    :returns: the object specified by the path
    :raises: :class:`ImportError`, :class:`AttributeError`, :class:`ValueError`
    """
    logger.debug("importing %s", path)
    if '.' not in path:
        msg = "Expected a dotted path (e.g. 'mypkg.mymod.MyClass') but got {0!r}".format(path)
        raise ValueError(msg)

    providermodname, providerclsname = path.rsplit('.', 1)
    providermod = importlib.import_module(providermodname)

    return getattr(providermod, providerclsname)
