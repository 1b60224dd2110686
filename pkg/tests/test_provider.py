import pytest

import kbvqa
from kbvqa import provider


class SpamProvider(kbvqa.ProviderBase):
    def spam(self):
        return "spam"

    def foo(self):
        return "spammy foo"


def test_ProviderBase_repr(server):
    pb = kbvqa.ProviderBase(server)
    assert repr(pb) == "ProviderBase({0!r})".format(server)


def test_ProviderBase_str(server):
    pb = kbvqa.ProviderBase(server)
    assert str(pb) == "<ProviderBase at {0}>".format(hex(id(pb)))


def test_ProviderBase_list_methods(server):
    """Test all expected methods are listed"""
    pb = kbvqa.ProviderBase(server)
    expected = ["echo", "help", "kbvqa_version", "list_methods"]
    assert pb.list_methods() == expected


def test_ProviderBase_list_methods_functions(server):
    """Test that functions are returned as well"""
    pb = kbvqa.ProviderBase(server)

    def foo():
        pass  # pragma: nocover
    pb.func = foo

    assert "func" in pb.list_methods()


def test_ProviderBase_list_methods_lambda(server):
    """Test that lambdas are returned as well"""
    pb = kbvqa.ProviderBase(server)
    pb.lambdafunc = lambda: True  # pragma: nocover

    assert "lambdafunc" in pb.list_methods()


@pytest.fixture(scope='function')
def pbwithvalidator(server):
    """A provider base with foo as test function.

    The validator on foo only accepts configurations with a relation filter.
    """
    pb = kbvqa.ProviderBase(server)

    @kbvqa.validate_config([kbvqa.FlagValidator("use_relation_filter")])
    def foo(config):
        pass  # pragma: nocover

    pb.func = foo
    return pb


@pytest.fixture(scope='function')
def config_file(tmp_path):
    def write(**values):
        path = str(tmp_path / "run.cfg")
        kbvqa.RunConfig(**values).save(path)
        return path
    return write


def test_ProviderBase_list_methods_validator_success(pbwithvalidator, config_file):
    """Test that methods that pass validation are not filtered out."""
    assert "func" in pbwithvalidator.list_methods(config_file())


def test_ProviderBase_list_methods_validator_invalid(pbwithvalidator, config_file):
    """Test that methods are filtered out."""
    assert "func" not in pbwithvalidator.list_methods(config_file(use_relation_filter=False))


def test_ProviderBase_get_method(server):
    """Test _get_method returns the methods."""
    pb = kbvqa.ProviderBase(server)
    assert [pb._get_method(m) for m in pb.list_methods()] == [getattr(pb, m) for m in pb.list_methods()]


def test_Providerbase_help(server):
    """Test that help returns the docstring."""
    pb = kbvqa.ProviderBase(server)

    def foo():
        """Test docstring"""
        pass  # pragma: nocover
    pb.foo = foo

    assert pb.help("foo") == "Test docstring"


def test_ProviderBase_kbvqa_version(server):
    assert kbvqa.ProviderBase(server).kbvqa_version() == kbvqa.__version__


def test_ProviderBase_echo(server):
    expected = "test this"
    assert kbvqa.ProviderBase(server).echo(expected) is expected


@pytest.fixture(scope='function')
def foobarprovider(server, fooprovider, barprovider):
    return kbvqa.ChainedProvider(server, [fooprovider, barprovider])


def test_ChainedProvider_get_methods(foobarprovider, fooprovider, barprovider):
    """Test that all methods from all providers are present."""
    methdict = foobarprovider._get_methods()
    expected = {"add_provider": foobarprovider.add_provider,
                "echo": foobarprovider.echo,
                "help": foobarprovider.help,
                "list_methods": foobarprovider.list_methods,
                "foo": fooprovider.foo,
                "bar": barprovider.bar,
                "kbvqa_version": foobarprovider.kbvqa_version}
    assert methdict == expected


def test_ChainedProvider_get_methods_cached(foobarprovider):
    """Test that methods get cached."""
    methdict = foobarprovider._get_methods()
    assert methdict is foobarprovider._get_methods()


def test_ChainedProvider_get_methods_cached_config(foobarprovider):
    """Test that methods do not get cached when calling with a configuration."""
    config = kbvqa.RunConfig()
    methdict = foobarprovider._get_methods(config)
    assert methdict is not foobarprovider._get_methods(config)


def test_ChainedProvider_get_methods_cached_config_fresh(foobarprovider):
    """Test that methods do not get cached when calling with a configuration
    when calling without configuration first."""
    methdict = foobarprovider._get_methods()
    assert methdict is not foobarprovider._get_methods(kbvqa.RunConfig())


@pytest.mark.parametrize("method", ["foo", "bar"])
def test_ChainedProvider_get_method(foobarprovider, method):
    """Test that name resolution works"""
    assert foobarprovider._get_method(method)() == method


def test_ChainedProvider_add_provider(foobarprovider):
    """Test that additional methods are added."""
    foobarprovider.add_provider("test_provider.SpamProvider")
    assert foobarprovider._get_method("spam")() == "spam"


def test_ChainedProvider_add_provider_empty(server):
    """Test that additional methods are added."""
    cp = kbvqa.ChainedProvider(server)
    cp.add_provider("test_provider.SpamProvider")
    assert cp._get_method("spam")() == "spam"


def test_ChainedProvider_add_provider_override(foobarprovider):
    """Test that adding a provider can override existing methods."""
    foobarprovider.add_provider("test_provider.SpamProvider")
    assert foobarprovider._get_method("foo")() == "spammy foo", \
        "Adding a provider should override existing clashing methods."


def mockimport(mocker, sideeffect=None):
    class MyClass(object):
        pass

    importmock = mocker.Mock()
    modmock = mocker.Mock(object)
    modmock.MyClass = MyClass
    importmock.return_value = modmock
    if sideeffect:
        importmock.side_effect = sideeffect

    return mocker.patch('importlib.import_module', importmock)


def test_get_attr_from_dotted_path(mocker):
    """Test the function call importlib correctly"""
    mockedimport = mockimport(mocker)
    result = provider.get_attr_from_dotted_path('test.this.path.MyClass')
    mockedimport.assert_called_once_with('test.this.path')
    assert result is mockedimport('test.this.path').MyClass


def test_get_attr_from_dotted_path_raise_import(mocker):
    mockedimport = mockimport(mocker, ImportError("No module named 'UNKNOWNMODULE'"))
    with pytest.raises(ImportError):
        provider.get_attr_from_dotted_path('UNKNOWNMODULE.stuff')
    mockedimport.assert_called_once_with('UNKNOWNMODULE')


def test_get_attr_from_dotted_path_raise_value(mocker):
    with pytest.raises(ValueError):
        provider.get_attr_from_dotted_path('UNKNOWNMODULE')


def test_get_attr_from_dotted_path_raise_attr(mocker):
    mockedimport = mockimport(mocker)
    with pytest.raises(AttributeError):
        provider.get_attr_from_dotted_path('test.this.path.NotExistentAttr')
    mockedimport.assert_called_once_with('test.this.path')


@pytest.fixture(scope='function')
def kbqa(server):
    return kbvqa.KBQAProvider(server)


@pytest.fixture(scope='function')
def run_config(tiny_config, tiny_data, tmp_path):
    path = str(tmp_path / "run.cfg")
    tiny_config.save(path)
    return path


def test_KBQAProvider_not_loaded(kbqa):
    """Test that the methods need a loaded configuration"""
    with pytest.raises(kbvqa.ConfigError):
        kbqa.query_kb(subjects=["cat"])
    with pytest.raises(kbvqa.ConfigError):
        kbqa.answer("test", "test-00000")


def test_KBQAProvider_load_untrained(kbqa, run_config, tiny_data):
    """Test that loading works before training and answering does not"""
    kb = tiny_data[0]
    assert kbqa.load(run_config) == {"facts": len(kb), "detector": False, "memnet": False}
    with pytest.raises(kbvqa.ConfigError):
        kbqa.answer("test", "test-00000")


def test_KBQAProvider_query_kb(kbqa, run_config, tiny_data):
    """Test that candidates come in both orientations with provenance"""
    kb = tiny_data[0]
    kbqa.load(run_config)
    fact = kb.facts[0]
    found = kbqa.query_kb(subjects=[fact.subject])
    assert [fact.subject, fact.relation, fact.object, "forward", [["subject", fact.subject]]] in found
    filtered = kbqa.query_kb(subjects=[fact.subject], relations=[fact.relation])
    assert set(row[1] for row in filtered) == {fact.relation}


def test_KBQAProvider_answer(kbqa, run_config, trained):
    kbqa.load(run_config)
    result = kbqa.answer("test", "test-00001")
    assert set(result) == {"answer", "fact", "probability", "expected", "category"}
    assert result["answer"] == kbvqa.answer_of(kbvqa.FactTriplet(*result["fact"]))
    assert 0.0 < result["probability"] <= 1.0
    assert result["category"] in kbvqa.FAILURE_CATEGORIES
    with pytest.raises(KeyError):
        kbqa.answer("test", "no-such-sample")


def test_KBQAProvider_explain(kbqa, run_config, trained, tiny_config):
    kbqa.load(run_config)
    result = kbqa.explain("val", "val-00002")
    assert len(result["memory"]) == tiny_config.memory_size
    assert len(result["attention"]["memory"]) == tiny_config.memory_size
    assert len(result["attention"]["question"]) == len(result["question"])
    assert sorted(result["ranking"]) == list(range(tiny_config.memory_size))


def test_KBQAProvider_list_methods(kbqa, config_file):
    """Test that explain is only listed with two-way attention"""
    assert "explain" in kbqa.list_methods(config_file())
    assert "explain" not in kbqa.list_methods(config_file(use_two_way_attention=False))
    assert "query_kb" in kbqa.list_methods(config_file(use_two_way_attention=False))
