import pytest

import kbvqa


def test_defaults():
    config = kbvqa.RunConfig()
    assert config.memory_size == 96
    assert (config.topk_subjects, config.topk_objects, config.topk_relations) == (40, 40, 3)
    assert config.eval_splits == ["test"]
    assert config.loss_weights == (1.0, 1.0, 1.0)


def test_loads_types():
    """Values are parsed by the type of their field."""
    config = kbvqa.RunConfig.loads(u"""
# comment
memnet_lr = 0.5
use_two_way_attention = off
eval_splits = val , test
dtype = float32
""")
    assert config.memnet_lr == 0.5
    assert config.use_two_way_attention is False
    assert config.eval_splits == ["val", "test"]
    assert config.dtype == "float32"


def test_int_promoted_to_float():
    assert kbvqa.RunConfig(memnet_lr=1).memnet_lr == 1.0


@pytest.mark.parametrize("text,message", [
    ("memory_size", "expected key = value"),
    ("memorysize = 3", "unknown key"),
    ("seed = 1\nseed = 2", "duplicate key"),
    ("memory_size = many", "invalid value"),
    ("casefold = maybe", "invalid value"),
])
def test_loads_errors(text, message):
    """Errors name the source and line."""
    with pytest.raises(kbvqa.ConfigError) as excinfo:
        kbvqa.RunConfig.loads(text, source="run.cfg")
    assert message in str(excinfo.value)
    assert "run.cfg:" in str(excinfo.value)


@pytest.mark.parametrize("values", [
    dict(memory_size=0),
    dict(memory_dim=7),
    dict(use_subject_clues=False, use_object_clues=False),
    dict(dtype="float16"),
    dict(bn_momentum=1.0),
    dict(weight_decay=-1.0),
    dict(memnet_epochs=-1),
    dict(eval_splits=[]),
    dict(memory_size="8"),
    dict(casefold=1),
    dict(unknown_key=3),
])
def test_invalid_values(values):
    with pytest.raises(kbvqa.ConfigError):
        kbvqa.RunConfig(**values)


def test_save_load(tmp_path):
    config = kbvqa.RunConfig(memory_size=16, use_relation_filter=False, eval_splits=["val", "test"])
    path = str(tmp_path / "run.cfg")
    config.save(path)
    assert kbvqa.RunConfig.load(path) == config


def test_replace():
    config = kbvqa.RunConfig()
    changed = config.replace(topk_subjects=5)
    assert changed.topk_subjects == 5
    assert config.topk_subjects == 40
    assert changed != config
    with pytest.raises(kbvqa.ConfigError):
        config.replace(memory_size=-1)


def test_repr_lists_changes():
    assert repr(kbvqa.RunConfig(seed=3)) == "RunConfig(seed=3)"


def test_zero_epochs_allowed():
    assert kbvqa.RunConfig(detector_epochs=0).detector_epochs == 0


@pytest.mark.parametrize("values", [
    dict(relations=0),
    dict(facts_per_entity=3, relations=2),
    dict(distractors=8, num_objects=8),
    dict(noise=-0.1),
    dict(val_size=-1),
])
def test_generator_spec_invalid(values):
    with pytest.raises(kbvqa.ConfigError):
        kbvqa.GeneratorSpec(**values)


def test_generator_spec_load(tmp_path):
    path = tmp_path / "gen.cfg"
    path.write_text(u"entities = 10\nmultiword_every = 0\n")
    spec = kbvqa.GeneratorSpec.load(str(path))
    assert spec.entities == 10
    assert spec.multiword_every == 0
    assert spec.relations == 5
