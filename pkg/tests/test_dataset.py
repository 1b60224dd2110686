import json
import os

import numpy as np
import pytest

import kbvqa
from kbvqa import FactTriplet


def test_generated_samples_consistent(tiny_spec):
    """Every sample is answered by a fact of the knowledge base."""
    kb, splits = kbvqa.generate_synthetic(tiny_spec)
    assert sorted(splits) == ["test", "train", "val"]
    for samples, features in splits.values():
        assert features.shape == (len(samples), 4, 6)
        for sample in samples:
            assert sample.fact.forward() in kb
            assert sample.answer == kbvqa.answer_of(sample.fact)
    assert len(splits["train"][0]) == 16


def test_generated_facts_unambiguous(tiny_spec):
    """An entity, a relation and a side determine the fact."""
    kb, _ = kbvqa.generate_synthetic(tiny_spec)
    objects = [(f.relation, f.object) for f in kb.facts]
    subjects = [(f.subject, f.relation) for f in kb.facts]
    assert len(set(objects)) == len(objects)
    assert len(set(subjects)) == len(subjects)


def test_generator_reproducible(tiny_spec):
    first_kb, first = kbvqa.generate_synthetic(tiny_spec)
    second_kb, second = kbvqa.generate_synthetic(tiny_spec)
    assert first_kb.facts == second_kb.facts
    assert first["val"][0] == second["val"][0]
    np.testing.assert_array_equal(first["test"][1], second["test"][1])


def test_generator_seed_changes_output(tiny_spec):
    _, first = kbvqa.generate_synthetic(tiny_spec)
    _, second = kbvqa.generate_synthetic(tiny_spec.replace(seed=1))
    assert not np.array_equal(first["train"][1], second["train"][1])


def test_generator_multiword_entities(tiny_spec):
    kb, _ = kbvqa.generate_synthetic(tiny_spec)
    assert any(" " in e for e in kb.entities())


def test_generator_single_entity():
    """A single entity relates to itself."""
    spec = kbvqa.GeneratorSpec(entities=1, relations=2, facts_per_entity=1, train_size=3, val_size=0,
                               test_size=0, num_objects=2, distractors=0)
    kb, splits = kbvqa.generate_synthetic(spec)
    assert kb.facts == [FactTriplet("thing0", "rel0", "thing0")]
    assert all(s.answer == "thing0" for s in splits["train"][0])
    assert splits["val"][1].shape == (0, 2, 32)


def test_sample_answer_mismatch():
    with pytest.raises(ValueError):
        kbvqa.QASample("q", 0, ["what"], FactTriplet("cat", "IsA", "animal"), "animal")


def test_phrase_labels_use_forward_fact():
    """The detector labels name the stored fact regardless of the asked side."""
    entities = kbvqa.LabelVocabulary(["animal", "cat"])
    relations = kbvqa.LabelVocabulary(["IsA"])
    sample = kbvqa.QASample("q", 0, ["what"], FactTriplet("cat", "IsA", "animal").reverse())
    labels = sample.phrase_labels(entities, relations)
    assert (labels.subject, labels.relation, labels.object) == (1, 0, 0)


def test_write_dataset(tiny_config, tiny_data):
    kb, splits, vocabularies = tiny_data
    data_dir = tiny_config.data_dir
    for name in ("kb.tsv", "kb.json", "words.txt", "entities.txt", "relations.txt", "train.jsonl",
                 "train.features"):
        assert os.path.exists(os.path.join(data_dir, name))
    assert kbvqa.read_facts(os.path.join(data_dir, "kb.tsv"), casefold=False) == kb.facts
    loaded = kbvqa.Vocabularies.load(data_dir)
    assert loaded.words.tokens == vocabularies.words.tokens
    assert loaded.entities.labels == vocabularies.entities.labels
    split = kbvqa.load_split(data_dir, "val")
    assert split.name == "val"
    assert split.samples == splits["val"][0]
    np.testing.assert_array_equal(split.features[2], splits["val"][1][2])


def test_vocabularies_cover_facts(tiny_data):
    """Fact words and every entity are known."""
    kb, _, vocabularies = tiny_data
    for fact in kb.facts:
        assert kbvqa.UNK not in vocabularies.words.encode(fact.words())
    assert vocabularies.entities.labels == kb.entities()
    assert vocabularies.relations.labels == kb.relations()


def test_feature_file(tmp_path):
    path = str(tmp_path / "x.features")
    features = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    kbvqa.write_features(path, features)
    loaded = kbvqa.FeatureFile(path)
    assert len(loaded) == 2
    assert loaded.shape == (2, 3, 4)
    assert loaded[1].dtype == np.float64
    np.testing.assert_array_equal(loaded[1], features[1])


def test_feature_file_empty(tmp_path):
    path = str(tmp_path / "x.features")
    kbvqa.write_features(path, np.zeros((0, 3, 4)))
    assert len(kbvqa.FeatureFile(path)) == 0


def test_feature_file_errors(tmp_path):
    path = tmp_path / "x.features"
    with pytest.raises(ValueError):
        kbvqa.write_features(str(path), np.zeros((3, 4)))
    path.write_bytes(b"NOPE" + b"\0" * 12)
    with pytest.raises(ValueError):
        kbvqa.FeatureFile(str(path))


def test_split_feature_rows(tmp_path):
    """A split may not reference rows its feature file lacks."""
    sample = kbvqa.QASample("q", 3, ["what"], FactTriplet("cat", "IsA", "animal"))
    kbvqa.save_samples(str(tmp_path / "test.jsonl"), [sample])
    kbvqa.write_features(str(tmp_path / "test.features"), np.zeros((2, 1, 1)))
    with pytest.raises(IndexError):
        kbvqa.load_split(str(tmp_path), "test")


def test_iter_batches(tiny_config, tiny_data):
    _, _, vocabularies = tiny_data
    split = kbvqa.load_split(tiny_config.data_dir, "train")
    batches = list(kbvqa.iter_batches(split, vocabularies.words, 5, 12))
    assert [len(b.indices) for b in batches] == [5, 5, 5, 1]
    assert batches[0].indices == [0, 1, 2, 3, 4]
    assert batches[0].features.shape == (5, 4, 6)
    assert batches[0].ids.shape == batches[0].mask.shape
    shuffled = list(kbvqa.iter_batches(split, vocabularies.words, 5, 12, rng=np.random.RandomState(0)))
    assert sorted(i for b in shuffled for i in b.indices) == list(range(16))


def test_read_fvqa(tmp_path):
    """Answers pick the orientation, questions with a foreign answer are skipped."""
    facts_path = tmp_path / "facts.json"
    facts_path.write_text(json.dumps({"f1": {"e1_label": "Cat", "r": "/r/IsA", "e2_label": "Animal"}}))
    questions_path = tmp_path / "questions.json"
    questions_path.write_text(json.dumps({
        "q2": {"question": "Which animal is this?", "fact": ["f1"], "answer": "Cat", "img_file": "b.jpg"},
        "q1": {"question": "What is a cat?", "fact": ["f1"], "answer": "animal", "img_file": "a.jpg"},
        "q3": {"question": "What is this?", "fact": ["f1"], "answer": "dog", "img_file": "a.jpg"},
    }))
    facts = kbvqa.read_fvqa_facts(str(facts_path))
    assert facts == {"f1": FactTriplet("cat", "isa", "animal")}
    samples = kbvqa.read_fvqa_questions(str(questions_path), facts, {"a.jpg": 0, "b.jpg": 1})
    assert [s.sample_id for s in samples] == ["q1", "q2"]
    assert samples[0].fact == FactTriplet("animal", "isa", "cat", kbvqa.REVERSED)
    assert samples[1].feature_index == 1
    assert samples[1].question == ["which", "animal", "is", "this", "?"]
