import pytest

import kbvqa


def test_reserved_ids():
    vocab = kbvqa.Vocabulary.build([["b", "a"]])
    assert vocab.tokens == ["<pad>", "<unk>", "a", "b"]
    assert vocab.encode(["<pad>", "<unk>"]) == [kbvqa.PAD, kbvqa.UNK]


def test_unknown_words():
    vocab = kbvqa.Vocabulary.build([["cat"]])
    assert vocab.encode(["dog", "cat"]) == [kbvqa.UNK, 2]
    assert vocab.decode([2, 1]) == ["cat", "<unk>"]


def test_save_load(tmp_path):
    """The line number of the file is the id."""
    vocab = kbvqa.Vocabulary.build([["which", "animal"], ["polar", "bear"]])
    path = str(tmp_path / "words.txt")
    vocab.save(path)
    with open(path) as f:
        assert f.readline() == "<pad>\n"
    assert kbvqa.Vocabulary.load(path).tokens == vocab.tokens


def test_duplicate_tokens():
    with pytest.raises(ValueError):
        kbvqa.Vocabulary(["<pad>", "<unk>", "a", "a"])


def test_tokenize():
    assert kbvqa.tokenize("What  is THIS") == ["what", "is", "this"]
    assert kbvqa.tokenize("What is", casefold=False) == ["What", "is"]


def test_label_vocabulary(tmp_path):
    labels = kbvqa.LabelVocabulary(["cat", "polar bear"])
    assert labels.index("polar bear") == 1
    assert labels.label(0) == "cat"
    with pytest.raises(KeyError):
        labels.index("dog")
    path = str(tmp_path / "entities.txt")
    labels.save(path)
    assert kbvqa.LabelVocabulary.load(path).labels == ["cat", "polar bear"]
