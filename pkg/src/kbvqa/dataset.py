"""Question answering samples, feature files and the synthetic dataset generator.

A data directory holds everything a run reads:

============================ ====================================================
``kb.tsv`` / ``kb.json``     the knowledge base as facts and as index file
``<split>.jsonl``            one :class:`QASample` per line
``<split>.features``         object features of the split, see :class:`FeatureFile`
``words.txt``                question and fact word vocabulary
``entities.txt``             subject/object classes of the detector
``relations.txt``            relation classes of the detector
============================ ====================================================
"""
import collections
import io
import json
import logging
import os
import struct

import numpy as np

from . import detector
from . import encoders
from . import kbstore
from . import vocab
from .validators import ConfigError

__all__ = ['QASample', 'FeatureFile', 'Vocabularies', 'Split', 'Batch', 'FEATURE_MAGIC', 'write_features',
           'save_samples', 'load_samples', 'build_vocabularies', 'load_split', 'load_split_file',
           'iter_batches', 'generate_synthetic', 'write_dataset', 'read_fvqa_facts', 'read_fvqa_questions',
           'SPLITS']

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"KBVF"
_HEADER = struct.Struct("<4sIII")
SPLITS = ("train", "val", "test")


class QASample(collections.namedtuple('QASample', ['sample_id', 'feature_index', 'question', 'fact', 'answer'])):
    """An image-question pair with its supporting fact.

    :param sample_id: unique id within the split
    :param feature_index: row of the image in the split's :class:`FeatureFile`
    :param question: question tokens
    :param fact: oriented ground truth fact; its first term is the answer
    :type fact: :class:`kbvqa.FactTriplet`
    :param answer: the answer
    :raises: :class:`ValueError` if the answer is not the first term of the fact
    """
    __slots__ = ()

    def __new__(cls, sample_id, feature_index, question, fact, answer=None):
        answer = kbstore.answer_of(fact) if answer is None else answer
        if answer != kbstore.answer_of(fact):
            raise ValueError("Sample %s: answer %r is not the first term of %s" % (sample_id, answer, fact))
        return super(QASample, cls).__new__(cls, sample_id, feature_index, list(question), fact, answer)

    def phrase_labels(self, entities, relations, weights=(1.0, 1.0, 1.0)):
        """Detector labels from the underlying forward fact.

        :type entities: :class:`kbvqa.LabelVocabulary`
        :type relations: :class:`kbvqa.LabelVocabulary`
        :rtype: :class:`kbvqa.PhraseLabels`
        """
        forward = self.fact.forward()
        return detector.PhraseLabels(entities.index(forward.subject), relations.index(forward.relation),
                                     entities.index(forward.object), *weights)

    def to_json(self):
        return {"id": self.sample_id, "feature_index": self.feature_index, "question": self.question,
                "fact": list(self.fact), "answer": self.answer}

    @classmethod
    def from_json(cls, payload):
        return cls(payload["id"], payload["feature_index"], payload["question"],
                   kbstore.FactTriplet(*payload["fact"]), payload["answer"])


def write_features(path, features):
    """Write features ``[count, K, dim]`` as header plus row-major float32 records."""
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 3:
        raise ValueError("Expected features of shape [count, K, dim] but got %s" % (features.shape,))
    with io.open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, *features.shape))
        f.write(features.tobytes())


class FeatureFile(object):
    """Read access to a feature container written by :func:`write_features`.

    The records are memory mapped; indexing returns float64 copies.
    """
    def __init__(self, path):
        super(FeatureFile, self).__init__()
        self.path = path
        with io.open(path, "rb") as f:
            magic, count, objects, dim = _HEADER.unpack(f.read(_HEADER.size))
        if magic != FEATURE_MAGIC:
            raise ValueError("%s is not a feature file" % path)
        self.shape = (count, objects, dim)
        if count:
            self._records = np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=self.shape)
        else:
            self._records = np.zeros(self.shape, dtype="<f4")

    def __repr__(self):
        return "FeatureFile({0!r}, shape={1})".format(self.path, self.shape)

    def __len__(self):
        return self.shape[0]

    def __getitem__(self, index):
        return np.array(self._records[index], dtype=np.float64)


class Vocabularies(collections.namedtuple('Vocabularies', ['words', 'entities', 'relations'])):
    """The word vocabulary plus the entity and relation labels."""
    __slots__ = ()

    _FILES = ("words.txt", "entities.txt", "relations.txt")

    def save(self, directory):
        for item, name in zip(self, self._FILES):
            item.save(os.path.join(directory, name))

    @classmethod
    def load(cls, directory):
        words, entities, relations = [os.path.join(directory, name) for name in cls._FILES]
        return cls(vocab.Vocabulary.load(words), vocab.LabelVocabulary.load(entities),
                   vocab.LabelVocabulary.load(relations))


class Split(collections.namedtuple('Split', ['name', 'samples', 'features'])):
    __slots__ = ()

    def __len__(self):
        return len(self.samples)


class Batch(collections.namedtuple('Batch', ['indices', 'samples', 'features', 'ids', 'mask'])):
    """Samples with their features ``[B, K, F]`` and padded question ids and mask ``[B, L]``."""
    __slots__ = ()


def save_samples(path, samples):
    with io.open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps(sample.to_json(), sort_keys=True) + "\n")


def load_samples(path):
    samples = []
    with io.open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                samples.append(QASample.from_json(json.loads(line)))
    return samples


def build_vocabularies(kb, samples):
    """Collect question and fact words plus the detector label sets.

    Fact words are part of the word vocabulary because the memory encodes facts with the same
    embeddings as questions.
    """
    sequences = [s.question for s in samples]
    sequences.extend(vocab.tokenize(" ".join(f.words()), casefold=False) for f in kb.facts)
    entities = set(kb.entities())
    relations = set(kb.relations())
    for sample in samples:
        entities.update((sample.fact.subject, sample.fact.object))
        relations.add(sample.fact.relation)
    return Vocabularies(vocab.Vocabulary.build(sequences), vocab.LabelVocabulary(sorted(entities)),
                        vocab.LabelVocabulary(sorted(relations)))


def load_split_file(path):
    """Load ``<split>.jsonl`` together with the ``<split>.features`` file next to it."""
    samples = load_samples(path)
    features = FeatureFile(os.path.splitext(path)[0] + ".features")
    if samples and max(s.feature_index for s in samples) >= len(features):
        raise IndexError("%s references more feature rows than %s holds" % (path, features.path))
    name = os.path.splitext(os.path.basename(path))[0]
    return Split(name, samples, features)


def load_split(data_dir, name):
    return load_split_file(os.path.join(data_dir, name + ".jsonl"))


def iter_batches(split, words, batch_size, max_len, rng=None, casefold=True):
    """Yield :class:`Batch` objects over a split, shuffled if ``rng`` is given.

    :param words: the word vocabulary
    :type words: :class:`kbvqa.Vocabulary`
    :param max_len: questions are truncated to this many tokens
    """
    order = np.arange(len(split.samples)) if rng is None else rng.permutation(len(split.samples))
    for start in range(0, len(order), batch_size):
        indices = [int(i) for i in order[start:start + batch_size]]
        samples = [split.samples[i] for i in indices]
        features = np.stack([split.features[s.feature_index] for s in samples])
        questions = [words.encode([t.casefold() if casefold else t for t in s.question]) for s in samples]
        ids, mask = encoders.pad_sequences(questions, max_len)
        yield Batch(indices, samples, features, ids, mask)


_OBJECT_TEMPLATES = (["what", "is", "the", "{rel}", "of", "this"],
                     ["which", "thing", "is", "the", "{rel}", "of", "the", "pictured", "object"])
_SUBJECT_TEMPLATES = (["what", "has", "this", "as", "its", "{rel}"],
                      ["which", "thing", "has", "the", "pictured", "object", "as", "{rel}"])


def _fill_template(template, relation):
    tokens = []
    for token in template:
        tokens.extend(relation.split() if token == "{rel}" else [token])
    return tokens


def _names(prefix, count, multiword_every):
    names = []
    for i in range(count):
        name = "%s%s" % (prefix, i)
        if multiword_every and i % multiword_every == multiword_every - 1:
            name = "big " + name
        names.append(name)
    return names


def _generate_facts(spec, entities, relations, rng):
    if len(entities) == 1:
        return [kbstore.FactTriplet(entities[0], r, entities[0]) for r in relations[:spec.facts_per_entity]]
    facts = []
    used_objects = set()
    for subject in entities:
        for relation in rng.permutation(relations)[:spec.facts_per_entity]:
            relation = str(relation)
            choices = [o for o in entities if o != subject and (relation, o) not in used_objects]
            if not choices:
                continue
            obj = choices[rng.randint(len(choices))]
            used_objects.add((relation, obj))
            facts.append(kbstore.FactTriplet(subject, relation, obj))
    return facts


def _make_sample(spec, kb, prototypes, entity_ids, split_code, index, sample_id):
    rng = np.random.RandomState([spec.seed, split_code, index])
    fact = kb.facts[rng.randint(len(kb))]
    ask_object = fact.subject != fact.object and rng.randint(2) == 1
    if ask_object:
        concept, gt, templates = fact.subject, fact.reverse(), _OBJECT_TEMPLATES
    else:
        concept, gt, templates = fact.object, fact, _SUBJECT_TEMPLATES
    question = _fill_template(templates[rng.randint(len(templates))], fact.relation)
    image = rng.normal(scale=spec.noise, size=(spec.num_objects, spec.feature_dim))
    slots = rng.permutation(spec.num_objects)
    image[slots[0]] += prototypes[entity_ids[concept]]
    others = [e for e in entity_ids if e != concept]
    for slot in slots[1:1 + min(spec.distractors, len(others))]:
        image[slot] += prototypes[entity_ids[others[rng.randint(len(others))]]]
    return QASample(sample_id, index, question, gt), image


def generate_synthetic(spec):
    """Generate a knowledge base and train/val/test splits.

    Every entity has a prototype feature vector. A sample picks a fact of the knowledge base,
    shows the entity on one side of the fact in the image (prototype plus noise, next to
    distractor entities and noise-only objects) and asks for the entity on the other side.
    The question names the relation and, through its template, the side that is asked for.
    Facts are generated such that an entity, a relation and a side determine the fact, so
    the answer follows from the image, the question and the knowledge base.

    :param spec: the generator settings
    :type spec: :class:`kbvqa.GeneratorSpec`
    :returns: the knowledge base and a dict from split name to ``(samples, features)``
    :raises: :class:`kbvqa.ConfigError` if no fact can be generated

    Every sample draws from its own random stream seeded with ``(seed, split, index)``, so
    the output only depends on the settings.
    """
    rng = np.random.RandomState([spec.seed, 0])
    entities = _names("thing", spec.entities, spec.multiword_every)
    relations = ["rel%s" % i for i in range(spec.relations)]
    facts = _generate_facts(spec, entities, relations, rng)
    if not facts:
        raise ConfigError("Generator settings do not admit any fact")
    kb = kbstore.build_index(facts)
    prototypes = rng.normal(size=(len(entities), spec.feature_dim))
    entity_ids = collections.OrderedDict((e, i) for i, e in enumerate(entities))
    splits = {}
    for code, (name, size) in enumerate(zip(SPLITS, (spec.train_size, spec.val_size, spec.test_size)), 1):
        samples, images = [], []
        for index in range(size):
            sample, image = _make_sample(spec, kb, prototypes, entity_ids, code, index, "%s-%05d" % (name, index))
            if sample.fact.forward() not in kb:
                raise AssertionError("generated fact %s is not in the knowledge base" % (sample.fact,))
            samples.append(sample)
            images.append(image)
        features = np.stack(images) if images else np.zeros((0, spec.num_objects, spec.feature_dim))
        splits[name] = (samples, features.astype(np.float32))
    logger.info("generated %r and splits %s", kb,
                ", ".join("%s=%s" % (n, len(splits[n][0])) for n in SPLITS))
    return kb, splits


def write_dataset(directory, kb, splits):
    """Write a knowledge base and splits as a data directory and build the vocabularies.

    :returns: the vocabularies
    :rtype: :class:`Vocabularies`
    """
    if not os.path.isdir(directory):
        os.makedirs(directory)
    with io.open(os.path.join(directory, "kb.tsv"), "w", encoding="utf-8") as f:
        for fact in kb.facts:
            f.write("\t".join(fact.terms()) + "\n")
    kb.save(os.path.join(directory, "kb.json"))
    for name, (samples, features) in splits.items():
        save_samples(os.path.join(directory, name + ".jsonl"), samples)
        write_features(os.path.join(directory, name + ".features"), features)
    vocabularies = build_vocabularies(kb, splits.get("train", ([], None))[0])
    vocabularies.save(directory)
    logger.debug("wrote %s splits to %s", len(splits), directory)
    return vocabularies


def read_fvqa_facts(path, casefold=True):
    """Read a fact file in the FVQA JSON layout (fact id to ``e1_label``, ``r``, ``e2_label``).

    :returns: dict from fact id to forward :class:`kbvqa.FactTriplet`
    """
    with io.open(path, encoding="utf-8") as f:
        payload = json.load(f)
    facts = {}
    for fact_id, entry in payload.items():
        relation = entry["r"].split("/")[-1] if "/" in entry["r"] else entry["r"]
        terms = [kbstore.normalize_term(t, casefold) for t in (entry["e1_label"], relation, entry["e2_label"])]
        if not all(terms):
            raise kbstore.FactParseError("empty term in fact %s" % fact_id)
        facts[fact_id] = kbstore.FactTriplet(*terms)
    return facts


def read_fvqa_questions(path, facts, image_index, casefold=True):
    """Read questions in the FVQA JSON layout (question id to ``question``, ``fact``, ``answer``, ``img_file``).

    :param facts: result of :func:`read_fvqa_facts`
    :param image_index: dict from image file name to the row in the feature file
    :returns: the samples; questions whose answer matches neither term of their fact are skipped
    """
    with io.open(path, encoding="utf-8") as f:
        payload = json.load(f)
    samples = []
    skipped = 0
    for question_id in sorted(payload):
        entry = payload[question_id]
        fact = facts[entry["fact"][0]]
        answer = kbstore.normalize_term(entry["answer"], casefold)
        if answer == fact.subject:
            oriented = fact
        elif answer == fact.object:
            oriented = fact.reverse()
        else:
            skipped += 1
            continue
        samples.append(QASample(question_id, image_index[entry["img_file"]],
                                vocab.tokenize(entry["question"].replace("?", " ?"), casefold), oriented))
    if skipped:
        logger.warning("skipped %s questions whose answer is not a term of their fact", skipped)
    return samples
