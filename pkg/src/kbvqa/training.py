"""Two-stage training.

Stage one trains the :class:`kbvqa.RelationPhraseDetector` on the phrase labels of the
training split. Stage two freezes it, predicts clue sets for every sample, retrieves the
candidate facts once (cached in the work directory) and trains the
:class:`kbvqa.MemoryNetwork` on memory banks that are refilled every epoch.

Every random choice draws from a stream seeded with the run seed plus a fixed key (stage,
epoch, sample index), so a configuration always produces the same checkpoints.
"""
import hashlib
import io
import json
import logging
import os

import numpy as np

from . import dataset
from . import detector
from . import kbstore
from . import memnet
from . import numcore
from . import params
from .validators import ConfigError

__all__ = ['DivergenceError', 'Workspace', 'seeded_rng', 'load_resources', 'check_features', 'load_run_split',
           'build_detector', 'build_memnet', 'load_detector', 'load_memnet', 'train_detector', 'predict_phrases',
           'clues_from_predictions', 'retrieve_for_sample', 'memory_candidates', 'prepare_retrieval', 'train_memnet',
           'train', 'STAGES']

logger = logging.getLogger(__name__)

STAGES = ("detector", "memnet", "all")

_DETECTOR_STREAM = 1
_MEMNET_ORDER_STREAM = 2
_MEMNET_FILL_STREAM = 3
_INIT_STREAM = 0


class DivergenceError(RuntimeError):
    """Raised when a loss or a parameter is not finite; the last good parameters were saved."""
    pass


def seeded_rng(seed, *keys):
    """A random stream determined by the run seed and the given non-negative integer keys."""
    return np.random.RandomState([seed] + [int(k) for k in keys])


class Workspace(object):
    """File layout of a work directory.

    :param work_dir: the directory, created on first use
    :param detector_checkpoint: overrides the default detector checkpoint path
    """
    def __init__(self, work_dir, detector_checkpoint=None):
        super(Workspace, self).__init__()
        self.work_dir = work_dir
        self.detector_checkpoint = detector_checkpoint or os.path.join(work_dir, "detector.ckpt")
        self.memnet_checkpoint = os.path.join(work_dir, "memnet.ckpt")

    def __repr__(self):
        return "Workspace({0!r})".format(self.work_dir)

    def ensure(self):
        if not os.path.isdir(self.work_dir):
            os.makedirs(self.work_dir)
        return self

    def path(self, name):
        return os.path.join(self.work_dir, name)


def load_resources(config):
    """Load the knowledge base and vocabularies of ``config.data_dir``."""
    kb = kbstore.KnowledgeBase.load(os.path.join(config.data_dir, "kb.json"))
    vocabularies = dataset.Vocabularies.load(config.data_dir)
    return kb, vocabularies


def check_features(config, split):
    """Make sure the image features of ``split`` fit the models of ``config``.

    :raises: :class:`kbvqa.ConfigError` naming the configured and the stored sizes
    """
    _, objects, dim = split.features.shape
    if (objects, dim) != (config.num_objects, config.feature_dim):
        raise ConfigError("The %s features hold %s objects with %s dimensions per image but the configuration "
                          "sets num_objects = %s and feature_dim = %s" % (split.name, objects, dim,
                                                                         config.num_objects, config.feature_dim))


def load_run_split(config, name):
    """Load split ``name`` of ``config.data_dir`` and :func:`check_features` it."""
    split = dataset.load_split(config.data_dir, name)
    check_features(config, split)
    return split


def _new_store(config, stream):
    numcore.set_default_dtype(config.dtype)
    return params.ParameterStore(seeded_rng(config.seed, _INIT_STREAM, stream))


def build_detector(config, vocabularies, store=None):
    """Create the detector on ``store`` (a fresh one by default)."""
    store = store if store is not None else _new_store(config, _DETECTOR_STREAM)
    return detector.RelationPhraseDetector.from_config(store, config, len(vocabularies.words),
                                                       len(vocabularies.entities), len(vocabularies.relations))


def build_memnet(config, vocabularies, store=None, detector_store=None):
    """Create the memory network on ``store``.

    With ``share_word_embeddings`` a fresh network starts from the detector word embeddings.
    Parameters the forward pass does not use in the configured mode are frozen.
    """
    fresh = store is None
    store = store if store is not None else _new_store(config, _MEMNET_ORDER_STREAM)
    network = memnet.MemoryNetwork.from_config(store, config, vocabularies.words)
    if fresh and config.share_word_embeddings and detector_store is not None:
        store.assign(network.prefix + ".embedding", detector_store["detector.embedding"].data)
    for prefix in network.unused_prefixes():
        store.set_trainable(prefix, False)
    return network


def load_detector(path, config, vocabularies):
    numcore.set_default_dtype(config.dtype)
    store, meta = params.load_checkpoint(path)
    logger.debug("loaded detector trained for %s epochs", meta.get("epochs"))
    return build_detector(config, vocabularies, store)


def load_memnet(path, config, vocabularies):
    numcore.set_default_dtype(config.dtype)
    store, meta = params.load_checkpoint(path)
    logger.debug("loaded memory network trained for %s epochs", meta.get("epochs"))
    return build_memnet(config, vocabularies, store)


def _meta(config, kind, epochs):
    return {"kind": kind, "epochs": epochs, "config": config.to_dict()}


def _diverged(store, snapshot, path, meta, what, reason):
    logger.error("%s diverged (%s), restoring the last good parameters to %s", what, reason, path)
    store.restore(snapshot)
    params.save_checkpoint(path, store, meta)
    raise DivergenceError("%s diverged (%s)" % (what, reason))


def _guarded_step(loss, store, lr, config, snapshot, path, meta, what):
    """Backpropagate ``loss`` and apply one Adam step.

    The loss, the gradients and the updated values have to be finite. Otherwise the
    store goes back to ``snapshot``, which is written to ``path`` before
    :class:`DivergenceError` is raised.
    """
    if not np.isfinite(loss.item()):
        _diverged(store, snapshot, path, meta, what, "loss %s" % loss.item())
    numcore.backward(loss)
    finite, name = store.all_finite(grads=True)
    if not finite:
        _diverged(store, snapshot, path, meta, what, "gradient of %s" % name)
    params.adam_step(store, lr, config.weight_decay, decoupled=config.decoupled_weight_decay)
    finite, name = store.all_finite()
    if not finite:
        _diverged(store, snapshot, path, meta, what, "value of %s" % name)


def train_detector(config, split, vocabularies, checkpoint, model=None):
    """Stage one: fit the detector with the weighted three-head loss.

    :param config: the run configuration
    :type config: :class:`kbvqa.RunConfig`
    :param split: training samples
    :type split: :class:`kbvqa.Split`
    :param vocabularies: words and labels
    :param checkpoint: written after every epoch
    :param model: continue training this detector instead of a fresh one
    :returns: the trained detector
    :raises: :class:`kbvqa.DivergenceError`
    """
    model = model if model is not None else build_detector(config, vocabularies)
    store = model.store
    params.save_checkpoint(checkpoint, store, _meta(config, "detector", 0))
    for epoch in range(config.detector_epochs):
        snapshot = store.snapshot()
        total, count, relation_hits = 0.0, 0, 0
        batches = dataset.iter_batches(split, vocabularies.words, config.detector_batch, config.max_question_len,
                                       rng=seeded_rng(config.seed, _DETECTOR_STREAM, epoch), casefold=config.casefold)
        for batch in batches:
            labels = [s.phrase_labels(vocabularies.entities, vocabularies.relations) for s in batch.samples]
            targets = detector.PhraseLabels(np.array([lab.subject for lab in labels]),
                                            np.array([lab.relation for lab in labels]),
                                            np.array([lab.object for lab in labels]), *config.loss_weights)
            store.zero_grad()
            pred = model(batch.features, batch.ids, batch.mask)
            loss = detector.detector_loss(pred, targets)
            _guarded_step(loss, store, config.detector_lr, config, snapshot, checkpoint,
                          _meta(config, "detector", epoch), "detector")
            total += loss.item() * len(batch.samples)
            count += len(batch.samples)
            ranked = np.argsort(-pred.relations.data, axis=-1, kind="stable")[:, :config.topk_relations]
            relation_hits += int(sum(t in row for t, row in zip(targets.relation, ranked)))
            logger.debug("detector epoch %s batch loss %.6f", epoch, loss.item())
        logger.info("detector epoch %s loss %.4f top-%s relation accuracy %.4f", epoch + 1, total / max(count, 1),
                    config.topk_relations, relation_hits / float(max(count, 1)))
        params.save_checkpoint(checkpoint, store, _meta(config, "detector", epoch + 1))
    return model


def predict_phrases(model, split, config, words):
    """Predicted distributions for every sample of a split, in sample order.

    :rtype: list of :class:`kbvqa.RelationPhrasePrediction` with numpy rows
    """
    predictions = [None] * len(split)
    with numcore.no_grad():
        for batch in dataset.iter_batches(split, words, config.detector_batch, config.max_question_len,
                                          casefold=config.casefold):
            pred = model(batch.features, batch.ids, batch.mask)
            for row, index in enumerate(batch.indices):
                predictions[index] = pred.row(row)
    return predictions


def clues_from_predictions(predictions, vocabularies, k_subjects, k_objects, k_relations):
    return [detector.top_k_clues(p, k_subjects, k_objects, k_relations, vocabularies.entities,
                                 vocabularies.relations) for p in predictions]


def retrieve_for_sample(kb, sample, clues, config):
    """Candidates of one sample without and with the relation filter.

    Only the clue sources enabled in ``config`` seed the retrieval. The ground truth is
    marked if it was retrieved.

    :returns: ``(unfiltered, filtered)`` :class:`kbvqa.CandidateFactSet`
    """
    subjects = clues.subjects if config.use_subject_clues else []
    objects = clues.objects if config.use_object_clues else []
    unfiltered = kbstore.retrieve_candidates(kb, subjects, objects, None, config.hops, config.directed_hops)
    unfiltered = unfiltered.with_ground_truth(sample.fact)
    return unfiltered, unfiltered.filter_relations(clues.relations)


def memory_candidates(pair, config):
    """The candidate set the memory is filled from under ``config``."""
    unfiltered, filtered = pair
    return filtered if config.use_relation_filter else unfiltered


_RETRIEVAL_INPUTS = ("kb.json", "words.txt", "entities.txt", "relations.txt", "{0}.jsonl", "{0}.features")


def _retrieval_key(config, detector_checkpoint, split_name):
    """Digest of everything the cached candidates depend on, file contents included."""
    digest = hashlib.sha1()
    paths = [detector_checkpoint] + [os.path.join(config.data_dir, name.format(split_name))
                                     for name in _RETRIEVAL_INPUTS]
    for path in paths:
        if os.path.exists(path):
            with io.open(path, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 20), b""):
                    digest.update(chunk)
        digest.update(b"\0")
    settings = [config.topk_subjects, config.topk_objects, config.topk_relations, config.hops, config.directed_hops,
                config.use_subject_clues, config.use_object_clues, config.max_question_len, config.casefold]
    digest.update(json.dumps(settings).encode("utf-8"))
    return digest.hexdigest()[:12]


def prepare_retrieval(config, kb, split, vocabularies, detector_checkpoint, workspace=None):
    """Clue sets and candidate pairs of every sample, loaded from or written to the cache.

    :param detector_checkpoint: the frozen detector
    :param workspace: cache location, ``None`` disables the cache
    :returns: ``(clues, candidates)`` lists in sample order
    """
    cache = None
    if workspace is not None:
        key = _retrieval_key(config, detector_checkpoint, split.name)
        cache = workspace.ensure().path("retrieval-%s-%s.jsonl" % (split.name, key))
        if os.path.exists(cache):
            logger.debug("using cached retrieval %s", cache)
            clues, candidates = [], []
            with io.open(cache, encoding="utf-8") as f:
                for line in f:
                    record = json.loads(line)
                    clues.append(detector.ClueSet.from_json(record["clues"]))
                    candidates.append((kbstore.CandidateFactSet.from_json(record["unfiltered"]),
                                       kbstore.CandidateFactSet.from_json(record["filtered"])))
            return clues, candidates
    model = load_detector(detector_checkpoint, config, vocabularies)
    predictions = predict_phrases(model, split, config, vocabularies.words)
    clues = clues_from_predictions(predictions, vocabularies, config.topk_subjects, config.topk_objects,
                                   config.topk_relations)
    candidates = [retrieve_for_sample(kb, s, c, config) for s, c in zip(split.samples, clues)]
    empty = sum(1 for pair in candidates if not len(memory_candidates(pair, config)))
    if empty:
        logger.warning("%s of %s samples in %s retrieved no candidates", empty, len(split), split.name)
    if cache is not None:
        with io.open(cache, "w", encoding="utf-8") as f:
            for clue, (unfiltered, filtered) in zip(clues, candidates):
                f.write(json.dumps({"clues": clue.to_json(), "unfiltered": unfiltered.to_json(),
                                    "filtered": filtered.to_json()}) + "\n")
    return clues, candidates


def train_memnet(config, kb, split, vocabularies, candidates, checkpoint, model=None, detector_store=None):
    """Stage two: fit the memory network on memory banks built from retrieved candidates.

    The ground truth is injected into every training bank. Banks are refilled every epoch
    from a stream keyed by epoch and sample.

    :param candidates: candidate pairs of :func:`prepare_retrieval`
    :param checkpoint: written after every epoch
    :param detector_store: source of shared word embeddings
    :returns: the trained network
    :raises: :class:`kbvqa.DivergenceError`
    """
    model = model if model is not None else build_memnet(config, vocabularies, detector_store=detector_store)
    store = model.store
    params.save_checkpoint(checkpoint, store, _meta(config, "memnet", 0))
    for epoch in range(config.memnet_epochs):
        snapshot = store.snapshot()
        total, count, hits = 0.0, 0, 0
        batches = dataset.iter_batches(split, vocabularies.words, config.memnet_batch, config.max_question_len,
                                       rng=seeded_rng(config.seed, _MEMNET_ORDER_STREAM, epoch),
                                       casefold=config.casefold)
        for batch in batches:
            banks = [memnet.fill_memory(memory_candidates(candidates[i], config), kb, config.memory_size,
                                        seeded_rng(config.seed, _MEMNET_FILL_STREAM, epoch, i),
                                        ground_truth=split.samples[i].fact) for i in batch.indices]
            gt = [bank.gt_index for bank in banks]
            store.zero_grad()
            output = model(batch.features, batch.ids, batch.mask, model.encode_banks(banks), training=True)
            loss = memnet.qa_loss(output.probabilities, gt)
            _guarded_step(loss, store, config.memnet_lr, config, snapshot, checkpoint,
                          _meta(config, "memnet", epoch), "memory network")
            total += loss.item() * len(banks)
            count += len(banks)
            best = np.argmax(output.probabilities.data, axis=-1)
            hits += int(np.sum(best == np.asarray(gt)))
            logger.debug("memnet epoch %s batch loss %.6f", epoch, loss.item())
        logger.info("memnet epoch %s loss %.4f train top-1 %.4f", epoch + 1, total / max(count, 1),
                    hits / float(max(count, 1)))
        params.save_checkpoint(checkpoint, store, _meta(config, "memnet", epoch + 1))
    return model


def train(config, stage="all", detector_checkpoint=None):
    """Run the training stages on ``config.data_dir`` and write checkpoints to ``config.work_dir``.

    :param config: the run configuration
    :type config: :class:`kbvqa.RunConfig`
    :param stage: ``detector``, ``memnet`` or ``all``
    :param detector_checkpoint: frozen detector used by stage two, defaults to the one in the work directory
    :returns: dict from stage name to checkpoint path
    :raises: :class:`ValueError` for an unknown stage, :class:`kbvqa.DivergenceError`
    """
    if stage not in STAGES:
        raise ValueError("Unknown stage %s, expected one of %s" % (stage, ", ".join(STAGES)))
    workspace = Workspace(config.work_dir, detector_checkpoint).ensure()
    kb, vocabularies = load_resources(config)
    split = load_run_split(config, "train")
    if not len(split):
        raise ValueError("Training split of %s is empty" % config.data_dir)
    written = {}
    if stage in ("detector", "all"):
        logger.info("training the detector on %s samples", len(split))
        train_detector(config, split, vocabularies, workspace.detector_checkpoint)
        written["detector"] = workspace.detector_checkpoint
    if stage in ("memnet", "all"):
        _, candidates = prepare_retrieval(config, kb, split, vocabularies, workspace.detector_checkpoint, workspace)
        detector_store = None
        if config.share_word_embeddings:
            detector_store, _ = params.load_checkpoint(workspace.detector_checkpoint)
        logger.info("training the memory network on %s samples", len(split))
        train_memnet(config, kb, split, vocabularies, candidates, workspace.memnet_checkpoint,
                     detector_store=detector_store)
        written["memnet"] = workspace.memnet_checkpoint
    return written
