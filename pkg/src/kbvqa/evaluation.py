"""Evaluation, ablation and top-K sweeps.

Answer accuracy only credits slots that came from retrieval. A ground truth that was not
retrieved is never injected at evaluation time, so answer accuracy is bounded by the answer
recall of the candidates the memory was filled from.

Every evaluated sample also falls into one failure category:

======================= ===========================================================
``correct``             the best slot is the ground truth fact
``correct_other_fact``  the answer is right but the best slot is another fact
``wrong_fact``          the ground truth was in memory but another answer won
``missed_clues``        neither the subject nor the object of the fact was a clue
``missed_relation``     a clue hit, but the relation filter dropped the fact
``not_retrieved``       any other retrieval miss, e.g. a clue source that is disabled
======================= ===========================================================
"""
import collections
import io
import json
import logging
import os

import numpy as np

from . import dataset
from . import kbstore
from . import memnet
from . import numcore
from . import training
from .validators import ConfigError

__all__ = ['EvalReport', 'SampleOutcome', 'AblationRow', 'SweepRow', 'FAILURE_CATEGORIES', 'ABLATION_CASES',
           'score_sample', 'summarize', 'evaluation_memory', 'evaluate', 'evaluate_splits', 'resolve_cases', 'ablate',
           'format_ablation', 'sweep_topk', 'format_sweep']

logger = logging.getLogger(__name__)

FAILURE_CATEGORIES = ("correct", "correct_other_fact", "wrong_fact", "missed_clues", "missed_relation",
                      "not_retrieved")

_EVAL_FILL_STREAM = 4

ABLATION_CASES = collections.OrderedDict([
    ("sub", dict(use_subject_clues=True, use_object_clues=False, use_relation_filter=False,
                 use_two_way_attention=False)),
    ("obj", dict(use_subject_clues=False, use_object_clues=True, use_relation_filter=False,
                 use_two_way_attention=False)),
    ("sub+obj", dict(use_subject_clues=True, use_object_clues=True, use_relation_filter=False,
                     use_two_way_attention=False)),
    ("sub+obj+rel", dict(use_subject_clues=True, use_object_clues=True, use_relation_filter=True,
                         use_two_way_attention=False)),
    ("sub+obj+att", dict(use_subject_clues=True, use_object_clues=True, use_relation_filter=False,
                         use_two_way_attention=True)),
    ("full", dict(use_subject_clues=True, use_object_clues=True, use_relation_filter=True,
                  use_two_way_attention=True)),
])
"""Flag settings of the ablation cases."""

_CASE_ALIASES = {"both": "sub+obj", "rel": "sub+obj+rel", "att": "sub+obj+att"}


class EvalReport(object):
    """Metrics of one split.

    :param split: split name
    :param samples: number of evaluated samples
    :param failures: count per failure category
    :param metrics: the rates in :attr:`METRICS`, all in ``[0, 1]``

    :meth:`check` enforces ``top3 >= top1``, ``recall_without_relation >= recall_with_relation``,
    ``union_accuracy >= subject_accuracy, object_accuracy`` and that every rate is in ``[0, 1]``.
    """
    METRICS = ('top1', 'top3', 'recall_with_relation', 'recall_without_relation', 'subject_accuracy',
               'object_accuracy', 'union_accuracy', 'relation_accuracy')

    def __init__(self, split, samples, failures=None, **metrics):
        super(EvalReport, self).__init__()
        missing = set(self.METRICS) - set(metrics)
        if missing or set(metrics) - set(self.METRICS):
            raise ValueError("Expected exactly the metrics %s" % (self.METRICS,))
        self.split = split
        self.samples = samples
        self.failures = collections.OrderedDict((c, 0) for c in FAILURE_CATEGORIES)
        self.failures.update(failures or {})
        for name in self.METRICS:
            setattr(self, name, float(metrics[name]))

    def __repr__(self):
        return "EvalReport({0!r}, samples={1}, top1={2:.4f}, top3={3:.4f})".format(
            self.split, self.samples, self.top1, self.top3)

    def __eq__(self, other):
        return isinstance(other, EvalReport) and self.to_json() == other.to_json()

    def __ne__(self, other):
        return not self == other

    def check(self):
        """Raise :class:`AssertionError` if the report is inconsistent."""
        for name in self.METRICS:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise AssertionError("%s of %s is outside [0, 1]: %s" % (name, self.split, getattr(self, name)))
        pairs = [("top3", "top1"), ("recall_without_relation", "recall_with_relation"),
                 ("union_accuracy", "subject_accuracy"), ("union_accuracy", "object_accuracy")]
        for upper, lower in pairs:
            if getattr(self, upper) < getattr(self, lower):
                raise AssertionError("%s < %s on %s" % (upper, lower, self.split))
        return self

    def to_json(self):
        payload = collections.OrderedDict([("split", self.split), ("samples", self.samples)])
        payload.update((name, getattr(self, name)) for name in self.METRICS)
        payload["failures"] = dict(self.failures)
        return payload

    def format(self):
        lines = ["split %s (%s samples)" % (self.split, self.samples)]
        lines.extend("  %-24s %.4f" % (name, getattr(self, name)) for name in self.METRICS)
        lines.extend("  failures %-15s %s" % (c, n) for c, n in self.failures.items())
        return "\n".join(lines)

    @classmethod
    def mean(cls, reports, name="mean"):
        """Average of the rates of several reports; sample and failure counts are summed."""
        reports = list(reports)
        if not reports:
            raise ValueError("Nothing to average")
        failures = collections.Counter()
        for report in reports:
            failures.update(report.failures)
        metrics = dict((m, float(np.mean([getattr(r, m) for r in reports]))) for m in cls.METRICS)
        return cls(name, sum(r.samples for r in reports), failures, **metrics)


class SampleOutcome(collections.namedtuple('SampleOutcome', [
        'sample_id', 'top1', 'top3', 'recall_with_relation', 'recall_without_relation', 'subject_hit',
        'object_hit', 'relation_hit', 'category', 'ranking'])):
    """Per-sample hits; ``ranking`` lists the slot indices by decreasing probability."""
    __slots__ = ()


def score_sample(sample, bank, probabilities, clues, candidates, use_relation_filter=True):
    """Score the answer distribution of one sample.

    :param sample: the sample
    :type sample: :class:`kbvqa.QASample`
    :param bank: the memory the network answered from
    :type bank: :class:`kbvqa.MemoryBank`
    :param probabilities: one probability per slot of ``bank``
    :param clues: the detector clues
    :type clues: :class:`kbvqa.ClueSet`
    :param candidates: ``(unfiltered, filtered)`` candidate sets
    :param use_relation_filter: whether the memory was filled from the filtered candidates
    :rtype: :class:`SampleOutcome`

    The top-3 accuracy counts distinct answers: slots are visited by decreasing probability
    and an answer that was already seen does not take another of the three places.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)[:len(bank)]
    ranking = np.argsort(-probabilities, kind="stable").tolist()
    unfiltered, filtered = candidates
    best = ranking[0]
    top1 = bank.retrieved[best] and kbstore.answer_of(bank.facts[best]) == sample.answer
    seen = []
    top3 = False
    for slot in ranking:
        answer = kbstore.answer_of(bank.facts[slot])
        if answer in seen:
            continue
        seen.append(answer)
        if answer == sample.answer and bank.retrieved[slot]:
            top3 = True
        if len(seen) == 3:
            break
    forward = sample.fact.forward()
    subject_hit = forward.subject in clues.subjects
    object_hit = forward.object in clues.objects
    relation_hit = forward.relation in clues.relations
    used = filtered if use_relation_filter else unfiltered
    if top1:
        category = "correct" if bank.facts[best] == sample.fact else "correct_other_fact"
    elif sample.fact in used:
        category = "wrong_fact"
    elif not (subject_hit or object_hit):
        category = "missed_clues"
    elif use_relation_filter and not relation_hit:
        category = "missed_relation"
    else:
        category = "not_retrieved"
    return SampleOutcome(sample.sample_id, bool(top1), top3, sample.answer in filtered.answers(),
                         sample.answer in unfiltered.answers(), subject_hit, object_hit, relation_hit, category,
                         ranking)


def summarize(split_name, outcomes):
    """Aggregate :class:`SampleOutcome` objects into a checked :class:`EvalReport`.

    :raises: :class:`ValueError` for an empty split
    """
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("Cannot evaluate the empty split %s" % split_name)

    def rate(values):
        return sum(1 for v in values if v) / float(len(outcomes))

    failures = collections.Counter(o.category for o in outcomes)
    report = EvalReport(split_name, len(outcomes), failures,
                        top1=rate(o.top1 for o in outcomes),
                        top3=rate(o.top3 for o in outcomes),
                        recall_with_relation=rate(o.recall_with_relation for o in outcomes),
                        recall_without_relation=rate(o.recall_without_relation for o in outcomes),
                        subject_accuracy=rate(o.subject_hit for o in outcomes),
                        object_accuracy=rate(o.object_hit for o in outcomes),
                        union_accuracy=rate(o.subject_hit or o.object_hit for o in outcomes),
                        relation_accuracy=rate(o.relation_hit for o in outcomes))
    return report.check()


def _diagnostic_record(sample, bank, output, row, outcome, candidates):
    attention = {}
    for key, value in output.attention.items():
        attention[key] = None if value is None else np.asarray(value.data[row]).tolist()
    probabilities = output.probabilities.data[row]
    return {"id": sample.sample_id, "answer": sample.answer, "category": outcome.category,
            "predicted": kbstore.answer_of(bank.facts[outcome.ranking[0]]),
            "candidates": [list(f) for f in candidates],
            "memory": [list(f) for f in bank.facts],
            "attention": attention,
            "top5": [[list(bank.facts[s]), float(probabilities[s]), bank.retrieved[s]] for s in outcome.ranking[:5]]}


def evaluation_memory(kb, pair, config, index):
    """The memory bank of sample ``index`` at evaluation time.

    The ground truth is never injected. With ``preserve_retrieved_gt`` disabled a retrieved
    ground truth may also be dropped when the candidates are subsampled.
    """
    used = training.memory_candidates(pair, config)
    if not config.preserve_retrieved_gt:
        used = kbstore.CandidateFactSet(used.candidates, used.provenance)
    return memnet.fill_memory(used, kb, config.memory_size, training.seeded_rng(config.seed, _EVAL_FILL_STREAM, index),
                              inject=False)


def evaluate(config, split="test", detector_checkpoint=None, memnet_checkpoint=None):
    """Evaluate trained checkpoints on a split of ``config.data_dir``.

    :param config: the run configuration
    :type config: :class:`kbvqa.RunConfig`
    :param split: split name
    :param detector_checkpoint: defaults to the one in ``config.work_dir``
    :param memnet_checkpoint: defaults to the one in ``config.work_dir``
    :rtype: :class:`EvalReport`
    :raises: :class:`ValueError` for an empty split

    With ``diagnostics`` enabled, one JSON record per sample is written to
    ``<work_dir>/diagnostics-<split>.jsonl``.
    """
    workspace = training.Workspace(config.work_dir, detector_checkpoint).ensure()
    kb, vocabularies = training.load_resources(config)
    data = training.load_run_split(config, split)
    if not len(data):
        raise ValueError("Cannot evaluate the empty split %s" % split)
    clues, candidates = training.prepare_retrieval(config, kb, data, vocabularies, workspace.detector_checkpoint,
                                                   workspace)
    model = training.load_memnet(memnet_checkpoint or workspace.memnet_checkpoint, config, vocabularies)
    outcomes = [None] * len(data)
    diagnostics = None
    if config.diagnostics:
        diagnostics = io.open(workspace.path("diagnostics-%s.jsonl" % split), "w", encoding="utf-8")
    try:
        with numcore.no_grad():
            for batch in dataset.iter_batches(data, vocabularies.words, config.memnet_batch, config.max_question_len,
                                              casefold=config.casefold):
                banks = [evaluation_memory(kb, candidates[i], config, i) for i in batch.indices]
                output = model(batch.features, batch.ids, batch.mask, model.encode_banks(banks), training=False)
                for row, (index, bank) in enumerate(zip(batch.indices, banks)):
                    sample = data.samples[index]
                    outcome = score_sample(sample, bank, output.probabilities.data[row], clues[index],
                                           candidates[index], config.use_relation_filter)
                    outcomes[index] = outcome
                    if diagnostics is not None:
                        record = _diagnostic_record(sample, bank, output, row, outcome,
                                                    training.memory_candidates(candidates[index], config))
                        diagnostics.write(json.dumps(record) + "\n")
    finally:
        if diagnostics is not None:
            diagnostics.close()
    report = summarize(split, outcomes)
    logger.info("%s: top-1 %.4f top-3 %.4f recall %.4f/%.4f (with/without relation)", split, report.top1,
                report.top3, report.recall_with_relation, report.recall_without_relation)
    return report


def evaluate_splits(config, splits=None, **kwargs):
    """Evaluate several splits and average them.

    :param splits: split names, defaults to ``config.eval_splits``
    :returns: dict from split name to report, and the mean report
    """
    splits = list(splits or config.eval_splits)
    reports = collections.OrderedDict((name, evaluate(config, name, **kwargs)) for name in splits)
    return reports, EvalReport.mean(reports.values())


class AblationRow(collections.namedtuple('AblationRow', ['case', 'overrides', 'report'])):
    __slots__ = ()


def resolve_cases(cases):
    """Turn case names (or ``(name, overrides)`` pairs) into ``(name, overrides)`` pairs.

    :raises: :class:`kbvqa.ConfigError` for unknown names
    """
    resolved = []
    for case in cases:
        if isinstance(case, tuple):
            resolved.append((case[0], dict(case[1])))
            continue
        name = _CASE_ALIASES.get(case, case)
        if name not in ABLATION_CASES:
            raise ConfigError("Unknown ablation case %s, expected one of %s" % (
                case, ", ".join(list(ABLATION_CASES) + sorted(_CASE_ALIASES))))
        resolved.append((name, dict(ABLATION_CASES[name])))
    return resolved


def ablate(config, cases=tuple(ABLATION_CASES), split="test", train_models=True):
    """Train and evaluate one memory network per ablation case with a shared detector.

    :param config: the base configuration
    :param cases: names from :data:`ABLATION_CASES` (or aliases ``both``, ``rel``, ``att``) or
                  ``(name, overrides)`` pairs
    :param split: evaluation split
    :param train_models: if False, reuse the checkpoints of an earlier run
    :returns: one :class:`AblationRow` per case, in order
    :raises: :class:`kbvqa.ConfigError` for unknown cases or invalid variants (e.g. no clue source)

    Each case works in ``<work_dir>/ablation/<case>``. The answer recall of ``sub+obj`` is
    checked to be at least the one of ``sub`` and of ``obj``.
    """
    resolved = resolve_cases(cases)
    variants = [(name, overrides, config.replace(work_dir=os.path.join(config.work_dir, "ablation", name),
                                                 **overrides)) for name, overrides in resolved]
    workspace = training.Workspace(config.work_dir).ensure()
    if train_models and not os.path.exists(workspace.detector_checkpoint):
        training.train(config, stage="detector")
    rows = []
    for name, overrides, variant in variants:
        logger.info("ablation case %s", name)
        if train_models:
            training.train(variant, stage="memnet", detector_checkpoint=workspace.detector_checkpoint)
        report = evaluate(variant, split, detector_checkpoint=workspace.detector_checkpoint)
        rows.append(AblationRow(name, overrides, report))
    recall = dict((row.case, row.report.recall_without_relation) for row in rows)
    if "sub+obj" in recall:
        for single in ("sub", "obj"):
            if single in recall and recall["sub+obj"] < recall[single]:
                raise AssertionError("recall of sub+obj below %s: %s < %s" % (single, recall["sub+obj"],
                                                                              recall[single]))
    return rows


def format_ablation(rows):
    """Render ablation rows as a text table."""
    header = "%-12s %3s %3s %3s %3s %8s %8s %8s %8s" % ("case", "sub", "obj", "rel", "att", "rec+rel", "rec-rel",
                                                       "top1", "top3")
    lines = [header, "-" * len(header)]
    for row in rows:
        flags = [row.overrides.get(f) for f in ("use_subject_clues", "use_object_clues", "use_relation_filter",
                                                "use_two_way_attention")]
        marks = ["x" if f else ("" if f is not None else "?") for f in flags]
        lines.append("%-12s %3s %3s %3s %3s %8.4f %8.4f %8.4f %8.4f" % tuple(
            [row.case] + marks + [row.report.recall_with_relation, row.report.recall_without_relation,
                                  row.report.top1, row.report.top3]))
    return "\n".join(lines)


class SweepRow(collections.namedtuple('SweepRow', ['k', 'subject_accuracy', 'object_accuracy', 'union_accuracy',
                                                   'recall_with_relation', 'recall_without_relation', 'top1',
                                                   'top3'])):
    """One clue list size of :func:`sweep_topk`; ``top1`` and ``top3`` are ``None`` unless answered."""
    __slots__ = ()

    RETRIEVAL_FIELDS = ('subject_accuracy', 'object_accuracy', 'union_accuracy', 'recall_with_relation',
                        'recall_without_relation')


def sweep_topk(config, split="test", ks=(20, 30, 40, 60, 100), detector_checkpoint=None, answer=False,
               memnet_checkpoint=None):
    """Clue accuracy and answer recall of the frozen detector for several clue list sizes.

    The subject and object lists both get ``k`` entries; the relation list keeps
    ``topk_relations``. Larger lists contain smaller ones, so every retrieval column is
    checked to be non-decreasing in ``k``.

    With ``answer`` the trained memory network is evaluated on the retrieval of every ``k``
    as well (see :func:`evaluate`), which fills ``top1`` and ``top3``. The network itself
    is not retrained.

    :rtype: list of :class:`SweepRow`
    :raises: :class:`ValueError` for sizes below 1 or an empty split
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("Sweep sizes have to be positive but got %s" % ks)
    workspace = training.Workspace(config.work_dir, detector_checkpoint)
    kb, vocabularies = training.load_resources(config)
    data = training.load_run_split(config, split)
    if not len(data):
        raise ValueError("Cannot evaluate the empty split %s" % split)
    model = training.load_detector(workspace.detector_checkpoint, config, vocabularies)
    predictions = training.predict_phrases(model, data, config, vocabularies.words)
    rows = []
    for k in ks:
        clues = training.clues_from_predictions(predictions, vocabularies, k, k, config.topk_relations)
        subject = obj = union = with_relation = without_relation = 0
        for sample, clue in zip(data.samples, clues):
            forward = sample.fact.forward()
            subject_hit, object_hit = forward.subject in clue.subjects, forward.object in clue.objects
            subject += subject_hit
            obj += object_hit
            union += subject_hit or object_hit
            unfiltered, filtered = training.retrieve_for_sample(kb, sample, clue, config)
            with_relation += sample.answer in filtered.answers()
            without_relation += sample.answer in unfiltered.answers()
        n = float(len(data))
        top1 = top3 = None
        if answer:
            report = evaluate(config.replace(topk_subjects=k, topk_objects=k, diagnostics=False), split,
                              detector_checkpoint=detector_checkpoint, memnet_checkpoint=memnet_checkpoint)
            top1, top3 = report.top1, report.top3
        rows.append(SweepRow(k, subject / n, obj / n, union / n, with_relation / n, without_relation / n, top1, top3))
        logger.info("top-%s union accuracy %.4f recall %.4f/%.4f", k, union / n, with_relation / n,
                    without_relation / n)
    for previous, current in zip(rows, rows[1:]):
        for field in SweepRow.RETRIEVAL_FIELDS:
            if getattr(current, field) < getattr(previous, field):
                raise AssertionError("%s decreased from top-%s to top-%s" % (field, previous.k, current.k))
    return rows


def _rate(value):
    return "%8s" % "-" if value is None else "%8.4f" % value


def format_sweep(rows):
    header = "%5s %8s %8s %8s %8s %8s %8s %8s" % ("k", "sub", "obj", "union", "rec+rel", "rec-rel", "top1", "top3")
    lines = [header, "-" * len(header)]
    lines.extend("%5d %s" % (row.k, " ".join(_rate(v) for v in row[1:])) for row in rows)
    return "\n".join(lines)
