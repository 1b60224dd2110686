"""Knowledge base of triplet facts with clue based candidate retrieval.

Facts are stored in their forward form ``(subject, relation, object)``. Retrieval emits each
matching fact in both orientations, because the answer to a question is always the first
term of the chosen fact:

.. doctest::

    >>> import kbvqa
    >>> fact = kbvqa.parse_fact_line("cat\\tRelatedTo\\ttiger", casefold=False)
    >>> kbvqa.answer_of(fact)
    'cat'
    >>> kbvqa.answer_of(fact.reverse())
    'tiger'
"""
import collections
import io
import json
import logging

__all__ = ['FactTriplet', 'KnowledgeBase', 'CandidateFactSet', 'FactParseError', 'FORWARD', 'REVERSED',
           'normalize_term', 'parse_fact_line', 'read_facts', 'build_index', 'expand_entities',
           'retrieve_candidates', 'answer_of', 'SUBJECT_CLUE', 'OBJECT_CLUE']

logger = logging.getLogger(__name__)

FORWARD = "forward"
REVERSED = "reversed"
SUBJECT_CLUE = "subject"
OBJECT_CLUE = "object"
KB_FORMAT_VERSION = 1


class FactParseError(ValueError):
    """Raised for malformed lines in a knowledge base file.

    :param msg: the error message
    :param lineno: 1-based line number, if known
    """
    def __init__(self, msg, lineno=None):
        if lineno is not None:
            msg = "line %s: %s" % (lineno, msg)
        super(FactParseError, self).__init__(msg)
        self.lineno = lineno


class FactTriplet(collections.namedtuple('FactTriplet', ['subject', 'relation', 'object', 'orientation'])):
    """A directed fact under an orientation.

    :param subject: first term under the current orientation
    :type subject: :class:`str`
    :param relation: the relation
    :type relation: :class:`str`
    :param object: last term under the current orientation
    :type object: :class:`str`
    :param orientation: :data:`FORWARD` or :data:`REVERSED`

    Tuple ordering is lexicographic on ``(subject, relation, object, orientation)``.
    """
    __slots__ = ()

    def __new__(cls, subject, relation, object, orientation=FORWARD):
        if orientation not in (FORWARD, REVERSED):
            raise ValueError("Unknown orientation %s" % orientation)
        return super(FactTriplet, cls).__new__(cls, subject, relation, object, orientation)

    def reverse(self):
        """Swap subject and object and flip the orientation."""
        flipped = REVERSED if self.orientation == FORWARD else FORWARD
        return FactTriplet(self.object, self.relation, self.subject, flipped)

    def forward(self):
        """The underlying fact as stored in the knowledge base."""
        return self if self.orientation == FORWARD else self.reverse()

    @property
    def answer(self):
        return self.subject

    def words(self):
        """The fact as a word sequence ``subject relation object``; multi-word terms are split."""
        return self.subject.split() + self.relation.split() + self.object.split()

    def terms(self):
        return [self.subject, self.relation, self.object]


def answer_of(fact):
    """The answer a fact stands for: its first term under the current orientation."""
    return fact.subject


def normalize_term(term, casefold=True):
    """Trim, collapse runs of whitespace and optionally case-fold a term.

    .. doctest::

        >>> import kbvqa
        >>> kbvqa.normalize_term("  Polar   Bear ")
        'polar bear'
    """
    term = " ".join(term.split())
    return term.casefold() if casefold else term


def parse_fact_line(line, lineno=None, casefold=True):
    """Parse a ``subject<TAB>relation<TAB>object`` line into a forward fact.

    :param line: the line
    :type line: :class:`str`
    :param lineno: line number used in error messages
    :param casefold: case-fold all terms
    :returns: the fact
    :rtype: :class:`FactTriplet`
    :raises: :class:`FactParseError` if the line does not have three non-empty fields
    """
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 3:
        raise FactParseError("expected 3 tab separated fields but got %s" % len(fields), lineno)
    terms = [normalize_term(f, casefold) for f in fields]
    if not all(terms):
        raise FactParseError("empty term in %r" % line, lineno)
    return FactTriplet(*terms)


def read_facts(path, casefold=True):
    """Read facts from a UTF-8 TSV file, skipping blank lines and ``#`` comments."""
    facts = []
    with io.open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            facts.append(parse_fact_line(line, lineno, casefold))
    logger.debug("read %s facts from %s", len(facts), path)
    return facts


class KnowledgeBase(object):
    """Deduplicated forward facts with entity, relation and adjacency indexes.

    Create it with :func:`build_index` or :meth:`KnowledgeBase.load`. It is not modified after
    construction, so concurrent queries are safe.
    """
    def __init__(self, facts, duplicates=0):
        super(KnowledgeBase, self).__init__()
        self.facts = list(facts)
        self.duplicates = duplicates
        self._fact_ids = dict((f, i) for i, f in enumerate(self.facts))
        self.entity_index, self.relation_index, self.successors, self.predecessors = self._build_indexes(self.facts)

    def __repr__(self):
        return "KnowledgeBase({0} facts, {1} entities, {2} relations)".format(
            len(self.facts), len(self.entity_index), len(self.relation_index))

    def __len__(self):
        return len(self.facts)

    def __contains__(self, fact):
        return fact.forward() in self._fact_ids

    @staticmethod
    def _build_indexes(facts):
        entity_index = collections.defaultdict(list)
        relation_index = collections.defaultdict(list)
        successors = collections.defaultdict(set)
        predecessors = collections.defaultdict(set)
        for i, fact in enumerate(facts):
            entity_index[fact.subject].append(i)
            if fact.object != fact.subject:
                entity_index[fact.object].append(i)
            relation_index[fact.relation].append(i)
            successors[fact.subject].add(fact.object)
            predecessors[fact.object].add(fact.subject)
        return dict(entity_index), dict(relation_index), dict(successors), dict(predecessors)

    def is_consistent(self):
        """Rebuild the indexes from the fact list and compare them to the stored ones."""
        rebuilt = self._build_indexes(self.facts)
        return rebuilt == (self.entity_index, self.relation_index, self.successors, self.predecessors)

    def fact_id(self, fact):
        return self._fact_ids[fact.forward()]

    def entities(self):
        return sorted(self.entity_index)

    def relations(self):
        return sorted(self.relation_index)

    def neighbors(self, entity, direction="both"):
        """Entities adjacent to ``entity``.

        :param direction: ``out`` follows subject to object, ``in`` the other way, ``both`` ignores direction
        """
        result = set()
        if direction in ("out", "both"):
            result.update(self.successors.get(entity, ()))
        if direction in ("in", "both"):
            result.update(self.predecessors.get(entity, ()))
        return result

    def incident_facts(self, entities, role=None):
        """Ids of facts with an endpoint in ``entities``.

        :param role: restrict the endpoint to ``subject`` or ``object``
        """
        ids = set()
        for entity in entities:
            for i in self.entity_index.get(entity, ()):
                fact = self.facts[i]
                if role is None or getattr(fact, role) == entity:
                    ids.add(i)
        return ids

    def dumps(self):
        return json.dumps({"format": KB_FORMAT_VERSION, "duplicates": self.duplicates,
                           "facts": [[f.subject, f.relation, f.object] for f in self.facts]})

    def save(self, path):
        """Write the knowledge base as a JSON index file."""
        with io.open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path):
        """Read an index file written by :meth:`save` and rebuild the indexes."""
        with io.open(path, encoding="utf-8") as f:
            payload = json.load(f)
        if payload.get("format") != KB_FORMAT_VERSION:
            raise ValueError("Unsupported knowledge base format %s in %s" % (payload.get("format"), path))
        kb = cls([FactTriplet(*terms) for terms in payload["facts"]], payload.get("duplicates", 0))
        logger.debug("loaded %r from %s", kb, path)
        return kb


def build_index(facts):
    """Deduplicate forward facts and index them.

    :param facts: parsed facts, reversed ones are stored in forward form
    :type facts: iterable of :class:`FactTriplet`
    :returns: the knowledge base
    :rtype: :class:`KnowledgeBase`

    Duplicates are dropped and counted in :attr:`KnowledgeBase.duplicates`.
    """
    seen = set()
    unique = []
    duplicates = 0
    for fact in facts:
        fact = fact.forward()
        if fact in seen:
            duplicates += 1
            continue
        seen.add(fact)
        unique.append(fact)
    if duplicates:
        logger.warning("dropped %s duplicate facts", duplicates)
    return KnowledgeBase(unique, duplicates)


def expand_entities(kb, seeds, h, direction="both"):
    """All entities within ``h`` hops of ``seeds``, the seeds included.

    :param kb: the knowledge base
    :param seeds: start entities; unknown ones are kept but have no neighbors
    :param h: hop count
    :type h: :class:`int`
    :param direction: see :meth:`KnowledgeBase.neighbors`
    :raises: :class:`ValueError` for a negative hop count
    """
    if h < 0:
        raise ValueError("Hop count has to be non-negative but got %s" % h)
    reached = set(seeds)
    frontier = set(seeds)
    for _ in range(h):
        nxt = set()
        for entity in frontier:
            nxt.update(kb.neighbors(entity, direction))
        frontier = nxt - reached
        if not frontier:
            break
        reached.update(frontier)
    return reached


class CandidateFactSet(object):
    """Oriented candidate facts, each with the clues that retrieved it.

    :param candidates: oriented facts without duplicates
    :param provenance: per candidate a frozenset of ``(role, clue)`` pairs
    :param gt_index: index of the ground-truth oriented fact, if known
    """
    def __init__(self, candidates=(), provenance=(), gt_index=None):
        super(CandidateFactSet, self).__init__()
        self.candidates = list(candidates)
        self.provenance = list(provenance)
        if len(self.provenance) != len(self.candidates):
            raise ValueError("Expected one provenance entry per candidate")
        self.gt_index = gt_index

    def __repr__(self):
        return "CandidateFactSet({0} candidates, gt_index={1})".format(len(self.candidates), self.gt_index)

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __contains__(self, fact):
        return fact in self.candidates

    def index(self, fact):
        return self.candidates.index(fact)

    def answers(self):
        return set(answer_of(f) for f in self.candidates)

    def with_ground_truth(self, fact):
        """Return a copy whose ``gt_index`` points at ``fact`` (``None`` if it was not retrieved)."""
        gt_index = self.candidates.index(fact) if fact in self.candidates else None
        return CandidateFactSet(self.candidates, self.provenance, gt_index)

    def filter_relations(self, relations):
        """Keep candidates whose relation is in ``relations``."""
        relations = set(relations)
        kept = [(c, p) for c, p in zip(self.candidates, self.provenance) if c.relation in relations]
        result = CandidateFactSet([c for c, _ in kept], [p for _, p in kept])
        if self.gt_index is not None:
            result = result.with_ground_truth(self.candidates[self.gt_index])
        return result

    def to_json(self):
        return {"candidates": [list(c) for c in self.candidates],
                "provenance": [sorted(list(p) for p in prov) for prov in self.provenance],
                "gt_index": self.gt_index}

    @classmethod
    def from_json(cls, payload):
        return cls([FactTriplet(*c) for c in payload["candidates"]],
                   [frozenset(tuple(p) for p in prov) for prov in payload["provenance"]],
                   payload.get("gt_index"))


def retrieve_candidates(kb, subject_clues=(), object_clues=(), relation_filter=None, h=1, directed=False):
    """Collect the oriented facts within ``h`` hops of the clue entities.

    :param kb: the knowledge base
    :type kb: :class:`KnowledgeBase`
    :param subject_clues: predicted subject entities
    :param object_clues: predicted object entities
    :param relation_filter: if given, only candidates with one of these relations are kept
    :param h: hop count; a fact is within ``h`` hops if one of its endpoints is within ``h - 1``
              entity hops of a clue, so ``h=1`` collects the facts touching a clue
    :param directed: if True, subject clues only follow and match facts they are the subject of,
                     object clues only the ones they are the object of
    :returns: candidates in both orientations, sorted lexicographically
    :rtype: :class:`CandidateFactSet`
    :raises: :class:`ValueError` if both clue sets are empty or ``h < 1``

    .. doctest::

        >>> import kbvqa
        >>> kb = kbvqa.build_index([kbvqa.FactTriplet("cat", "RelatedTo", "tiger"),
        ...                         kbvqa.FactTriplet("cat", "IsA", "animal"),
        ...                         kbvqa.FactTriplet("tiger", "HasProperty", "striped")])
        >>> found = kbvqa.retrieve_candidates(kb, ["cat"], [], relation_filter=["RelatedTo"])
        >>> [(f.subject, f.orientation) for f in found]
        [('cat', 'forward'), ('tiger', 'reversed')]
    """
    subject_clues = list(subject_clues)
    object_clues = list(object_clues)
    if not subject_clues and not object_clues:
        raise ValueError("At least one clue is required for retrieval")
    if h < 1:
        raise ValueError("Hop count has to be at least 1 but got %s" % h)
    relation_filter = None if relation_filter is None else set(relation_filter)
    matched = collections.defaultdict(set)
    clues = [(SUBJECT_CLUE, c) for c in subject_clues] + [(OBJECT_CLUE, c) for c in object_clues]
    for role, clue in clues:
        if directed:
            reach = expand_entities(kb, [clue], h - 1, "out" if role == SUBJECT_CLUE else "in")
            ids = kb.incident_facts(reach, role=role)
        else:
            ids = kb.incident_facts(expand_entities(kb, [clue], h - 1))
        for i in ids:
            if relation_filter is None or kb.facts[i].relation in relation_filter:
                matched[i].add((role, clue))
    oriented = []
    for i, prov in matched.items():
        fact = kb.facts[i]
        oriented.append((fact, frozenset(prov)))
        oriented.append((fact.reverse(), frozenset(prov)))
    oriented.sort(key=lambda item: item[0])
    # a fact whose subject equals its object yields two candidates that only differ by orientation
    result = CandidateFactSet([f for f, _ in oriented], [p for _, p in oriented])
    logger.debug("retrieved %s candidates for %s clues", len(result), len(clues))
    return result
