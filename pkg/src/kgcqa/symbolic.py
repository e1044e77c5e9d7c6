"""Exact set-algebra query answering, hard-answer labelling, and query sampling.

Answer semantics: negated atoms take their complement over the full entity
set (closed world on the given graph). `brute_force_answers` is a deliberately
separate implementation (assignment enumeration over the raw triple set) used
to cross-check the set-algebra evaluator.
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import dataclass, field

from .errors import DataFormatError, QueryStructureError, SamplingError
from .kg import GraphIndex, KnowledgeGraph, build_index
from .queries import (
    ConjunctiveGraph,
    DNFQuery,
    NodeKind,
    TEMPLATE_ARITY,
    build_from_template,
    parse_nested,
    serialize,
    topological_order,
)

AnswerSet = frozenset[int]

MAX_BRUTE_FORCE_VARS = 4
DEFAULT_REJECTION_BUDGET = 100


def answer_conjunctive(g: ConjunctiveGraph, index: GraphIndex) -> AnswerSet:
    """Evaluate one conjunct by topological set propagation.

    Exact for tree-shaped conjuncts (every node has at most one outgoing
    edge), which covers all 14 templates; set propagation loses assignment
    consistency on general DAGs, so those are rejected.

    A negated edge excludes a candidate only when every value of the source
    set carries the edge: the existential over the source variable just needs
    one witness missing the edge. For anchor (singleton) sources this is the
    plain complement of the projection.
    """
    for node in g.nodes:
        if len(g.out_edges(node.node_id)) > 1:
            raise QueryStructureError(
                "set propagation is exact only for tree-shaped conjuncts; "
                f"node {node.node_id} has multiple outgoing edges"
            )
    sets: dict[int, set[int]] = {}
    for nid in topological_order(g):
        node = g.node(nid)
        if node.kind is NodeKind.ANCHOR:
            sets[nid] = {node.entity}
            continue
        candidate: set[int] | None = None
        negated_edges = []
        for e in g.in_edges(nid):
            if e.negated:
                negated_edges.append(e)
                continue
            proj = index.project(sets[e.src], e.relation)
            candidate = proj if candidate is None else candidate & proj
        if candidate is None:
            # Only negated atoms constrain this node.
            candidate = set(range(index.num_entities))
        for e in negated_edges:
            src_set = sets[e.src]
            if not src_set:
                candidate = set()
            elif len(src_set) == 1:
                candidate -= index.project(src_set, e.relation)
            else:
                candidate = {
                    f for f in candidate
                    if not src_set <= set(index.heads(f, e.relation))
                }
        sets[nid] = candidate
    return frozenset(sets[g.free_variable()])


def answer_dnf(q: DNFQuery, index: GraphIndex) -> AnswerSet:
    out: set[int] = set()
    for conjunct in q.conjuncts:
        out |= answer_conjunctive(conjunct, index)
    return frozenset(out)


def brute_force_answers(g: ConjunctiveGraph, kg: KnowledgeGraph) -> AnswerSet:
    """Independent oracle: enumerate every assignment of all variables.

    Works directly on the triple set, never on GraphIndex. Refuses graphs
    with more than MAX_BRUTE_FORCE_VARS variable nodes.
    """
    triples = {(t.head, t.relation, t.tail) for t in kg.triples}
    variables = [n.node_id for n in g.nodes if n.kind is not NodeKind.ANCHOR]
    if len(variables) > MAX_BRUTE_FORCE_VARS:
        raise QueryStructureError(
            f"brute force supports at most {MAX_BRUTE_FORCE_VARS} variables, "
            f"got {len(variables)}"
        )
    free = g.free_variable()
    base = {n.node_id: n.entity for n in g.nodes if n.kind is NodeKind.ANCHOR}
    answers: set[int] = set()
    for values in itertools.product(range(kg.num_entities), repeat=len(variables)):
        assignment = dict(base)
        assignment.update(zip(variables, values))
        ok = True
        for e in g.edges:
            present = (assignment[e.src], e.relation, assignment[e.dst]) in triples
            if present == e.negated:
                ok = False
                break
        if ok:
            answers.add(assignment[free])
    return frozenset(answers)


def brute_force_dnf(q: DNFQuery, kg: KnowledgeGraph) -> AnswerSet:
    out: set[int] = set()
    for conjunct in q.conjuncts:
        out |= brute_force_answers(conjunct, kg)
    return frozenset(out)


def hard_answers(
    q: DNFQuery, observed: GraphIndex, full: GraphIndex
) -> tuple[AnswerSet, AnswerSet]:
    """Split answers into (easy, hard): hard ones need at least one missing edge."""
    easy = answer_dnf(q, observed)
    hard = answer_dnf(q, full) - easy
    return easy, frozenset(hard)


# ---------------------------------------------------------------------------
# Random-walk sampling
# ---------------------------------------------------------------------------

class QuerySampler:
    """Backward random walks from a sampled answer entity.

    Each projection hop picks a uniform incoming (relation, head) pair;
    intersection branches are drawn independently (coinciding branches are
    rejected and resampled); negated branches pick a (head, relation) whose
    projection does not cover the walk target.
    """

    def __init__(self, kg: KnowledgeGraph, index: GraphIndex | None = None,
                 rejection_budget: int = DEFAULT_REJECTION_BUDGET) -> None:
        if not kg.triples:
            raise SamplingError("cannot sample queries from an empty graph")
        self.kg = kg
        self.index = index if index is not None else build_index(kg)
        self.budget = rejection_budget
        self.triples = {(t.head, t.relation, t.tail) for t in kg.triples}
        in_pairs: dict[int, list[tuple[int, int]]] = {}
        for (tail, rel), heads in self.index.backward.items():
            in_pairs.setdefault(tail, []).extend((rel, h) for h in heads)
        for pairs in in_pairs.values():
            pairs.sort()
        self.in_pairs = in_pairs
        self.nodes_with_incoming = sorted(in_pairs)
        self.forward_keys = sorted(self.index.forward)
        rel_heads: dict[int, list[int]] = {}
        for h, r in self.forward_keys:
            rel_heads.setdefault(r, []).append(h)
        self.rel_heads = rel_heads

    # -- primitive moves ----------------------------------------------------

    def _answer_entity(self, rng: random.Random) -> int:
        return rng.choice(self.nodes_with_incoming)

    def _incoming(self, node: int, rng: random.Random) -> tuple[int, int]:
        pairs = self.in_pairs.get(node)
        if not pairs:
            raise SamplingError(f"node {node} has no incoming edges")
        return rng.choice(pairs)

    def _incoming_distinct(self, node: int, k: int, rng: random.Random) -> list[tuple[int, int]]:
        pairs = self.in_pairs.get(node, [])
        if len(pairs) < k:
            raise SamplingError(f"node {node} has fewer than {k} incoming edges")
        return rng.sample(pairs, k)

    def _negated_into(self, node: int, rng: random.Random) -> tuple[int, int]:
        """A (relation, head) pair with a non-empty projection that misses `node`."""
        for _ in range(self.budget):
            h, r = rng.choice(self.forward_keys)
            if (h, r, node) not in self.triples:
                return r, h
        raise SamplingError(f"no negated branch avoiding node {node} within budget")

    def _negated_var_into(self, node: int, rng: random.Random) -> tuple[int, int]:
        """(relation, var-value) with (var, relation, node) absent and var walkable."""
        for _ in range(self.budget):
            v = rng.choice(self.nodes_with_incoming)
            r = rng.randrange(self.kg.num_relations)
            if (v, r, node) not in self.triples:
                return r, v
        raise SamplingError(f"no negated predecessor for node {node} within budget")

    def _head_of_relation(self, rel: int, rng: random.Random) -> int:
        """A head with an outgoing `rel` edge and at least one incoming edge."""
        heads = self.rel_heads.get(rel, [])
        candidates = [h for h in heads if h in self.in_pairs]
        if not candidates:
            raise SamplingError(f"no walkable head for relation {rel}")
        return rng.choice(candidates)

    # -- template walks -----------------------------------------------------

    def sample(self, query_type: str, rng: random.Random) -> DNFQuery:
        if query_type not in TEMPLATE_ARITY:
            raise QueryStructureError(f"unknown template {query_type!r}")
        last_error: SamplingError | None = None
        for _ in range(self.budget):
            try:
                anchors, relations = self._walk(query_type, rng)
            except SamplingError as exc:
                last_error = exc
                continue
            return build_from_template(query_type, anchors, relations)
        raise SamplingError(
            f"failed to sample a {query_type} query within {self.budget} attempts"
        ) from last_error

    def _walk(self, query_type: str, rng: random.Random) -> tuple[list[int], list[int]]:
        t = self._answer_entity(rng)
        if query_type == "1p":
            r0, a0 = self._incoming(t, rng)
            return [a0], [r0]
        if query_type == "2p":
            r1, v = self._incoming(t, rng)
            r0, a0 = self._incoming(v, rng)
            return [a0], [r0, r1]
        if query_type == "3p":
            r2, v2 = self._incoming(t, rng)
            r1, v1 = self._incoming(v2, rng)
            r0, a0 = self._incoming(v1, rng)
            return [a0], [r0, r1, r2]
        if query_type == "2i":
            (r0, a0), (r1, a1) = self._incoming_distinct(t, 2, rng)
            return [a0, a1], [r0, r1]
        if query_type == "3i":
            (r0, a0), (r1, a1), (r2, a2) = self._incoming_distinct(t, 3, rng)
            return [a0, a1, a2], [r0, r1, r2]
        if query_type == "pi":
            r1, v = self._incoming(t, rng)
            r0, a0 = self._incoming(v, rng)
            r2, a1 = self._incoming(t, rng)
            return [a0, a1], [r0, r1, r2]
        if query_type == "ip":
            r2, v = self._incoming(t, rng)
            (r0, a0), (r1, a1) = self._incoming_distinct(v, 2, rng)
            return [a0, a1], [r0, r1, r2]
        if query_type == "2u":
            r0, a0 = self._incoming(t, rng)
            t2 = self._answer_entity(rng)
            r1, a1 = self._incoming(t2, rng)
            if (r0, a0) == (r1, a1):
                raise SamplingError("coinciding union branches")
            return [a0, a1], [r0, r1]
        if query_type == "up":
            r2, v1 = self._incoming(t, rng)
            r0, a0 = self._incoming(v1, rng)
            # Second branch reuses the shared trailing relation r2.
            v2 = self._head_of_relation(r2, rng)
            r1, a1 = self._incoming(v2, rng)
            if (a0, r0) == (a1, r1):
                raise SamplingError("coinciding union branches")
            return [a0, a1], [r0, r1, r2]
        if query_type == "2in":
            r0, a0 = self._incoming(t, rng)
            r1, a1 = self._negated_into(t, rng)
            return [a0, a1], [r0, r1]
        if query_type == "3in":
            (r0, a0), (r1, a1) = self._incoming_distinct(t, 2, rng)
            r2, a2 = self._negated_into(t, rng)
            return [a0, a1, a2], [r0, r1, r2]
        if query_type == "inp":
            r2, v = self._incoming(t, rng)
            r0, a0 = self._incoming(v, rng)
            r1, a1 = self._negated_into(v, rng)
            return [a0, a1], [r0, r1, r2]
        if query_type == "pin":
            r1, v = self._incoming(t, rng)
            r0, a0 = self._incoming(v, rng)
            r2, a1 = self._negated_into(t, rng)
            return [a0, a1], [r0, r1, r2]
        if query_type == "pni":
            r2, a1 = self._incoming(t, rng)
            r1, v = self._negated_var_into(t, rng)
            r0, a0 = self._incoming(v, rng)
            return [a0, a1], [r0, r1, r2]
        raise QueryStructureError(f"unknown template {query_type!r}")


def sample_query(
    query_type: str,
    kg: KnowledgeGraph,
    rng: random.Random,
    index: GraphIndex | None = None,
    rejection_budget: int = DEFAULT_REJECTION_BUDGET,
) -> DNFQuery:
    sampler = QuerySampler(kg, index, rejection_budget)
    return sampler.sample(query_type, rng)


# ---------------------------------------------------------------------------
# Dataset generation and JSON-lines IO
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QueryRecord:
    query: DNFQuery
    easy: AnswerSet
    hard: AnswerSet

    @property
    def query_type(self) -> str:
        return self.query.query_type

    @property
    def all_answers(self) -> AnswerSet:
        return self.easy | self.hard


@dataclass
class SampledDataset:
    records: list[QueryRecord] = field(default_factory=list)

    def counts_by_type(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rec in self.records:
            counts[rec.query_type] = counts.get(rec.query_type, 0) + 1
        return counts

    def by_type(self) -> dict[str, list[QueryRecord]]:
        grouped: dict[str, list[QueryRecord]] = {}
        for rec in self.records:
            grouped.setdefault(rec.query_type, []).append(rec)
        return grouped

    def __len__(self) -> int:
        return len(self.records)


def generate_dataset(
    observed: KnowledgeGraph,
    full: KnowledgeGraph | None,
    counts: dict[str, int],
    seed: int,
    rejection_budget: int = DEFAULT_REJECTION_BUDGET,
) -> SampledDataset:
    """Sample `counts[type]` queries per template.

    With `full` given (valid/test regime), queries are walked on the full
    graph and kept only when at least one answer is missing from the observed
    graph; easy/hard answer sets come from the observed/full split. Without
    `full` (training regime), queries are walked on the observed graph and
    all answers are easy.
    """
    observed_index = build_index(observed)
    if full is not None and not observed.triples <= full.triples:
        raise DataFormatError("observed graph is not a subset of the full graph")
    full_index = build_index(full) if full is not None else observed_index
    walk_kg = full if full is not None else observed
    sampler = QuerySampler(walk_kg, full_index, rejection_budget)

    records: list[QueryRecord] = []
    for qtype in sorted(counts):
        wanted = counts[qtype]
        if wanted == 0:
            continue
        rng = random.Random(f"{seed}:{qtype}")
        got = 0
        failures = 0
        while got < wanted:
            q = sampler.sample(qtype, rng)
            easy, hard = hard_answers(q, observed_index, full_index)
            if full is not None and not hard:
                failures += 1
                if failures > rejection_budget * max(wanted, 1):
                    raise SamplingError(
                        f"could not find {wanted} {qtype} queries with hard answers"
                    )
                continue
            if full is None:
                easy, hard = easy, frozenset()
            records.append(QueryRecord(q, easy, hard))
            got += 1
    records.sort(key=lambda r: (r.query_type, serialize(r.query)))
    return SampledDataset(records)


def write_dataset(dataset: SampledDataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dataset.records:
            row = {
                "type": rec.query_type,
                "form": serialize(rec.query),
                "easy_answers": sorted(rec.easy),
                "hard_answers": sorted(rec.hard),
            }
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_dataset(path: str) -> SampledDataset:
    records: list[QueryRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                query = parse_nested(row["form"])
                easy = frozenset(int(x) for x in row["easy_answers"])
                hard = frozenset(int(x) for x in row["hard_answers"])
            except (KeyError, ValueError, TypeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad dataset record: {exc}") from exc
            if row["type"] != query.query_type:
                raise DataFormatError(
                    f"{path}:{lineno}: declared type {row['type']!r} does not match "
                    f"form structure {query.query_type!r}"
                )
            records.append(QueryRecord(query, easy, hard))
    return SampledDataset(records)


def answer_stats(dataset: SampledDataset) -> dict[str, float]:
    """Average number of answers (easy + hard) per query type."""
    stats: dict[str, float] = {}
    for qtype, recs in sorted(dataset.by_type().items()):
        total = sum(len(r.all_answers) for r in recs)
        stats[qtype] = total / len(recs)
    return stats
