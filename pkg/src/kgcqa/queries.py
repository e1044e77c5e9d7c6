"""EFO-1 query intermediate representation.

A query is a disjunction of conjunctive graphs (DNF). Each conjunctive graph
is a weakly-connected DAG whose sources are anchor entities, whose unique sink
is the free variable, and whose edges carry a relation id plus a negation flag.

The external text encoding is the nested-tuple form used by the public
query datasets, e.g. "(7,(3,))" for a one-hop query and
"((1,(5,)),(2,(6,n)))" for an intersection with one negated branch; `n`
negates the preceding relation hop and `(u,)` marks a union of branches.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence, Union

from .errors import QueryStructureError


class NodeKind(Enum):
    ANCHOR = "anchor"
    VAR = "var"
    FREE = "free"


@dataclass(frozen=True)
class QueryNode:
    node_id: int
    kind: NodeKind
    entity: int | None = None

    def __post_init__(self) -> None:
        if self.kind is NodeKind.ANCHOR and self.entity is None:
            raise QueryStructureError(f"anchor node {self.node_id} has no entity")
        if self.kind is not NodeKind.ANCHOR and self.entity is not None:
            raise QueryStructureError(f"non-anchor node {self.node_id} carries an entity")


@dataclass(frozen=True)
class QueryEdge:
    src: int
    dst: int
    relation: int
    negated: bool = False


@dataclass(frozen=True)
class ConjunctiveGraph:
    nodes: tuple[QueryNode, ...]
    edges: tuple[QueryEdge, ...]

    def node(self, node_id: int) -> QueryNode:
        return self.nodes[node_id]

    def in_edges(self, node_id: int) -> list[QueryEdge]:
        return [e for e in self.edges if e.dst == node_id]

    def out_edges(self, node_id: int) -> list[QueryEdge]:
        return [e for e in self.edges if e.src == node_id]

    def free_variable(self) -> int:
        free = [n.node_id for n in self.nodes if n.kind is NodeKind.FREE]
        if len(free) != 1:
            raise QueryStructureError(f"expected exactly one free variable, found {len(free)}")
        return free[0]


@dataclass(frozen=True)
class DNFQuery:
    conjuncts: tuple[ConjunctiveGraph, ...]
    query_type: str = "custom"

    def __post_init__(self) -> None:
        if not self.conjuncts:
            raise QueryStructureError("a query needs at least one conjunct")


# ---------------------------------------------------------------------------
# Template catalog
# ---------------------------------------------------------------------------

# (anchor arity, relation arity) per named template.
TEMPLATE_ARITY: dict[str, tuple[int, int]] = {
    "1p": (1, 1),
    "2p": (1, 2),
    "3p": (1, 3),
    "2i": (2, 2),
    "3i": (3, 3),
    "pi": (2, 3),
    "ip": (2, 3),
    "2u": (2, 2),
    "up": (2, 3),
    "2in": (2, 2),
    "3in": (3, 3),
    "inp": (2, 3),
    "pin": (2, 3),
    "pni": (2, 3),
}

TEMPLATE_NAMES: tuple[str, ...] = tuple(TEMPLATE_ARITY)
EPFO_TYPES: tuple[str, ...] = ("1p", "2p", "3p", "2i", "3i", "pi", "ip", "2u", "up")
NEGATION_TYPES: tuple[str, ...] = ("2in", "3in", "inp", "pin", "pni")
SUPERVISED_TYPES: tuple[str, ...] = ("1p", "2p", "3p", "2i", "3i") + NEGATION_TYPES


class _Builder:
    """Accumulates nodes/edges for one conjunct with sequential local ids."""

    def __init__(self) -> None:
        self.nodes: list[QueryNode] = []
        self.edges: list[QueryEdge] = []

    def anchor(self, entity: int) -> int:
        nid = len(self.nodes)
        self.nodes.append(QueryNode(nid, NodeKind.ANCHOR, entity))
        return nid

    def var(self) -> int:
        nid = len(self.nodes)
        self.nodes.append(QueryNode(nid, NodeKind.VAR))
        return nid

    def free(self) -> int:
        nid = len(self.nodes)
        self.nodes.append(QueryNode(nid, NodeKind.FREE))
        return nid

    def edge(self, src: int, dst: int, relation: int, negated: bool = False) -> None:
        self.edges.append(QueryEdge(src, dst, relation, negated))

    def chain(self, start: int, relations: Sequence[int], end: int,
              negate_last: bool = False) -> None:
        """start -r0-> v -r1-> ... -> end, optionally negating the final hop."""
        prev = start
        for i, rel in enumerate(relations):
            last = i == len(relations) - 1
            nxt = end if last else self.var()
            self.edge(prev, nxt, rel, negated=negate_last and last)
            prev = nxt

    def graph(self) -> ConjunctiveGraph:
        return ConjunctiveGraph(tuple(self.nodes), tuple(self.edges))


def _conjunct_chain(anchor: int, relations: Sequence[int], negate_last: bool = False) -> ConjunctiveGraph:
    b = _Builder()
    a = b.anchor(anchor)
    f = b.free()
    b.chain(a, relations, f, negate_last=negate_last)
    return b.graph()


def _build_conjuncts(query_type: str, a: Sequence[int], s: Sequence[int]) -> list[ConjunctiveGraph]:
    if query_type in ("1p", "2p", "3p"):
        return [_conjunct_chain(a[0], s)]
    if query_type in ("2i", "3i"):
        b = _Builder()
        anchors = [b.anchor(e) for e in a]
        f = b.free()
        for src, rel in zip(anchors, s):
            b.edge(src, f, rel)
        return [b.graph()]
    if query_type == "pi":
        b = _Builder()
        a0, a1 = b.anchor(a[0]), b.anchor(a[1])
        f = b.free()
        b.chain(a0, s[:2], f)
        b.edge(a1, f, s[2])
        return [b.graph()]
    if query_type == "ip":
        b = _Builder()
        a0, a1 = b.anchor(a[0]), b.anchor(a[1])
        v = b.var()
        f = b.free()
        b.edge(a0, v, s[0])
        b.edge(a1, v, s[1])
        b.edge(v, f, s[2])
        return [b.graph()]
    if query_type == "2u":
        return [_conjunct_chain(a[0], s[:1]), _conjunct_chain(a[1], s[1:2])]
    if query_type == "up":
        # The trailing projection distributes over both union branches.
        return [
            _conjunct_chain(a[0], (s[0], s[2])),
            _conjunct_chain(a[1], (s[1], s[2])),
        ]
    if query_type == "2in":
        b = _Builder()
        a0, a1 = b.anchor(a[0]), b.anchor(a[1])
        f = b.free()
        b.edge(a0, f, s[0])
        b.edge(a1, f, s[1], negated=True)
        return [b.graph()]
    if query_type == "3in":
        b = _Builder()
        anchors = [b.anchor(e) for e in a]
        f = b.free()
        b.edge(anchors[0], f, s[0])
        b.edge(anchors[1], f, s[1])
        b.edge(anchors[2], f, s[2], negated=True)
        return [b.graph()]
    if query_type == "inp":
        b = _Builder()
        a0, a1 = b.anchor(a[0]), b.anchor(a[1])
        v = b.var()
        f = b.free()
        b.edge(a0, v, s[0])
        b.edge(a1, v, s[1], negated=True)
        b.edge(v, f, s[2])
        return [b.graph()]
    if query_type == "pin":
        b = _Builder()
        a0, a1 = b.anchor(a[0]), b.anchor(a[1])
        f = b.free()
        b.chain(a0, s[:2], f)
        b.edge(a1, f, s[2], negated=True)
        return [b.graph()]
    if query_type == "pni":
        b = _Builder()
        a0, a1 = b.anchor(a[0]), b.anchor(a[1])
        f = b.free()
        b.chain(a0, s[:2], f, negate_last=True)
        b.edge(a1, f, s[2])
        return [b.graph()]
    raise QueryStructureError(f"unknown template {query_type!r}")


def build_from_template(query_type: str, anchors: Sequence[int], relations: Sequence[int]) -> DNFQuery:
    """Instantiate one of the 14 named templates with concrete ids."""
    if query_type not in TEMPLATE_ARITY:
        raise QueryStructureError(f"unknown template {query_type!r}")
    na, nr = TEMPLATE_ARITY[query_type]
    if len(anchors) != na or len(relations) != nr:
        raise QueryStructureError(
            f"template {query_type} needs {na} anchors and {nr} relations, "
            f"got {len(anchors)} and {len(relations)}"
        )
    conjuncts = _build_conjuncts(query_type, list(anchors), list(relations))
    return DNFQuery(tuple(conjuncts), query_type)


# ---------------------------------------------------------------------------
# Nested-tuple text format
# ---------------------------------------------------------------------------

NestedForm = Union[int, str, tuple]

# Skeletons: ints replaced by 'e' (anchor position) / 'r' (relation position).
_TEMPLATE_SKELETONS: dict[tuple, str] = {
    ("e", ("r",)): "1p",
    ("e", ("r", "r")): "2p",
    ("e", ("r", "r", "r")): "3p",
    (("e", ("r",)), ("e", ("r",))): "2i",
    (("e", ("r",)), ("e", ("r",)), ("e", ("r",))): "3i",
    (("e", ("r", "r")), ("e", ("r",))): "pi",
    ((("e", ("r",)), ("e", ("r",))), ("r",)): "ip",
    (("e", ("r",)), ("e", ("r",)), ("u",)): "2u",
    ((("e", ("r",)), ("e", ("r",)), ("u",)), ("r",)): "up",
    (("e", ("r",)), ("e", ("r", "n"))): "2in",
    (("e", ("r",)), ("e", ("r",)), ("e", ("r", "n"))): "3in",
    ((("e", ("r",)), ("e", ("r", "n"))), ("r",)): "inp",
    (("e", ("r", "r")), ("e", ("r", "n"))): "pin",
    (("e", ("r", "r", "n")), ("e", ("r",))): "pni",
}

_TEMPLATE_FORMS: dict[str, tuple] = {v: k for k, v in _TEMPLATE_SKELETONS.items()}

_MARKER_RE = re.compile(r"\b([nu])\b")


def parse_form_text(text: str) -> NestedForm:
    """Parse nested-tuple text into a tuple tree of ints and 'n'/'u' markers."""
    quoted = _MARKER_RE.sub(r"'\1'", text)
    try:
        form = ast.literal_eval(quoted)
    except (ValueError, SyntaxError) as exc:
        raise QueryStructureError(f"cannot parse query form {text!r}: {exc}") from exc
    return _check_form(form)


def _check_form(form) -> NestedForm:
    if isinstance(form, bool):
        raise QueryStructureError(f"unsupported token {form!r} in query form")
    if isinstance(form, int):
        if form < 0:
            raise QueryStructureError(f"negative id {form} in query form")
        return form
    if form in ("n", "u"):
        return form
    if isinstance(form, tuple):
        return tuple(_check_form(x) for x in form)
    raise QueryStructureError(f"unsupported token {form!r} in query form")


def _is_relation_chain(form: NestedForm) -> bool:
    return (
        isinstance(form, tuple)
        and len(form) > 0
        and all(isinstance(x, int) or x == "n" for x in form)
        and isinstance(form[0], int)
    )


def _skeleton(form: NestedForm, in_chain: bool = False):
    if isinstance(form, int):
        return "r" if in_chain else "e"
    if isinstance(form, str):
        return form
    if _is_relation_chain(form):
        return tuple(_skeleton(x, in_chain=True) for x in form)
    return tuple(_skeleton(x) for x in form)


def _bindings(form: NestedForm, skeleton, anchors: list[int], relations: list[int]) -> None:
    if isinstance(skeleton, str):
        if skeleton == "e":
            anchors.append(form)
        elif skeleton == "r":
            relations.append(form)
        return
    for sub_form, sub_skel in zip(form, skeleton):
        _bindings(sub_form, sub_skel, anchors, relations)


def parse_nested(text: str) -> DNFQuery:
    """Parse one of the 14 template encodings; reject anything else."""
    form = parse_form_text(text)
    skel = _skeleton(form)
    name = _TEMPLATE_SKELETONS.get(skel)
    if name is None:
        raise QueryStructureError(f"unsupported query structure: {text!r}")
    anchors: list[int] = []
    relations: list[int] = []
    _bindings(form, skel, anchors, relations)
    return build_from_template(name, anchors, relations)


def _fill_form(skeleton, anchors: list[int], relations: list[int]):
    if skeleton == "e":
        return anchors.pop(0)
    if skeleton == "r":
        return relations.pop(0)
    if isinstance(skeleton, str):
        return skeleton
    return tuple(_fill_form(s, anchors, relations) for s in skeleton)


def template_bindings(q: DNFQuery) -> tuple[list[int], list[int]]:
    """Recover (anchors, relations) in canonical template order."""
    if q.query_type not in TEMPLATE_ARITY:
        raise QueryStructureError(f"no canonical form for query type {q.query_type!r}")
    rebuilt_anchors: list[int] = []
    rebuilt_relations: list[int] = []
    if q.query_type == "up":
        # Conjuncts share the trailing relation; recover the shared slot once.
        (c1, c2) = q.conjuncts
        a1, r1 = _chain_bindings(c1)
        a2, r2 = _chain_bindings(c2)
        if r1[1] != r2[1]:
            raise QueryStructureError("up conjuncts do not share the final relation")
        return [a1, a2], [r1[0], r2[0], r1[1]]
    if q.query_type == "2u":
        (c1, c2) = q.conjuncts
        a1, r1 = _chain_bindings(c1)
        a2, r2 = _chain_bindings(c2)
        return [a1, a2], [r1[0], r2[0]]
    g = q.conjuncts[0]
    anchors_in_order = [n.entity for n in g.nodes if n.kind is NodeKind.ANCHOR]
    relations_in_order = [e.relation for e in g.edges]
    rebuilt_anchors.extend(anchors_in_order)  # type: ignore[arg-type]
    rebuilt_relations.extend(relations_in_order)
    return rebuilt_anchors, rebuilt_relations


def _chain_bindings(g: ConjunctiveGraph) -> tuple[int, list[int]]:
    anchors = [n for n in g.nodes if n.kind is NodeKind.ANCHOR]
    if len(anchors) != 1:
        raise QueryStructureError("expected a single-anchor chain conjunct")
    rels = [e.relation for e in g.edges]
    return anchors[0].entity, rels  # type: ignore[return-value]


def serialize(q: DNFQuery) -> str:
    """Render a template-typed query back to its canonical nested-tuple text."""
    anchors, relations = template_bindings(q)
    form = _fill_form(_TEMPLATE_FORMS[q.query_type], list(anchors), list(relations))
    return _form_text(form)


def _form_text(form) -> str:
    if isinstance(form, int):
        return str(form)
    if isinstance(form, str):
        return form
    inner = ",".join(_form_text(x) for x in form)
    if len(form) == 1:
        inner += ","
    return f"({inner})"


def to_dnf(q: Union[DNFQuery, NestedForm, str]) -> DNFQuery:
    """Push unions to the top level.

    A DNFQuery is returned unchanged (its conjuncts are union-free by
    construction). A nested form (text or tuple tree) is parsed, with union
    markers distributed outward; unions under negation are rejected.
    """
    if isinstance(q, DNFQuery):
        return q
    form = parse_form_text(q) if isinstance(q, str) else _check_form(q)
    _reject_union_under_negation(form)
    return parse_nested(_form_text(form))


def _reject_union_under_negation(form: NestedForm) -> None:
    # A standalone ('n',) chain (set complement, De Morgan encodings) is the
    # only way the public forms put a union beneath a negation.
    if isinstance(form, tuple):
        if any(x == "n" for x in form) and not _is_relation_chain(form):
            raise QueryStructureError("union nested under negation is unsupported")
        for x in form:
            _reject_union_under_negation(x)


# ---------------------------------------------------------------------------
# Structure checks and layering
# ---------------------------------------------------------------------------

def validate(g: ConjunctiveGraph) -> list[str]:
    """Return every violated well-formedness invariant (empty list = ok)."""
    violations: list[str] = []
    n = len(g.nodes)
    for i, node in enumerate(g.nodes):
        if node.node_id != i:
            violations.append(f"node ids are not sequential at position {i}")
    for e in g.edges:
        if not (0 <= e.src < n and 0 <= e.dst < n):
            violations.append(f"edge {e} references a missing node")
            return violations
        if e.src == e.dst:
            violations.append(f"self-loop on node {e.src}")

    free_nodes = [x.node_id for x in g.nodes if x.kind is NodeKind.FREE]
    if len(free_nodes) == 0:
        violations.append("no free variable")
    elif len(free_nodes) > 1:
        violations.append("multiple free variables")

    in_deg = [0] * n
    out_deg = [0] * n
    for e in g.edges:
        in_deg[e.dst] += 1
        out_deg[e.src] += 1

    for node in g.nodes:
        if in_deg[node.node_id] == 0 and node.kind is not NodeKind.ANCHOR:
            violations.append(f"source node {node.node_id} is not an anchor")
        if node.kind is NodeKind.FREE and out_deg[node.node_id] > 0:
            violations.append("free variable is not sink")
        if node.kind is not NodeKind.FREE and out_deg[node.node_id] == 0:
            violations.append(f"non-free node {node.node_id} is a sink")

    if _has_cycle(g):
        violations.append("cycle detected")
    if n > 1 and not _weakly_connected(g):
        violations.append("graph is not weakly connected")
    return violations


def _has_cycle(g: ConjunctiveGraph) -> bool:
    n = len(g.nodes)
    adj: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for e in g.edges:
        adj[e.src].append(e.dst)
        indeg[e.dst] += 1
    queue = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    while queue:
        u = queue.pop()
        seen += 1
        for v in adj[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    return seen != n


def _weakly_connected(g: ConjunctiveGraph) -> bool:
    n = len(g.nodes)
    adj: list[set[int]] = [set() for _ in range(n)]
    for e in g.edges:
        adj[e.src].add(e.dst)
        adj[e.dst].add(e.src)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


def topological_layers(g: ConjunctiveGraph) -> dict[int, int]:
    """Longest directed path from any source, per node (anchors sit at 0)."""
    if _has_cycle(g):
        raise QueryStructureError("cycle detected; cannot assign layers")
    n = len(g.nodes)
    indeg = [0] * n
    adj: list[list[tuple[int, QueryEdge]]] = [[] for _ in range(n)]
    for e in g.edges:
        adj[e.src].append((e.dst, e))
        indeg[e.dst] += 1
    layer = {i: 0 for i in range(n)}
    queue = sorted(i for i in range(n) if indeg[i] == 0)
    order: list[int] = []
    while queue:
        u = queue.pop(0)
        order.append(u)
        for v, _ in adj[u]:
            layer[v] = max(layer[v], layer[u] + 1)
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    return layer


def topological_order(g: ConjunctiveGraph) -> list[int]:
    """Node ids sorted by (layer, id); a valid topological order."""
    layers = topological_layers(g)
    return sorted(range(len(g.nodes)), key=lambda i: (layers[i], i))
