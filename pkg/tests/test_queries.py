import random

import pytest

from kgcqa.errors import QueryStructureError
from kgcqa.kg import build_index
from kgcqa.queries import (
    ConjunctiveGraph,
    NodeKind,
    QueryEdge,
    QueryNode,
    TEMPLATE_ARITY,
    TEMPLATE_NAMES,
    build_from_template,
    parse_nested,
    serialize,
    to_dnf,
    topological_layers,
    validate,
)
from kgcqa.symbolic import answer_dnf, brute_force_dnf

from conftest import random_kg


def random_bindings(name, rng, num_entities=50, num_relations=8):
    na, nr = TEMPLATE_ARITY[name]
    return (
        [rng.randrange(num_entities) for _ in range(na)],
        [rng.randrange(num_relations) for _ in range(nr)],
    )


class TestTemplates:
    def test_1p_shape(self):
        q = build_from_template("1p", [7], [3])
        assert q.query_type == "1p"
        (g,) = q.conjuncts
        assert [n.kind for n in g.nodes] == [NodeKind.ANCHOR, NodeKind.FREE]
        assert g.nodes[0].entity == 7
        assert g.edges == (QueryEdge(0, 1, 3, False),)

    def test_2u_is_two_1p_conjuncts(self):
        q = build_from_template("2u", [1, 2], [5, 6])
        assert len(q.conjuncts) == 2
        for g, anchor, rel in zip(q.conjuncts, (1, 2), (5, 6)):
            assert len(g.edges) == 1
            assert g.nodes[0].entity == anchor
            assert g.edges[0].relation == rel
            assert not g.edges[0].negated

    def test_2in_negation_flag(self):
        q = build_from_template("2in", [1, 2], [5, 6])
        (g,) = q.conjuncts
        flags = sorted(e.negated for e in g.edges)
        assert flags == [False, True]
        negated = [e for e in g.edges if e.negated][0]
        assert g.nodes[negated.src].entity == 2
        assert negated.relation == 6

    def test_arity_mismatch_names_requirement(self):
        with pytest.raises(QueryStructureError, match="1 anchors and 2 relations"):
            build_from_template("2p", [1, 2], [3])

    def test_all_templates_validate(self):
        rng = random.Random(11)
        for name in TEMPLATE_NAMES:
            for _ in range(25):
                anchors, relations = random_bindings(name, rng)
                q = build_from_template(name, anchors, relations)
                for g in q.conjuncts:
                    assert validate(g) == []


class TestNestedFormat:
    def test_parse_1p(self):
        assert parse_nested("(7,(3,))") == build_from_template("1p", [7], [3])

    def test_parse_2p_chain(self):
        q = parse_nested("(1,(5,6))")
        assert q == build_from_template("2p", [1], [5, 6])
        (g,) = q.conjuncts
        layers = topological_layers(g)
        kinds = {n.node_id: n.kind for n in g.nodes}
        chain = sorted(g.nodes, key=lambda n: layers[n.node_id])
        assert [kinds[n.node_id] for n in chain] == [
            NodeKind.ANCHOR, NodeKind.VAR, NodeKind.FREE,
        ]

    def test_parse_2in(self):
        assert parse_nested("((1,(5,)),(2,(6,n)))") == build_from_template(
            "2in", [1, 2], [5, 6]
        )

    def test_parse_rejects_unknown_shape(self):
        with pytest.raises(QueryStructureError, match="unsupported query structure"):
            parse_nested("((1,(2,)),)")

    def test_parse_rejects_garbage(self):
        with pytest.raises(QueryStructureError):
            parse_nested("(1,(2,")

    def test_roundtrip_all_templates(self):
        rng = random.Random(5)
        for name in TEMPLATE_NAMES:
            for _ in range(100):
                anchors, relations = random_bindings(name, rng)
                q = build_from_template(name, anchors, relations)
                assert parse_nested(serialize(q)) == q


class TestToDnf:
    def test_single_conjunct_identity(self):
        q = build_from_template("1p", [7], [3])
        assert to_dnf(q) is q

    def test_up_distributes_projection(self):
        q = to_dnf("(((1,(5,)),(2,(6,)),(u,)),(7,))")
        assert q.query_type == "up"
        assert len(q.conjuncts) == 2
        for g in q.conjuncts:
            assert len(g.edges) == 2  # each branch is a 2p chain
        assert q == build_from_template("up", [1, 2], [5, 6, 7])

    def test_2u_two_conjuncts(self):
        q = to_dnf("((1,(5,)),(2,(6,)),(u,))")
        assert q.query_type == "2u"
        assert len(q.conjuncts) == 2

    def test_union_under_negation_rejected(self):
        with pytest.raises(QueryStructureError):
            to_dnf("(((1,(5,n)),(2,(6,n))),(n,))")

    def test_dnf_preserves_answers(self, toy_kg, toy_index):
        rng = random.Random(9)
        for name in ("2u", "up"):
            for _ in range(20):
                anchors, relations = random_bindings(
                    name, rng, toy_kg.num_entities, toy_kg.num_relations
                )
                q = build_from_template(name, anchors, relations)
                dnf = to_dnf(serialize(q))
                assert answer_dnf(dnf, toy_index) == brute_force_dnf(q, toy_kg)


class TestLayers:
    def test_1p(self):
        (g,) = build_from_template("1p", [7], [3]).conjuncts
        assert topological_layers(g) == {0: 0, 1: 1}

    def test_3p_chain(self):
        (g,) = build_from_template("3p", [7], [3, 4, 5]).conjuncts
        layers = topological_layers(g)
        free = g.free_variable()
        assert sorted(layers.values()) == [0, 1, 2, 3]
        assert layers[free] == 3

    def test_pi_longest_path(self):
        # Both anchors at 0; the free variable takes the longest path (2).
        (g,) = build_from_template("pi", [0, 1], [0, 1, 2]).conjuncts
        layers = topological_layers(g)
        anchors = [n.node_id for n in g.nodes if n.kind is NodeKind.ANCHOR]
        variables = [n.node_id for n in g.nodes if n.kind is NodeKind.VAR]
        assert all(layers[a] == 0 for a in anchors)
        assert layers[variables[0]] == 1
        assert layers[g.free_variable()] == 2

    def test_every_edge_increases_layer(self):
        rng = random.Random(2)
        for name in TEMPLATE_NAMES:
            anchors, relations = random_bindings(name, rng)
            for g in build_from_template(name, anchors, relations).conjuncts:
                layers = topological_layers(g)
                for e in g.edges:
                    assert layers[e.src] < layers[e.dst]

    def test_cycle_rejected(self):
        g = ConjunctiveGraph(
            nodes=(
                QueryNode(0, NodeKind.ANCHOR, 1),
                QueryNode(1, NodeKind.VAR),
                QueryNode(2, NodeKind.FREE),
            ),
            edges=(
                QueryEdge(0, 1, 0), QueryEdge(1, 2, 0), QueryEdge(2, 1, 0),
            ),
        )
        with pytest.raises(QueryStructureError, match="cycle"):
            topological_layers(g)


class TestValidate:
    def test_valid_2i(self):
        (g,) = build_from_template("2i", [0, 1], [2, 3]).conjuncts
        assert validate(g) == []

    def test_two_free_variables(self):
        g = ConjunctiveGraph(
            nodes=(
                QueryNode(0, NodeKind.ANCHOR, 1),
                QueryNode(1, NodeKind.FREE),
                QueryNode(2, NodeKind.FREE),
            ),
            edges=(QueryEdge(0, 1, 0), QueryEdge(0, 2, 0)),
        )
        assert "multiple free variables" in validate(g)

    def test_free_variable_with_outgoing_edge(self):
        g = ConjunctiveGraph(
            nodes=(
                QueryNode(0, NodeKind.ANCHOR, 1),
                QueryNode(1, NodeKind.FREE),
                QueryNode(2, NodeKind.VAR),
            ),
            edges=(QueryEdge(0, 1, 0), QueryEdge(1, 2, 0)),
        )
        violations = validate(g)
        assert "free variable is not sink" in violations

    def test_non_anchor_source(self):
        g = ConjunctiveGraph(
            nodes=(QueryNode(0, NodeKind.VAR), QueryNode(1, NodeKind.FREE)),
            edges=(QueryEdge(0, 1, 0),),
        )
        assert any("not an anchor" in v for v in validate(g))
