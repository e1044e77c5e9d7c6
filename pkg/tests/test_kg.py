import random

import pytest

from kgcqa.errors import DataFormatError, VocabMismatchError
from kgcqa.kg import (
    KnowledgeGraph,
    Triple,
    build_index,
    load_kg,
    load_saved_kg,
    merge_graphs,
    save_kg,
)

from conftest import random_kg


def write_maps(tmp_path, num_entities, num_relations):
    ent = tmp_path / "ent2id.txt"
    rel = tmp_path / "rel2id.txt"
    ent.write_text("".join(f"e{i}\t{i}\n" for i in range(num_entities)))
    rel.write_text("".join(f"r{i}\t{i}\n" for i in range(num_relations)))
    return str(ent), str(rel)


class TestLoadKg:
    def test_empty_triple_file(self, tmp_path):
        ent, rel = write_maps(tmp_path, 3, 2)
        triples = tmp_path / "train.txt"
        triples.write_text("")
        kg = load_kg(str(triples), ent, rel)
        assert len(kg) == 0
        assert kg.num_entities == 3
        assert kg.num_relations == 2

    def test_duplicate_lines_deduplicated(self, tmp_path):
        ent, rel = write_maps(tmp_path, 3, 2)
        triples = tmp_path / "train.txt"
        triples.write_text("0\t1\t2\n0\t1\t2\n")
        kg = load_kg(str(triples), ent, rel)
        assert len(kg) == 1

    def test_counts_inferred_from_map_files(self, tmp_path):
        # Mirrors the public-distribution layout: counts come from the maps,
        # including inverse-doubled relations, regardless of triple usage.
        num_entities, num_relations = 117, 34
        ent, rel = write_maps(tmp_path, num_entities, num_relations)
        triples = tmp_path / "train.txt"
        triples.write_text("0\t0\t1\n5\t33\t116\n")
        kg = load_kg(str(triples), ent, rel)
        assert (kg.num_entities, kg.num_relations) == (num_entities, num_relations)
        ent_lines = sum(1 for _ in open(ent))
        rel_lines = sum(1 for _ in open(rel))
        assert (kg.num_entities, kg.num_relations) == (ent_lines, rel_lines)

    def test_malformed_line_reports_line_number(self, tmp_path):
        ent, rel = write_maps(tmp_path, 3, 2)
        triples = tmp_path / "train.txt"
        triples.write_text("0\t1\t2\n0\t1\n")
        with pytest.raises(DataFormatError, match=":2"):
            load_kg(str(triples), ent, rel)

    def test_out_of_range_id_rejected(self, tmp_path):
        ent, rel = write_maps(tmp_path, 3, 2)
        triples = tmp_path / "train.txt"
        triples.write_text("0\t1\t5\n")
        with pytest.raises(VocabMismatchError):
            load_kg(str(triples), ent, rel)


class TestIndex:
    def test_single_triple(self):
        kg = KnowledgeGraph(3, 1, frozenset({Triple(0, 0, 1)}))
        index = build_index(kg)
        assert index.tails(0, 0) == [1]
        assert index.heads(1, 0) == [0]

    def test_tails_sorted(self):
        kg = KnowledgeGraph(3, 1, frozenset({Triple(0, 0, 2), Triple(0, 0, 1)}))
        index = build_index(kg)
        assert index.tails(0, 0) == [1, 2]

    def test_transpose_invariant_on_random_kg(self):
        kg = random_kg(40, 6, 500, seed=7)
        index = build_index(kg)
        stored = sum(len(v) for v in index.forward.values())
        assert stored == len(kg)
        for (h, r), tails in index.forward.items():
            for t in tails:
                assert h in index.backward[(t, r)]
        for (t, r), heads in index.backward.items():
            for h in heads:
                assert t in index.forward[(h, r)]

    def test_membership_agreement(self):
        kg = random_kg(25, 4, 200, seed=3)
        index = build_index(kg)
        rng = random.Random(0)
        for _ in range(300):
            h, r, t = rng.randrange(25), rng.randrange(4), rng.randrange(25)
            expected = Triple(h, r, t) in kg.triples
            assert index.has_triple(h, r, t) == expected
            assert (t in index.tails(h, r)) == expected
            assert (h in index.heads(t, r)) == expected


class TestMerge:
    def test_merge_with_empty_is_identity(self, toy_kg):
        empty = KnowledgeGraph(toy_kg.num_entities, toy_kg.num_relations, frozenset())
        merged = merge_graphs([toy_kg, empty])
        assert merged.triples == toy_kg.triples

    def test_disjoint_union(self):
        a = KnowledgeGraph(20, 2, frozenset(Triple(i, 0, i + 1) for i in range(10)))
        b = KnowledgeGraph(20, 2, frozenset(Triple(i, 1, i + 1) for i in range(5)))
        assert len(merge_graphs([a, b])) == 15

    def test_overlapping_union_arithmetic(self):
        common = {Triple(i, 0, i + 1) for i in range(4)}
        a_only = {Triple(i, 1, i + 1) for i in range(6)}
        b_only = {Triple(i + 6, 1, i + 7) for i in range(6)}
        a = KnowledgeGraph(20, 2, frozenset(common | a_only))
        b = KnowledgeGraph(20, 2, frozenset(common | b_only))
        assert len(a) == 10 and len(b) == 10
        assert len(merge_graphs([a, b])) == 16

    def test_vocab_mismatch_rejected(self):
        a = KnowledgeGraph(10, 2, frozenset())
        b = KnowledgeGraph(11, 2, frozenset())
        with pytest.raises(VocabMismatchError):
            merge_graphs([a, b])


def test_save_load_roundtrip_bit_identical(tmp_path, toy_kg):
    first = tmp_path / "kg1"
    second = tmp_path / "kg2"
    save_kg(toy_kg, str(first))
    loaded = load_saved_kg(str(first))
    assert loaded.triples == toy_kg.triples
    assert (loaded.num_entities, loaded.num_relations) == (
        toy_kg.num_entities, toy_kg.num_relations
    )
    save_kg(loaded, str(second))
    assert (first / "triples.txt").read_bytes() == (second / "triples.txt").read_bytes()
    assert (first / "manifest.txt").read_bytes() == (second / "manifest.txt").read_bytes()
