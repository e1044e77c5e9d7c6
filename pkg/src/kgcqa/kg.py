"""Knowledge-graph triple storage: loading, validation, indexing, merging.

File formats (all UTF-8 text):
  triple file  - one "head<TAB>relation<TAB>tail" integer line per triple
  map file     - one "name<TAB>id" line per entity/relation
  manifest     - "key=value" lines recording num_entities, num_relations, split_label
"""

from __future__ import annotations

import bisect
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DataFormatError, VocabMismatchError

SPLIT_LABELS = ("train", "train+valid", "full")


@dataclass(frozen=True, order=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    """An in-memory triple set with fixed entity/relation vocabularies.

    Immutable by convention after construction; every mutator returns a new graph.
    """

    num_entities: int
    num_relations: int
    triples: frozenset[Triple]
    split_label: str = "train"

    def __post_init__(self) -> None:
        if self.split_label not in SPLIT_LABELS:
            raise DataFormatError(
                f"unknown split label {self.split_label!r}; expected one of {SPLIT_LABELS}"
            )
        for t in self.triples:
            self._check_range(t)

    def _check_range(self, t: Triple) -> None:
        if not (0 <= t.head < self.num_entities and 0 <= t.tail < self.num_entities):
            raise VocabMismatchError(
                f"entity id out of range in {t}: num_entities={self.num_entities}"
            )
        if not (0 <= t.relation < self.num_relations):
            raise VocabMismatchError(
                f"relation id out of range in {t}: num_relations={self.num_relations}"
            )

    def __len__(self) -> int:
        return len(self.triples)

    def sorted_triples(self) -> list[Triple]:
        return sorted(self.triples)


@dataclass
class GraphIndex:
    """Bidirectional (node, relation) adjacency with sorted neighbour lists.

    forward[(h, r)] lists tails ascending; backward[(t, r)] lists heads ascending.
    The two maps are exact transposes of each other.
    """

    num_entities: int
    num_relations: int
    forward: dict[tuple[int, int], list[int]] = field(default_factory=dict)
    backward: dict[tuple[int, int], list[int]] = field(default_factory=dict)

    def tails(self, head: int, relation: int) -> list[int]:
        return self.forward.get((head, relation), [])

    def heads(self, tail: int, relation: int) -> list[int]:
        return self.backward.get((tail, relation), [])

    def project(self, sources: Iterable[int], relation: int) -> set[int]:
        """Union of forward neighbours of `sources` under `relation`."""
        out: set[int] = set()
        for s in sources:
            out.update(self.forward.get((s, relation), ()))
        return out

    def has_triple(self, head: int, relation: int, tail: int) -> bool:
        tails = self.forward.get((head, relation))
        if not tails:
            return False
        i = bisect.bisect_left(tails, tail)
        return i < len(tails) and tails[i] == tail


def _read_map_file(path: str) -> dict[str, int]:
    mapping: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 'name<TAB>id', got {line!r}"
                )
            name, raw_id = parts
            try:
                idx = int(raw_id)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: id is not an integer") from exc
            if name in mapping:
                raise DataFormatError(f"{path}:{lineno}: duplicate name {name!r}")
            mapping[name] = idx
    return mapping


def read_triples(path: str) -> list[tuple[int, int, int]]:
    """Parse a tab-separated integer triple file, keeping duplicates."""
    rows: list[tuple[int, int, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated integers, got {line!r}"
                )
            try:
                h, r, t = (int(p) for p in parts)
            except ValueError as exc:
                raise DataFormatError(
                    f"{path}:{lineno}: non-integer field in {line!r}"
                ) from exc
            rows.append((h, r, t))
    return rows


def load_kg(
    triple_file: str,
    entity_map: str,
    relation_map: str,
    split_label: str = "train",
) -> KnowledgeGraph:
    """Load a triple file, inferring vocabulary sizes from the map files.

    Duplicate triple lines are deduplicated. Ids outside the declared
    vocabulary raise VocabMismatchError with the offending line's content.
    """
    ent_map = _read_map_file(entity_map)
    rel_map = _read_map_file(relation_map)
    num_entities = len(ent_map)
    num_relations = len(rel_map)
    triples = frozenset(Triple(h, r, t) for h, r, t in read_triples(triple_file))
    return KnowledgeGraph(num_entities, num_relations, triples, split_label)


def build_index(kg: KnowledgeGraph) -> GraphIndex:
    forward: dict[tuple[int, int], list[int]] = {}
    backward: dict[tuple[int, int], list[int]] = {}
    for t in kg.triples:
        forward.setdefault((t.head, t.relation), []).append(t.tail)
        backward.setdefault((t.tail, t.relation), []).append(t.head)
    for lst in forward.values():
        lst.sort()
    for lst in backward.values():
        lst.sort()
    return GraphIndex(kg.num_entities, kg.num_relations, forward, backward)


def merge_graphs(parts: Sequence[KnowledgeGraph], split_label: str = "full") -> KnowledgeGraph:
    """Union of triple sets over graphs that share a vocabulary."""
    if not parts:
        raise ValueError("merge_graphs needs at least one graph")
    first = parts[0]
    for g in parts[1:]:
        if (g.num_entities, g.num_relations) != (first.num_entities, first.num_relations):
            raise VocabMismatchError(
                f"cannot merge graphs with vocab ({g.num_entities},{g.num_relations}) "
                f"vs ({first.num_entities},{first.num_relations})"
            )
    merged = frozenset().union(*(g.triples for g in parts))
    return KnowledgeGraph(first.num_entities, first.num_relations, merged, split_label)


def save_kg(kg: KnowledgeGraph, directory: str) -> None:
    """Write triples.txt (sorted ascending) and manifest.txt into `directory`."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "triples.txt"), "w", encoding="utf-8") as fh:
        for t in kg.sorted_triples():
            fh.write(f"{t.head}\t{t.relation}\t{t.tail}\n")
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"num_entities={kg.num_entities}\n")
        fh.write(f"num_relations={kg.num_relations}\n")
        fh.write(f"split_label={kg.split_label}\n")


def read_manifest(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def load_saved_kg(directory: str) -> KnowledgeGraph:
    manifest = read_manifest(os.path.join(directory, "manifest.txt"))
    try:
        num_entities = int(manifest["num_entities"])
        num_relations = int(manifest["num_relations"])
        split_label = manifest.get("split_label", "train")
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"bad manifest in {directory}: {exc}") from exc
    rows = read_triples(os.path.join(directory, "triples.txt"))
    triples = frozenset(Triple(h, r, t) for h, r, t in rows)
    return KnowledgeGraph(num_entities, num_relations, triples, split_label)
