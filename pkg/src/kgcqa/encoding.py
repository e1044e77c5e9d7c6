"""Query graph to sequence-input transformation.

Each relation edge becomes a relation-node (so the graph carries no edge
attributes), two virtual nodes are attached to everything, and pairwise
structure is encoded as small-integer bias buckets derived from the directed
shortest-path distance: phi(i, j) = dir * spd(i, j) with
dir = sgn(layer(i) - layer(j)), sgn(x) = 1 for x >= 0 and 0 otherwise
(a signed variant with sgn(x) = -1 for x < 0 is available behind a flag).

Layers are longest-path depths on the augmented DAG; spd is hop count on the
undirected augmented graph restricted to non-virtual nodes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, QueryStructureError
from .queries import ConjunctiveGraph, NodeKind

# Sequence positions 0 and 1 are always the virtual head/relation tokens.
NUM_VIRTUAL = 2

KIND_GH = 0
KIND_GR = 1
KIND_ENTITY = 2
KIND_RELATION = 3
KIND_VAR = 4  # existential and free variables share one trainable embedding


class EncodingMode(str, Enum):
    DIRECTED = "directed_distance"
    UNDIRECTED = "undirected_distance"
    ADJACENCY = "adjacency_mask"
    NONE = "none"


@dataclass(frozen=True)
class AugNode:
    kind: int
    ref: int | None = None      # entity id or relation id
    negated: bool = False       # relation-nodes from negated atoms
    is_free: bool = False       # free-variable marker (kept for inspection)


@dataclass
class AugmentedGraph:
    """Virtuals at indices 0..1, then entity/var nodes, then relation-nodes."""

    nodes: list[AugNode]
    directed_edges: list[tuple[int, int]] = field(default_factory=list)
    layers: list[int] = field(default_factory=list)  # -1 for virtual nodes

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def real_indices(self) -> range:
        return range(NUM_VIRTUAL, len(self.nodes))


def augment(g: ConjunctiveGraph) -> AugmentedGraph:
    """Insert relation-nodes and virtual tokens; layer the augmented DAG."""
    nodes: list[AugNode] = [AugNode(KIND_GH), AugNode(KIND_GR)]
    entity_pos: dict[int, int] = {}
    for qn in g.nodes:
        idx = len(nodes)
        entity_pos[qn.node_id] = idx
        if qn.kind is NodeKind.ANCHOR:
            nodes.append(AugNode(KIND_ENTITY, qn.entity))
        else:
            nodes.append(AugNode(KIND_VAR, is_free=qn.kind is NodeKind.FREE))
    edges: list[tuple[int, int]] = []
    for e in g.edges:
        rel_idx = len(nodes)
        nodes.append(AugNode(KIND_RELATION, e.relation, negated=e.negated))
        edges.append((entity_pos[e.src], rel_idx))
        edges.append((rel_idx, entity_pos[e.dst]))

    layers = _longest_path_layers(len(nodes), edges)
    return AugmentedGraph(nodes, edges, layers)


def _longest_path_layers(n: int, edges: list[tuple[int, int]]) -> list[int]:
    indeg = [0] * n
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        indeg[v] += 1
    layer = [0] * n
    queue = deque(i for i in range(NUM_VIRTUAL, n) if indeg[i] == 0)
    seen = 0
    while queue:
        u = queue.popleft()
        seen += 1
        for v in adj[u]:
            layer[v] = max(layer[v], layer[u] + 1)
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    if seen != n - NUM_VIRTUAL:
        raise QueryStructureError("augmented graph has a cycle")
    layer[0] = layer[1] = -1
    return layer


def _undirected_bfs(aug: AugmentedGraph, source: int) -> list[int]:
    n = aug.num_nodes
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in aug.directed_edges:
        adj[u].append(v)
        adj[v].append(u)
    dist = [-1] * n
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def shortest_path_matrix(aug: AugmentedGraph) -> np.ndarray:
    """Hop counts on the undirected non-virtual graph; virtual rows/cols 0."""
    n = aug.num_nodes
    spd = np.zeros((n, n), dtype=np.int64)
    for i in aug.real_indices():
        dist = _undirected_bfs(aug, i)
        for j in aug.real_indices():
            if dist[j] < 0:
                raise QueryStructureError(
                    "augmented graph has a disconnected non-virtual component"
                )
            spd[i, j] = dist[j]
    return spd


def directed_distance(aug: AugmentedGraph, signed: bool = False) -> np.ndarray:
    """phi values for all non-virtual pairs; virtual rows/cols hold 0."""
    spd = shortest_path_matrix(aug)
    n = aug.num_nodes
    phi = np.zeros((n, n), dtype=np.int64)
    for i in aug.real_indices():
        for j in aug.real_indices():
            diff = aug.layers[i] - aug.layers[j]
            if diff >= 0:
                direction = 1
            else:
                direction = -1 if signed else 0
            phi[i, j] = direction * spd[i, j]
    return phi


def num_buckets(mode: EncodingMode, clamp: int) -> int:
    if mode is EncodingMode.DIRECTED:
        return 2 * clamp + 3
    if mode is EncodingMode.UNDIRECTED:
        return clamp + 3
    if mode is EncodingMode.ADJACENCY:
        return 4
    return 3


def virtual_buckets(mode: EncodingMode, clamp: int) -> tuple[int, int]:
    """(VIRTUAL, SELF_VIRTUAL) bucket ids; always the last two buckets."""
    total = num_buckets(mode, clamp)
    return total - 2, total - 1


def masked_bucket(mode: EncodingMode) -> int | None:
    """Bucket whose attention bias is -inf (adjacency-mask mode only)."""
    return 1 if mode is EncodingMode.ADJACENCY else None


def bucketize(aug: AugmentedGraph, mode: EncodingMode = EncodingMode.DIRECTED,
              clamp: int = 8, signed: bool = False) -> np.ndarray:
    """Bias-bucket index per node pair, in augmented-graph node order."""
    if clamp < 1:
        raise ConfigError(f"distance clamp must be >= 1, got {clamp}")
    mode = EncodingMode(mode)
    n = aug.num_nodes
    virtual, self_virtual = virtual_buckets(mode, clamp)
    buckets = np.empty((n, n), dtype=np.int64)

    if mode is EncodingMode.DIRECTED:
        phi = directed_distance(aug, signed=signed)
        real = np.clip(phi, -clamp, clamp) + clamp
    elif mode is EncodingMode.UNDIRECTED:
        spd = shortest_path_matrix(aug)
        real = np.clip(spd, 0, clamp)
    elif mode is EncodingMode.ADJACENCY:
        spd = shortest_path_matrix(aug)
        real = np.where(spd <= 1, 0, 1)
    else:
        real = np.zeros((n, n), dtype=np.int64)

    buckets[:, :] = real
    buckets[:NUM_VIRTUAL, :] = virtual
    buckets[:, :NUM_VIRTUAL] = virtual
    for i in range(NUM_VIRTUAL):
        buckets[i, i] = self_virtual
    return buckets


@dataclass(eq=False)
class SequenceInput:
    """One conjunct flattened to [g_h, g_r, v_1..v_n] plus its bucket matrix."""

    kinds: tuple[int, ...]
    refs: tuple[int, ...]
    negated: tuple[bool, ...]
    buckets: np.ndarray
    mode: EncodingMode
    clamp: int

    @property
    def length(self) -> int:
        return len(self.kinds)

    def structure_key(self) -> bytes:
        head = bytes(self.kinds) + bytes(int(x) for x in self.negated)
        return head + self.buckets.tobytes()


def flatten(aug: AugmentedGraph, mode: EncodingMode = EncodingMode.DIRECTED,
            clamp: int = 8, signed: bool = False) -> SequenceInput:
    """Canonical order: virtuals first, then (layer, construction-index)."""
    mode = EncodingMode(mode)
    order = list(range(NUM_VIRTUAL)) + sorted(
        aug.real_indices(), key=lambda i: (aug.layers[i], i)
    )
    buckets = bucketize(aug, mode, clamp, signed)[np.ix_(order, order)]
    kinds = tuple(aug.nodes[i].kind for i in order)
    refs = tuple(aug.nodes[i].ref or 0 for i in order)
    negated = tuple(aug.nodes[i].negated for i in order)
    return SequenceInput(kinds, refs, negated, np.ascontiguousarray(buckets), mode, clamp)


def sequence_input(g: ConjunctiveGraph, mode: EncodingMode = EncodingMode.DIRECTED,
                   clamp: int = 8, signed: bool = False) -> SequenceInput:
    return flatten(augment(g), mode, clamp, signed)


def format_bucket_matrix(seq: SequenceInput) -> str:
    """Aligned integer grid of the bucket matrix (debug output)."""
    width = max(2, len(str(int(seq.buckets.max()))))
    rows = []
    for row in seq.buckets:
        rows.append(" ".join(f"{int(v):>{width}d}" for v in row))
    return "\n".join(rows)
