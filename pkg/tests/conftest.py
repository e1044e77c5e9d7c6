import random

import pytest
import torch

from kgcqa.kg import KnowledgeGraph, Triple, build_index
from kgcqa.kge import KgeModel


def random_kg(num_entities: int, num_relations: int, num_triples: int,
              seed: int) -> KnowledgeGraph:
    rng = random.Random(seed)
    triples = set()
    while len(triples) < num_triples:
        triples.add(Triple(
            rng.randrange(num_entities),
            rng.randrange(num_relations),
            rng.randrange(num_entities),
        ))
    return KnowledgeGraph(num_entities, num_relations, frozenset(triples))


@pytest.fixture(scope="session")
def toy_kg() -> KnowledgeGraph:
    """Small dense-ish graph: every template is samplable."""
    return random_kg(30, 5, 150, seed=0)


@pytest.fixture(scope="session")
def toy_index(toy_kg):
    return build_index(toy_kg)


def tiny_kge(num_entities: int = 20, num_relations: int = 5, rank: int = 8,
             scorer: str = "complex", seed: int = 0,
             dtype: torch.dtype = torch.float32) -> KgeModel:
    gen = torch.Generator().manual_seed(seed)
    d0 = 2 * rank if scorer == "complex" else rank
    ent = torch.randn(num_entities, d0, generator=gen, dtype=torch.float64)
    rel = torch.randn(num_relations, d0, generator=gen, dtype=torch.float64)
    return KgeModel(scorer, ent.to(dtype), rel.to(dtype))
