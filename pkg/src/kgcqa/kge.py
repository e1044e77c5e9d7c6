"""Stage-1 neural link predictor: embedding tables plus ComplEx/DistMult scorers.

Pretraining maximizes log P(t|h,r) + lambda * log P(r|h,t) per training triple,
both terms normalized by a full softmax (all entities / all relations as
classes), with an N3 (cubic norm) penalty on the embeddings of each batch.

Checkpoint layout: a directory holding manifest.txt (key=value lines including
a sha256 content hash) plus one raw little-endian float32 array file per table,
row-major.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .kg import KnowledgeGraph, GraphIndex, read_manifest

SCORERS = ("complex", "distmult")


@dataclass
class PretrainConfig:
    scorer: str = "complex"
    rank: int = 1000
    lambda_rel: float = 0.5
    learning_rate: float = 0.1
    batch_size: int = 512
    epochs: int = 100
    reg_weight: float = 1e-3
    optimizer: str = "adagrad"
    init_scale: float = 1e-2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scorer not in SCORERS:
            raise ConfigError(f"unknown scorer {self.scorer!r}; expected one of {SCORERS}")
        if self.rank <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("rank/batch_size must be positive, epochs non-negative")
        if self.lambda_rel < 0 or self.reg_weight < 0:
            raise ConfigError("lambda_rel and reg_weight must be non-negative")
        if self.optimizer not in ("adagrad", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @property
    def d0(self) -> int:
        return 2 * self.rank if self.scorer == "complex" else self.rank


class KgeModel:
    """Frozen embedding tables plus a scorer kind."""

    def __init__(self, scorer: str, entity_table: torch.Tensor,
                 relation_table: torch.Tensor) -> None:
        if scorer not in SCORERS:
            raise ConfigError(f"unknown scorer {scorer!r}")
        if entity_table.shape[1] != relation_table.shape[1]:
            raise ConfigError("entity and relation tables disagree on width")
        if scorer == "complex" and entity_table.shape[1] % 2 != 0:
            raise ConfigError("complex scorer needs an even embedding width")
        self.scorer = scorer
        self.entity_table = entity_table
        self.relation_table = relation_table

    @property
    def num_entities(self) -> int:
        return self.entity_table.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation_table.shape[0]

    @property
    def d0(self) -> int:
        return self.entity_table.shape[1]


def _split_complex(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    rank = x.shape[-1] // 2
    return x[..., :rank], x[..., rank:]


def combine_head_relation(h: torch.Tensor, r: torch.Tensor, scorer: str) -> torch.Tensor:
    """Vector c with score(h, r, t) = <c, t> for every tail embedding t."""
    if scorer == "distmult":
        return h * r
    h_re, h_im = _split_complex(h)
    r_re, r_im = _split_complex(r)
    c_re = h_re * r_re - h_im * r_im
    c_im = h_re * r_im + h_im * r_re
    return torch.cat([c_re, c_im], dim=-1)


def combine_head_tail(h: torch.Tensor, t: torch.Tensor, scorer: str) -> torch.Tensor:
    """Vector d with score(h, r, t) = <d, r> for every relation embedding r."""
    if scorer == "distmult":
        return h * t
    h_re, h_im = _split_complex(h)
    t_re, t_im = _split_complex(t)
    d_re = h_re * t_re + h_im * t_im
    d_im = h_re * t_im - h_im * t_re
    return torch.cat([d_re, d_im], dim=-1)


def score(h_vec: torch.Tensor, r_vec: torch.Tensor, candidates: torch.Tensor,
          scorer: str) -> torch.Tensor:
    """Score one (head, relation) pair against a k x d0 candidate matrix."""
    if h_vec.shape[-1] != r_vec.shape[-1] or h_vec.shape[-1] != candidates.shape[-1]:
        raise ConfigError(
            f"width mismatch: h={h_vec.shape[-1]}, r={r_vec.shape[-1]}, "
            f"candidates={candidates.shape[-1]}"
        )
    if scorer == "complex" and h_vec.shape[-1] % 2 != 0:
        raise ConfigError("complex scorer needs an even embedding width")
    return combine_head_relation(h_vec, r_vec, scorer) @ candidates.transpose(-1, -2)


def _n3_penalty(x: torch.Tensor, scorer: str) -> torch.Tensor:
    """Mean cubic norm per row; complex coordinates use their modulus."""
    if scorer == "complex":
        re, im = _split_complex(x)
        modulus = torch.sqrt(re**2 + im**2 + 1e-30)
        return (modulus**3).sum(dim=-1).mean()
    return (x.abs() ** 3).sum(dim=-1).mean()


def pretrain_loss(
    entity_table: torch.Tensor,
    relation_table: torch.Tensor,
    batch: torch.Tensor,
    scorer: str,
    lambda_rel: float,
    reg_weight: float,
) -> torch.Tensor:
    """Mean negative log-likelihood of a (B, 3) triple batch, plus N3 penalty."""
    h = entity_table[batch[:, 0]]
    r = relation_table[batch[:, 1]]
    t = entity_table[batch[:, 2]]
    tail_scores = combine_head_relation(h, r, scorer) @ entity_table.T
    loss = F.cross_entropy(tail_scores, batch[:, 2])
    if lambda_rel > 0:
        rel_scores = combine_head_tail(h, t, scorer) @ relation_table.T
        loss = loss + lambda_rel * F.cross_entropy(rel_scores, batch[:, 1])
    if reg_weight > 0:
        penalty = (
            _n3_penalty(h, scorer) + _n3_penalty(r, scorer) + _n3_penalty(t, scorer)
        )
        loss = loss + reg_weight * penalty
    return loss


def pretrain(kg: KnowledgeGraph, cfg: PretrainConfig,
             log_every: int = 0) -> tuple[KgeModel, list[float]]:
    """Train embedding tables on the one-hop triples of `kg`.

    Returns the model and the per-epoch running-mean loss trajectory.
    """
    if not kg.triples:
        raise ConfigError("cannot pretrain on an empty graph")
    gen = torch.Generator().manual_seed(cfg.seed)
    entity_table = torch.randn(kg.num_entities, cfg.d0, generator=gen) * cfg.init_scale
    relation_table = torch.randn(kg.num_relations, cfg.d0, generator=gen) * cfg.init_scale
    entity_table.requires_grad_(True)
    relation_table.requires_grad_(True)

    triples = torch.tensor(
        [(t.head, t.relation, t.tail) for t in kg.sorted_triples()], dtype=torch.long
    )
    opt_cls = torch.optim.Adagrad if cfg.optimizer == "adagrad" else torch.optim.Adam
    optimizer = opt_cls([entity_table, relation_table], lr=cfg.learning_rate)

    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(triples), generator=gen)
        total = 0.0
        batches = 0
        for start in range(0, len(triples), cfg.batch_size):
            batch = triples[perm[start:start + cfg.batch_size]]
            optimizer.zero_grad()
            loss = pretrain_loss(
                entity_table, relation_table, batch,
                cfg.scorer, cfg.lambda_rel, cfg.reg_weight,
            )
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite pretraining loss at epoch {epoch}, batch {batches} "
                    f"(lr={cfg.learning_rate}, scorer={cfg.scorer})"
                )
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        epoch_losses.append(total / max(batches, 1))
        if log_every and (epoch + 1) % log_every == 0:
            print(f"[pretrain] epoch {epoch + 1}/{cfg.epochs} loss {epoch_losses[-1]:.4f}")

    model = KgeModel(cfg.scorer, entity_table.detach(), relation_table.detach())
    if not (torch.isfinite(model.entity_table).all() and torch.isfinite(model.relation_table).all()):
        raise TrainingDivergedError("non-finite embeddings after pretraining")
    return model, epoch_losses


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _table_bytes(x: torch.Tensor) -> bytes:
    return np.ascontiguousarray(x.detach().cpu().numpy().astype("<f4")).tobytes()


def checkpoint_hash(entity_bytes: bytes, relation_bytes: bytes) -> str:
    digest = hashlib.sha256()
    digest.update(entity_bytes)
    digest.update(relation_bytes)
    return digest.hexdigest()


def save_checkpoint(model: KgeModel, directory: str) -> str:
    """Write the checkpoint directory; returns its content hash."""
    os.makedirs(directory, exist_ok=True)
    ent = _table_bytes(model.entity_table)
    rel = _table_bytes(model.relation_table)
    content = checkpoint_hash(ent, rel)
    with open(os.path.join(directory, "entity_table.f32"), "wb") as fh:
        fh.write(ent)
    with open(os.path.join(directory, "relation_table.f32"), "wb") as fh:
        fh.write(rel)
    lines = [
        "format=kge-checkpoint-v1",
        f"scorer={model.scorer}",
        f"d0={model.d0}",
        f"num_entities={model.num_entities}",
        f"num_relations={model.num_relations}",
        f"content_hash={content}",
    ]
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return content


def load_checkpoint(directory: str, expected_kg: KnowledgeGraph | None = None) -> KgeModel:
    manifest = read_manifest(os.path.join(directory, "manifest.txt"))
    try:
        scorer = manifest["scorer"]
        d0 = int(manifest["d0"])
        num_entities = int(manifest["num_entities"])
        num_relations = int(manifest["num_relations"])
        stated_hash = manifest["content_hash"]
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint manifest in {directory}: {exc}") from exc

    with open(os.path.join(directory, "entity_table.f32"), "rb") as fh:
        ent_bytes = fh.read()
    with open(os.path.join(directory, "relation_table.f32"), "rb") as fh:
        rel_bytes = fh.read()
    if checkpoint_hash(ent_bytes, rel_bytes) != stated_hash:
        raise CheckpointError(f"content hash mismatch in {directory}")
    if len(ent_bytes) != 4 * num_entities * d0 or len(rel_bytes) != 4 * num_relations * d0:
        raise CheckpointError(f"array sizes disagree with manifest in {directory}")
    if expected_kg is not None and (
        expected_kg.num_entities != num_entities
        or expected_kg.num_relations != num_relations
    ):
        raise CheckpointError(
            f"checkpoint vocab ({num_entities},{num_relations}) does not match "
            f"graph ({expected_kg.num_entities},{expected_kg.num_relations})"
        )
    ent = torch.from_numpy(
        np.frombuffer(ent_bytes, dtype="<f4").reshape(num_entities, d0).copy()
    )
    rel = torch.from_numpy(
        np.frombuffer(rel_bytes, dtype="<f4").reshape(num_relations, d0).copy()
    )
    return KgeModel(scorer, ent, rel)


def stored_checkpoint_hash(directory: str) -> str:
    manifest = read_manifest(os.path.join(directory, "manifest.txt"))
    try:
        return manifest["content_hash"]
    except KeyError as exc:
        raise CheckpointError(f"no content_hash in {directory}") from exc


# ---------------------------------------------------------------------------
# One-hop evaluation
# ---------------------------------------------------------------------------

def eval_link_prediction(
    model: KgeModel,
    observed: GraphIndex,
    test_triples: list[tuple[int, int, int]],
    batch_size: int = 256,
) -> float:
    """Filtered MRR over test triples.

    For each (h, r, t), t is ranked against entities that are not known tails
    of (h, r) in observed + test; ties resolve optimistically (rank counts
    strictly greater scores only).
    """
    if not test_triples:
        return 0.0
    test_tails: dict[tuple[int, int], set[int]] = {}
    for h, r, t in test_triples:
        test_tails.setdefault((h, r), set()).add(t)

    reciprocal = 0.0
    with torch.no_grad():
        for start in range(0, len(test_triples), batch_size):
            chunk = test_triples[start:start + batch_size]
            hs = torch.tensor([x[0] for x in chunk], dtype=torch.long)
            rs = torch.tensor([x[1] for x in chunk], dtype=torch.long)
            combined = combine_head_relation(
                model.entity_table[hs], model.relation_table[rs], model.scorer
            )
            scores = combined @ model.entity_table.T
            for i, (h, r, t) in enumerate(chunk):
                known = set(observed.tails(h, r)) | test_tails[(h, r)]
                row = scores[i]
                target = row[t]
                mask = torch.ones(model.num_entities, dtype=torch.bool)
                mask[list(known)] = False
                rank = 1 + int((row[mask] > target).sum())
                reciprocal += 1.0 / rank
    return reciprocal / len(test_triples)
