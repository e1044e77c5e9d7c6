"""Stage-2 query encoder: distance-biased transformer over flattened query graphs.

The encoder embeds the sequence [g_h, g_r, v_1..v_n] (frozen KGE rows for
entity/relation nodes projected to width d1, trainable embeddings for the
virtual/variable tokens), runs L transformer layers whose attention logits
carry a per-head learnable scalar indexed by the pair's distance bucket, and
reads out the final g_h / g_r rows. Those two vectors, mapped back to the KGE
width, form the (head, relation) inputs of the frozen link predictor, which
scores every entity as a candidate answer.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .encoding import (
    EncodingMode,
    KIND_ENTITY,
    KIND_GH,
    KIND_GR,
    KIND_RELATION,
    KIND_VAR,
    SequenceInput,
    masked_bucket,
    num_buckets,
    sequence_input,
)
from .errors import CheckpointError, ConfigError
from .kg import read_manifest
from .kge import KgeModel, combine_head_relation
from .queries import DNFQuery


@dataclass
class EncoderConfig:
    num_layers: int = 6
    d1: int = 768
    num_heads: int = 12
    dropout: float = 0.1
    mode: EncodingMode = EncodingMode.DIRECTED
    clamp: int = 8
    signed_direction: bool = False
    negative_samples: int = 512
    label_smoothing: float = 0.4
    seed: int = 0

    def __post_init__(self) -> None:
        self.mode = EncodingMode(self.mode)
        if self.d1 % self.num_heads != 0:
            raise ConfigError(f"num_heads={self.num_heads} must divide d1={self.d1}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.negative_samples < 1:
            raise ConfigError("negative_samples must be >= 1")

    @property
    def num_buckets(self) -> int:
        return num_buckets(self.mode, self.clamp)


class _BiasedAttentionLayer(nn.Module):
    """One transformer layer: biased self-attention + FFN, post-layer-norm."""

    def __init__(self, d1: int, num_heads: int, n_buckets: int, dropout: float) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.d_head = d1 // num_heads
        self.wq = nn.Linear(d1, d1, bias=False)
        self.wk = nn.Linear(d1, d1, bias=False)
        self.wv = nn.Linear(d1, d1, bias=False)
        self.wo = nn.Linear(d1, d1, bias=False)
        self.bucket_bias = nn.Parameter(torch.zeros(num_heads, n_buckets))
        self.ln1 = nn.LayerNorm(d1)
        self.ln2 = nn.LayerNorm(d1)
        self.ffn = nn.Sequential(nn.Linear(d1, d1), nn.GELU(), nn.Linear(d1, d1))
        self.drop = nn.Dropout(dropout)

    def attention_weights(self, x: torch.Tensor, buckets: torch.Tensor,
                          masked_id: int | None) -> torch.Tensor:
        """Per-head attention rows, (B, H, m, m); each row sums to one."""
        bsz, m, _ = x.shape
        q = self.wq(x).view(bsz, m, self.num_heads, self.d_head)
        k = self.wk(x).view(bsz, m, self.num_heads, self.d_head)
        logits = torch.einsum("bihd,bjhd->bhij", q, k) / math.sqrt(self.d_head)
        bias = self.bucket_bias[:, buckets]
        if masked_id is not None:
            bias = bias.masked_fill(buckets == masked_id, float("-inf"))
        return torch.softmax(logits + bias.unsqueeze(0), dim=-1)

    def attention(self, x: torch.Tensor, buckets: torch.Tensor,
                  masked_id: int | None) -> torch.Tensor:
        """Multi-head biased attention output (before residual/normalization)."""
        bsz, m, d1 = x.shape
        attn = self.attention_weights(x, buckets, masked_id)
        v = self.wv(x).view(bsz, m, self.num_heads, self.d_head)
        ctx = torch.einsum("bhij,bjhd->bihd", attn, v).reshape(bsz, m, d1)
        return self.wo(ctx)

    def forward(self, x: torch.Tensor, buckets: torch.Tensor,
                masked_id: int | None) -> torch.Tensor:
        x = self.ln1(x + self.drop(self.attention(x, buckets, masked_id)))
        x = self.ln2(x + self.drop(self.ffn(x)))
        return x


# Indices into the trainable special-embedding table.
_SPECIAL_GH, _SPECIAL_GR, _SPECIAL_VAR = 0, 1, 2


class QueryEncoder(nn.Module):
    """Encoder plus its (frozen or trainable) KGE tables."""

    def __init__(self, cfg: EncoderConfig, kge: KgeModel, freeze_kge: bool = True,
                 dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.cfg = cfg
        self.scorer = kge.scorer
        self.d0 = kge.d0
        self.freeze_kge = freeze_kge

        ent = kge.entity_table.detach().to(dtype).clone()
        rel = kge.relation_table.detach().to(dtype).clone()
        if freeze_kge:
            self.register_buffer("entity_table", ent)
            self.register_buffer("relation_table", rel)
        else:
            self.entity_table = nn.Parameter(ent)
            self.relation_table = nn.Parameter(rel)

        d1 = cfg.d1
        self.proj = nn.Sequential(nn.Linear(self.d0, d1), nn.GELU(), nn.Linear(d1, d1))
        self.neg_transform = nn.Parameter(torch.eye(d1))
        self.special = nn.Parameter(torch.zeros(3, d1))
        self.layers = nn.ModuleList(
            _BiasedAttentionLayer(d1, cfg.num_heads, cfg.num_buckets, cfg.dropout)
            for _ in range(cfg.num_layers)
        )
        self.rev = nn.Sequential(nn.Linear(d1, d1), nn.GELU(), nn.Linear(d1, self.d0))
        self.to(dtype)
        self._init_parameters(cfg.seed)

    def _init_parameters(self, seed: int) -> None:
        """Re-initialize everything from a local generator, so construction is
        a pure function of (config, seed) regardless of global RNG state."""
        gen = torch.Generator().manual_seed(seed)

        def normal_(t: torch.Tensor, std: float = 0.02) -> None:
            with torch.no_grad():
                t.copy_(torch.randn(t.shape, generator=gen, dtype=torch.float64).to(t.dtype) * std)

        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    normal_(module.weight)
                    if module.bias is not None:
                        module.bias.zero_()
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()
            for layer in self.layers:
                layer.bucket_bias.zero_()
            eye = torch.eye(self.cfg.d1, dtype=torch.float64)
            noise = torch.randn(eye.shape, generator=gen, dtype=torch.float64) * 1e-3
            self.neg_transform.copy_((eye + noise).to(self.neg_transform.dtype))
        normal_(self.special)

    @property
    def dtype(self) -> torch.dtype:
        return self.special.dtype

    # -- forward pieces -----------------------------------------------------

    def embed_sequence(self, seq: SequenceInput, refs: torch.Tensor) -> torch.Tensor:
        """Initial projected representations, (B, m, d1).

        `refs` holds entity/relation table ids per position; rows for virtual
        and variable positions are replaced by the trainable embeddings.
        """
        kinds = torch.tensor(seq.kinds, dtype=torch.long)
        if refs.dim() != 2 or refs.shape[1] != seq.length:
            raise ConfigError(f"refs must be (B, {seq.length}), got {tuple(refs.shape)}")
        if (kinds == KIND_ENTITY).any():
            ent_refs = refs[:, kinds == KIND_ENTITY]
            if int(ent_refs.max()) >= self.entity_table.shape[0]:
                raise ConfigError("entity id out of range in sequence refs")
        if (kinds == KIND_RELATION).any():
            rel_refs = refs[:, kinds == KIND_RELATION]
            if int(rel_refs.max()) >= self.relation_table.shape[0]:
                raise ConfigError("relation id out of range in sequence refs")

        # entity_table/relation_table are buffers when frozen (no grad flows),
        # parameters in the joint-training ablation (grad flows).
        s0 = torch.zeros(refs.shape[0], seq.length, self.d0, dtype=self.dtype)
        ent_mask = kinds == KIND_ENTITY
        rel_mask = kinds == KIND_RELATION
        if ent_mask.any():
            s0[:, ent_mask] = self.entity_table[refs[:, ent_mask]]
        if rel_mask.any():
            s0[:, rel_mask] = self.relation_table[refs[:, rel_mask]]
        s1 = self.proj(s0)

        neg_mask = torch.tensor(seq.negated, dtype=torch.bool)
        if neg_mask.any():
            negated_rows = s1 @ self.neg_transform.T
            s1 = torch.where(neg_mask[None, :, None], negated_rows, s1)

        special_idx = torch.full((seq.length,), _SPECIAL_VAR, dtype=torch.long)
        special_idx[kinds == KIND_GH] = _SPECIAL_GH
        special_idx[kinds == KIND_GR] = _SPECIAL_GR
        special_mask = (kinds == KIND_GH) | (kinds == KIND_GR) | (kinds == KIND_VAR)
        special_rows = self.special[special_idx]
        s1 = torch.where(special_mask[None, :, None], special_rows.unsqueeze(0), s1)
        return s1

    def encode_sequences(self, seq: SequenceInput,
                         refs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the full stack; returns final (g_h, g_r) rows, each (B, d1)."""
        h = self.embed_sequence(seq, refs)
        buckets = torch.from_numpy(seq.buckets)
        masked_id = masked_bucket(seq.mode)
        for layer in self.layers:
            h = layer(h, buckets, masked_id)
        return h[:, 0], h[:, 1]

    def head_relation(self, gh: torch.Tensor, gr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Map encoder outputs back to the KGE width (shared reverse MLP)."""
        return self.rev(gh), self.rev(gr)

    def entity_scores(self, gh: torch.Tensor, gr: torch.Tensor) -> torch.Tensor:
        """(B, num_entities) link-predictor scores over the full entity table."""
        gh0, gr0 = self.head_relation(gh, gr)
        ent = self.entity_table if self.freeze_kge is False else self.entity_table.detach()
        return combine_head_relation(gh0, gr0, self.scorer) @ ent.T

    def candidate_scores(self, gh: torch.Tensor, gr: torch.Tensor,
                         candidates: torch.Tensor) -> torch.Tensor:
        """(B, K) scores for per-row candidate entity ids (B, K)."""
        gh0, gr0 = self.head_relation(gh, gr)
        ent = self.entity_table if self.freeze_kge is False else self.entity_table.detach()
        combined = combine_head_relation(gh0, gr0, self.scorer)
        return torch.einsum("bd,bkd->bk", combined, ent[candidates])


@dataclass
class ScoredQuery:
    scores: torch.Tensor                      # (num_entities,)
    per_conjunct: list[torch.Tensor] = field(default_factory=list)


def refs_tensor(seqs: list[SequenceInput]) -> torch.Tensor:
    return torch.tensor([s.refs for s in seqs], dtype=torch.long)


def score_query(q: DNFQuery, encoder: QueryEncoder) -> ScoredQuery:
    """Score every entity; multi-conjunct queries combine by elementwise max."""
    cfg = encoder.cfg
    per_conjunct: list[torch.Tensor] = []
    with torch.no_grad():
        for conjunct in q.conjuncts:
            seq = sequence_input(conjunct, cfg.mode, cfg.clamp, cfg.signed_direction)
            refs = refs_tensor([seq])
            gh, gr = encoder.encode_sequences(seq, refs)
            per_conjunct.append(encoder.entity_scores(gh, gr)[0])
    combined = per_conjunct[0]
    for extra in per_conjunct[1:]:
        combined = torch.maximum(combined, extra)
    return ScoredQuery(combined, per_conjunct)


# ---------------------------------------------------------------------------
# Label-smoothed sampled-softmax loss
# ---------------------------------------------------------------------------

def smoothed_labels(alpha: float, k_total: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Target distribution over [positive, negatives...]: sums to one."""
    if not 0 <= alpha < 1:
        raise ConfigError("label smoothing must lie in [0, 1)")
    labels = torch.full((k_total,), alpha / k_total, dtype=dtype)
    labels[0] = (1 - alpha) + alpha / k_total
    return labels

def smoothed_sampled_loss(scores: torch.Tensor, alpha: float) -> torch.Tensor:
    """Cross-entropy between smoothed labels and softmax of (B, K) scores.

    Column 0 holds the positive answer's score; the rest are sampled negatives.
    """
    labels = smoothed_labels(alpha, scores.shape[-1], dtype=scores.dtype)
    log_probs = torch.log_softmax(scores, dim=-1)
    return -(labels * log_probs).sum(dim=-1).mean()


# ---------------------------------------------------------------------------
# Encoder checkpoints (manifest + one raw float32 array file per parameter)
# ---------------------------------------------------------------------------

def _param_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4")).tobytes()


def save_encoder_checkpoint(encoder: QueryEncoder, directory: str, kge_hash: str) -> str:
    os.makedirs(directory, exist_ok=True)
    names = sorted(name for name, _ in encoder.named_parameters())
    params = dict(encoder.named_parameters())
    digest = hashlib.sha256()
    shapes: dict[str, tuple[int, ...]] = {}
    for name in names:
        data = _param_bytes(params[name])
        digest.update(data)
        shapes[name] = tuple(params[name].shape)
        with open(os.path.join(directory, f"{name}.f32"), "wb") as fh:
            fh.write(data)
    content = digest.hexdigest()

    cfg = encoder.cfg
    lines = [
        "format=encoder-checkpoint-v1",
        f"kge_hash={kge_hash}",
        f"content_hash={content}",
        f"scorer={encoder.scorer}",
        f"d0={encoder.d0}",
        f"num_entities={encoder.entity_table.shape[0]}",
        f"num_relations={encoder.relation_table.shape[0]}",
        f"freeze_kge={int(encoder.freeze_kge)}",
        f"num_layers={cfg.num_layers}",
        f"d1={cfg.d1}",
        f"num_heads={cfg.num_heads}",
        f"dropout={cfg.dropout}",
        f"mode={cfg.mode.value}",
        f"clamp={cfg.clamp}",
        f"signed_direction={int(cfg.signed_direction)}",
        f"negative_samples={cfg.negative_samples}",
        f"label_smoothing={cfg.label_smoothing}",
        f"seed={cfg.seed}",
    ]
    for name in names:
        lines.append(f"param.{name}=" + ",".join(str(d) for d in shapes[name]))
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return content


def load_encoder_checkpoint(directory: str, kge: KgeModel, kge_hash: str,
                            dtype: torch.dtype = torch.float32) -> QueryEncoder:
    manifest = read_manifest(os.path.join(directory, "manifest.txt"))
    try:
        if manifest["kge_hash"] != kge_hash:
            raise CheckpointError(
                f"encoder checkpoint in {directory} was trained against a different "
                f"link-predictor checkpoint (hash {manifest['kge_hash'][:12]}...)"
            )
        cfg = EncoderConfig(
            num_layers=int(manifest["num_layers"]),
            d1=int(manifest["d1"]),
            num_heads=int(manifest["num_heads"]),
            dropout=float(manifest["dropout"]),
            mode=EncodingMode(manifest["mode"]),
            clamp=int(manifest["clamp"]),
            signed_direction=bool(int(manifest["signed_direction"])),
            negative_samples=int(manifest["negative_samples"]),
            label_smoothing=float(manifest["label_smoothing"]),
            seed=int(manifest["seed"]),
        )
        freeze = bool(int(manifest["freeze_kge"]))
        stated_hash = manifest["content_hash"]
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad encoder manifest in {directory}: {exc}") from exc
    if manifest.get("scorer") != kge.scorer or int(manifest.get("d0", -1)) != kge.d0:
        raise CheckpointError("encoder checkpoint scorer/width disagrees with the KGE model")

    encoder = QueryEncoder(cfg, kge, freeze_kge=freeze, dtype=dtype)
    params = dict(encoder.named_parameters())
    param_names = sorted(
        key[len("param."):] for key in manifest if key.startswith("param.")
    )
    if set(param_names) != set(params):
        raise CheckpointError(f"parameter set mismatch in {directory}")
    digest = hashlib.sha256()
    with torch.no_grad():
        for name in param_names:
            shape = tuple(
                int(x) for x in manifest[f"param.{name}"].split(",") if x
            )
            path = os.path.join(directory, f"{name}.f32")
            with open(path, "rb") as fh:
                data = fh.read()
            digest.update(data)
            arr = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
            if tuple(params[name].shape) != shape:
                raise CheckpointError(f"shape mismatch for {name} in {directory}")
            params[name].copy_(torch.from_numpy(arr).to(dtype))
    if digest.hexdigest() != stated_hash:
        raise CheckpointError(f"content hash mismatch in {directory}")
    return encoder
