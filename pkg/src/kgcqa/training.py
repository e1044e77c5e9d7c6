"""Two-stage pipeline orchestration and filtered-MRR evaluation.

Stage 1 (link-predictor pretraining) lives in kge.py; this module trains the
query encoder against a frozen link predictor and computes the evaluation
report: per-type filtered MRR / HIT@k over hard answers plus the positive
(A_p) and negation (A_n) aggregates.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import (
    EncoderConfig,
    QueryEncoder,
    smoothed_sampled_loss,
)
from .encoding import SequenceInput, sequence_input
from .errors import ConfigError, TrainingDivergedError
from .kge import KgeModel
from .queries import EPFO_TYPES, NEGATION_TYPES, SUPERVISED_TYPES, TEMPLATE_NAMES
from .symbolic import QueryRecord, SampledDataset

DEFAULT_TYPE_MIX: dict[str, float] = {
    **{t: 1.0 for t in ("1p", "2p", "3p", "2i", "3i")},
    **{t: 0.1 for t in NEGATION_TYPES},
}

MULTI_HOP_TYPES = ("2p", "3p")
INTERSECTION_TYPES = ("2i", "3i")


@dataclass
class TrainRunConfig:
    batch_size: int = 1024
    learning_rate: float = 4e-4
    label_smoothing: float = 0.4
    max_steps: int = 1000
    freeze_kge: bool = True
    eval_every: int = 0
    seed: int = 0
    type_mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TYPE_MIX))

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        for qtype, weight in self.type_mix.items():
            if qtype not in TEMPLATE_NAMES:
                raise ConfigError(f"unknown query type {qtype!r} in type_mix")
            if weight < 0:
                raise ConfigError(f"negative weight for {qtype!r} in type_mix")


@dataclass
class TrainLog:
    losses: list[tuple[int, float]] = field(default_factory=list)
    validations: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = -1
    best_metric: float = -math.inf


class _TrainGroup:
    """Records sharing one sequence structure, ready for batched steps."""

    def __init__(self, seq: SequenceInput) -> None:
        self.seq = seq
        self.refs: list[tuple[int, ...]] = []
        self.targets: list[np.ndarray] = []
        self.easy_sets: list[frozenset[int]] = []
        self.complements: list[np.ndarray | None] = []

    def finalize(self) -> None:
        self.refs_tensor = torch.tensor(self.refs, dtype=torch.long)

    def __len__(self) -> int:
        return len(self.refs)


def _prepare_groups(
    dataset: SampledDataset, mix: dict[str, float], encoder_cfg: EncoderConfig,
    num_entities: int,
) -> tuple[dict[str, list[_TrainGroup]], dict[str, float]]:
    groups_by_type: dict[str, dict[bytes, _TrainGroup]] = {}
    for rec in dataset.records:
        weight = mix.get(rec.query_type, 0.0)
        if weight <= 0:
            continue
        if len(rec.query.conjuncts) != 1:
            raise ConfigError(
                f"{rec.query_type} queries are multi-conjunct; union types are "
                "evaluation-only and cannot appear in type_mix"
            )
        targets = rec.easy if rec.easy else rec.hard
        if not targets or len(rec.easy) >= num_entities:
            continue  # nothing to supervise with, or no negatives available
        seq = sequence_input(
            rec.query.conjuncts[0], encoder_cfg.mode, encoder_cfg.clamp,
            encoder_cfg.signed_direction,
        )
        bucket = groups_by_type.setdefault(rec.query_type, {})
        group = bucket.get(seq.structure_key())
        if group is None:
            group = bucket.setdefault(seq.structure_key(), _TrainGroup(seq))
        group.refs.append(seq.refs)
        group.targets.append(np.fromiter(sorted(targets), dtype=np.int64))
        group.easy_sets.append(rec.easy)
        group.complements.append(None)

    out: dict[str, list[_TrainGroup]] = {}
    weights: dict[str, float] = {}
    for qtype, buckets in groups_by_type.items():
        groups = list(buckets.values())
        for g in groups:
            g.finalize()
        out[qtype] = groups
        weights[qtype] = mix[qtype]
    return out, weights


def _negatives_for(group: _TrainGroup, row: int, k: int, num_entities: int,
                   rng: np.random.Generator) -> np.ndarray:
    comp = group.complements[row]
    if comp is None:
        easy = group.easy_sets[row]
        comp = np.fromiter(
            (e for e in range(num_entities) if e not in easy), dtype=np.int64
        )
        group.complements[row] = comp
    return rng.choice(comp, size=k, replace=True)


def train_encoder(
    train_dataset: SampledDataset,
    kge: KgeModel,
    cfg: TrainRunConfig,
    encoder_cfg: EncoderConfig,
    valid_dataset: SampledDataset | None = None,
    verbose: bool = False,
) -> tuple[QueryEncoder, TrainLog]:
    """Train the query encoder; returns best-on-validation parameters.

    With freeze_kge (the default) the KGE tables are registered as buffers and
    stay bitwise identical to the input model; the non-frozen variant is the
    joint-training ablation.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    encoder = QueryEncoder(encoder_cfg, kge, freeze_kge=cfg.freeze_kge)
    log = TrainLog()
    if cfg.max_steps == 0:
        return encoder, log

    groups, weights = _prepare_groups(
        train_dataset, cfg.type_mix, encoder_cfg, kge.num_entities
    )
    if not groups:
        raise ConfigError("no trainable records matched the configured type_mix")
    types = sorted(groups)
    probs = np.array([weights[t] for t in types], dtype=np.float64)
    probs /= probs.sum()

    optimizer = torch.optim.Adam(encoder.parameters(), lr=cfg.learning_rate)
    k_neg = encoder_cfg.negative_samples
    best_state: dict[str, torch.Tensor] | None = None

    encoder.train()
    for step in range(1, cfg.max_steps + 1):
        qtype = types[int(rng.choice(len(types), p=probs))]
        type_groups = groups[qtype]
        sizes = np.array([len(g) for g in type_groups], dtype=np.float64)
        group = type_groups[int(rng.choice(len(type_groups), p=sizes / sizes.sum()))]

        rows = rng.integers(0, len(group), size=cfg.batch_size)
        positives = np.empty(len(rows), dtype=np.int64)
        candidates = np.empty((len(rows), 1 + k_neg), dtype=np.int64)
        for i, row in enumerate(rows):
            targets = group.targets[row]
            positives[i] = targets[rng.integers(len(targets))]
            candidates[i, 0] = positives[i]
            candidates[i, 1:] = _negatives_for(group, int(row), k_neg,
                                               kge.num_entities, rng)

        refs = group.refs_tensor[torch.from_numpy(rows)]
        gh, gr = encoder.encode_sequences(group.seq, refs)
        scores = encoder.candidate_scores(gh, gr, torch.from_numpy(candidates))
        loss = smoothed_sampled_loss(scores, cfg.label_smoothing)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite encoder loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.losses.append((step, loss.item()))

        if cfg.eval_every and valid_dataset is not None and step % cfg.eval_every == 0:
            encoder.eval()
            report = evaluate(valid_dataset, encoder)
            metric = report.a_p if report.a_p is not None else report.mean_mrr()
            log.validations.append((step, metric))
            if metric > log.best_metric:
                log.best_metric = metric
                log.best_step = step
                best_state = copy.deepcopy(encoder.state_dict())
            if verbose:
                print(f"[train] step {step} loss {loss.item():.4f} val {metric:.4f}")
            encoder.train()
        elif verbose and step % max(1, cfg.max_steps // 10) == 0:
            print(f"[train] step {step} loss {loss.item():.4f}")

    if best_state is not None:
        encoder.load_state_dict(best_state)
    encoder.eval()
    return encoder, log


# ---------------------------------------------------------------------------
# Ranking and evaluation
# ---------------------------------------------------------------------------

def rank_hard_answer(scores: torch.Tensor, answer: int,
                     all_answers: frozenset[int]) -> int:
    """1 + number of non-answer entities scored strictly above the answer.

    Other answers are filtered out; ties resolve optimistically.
    """
    if answer not in all_answers:
        raise ValueError(f"answer {answer} not in the answer set")
    mask = torch.ones(scores.shape[0], dtype=torch.bool)
    mask[list(all_answers)] = False
    return 1 + int((scores[mask] > scores[answer]).sum())


@dataclass
class TypeMetrics:
    mrr: float
    hits: dict[int, float]
    num_queries: int
    num_answers: int


@dataclass
class EvalReport:
    per_type: dict[str, TypeMetrics]
    a_p: float | None
    a_n: float | None
    skipped: int
    runtime_seconds: float
    hit_ks: tuple[int, ...] = (1, 3, 10)

    def mean_mrr(self) -> float:
        if not self.per_type:
            return 0.0
        return sum(m.mrr for m in self.per_type.values()) / len(self.per_type)


def score_records(encoder: QueryEncoder, records: list[QueryRecord],
                  batch_size: int = 256) -> torch.Tensor:
    """(N, num_entities) scores; multi-conjunct records combined by max."""
    cfg = encoder.cfg
    num_entities = encoder.entity_table.shape[0]
    jobs: dict[bytes, tuple[SequenceInput, list[tuple[int, tuple[int, ...]]]]] = {}
    for idx, rec in enumerate(records):
        for conjunct in rec.query.conjuncts:
            seq = sequence_input(conjunct, cfg.mode, cfg.clamp, cfg.signed_direction)
            entry = jobs.setdefault(seq.structure_key(), (seq, []))
            entry[1].append((idx, seq.refs))

    out = torch.full((len(records), num_entities), -math.inf, dtype=encoder.dtype)
    with torch.no_grad():
        for seq, members in jobs.values():
            for start in range(0, len(members), batch_size):
                chunk = members[start:start + batch_size]
                refs = torch.tensor([refs for _, refs in chunk], dtype=torch.long)
                gh, gr = encoder.encode_sequences(seq, refs)
                scores = encoder.entity_scores(gh, gr)
                for row, (idx, _) in enumerate(chunk):
                    out[idx] = torch.maximum(out[idx], scores[row])
    return out


def evaluate(dataset: SampledDataset, encoder: QueryEncoder,
             hit_ks: tuple[int, ...] = (1, 3, 10),
             batch_size: int = 256) -> EvalReport:
    """Filtered MRR/HIT@k over hard answers, per query type."""
    started = time.perf_counter()
    was_training = encoder.training
    encoder.eval()
    per_type: dict[str, TypeMetrics] = {}
    skipped = 0
    for qtype, records in sorted(dataset.by_type().items()):
        scored = [rec for rec in records if rec.hard]
        skipped += len(records) - len(scored)
        if not scored:
            continue
        scores = score_records(encoder, scored, batch_size)
        reciprocal = 0.0
        hits = {k: 0 for k in hit_ks}
        num_answers = 0
        for row, rec in enumerate(scored):
            for answer in sorted(rec.hard):
                rank = rank_hard_answer(scores[row], answer, rec.all_answers)
                reciprocal += 1.0 / rank
                for k in hit_ks:
                    hits[k] += int(rank <= k)
                num_answers += 1
        per_type[qtype] = TypeMetrics(
            mrr=reciprocal / num_answers,
            hits={k: hits[k] / num_answers for k in hit_ks},
            num_queries=len(scored),
            num_answers=num_answers,
        )
    if was_training:
        encoder.train()

    epfo = [per_type[t].mrr for t in EPFO_TYPES if t in per_type]
    neg = [per_type[t].mrr for t in NEGATION_TYPES if t in per_type]
    return EvalReport(
        per_type=per_type,
        a_p=sum(epfo) / len(epfo) if epfo else None,
        a_n=sum(neg) / len(neg) if neg else None,
        skipped=skipped,
        runtime_seconds=time.perf_counter() - started,
        hit_ks=hit_ks,
    )


def relabel_for_training_mrr(dataset: SampledDataset) -> SampledDataset:
    """Move every answer into the hard slot (measures ranking of known answers)."""
    return SampledDataset([
        QueryRecord(rec.query, frozenset(), rec.all_answers)
        for rec in dataset.records
    ])


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def _type_order(per_type: dict[str, TypeMetrics]) -> list[str]:
    known = [t for t in TEMPLATE_NAMES if t in per_type]
    extra = sorted(t for t in per_type if t not in TEMPLATE_NAMES)
    return known + extra


def report_to_csv(report: EvalReport) -> str:
    header = ["type", "mrr"] + [f"hit{k}" for k in report.hit_ks]
    header += ["num_queries", "num_answers"]
    lines = [",".join(header)]
    for qtype in _type_order(report.per_type):
        m = report.per_type[qtype]
        row = [qtype, f"{m.mrr:.6f}"] + [f"{m.hits[k]:.6f}" for k in report.hit_ks]
        row += [str(m.num_queries), str(m.num_answers)]
        lines.append(",".join(row))
    padding = "," * (len(report.hit_ks) + 2)
    if report.a_p is not None:
        lines.append(f"A_p,{report.a_p:.6f}" + padding)
    if report.a_n is not None:
        lines.append(f"A_n,{report.a_n:.6f}" + padding)
    return "\n".join(lines) + "\n"


def report_to_table(report: EvalReport) -> str:
    """One-row MRR table (values x100), types as columns."""
    types = _type_order(report.per_type)
    cols = types + ["A_p", "A_n"]
    values = [f"{100 * report.per_type[t].mrr:.1f}" for t in types]
    values.append("-" if report.a_p is None else f"{100 * report.a_p:.1f}")
    values.append("-" if report.a_n is None else f"{100 * report.a_n:.1f}")
    widths = [max(len(c), len(v)) for c, v in zip(cols, values)]
    head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
    body = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return head + "\n" + body + "\n"


# ---------------------------------------------------------------------------
# Hyperparameter sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("label_smoothing", "num_layers")


@dataclass
class SweepRow:
    value: float
    a_m: float | None = None
    a_i: float | None = None
    a_n: float | None = None
    a_p: float | None = None
    error: str | None = None


def _aggregate(per_type: dict[str, TypeMetrics], names: tuple[str, ...]) -> float | None:
    vals = [per_type[t].mrr for t in names if t in per_type]
    return sum(vals) / len(vals) if vals else None


def sweep(
    axis: str,
    values: list,
    train_dataset: SampledDataset,
    eval_dataset: SampledDataset,
    kge: KgeModel,
    cfg: TrainRunConfig,
    encoder_cfg: EncoderConfig,
    valid_dataset: SampledDataset | None = None,
    verbose: bool = False,
) -> list[SweepRow]:
    """Train + evaluate once per axis value; failures are recorded, not fatal."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows: list[SweepRow] = []
    for value in values:
        point_cfg = copy.deepcopy(cfg)
        point_encoder_cfg = copy.deepcopy(encoder_cfg)
        if axis == "label_smoothing":
            point_cfg.label_smoothing = float(value)
            point_encoder_cfg.label_smoothing = float(value)
        else:
            point_encoder_cfg.num_layers = int(value)
        try:
            encoder, _ = train_encoder(
                train_dataset, kge, point_cfg, point_encoder_cfg, valid_dataset,
                verbose=verbose,
            )
            report = evaluate(eval_dataset, encoder)
        except Exception as exc:  # noqa: BLE001 - per-point failures continue the sweep
            rows.append(SweepRow(value=float(value), error=str(exc)))
            continue
        rows.append(SweepRow(
            value=float(value),
            a_m=_aggregate(report.per_type, MULTI_HOP_TYPES),
            a_i=_aggregate(report.per_type, INTERSECTION_TYPES),
            a_n=report.a_n,
            a_p=report.a_p,
        ))
    return rows


def sweep_to_csv(axis: str, rows: list[SweepRow]) -> str:
    lines = [f"{axis},A_m,A_i,A_n,A_p,error"]
    for row in rows:
        cells = [f"{row.value:g}"]
        for v in (row.a_m, row.a_i, row.a_n, row.a_p):
            cells.append("" if v is None else f"{v:.6f}")
        cells.append(row.error or "")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
