"""Command-line entry point: the full pipeline as subcommands.

Every run echoes its effective configuration and a version stamp into the
output directory; failures exit with a class-specific code and one
machine-parseable line on stderr.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys

from . import __version__
from .config import RunConfig
from .encoder import load_encoder_checkpoint, save_encoder_checkpoint, score_query
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    KgcqaError,
    QueryStructureError,
    SamplingError,
    TrainingDivergedError,
    VocabMismatchError,
)
from .kg import build_index, load_kg, load_saved_kg, save_kg
from .kge import eval_link_prediction, load_checkpoint, pretrain, save_checkpoint, stored_checkpoint_hash
from .queries import parse_nested
from .symbolic import answer_stats, generate_dataset, read_dataset, write_dataset
from .training import (
    evaluate,
    report_to_csv,
    report_to_table,
    sweep,
    sweep_to_csv,
    train_encoder,
)

EXIT_CODES: list[tuple[type, int]] = [
    (ConfigError, 2),
    (FileNotFoundError, 3),
    (DataFormatError, 4),
    (VocabMismatchError, 4),
    (QueryStructureError, 5),
    (SamplingError, 6),
    (CheckpointError, 7),
    (TrainingDivergedError, 8),
]


def _exit_code(exc: BaseException) -> int:
    for klass, code in EXIT_CODES:
        if isinstance(exc, klass):
            return code
    return 1


def version_stamp() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"kgcqa {__version__}" + (f" ({described})" if described else "")


def write_run_info(out_dir: str, cfg: RunConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective-config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.echo())
    with open(os.path.join(out_dir, "version.txt"), "w", encoding="utf-8") as fh:
        fh.write(version_stamp() + "\n")


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.load_file(args.config)
    cfg.apply_overrides(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg.set_seed_everywhere(args.seed)
    device = getattr(args, "device", "cpu") or "cpu"
    if device != "cpu":
        raise ConfigError(f"only --device cpu is supported, got {device!r}")
    return cfg


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="key=value config file (INI sections)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--seed", type=int, help="override every section seed")
    p.add_argument("--device", default="cpu", help="compute device (cpu)")
    p.add_argument("--out", required=out_required, help="output directory")


def _parse_counts(cfg: RunConfig, flag_value: str | None) -> dict[str, int]:
    raw = flag_value if flag_value is not None else cfg.get("sample", "counts")
    if not raw.strip():
        return {}
    counts: dict[str, int] = {}
    for part in raw.split(","):
        if ":" not in part:
            raise ConfigError("counts entries must look like type:count")
        name, num = part.split(":", 1)
        counts[name.strip()] = int(num)
    return counts


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    kg = load_kg(
        cfg.resolve_path(args.triples),
        cfg.resolve_path(args.entities),
        cfg.resolve_path(args.relations),
        split_label=args.split_label,
    )
    write_run_info(args.out, cfg)
    save_kg(kg, args.out)
    print(f"ingested {len(kg)} triples over {kg.num_entities} entities / "
          f"{kg.num_relations} relations into {args.out}")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    counts = _parse_counts(cfg, args.counts)
    if not counts:
        raise ConfigError("no query counts given (use --counts or sample.counts)")
    observed = load_saved_kg(cfg.resolve_path(args.kg))
    full = load_saved_kg(cfg.resolve_path(args.full_kg)) if args.full_kg else None
    dataset = generate_dataset(
        observed, full, counts,
        seed=cfg.get_int("sample", "seed"),
        rejection_budget=cfg.get_int("sample", "rejection_budget"),
    )
    write_run_info(args.out, cfg)
    out_path = os.path.join(args.out, args.name)
    write_dataset(dataset, out_path)
    summary = ", ".join(f"{k}:{v}" for k, v in sorted(dataset.counts_by_type().items()))
    print(f"wrote {len(dataset)} queries ({summary}) to {out_path}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    kg = load_saved_kg(cfg.resolve_path(args.kg))
    model, losses = pretrain(kg, cfg.pretrain_config(), log_every=args.log_every)
    write_run_info(args.out, cfg)
    content = save_checkpoint(model, args.out)
    if losses:
        print(f"final pretrain loss {losses[-1]:.4f} over {len(losses)} epochs")
    if args.eval_mrr:
        index = build_index(kg)
        triples = [(t.head, t.relation, t.tail) for t in kg.sorted_triples()]
        mrr = eval_link_prediction(model, index, triples)
        print(f"held-in 1p MRR {mrr:.4f}")
    print(f"saved link-predictor checkpoint {content[:12]}... to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    kge_dir = cfg.resolve_path(args.kge)
    kge_model = load_checkpoint(kge_dir)
    train_data = read_dataset(cfg.resolve_path(args.train_data))
    valid_data = read_dataset(cfg.resolve_path(args.valid_data)) if args.valid_data else None
    encoder, log = train_encoder(
        train_data, kge_model, cfg.train_config(), cfg.encoder_config(),
        valid_dataset=valid_data, verbose=args.verbose,
    )
    write_run_info(args.out, cfg)
    content = save_encoder_checkpoint(encoder, args.out, stored_checkpoint_hash(kge_dir))
    if log.losses:
        print(f"final training loss {log.losses[-1][1]:.4f} after {log.losses[-1][0]} steps")
    if log.best_step >= 0:
        print(f"best validation A_p {log.best_metric:.4f} at step {log.best_step}")
    print(f"saved encoder checkpoint {content[:12]}... to {args.out}")
    return 0


def _load_models(args: argparse.Namespace, cfg: RunConfig):
    kge_dir = cfg.resolve_path(args.kge)
    kge_model = load_checkpoint(kge_dir)
    encoder = load_encoder_checkpoint(
        cfg.resolve_path(args.encoder), kge_model, stored_checkpoint_hash(kge_dir)
    )
    return kge_model, encoder


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    _, encoder = _load_models(args, cfg)
    dataset = read_dataset(cfg.resolve_path(args.data))
    report = evaluate(
        dataset, encoder,
        hit_ks=tuple(cfg.get_int_list("eval", "hit_ks")),
        batch_size=cfg.get_int("eval", "batch_size"),
    )
    write_run_info(args.out, cfg)
    csv_text = report_to_csv(report)
    with open(os.path.join(args.out, "eval.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    table = report_to_table(report)
    with open(os.path.join(args.out, "eval-table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    if report.skipped:
        print(f"warning: skipped {report.skipped} records without hard answers")
    print(f"wrote {os.path.join(args.out, 'eval.csv')}")
    return 0


def cmd_answer(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    _, encoder = _load_models(args, cfg)
    query = parse_nested(args.query)
    if args.show_buckets:
        from .encoding import format_bucket_matrix, sequence_input
        ecfg = encoder.cfg
        for i, conjunct in enumerate(query.conjuncts):
            seq = sequence_input(conjunct, ecfg.mode, ecfg.clamp, ecfg.signed_direction)
            print(f"conjunct {i} bucket matrix ({ecfg.mode.value}, D={ecfg.clamp}):")
            print(format_bucket_matrix(seq))
    scored = score_query(query, encoder)
    names: dict[int, str] = {}
    if args.entities:
        with open(cfg.resolve_path(args.entities), encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    name, idx = line.split("\t")
                    names[int(idx)] = name
    top = scored.scores.topk(min(args.top, scored.scores.shape[0]))
    print(f"query type {query.query_type}")
    for rank, (score_value, ent) in enumerate(zip(top.values, top.indices), start=1):
        ent_id = int(ent)
        label = names.get(ent_id, str(ent_id))
        print(f"{rank:>3d}  {label}  {float(score_value):.4f}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    kge_model = load_checkpoint(cfg.resolve_path(args.kge))
    train_data = read_dataset(cfg.resolve_path(args.train_data))
    eval_data = read_dataset(cfg.resolve_path(args.eval_data))
    valid_data = read_dataset(cfg.resolve_path(args.valid_data)) if args.valid_data else None
    values = [float(v) for v in args.values.split(",") if v.strip()]
    rows = sweep(
        args.axis, values, train_data, eval_data, kge_model,
        cfg.train_config(), cfg.encoder_config(), valid_dataset=valid_data,
        verbose=args.verbose,
    )
    write_run_info(args.out, cfg)
    csv_text = sweep_to_csv(args.axis, rows)
    out_path = os.path.join(args.out, f"sweep-{args.axis}.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    print(csv_text, end="")
    print(f"wrote {out_path}")
    return 0


def _read_csv_rows(path: str) -> tuple[list[str], list[list[str]]]:
    import csv as csv_module

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv_module.reader(fh)
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if len(rows) < 2:
        raise DataFormatError(f"no rows in {path}")
    return rows[0], rows[1:]


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    produced = False
    if args.dataset:
        dataset = read_dataset(cfg.resolve_path(args.dataset))
        if not dataset.records:
            raise DataFormatError(f"no rows in {args.dataset}")
        stats = answer_stats(dataset)
        types = list(stats)
        widths = [max(len(t), len(f"{stats[t]:.1f}")) for t in types]
        print("  ".join(t.rjust(w) for t, w in zip(types, widths)))
        print("  ".join(f"{stats[t]:.1f}".rjust(w) for t, w in zip(types, widths)))
        produced = True
    if args.eval_csv:
        _, rows = _read_csv_rows(cfg.resolve_path(args.eval_csv))
        cols = [r[0] for r in rows]
        vals = [f"{100 * float(r[1]):.1f}" if r[1] else "-" for r in rows]
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        print("  ".join(c.rjust(w) for c, w in zip(cols, widths)))
        print("  ".join(v.rjust(w) for v, w in zip(vals, widths)))
        produced = True
    if args.sweep_csv:
        header, rows = _read_csv_rows(cfg.resolve_path(args.sweep_csv))
        if not args.out:
            raise ConfigError("--out is required when plotting a sweep CSV")
        os.makedirs(args.out, exist_ok=True)
        plot_path = os.path.join(args.out, "sweep.png")
        _plot_sweep(header, rows, plot_path)
        print(f"wrote {plot_path}")
        produced = True
    if not produced:
        raise ConfigError("report needs --dataset, --eval-csv, or --sweep-csv")
    return 0


def _plot_sweep(header: list[str], rows: list[list[str]], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [float(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in range(1, min(5, len(header))):
        ys = [float(r[col]) if r[col] else float("nan") for r in rows]
        ax.plot(xs, ys, marker="o", label=header[col])
    ax.set_xlabel(header[0])
    ax.set_ylabel("MRR")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgcqa",
        description="Complex query answering workbench: two-stage training and "
                    "filtered-MRR evaluation over knowledge graphs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load and validate a triple file")
    p.add_argument("--triples", required=True)
    p.add_argument("--entities", required=True, help="entity map file (name<TAB>id)")
    p.add_argument("--relations", required=True, help="relation map file")
    p.add_argument("--split-label", default="train", choices=("train", "train+valid", "full"))
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("sample", help="generate a query dataset by random walks")
    p.add_argument("--kg", required=True, help="ingested KG directory (observed graph)")
    p.add_argument("--full-kg", help="larger graph for valid/test sampling")
    p.add_argument("--counts", help="per-type counts, e.g. 1p:100,2i:50")
    p.add_argument("--name", default="queries.jsonl", help="output file name")
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("pretrain", help="stage 1: train the link predictor")
    p.add_argument("--kg", required=True, help="ingested KG directory")
    p.add_argument("--eval-mrr", action="store_true", help="report held-in 1p MRR")
    p.add_argument("--log-every", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="stage 2: train the query encoder")
    p.add_argument("--kge", required=True, help="link-predictor checkpoint directory")
    p.add_argument("--train-data", required=True, help="training queries (JSON lines)")
    p.add_argument("--valid-data", help="validation queries for model selection")
    p.add_argument("--verbose", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="filtered MRR/HIT@k evaluation")
    p.add_argument("--kge", required=True)
    p.add_argument("--encoder", required=True, help="encoder checkpoint directory")
    p.add_argument("--data", required=True, help="evaluation queries (JSON lines)")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("answer", help="score one nested-tuple query")
    p.add_argument("--kge", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--entities", help="entity map file for printing names")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--show-buckets", action="store_true",
                   help="dump each conjunct's bias-bucket matrix")
    p.add_argument("query", help="nested-tuple text, e.g. \"(7,(3,))\"")
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("sweep", help="train/eval across one hyperparameter axis")
    p.add_argument("--axis", required=True, choices=("label_smoothing", "num_layers"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--kge", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--valid-data")
    p.add_argument("--verbose", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render CSVs into tables and plots")
    p.add_argument("--dataset", help="dataset JSON lines: per-type answer stats")
    p.add_argument("--eval-csv", help="evaluation CSV to render as a text table")
    p.add_argument("--sweep-csv", help="sweep CSV to plot")
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KgcqaError as exc:
        code = _exit_code(exc)
        print(f"error code={code} kind={type(exc).__name__} msg={exc}", file=sys.stderr)
        return code
    except FileNotFoundError as exc:
        print(f"error code=3 kind=FileNotFoundError msg={exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
