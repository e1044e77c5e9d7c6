import json
import os
import random

import pytest

from kgcqa.cli import main
from kgcqa.config import RunConfig
from kgcqa.errors import ConfigError

from conftest import random_kg


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny but fully wired pipeline directory tree."""
    root = tmp_path_factory.mktemp("pipeline")
    kg = random_kg(25, 4, 160, seed=5)
    triples = root / "train.txt"
    triples.write_text("".join(
        f"{t.head}\t{t.relation}\t{t.tail}\n" for t in kg.sorted_triples()
    ))
    (root / "ent2id.txt").write_text("".join(
        f"entity_{i}\t{i}\n" for i in range(kg.num_entities)
    ))
    (root / "rel2id.txt").write_text("".join(
        f"rel_{i}\t{i}\n" for i in range(kg.num_relations)
    ))
    return root


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(workspace):
    """Run ingest -> sample -> pretrain -> train once for the module."""
    root = workspace
    kg_dir = root / "kg"
    assert run(["ingest", "--triples", root / "train.txt",
                "--entities", root / "ent2id.txt",
                "--relations", root / "rel2id.txt",
                "--out", kg_dir]) == 0

    data_dir = root / "queries"
    assert run(["sample", "--kg", kg_dir,
                "--counts", "1p:12,2p:8,2i:8,2in:6",
                "--name", "train.jsonl", "--seed", "0",
                "--out", data_dir]) == 0

    kge_dir = root / "kge"
    assert run(["pretrain", "--kg", kg_dir, "--out", kge_dir,
                "--set", "pretrain.rank=8",
                "--set", "pretrain.epochs=30",
                "--set", "pretrain.batch_size=64",
                "--set", "pretrain.learning_rate=0.2"]) == 0

    enc_dir = root / "encoder"
    assert run(["train", "--kge", kge_dir,
                "--train-data", data_dir / "train.jsonl",
                "--out", enc_dir,
                "--set", "encoder.num_layers=1",
                "--set", "encoder.d1=16",
                "--set", "encoder.num_heads=2",
                "--set", "encoder.negative_samples=8",
                "--set", "train.max_steps=30",
                "--set", "train.batch_size=16",
                "--set", "train.type_mix=1p:1,2p:1,2i:1,2in:0.5"]) == 0
    return root


class TestPipeline:
    def test_ingest_writes_manifest_and_provenance(self, pipeline):
        kg_dir = pipeline / "kg"
        assert (kg_dir / "triples.txt").exists()
        assert (kg_dir / "manifest.txt").exists()
        assert (kg_dir / "effective-config.ini").exists()
        assert "kgcqa" in (kg_dir / "version.txt").read_text()

    def test_sampled_dataset_is_jsonl(self, pipeline):
        rows = [
            json.loads(line)
            for line in (pipeline / "queries" / "train.jsonl").read_text().splitlines()
        ]
        assert len(rows) == 34
        assert {r["type"] for r in rows} == {"1p", "2p", "2i", "2in"}
        for row in rows:
            assert set(row) == {"type", "form", "easy_answers", "hard_answers"}

    def test_eval_produces_csv_rows(self, pipeline, capsys):
        # Rank known answers: re-label the training data as hard answers.
        rows = [
            json.loads(line)
            for line in (pipeline / "queries" / "train.jsonl").read_text().splitlines()
        ]
        eval_path = pipeline / "queries" / "eval.jsonl"
        with open(eval_path, "w") as fh:
            for row in rows:
                row["hard_answers"] = sorted(set(row["easy_answers"]))
                row["easy_answers"] = []
                fh.write(json.dumps(row) + "\n")
        out = pipeline / "evalrun"
        assert run(["eval", "--kge", pipeline / "kge",
                    "--encoder", pipeline / "encoder",
                    "--data", eval_path, "--out", out]) == 0
        csv_lines = (out / "eval.csv").read_text().strip().splitlines()
        types = {line.split(",")[0] for line in csv_lines[1:]}
        assert {"1p", "2p", "2i", "2in", "A_p", "A_n"} <= types

    def test_answer_prints_ranked_entities(self, pipeline, capsys):
        assert run(["answer", "--kge", pipeline / "kge",
                    "--encoder", pipeline / "encoder",
                    "--entities", pipeline / "ent2id.txt",
                    "--top", "5", "(3,(1,))"]) == 0
        out = capsys.readouterr().out
        lines = out.strip().splitlines()
        assert lines[0] == "query type 1p"
        assert len(lines) == 6
        assert "entity_" in lines[1]

    def test_eval_all_fourteen_types(self, pipeline):
        # Sample every template, re-label answers as hard, and expect one
        # CSV row per type plus both aggregates.
        from kgcqa.kg import load_saved_kg
        from kgcqa.queries import TEMPLATE_NAMES
        from kgcqa.symbolic import generate_dataset, write_dataset
        from kgcqa.training import relabel_for_training_mrr

        kg = load_saved_kg(str(pipeline / "kg"))
        ds = generate_dataset(kg, None, {t: 3 for t in TEMPLATE_NAMES}, seed=6)
        path = pipeline / "queries" / "all14.jsonl"
        write_dataset(relabel_for_training_mrr(ds), str(path))
        out = pipeline / "eval14"
        assert run(["eval", "--kge", pipeline / "kge",
                    "--encoder", pipeline / "encoder",
                    "--data", path, "--out", out]) == 0
        lines = (out / "eval.csv").read_text().strip().splitlines()
        types = [line.split(",")[0] for line in lines[1:]]
        assert types == list(TEMPLATE_NAMES) + ["A_p", "A_n"]

    def test_eval_csv_identical_across_runs(self, pipeline):
        out_a, out_b = pipeline / "evalrep_a", pipeline / "evalrep_b"
        for out in (out_a, out_b):
            assert run(["eval", "--kge", pipeline / "kge",
                        "--encoder", pipeline / "encoder",
                        "--data", pipeline / "queries" / "eval.jsonl",
                        "--out", out]) == 0
        assert (out_a / "eval.csv").read_bytes() == (out_b / "eval.csv").read_bytes()

    def test_answer_show_buckets_dumps_grid(self, pipeline, capsys):
        assert run(["answer", "--kge", pipeline / "kge",
                    "--encoder", pipeline / "encoder",
                    "--show-buckets", "(3,(1,))"]) == 0
        out = capsys.readouterr().out
        assert "bucket matrix" in out
        grid_lines = [l for l in out.splitlines() if l and l.lstrip()[0].isdigit()]
        assert len(grid_lines) >= 5  # one aligned row per sequence position

    def test_sweep_writes_csv(self, pipeline):
        out = pipeline / "sweeprun"
        assert run(["sweep", "--axis", "label_smoothing", "--values", "0.0,0.4",
                    "--kge", pipeline / "kge",
                    "--train-data", pipeline / "queries" / "train.jsonl",
                    "--eval-data", pipeline / "queries" / "eval.jsonl",
                    "--out", out,
                    "--set", "encoder.num_layers=1",
                    "--set", "encoder.d1=16",
                    "--set", "encoder.num_heads=2",
                    "--set", "encoder.negative_samples=8",
                    "--set", "train.max_steps=10",
                    "--set", "train.batch_size=8",
                    "--set", "train.type_mix=1p:1,2p:1"]) == 0
        csv_lines = (out / "sweep-label_smoothing.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 3

    def test_report_renders_sweep_plot(self, pipeline):
        out = pipeline / "plots"
        assert run(["report",
                    "--sweep-csv", pipeline / "sweeprun" / "sweep-label_smoothing.csv",
                    "--out", out]) == 0
        assert (out / "sweep.png").stat().st_size > 0

    def test_report_dataset_stats(self, pipeline, capsys):
        assert run(["report", "--dataset", pipeline / "queries" / "train.jsonl"]) == 0
        out = capsys.readouterr().out
        assert "1p" in out and "2in" in out

    def test_determinism_same_seed_same_csv(self, pipeline):
        out_a = pipeline / "det_a"
        out_b = pipeline / "det_b"
        for out in (out_a, out_b):
            assert run(["sample", "--kg", pipeline / "kg",
                        "--counts", "1p:5,pni:3", "--seed", "9",
                        "--name", "d.jsonl", "--out", out]) == 0
        assert (out_a / "d.jsonl").read_bytes() == (out_b / "d.jsonl").read_bytes()


class TestErrors:
    def test_missing_file_exit_code(self, tmp_path, capsys):
        code = run(["ingest", "--triples", tmp_path / "nope.txt",
                    "--entities", tmp_path / "e.txt",
                    "--relations", tmp_path / "r.txt",
                    "--out", tmp_path / "out"])
        assert code == 3
        assert "error code=3" in capsys.readouterr().err

    def test_bad_config_key_exit_code(self, workspace, tmp_path, capsys):
        code = run(["pretrain", "--kg", workspace / "kg",
                    "--out", tmp_path / "x",
                    "--set", "pretrain.bogus=1"])
        assert code == 2
        err = capsys.readouterr().err
        assert "error code=2" in err and "bogus" in err

    def test_checkpoint_tamper_exit_code(self, pipeline, tmp_path, capsys):
        blob = (pipeline / "kge" / "entity_table.f32").read_bytes()
        bad_dir = tmp_path / "badkge"
        bad_dir.mkdir()
        for name in ("manifest.txt", "relation_table.f32"):
            (bad_dir / name).write_bytes((pipeline / "kge" / name).read_bytes())
        (bad_dir / "entity_table.f32").write_bytes(blob[:-4] + b"\x01\x02\x03\x04")
        code = run(["answer", "--kge", bad_dir, "--encoder", pipeline / "encoder",
                    "(3,(1,))"])
        assert code == 7

    def test_bad_query_exit_code(self, pipeline, capsys):
        code = run(["answer", "--kge", pipeline / "kge",
                    "--encoder", pipeline / "encoder", "((1,(2,)),)"])
        assert code == 5

    def test_report_empty_csv_is_error(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("type,mrr\n")
        code = run(["report", "--eval-csv", empty])
        assert code == 4
        assert "no rows" in capsys.readouterr().err

    def test_nonzero_exit_is_machine_parseable(self, tmp_path, capsys):
        code = run(["report", "--dataset", tmp_path / "missing.jsonl"])
        assert code == 3
        err = capsys.readouterr().err.strip()
        assert err.startswith("error code=3 kind=")


class TestRunConfig:
    def test_defaults_cover_every_knob(self):
        cfg = RunConfig()
        assert cfg.pretrain_config().rank == 1000
        assert cfg.encoder_config().d1 == 768
        assert cfg.train_config().batch_size == 1024
        assert cfg.train_config().freeze_kge is True

    def test_file_then_flag_precedence(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[pretrain]\nrank = 64\nepochs = 5\n")
        cfg = RunConfig()
        cfg.load_file(str(path))
        assert cfg.get_int("pretrain", "rank") == 64
        cfg.apply_overrides(["pretrain.rank=32"])
        assert cfg.get_int("pretrain", "rank") == 32
        assert cfg.get_int("pretrain", "epochs") == 5

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[pretrain]\nranks = 64\n")
        cfg = RunConfig()
        with pytest.raises(ConfigError, match="ranks"):
            cfg.load_file(str(path))

    def test_unknown_section_rejected(self):
        cfg = RunConfig()
        with pytest.raises(ConfigError, match="section"):
            cfg.apply_overrides(["nosuch.key=1"])

    def test_type_mix_parsing(self):
        cfg = RunConfig()
        cfg.set("train", "type_mix", "1p:1,2in:0.25")
        assert cfg.get_mix("train", "type_mix") == {"1p": 1.0, "2in": 0.25}

    def test_bad_type_in_mix(self):
        cfg = RunConfig()
        cfg.set("train", "type_mix", "9q:1")
        with pytest.raises(ConfigError, match="9q"):
            cfg.get_mix("train", "type_mix")

    def test_echo_roundtrips_through_configparser(self, tmp_path):
        cfg = RunConfig()
        cfg.set("train", "max_steps", "77")
        path = tmp_path / "echo.ini"
        path.write_text(cfg.echo())
        reloaded = RunConfig()
        reloaded.load_file(str(path))
        assert reloaded.get_int("train", "max_steps") == 77

    def test_env_data_root_resolution(self, tmp_path, monkeypatch):
        data_root = tmp_path / "data"
        data_root.mkdir()
        (data_root / "f.txt").write_text("x")
        monkeypatch.setenv("Q2T_DATA_DIR", str(data_root))
        cfg = RunConfig()
        assert cfg.resolve_path("f.txt") == str(data_root / "f.txt")
