import json
import subprocess
import sys

import jsonschema
import pytest

from rsqs import cli
from rsqs.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, THEORY_SCHEMA, main, sha256_file
from rsqs.data import read_dataset
from rsqs.models import ModelBundle, dump_checkpoint, load_checkpoint
from rsqs.numerics import NumericError
from rsqs.training import LOG_COLUMNS, TrainConfig

TINY_TRAIN = ["--epochs", "1", "--steps-per-epoch", "2", "--batch-size", "8", "--val-episodes", "2",
              "--val-query", "2", "--width", "4"]


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--classes", "20", "--per-class", "12", "--size", "16"]) == EXIT_OK
    return out / "dataset.rsqs"


def read_json(path):
    return json.loads(path.read_text())


# ---------------------------------------------------------------- gen-data

def test_gen_data_counts_and_echo(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--classes", "10", "--per-class", "50", "--size", "16"]) == 0
    ds = read_dataset(tmp_path / "dataset.rsqs")
    assert len(ds) == 500 and ds.hw == (16, 16)
    printed = capsys.readouterr().out
    assert "items 500" in printed and sha256_file(tmp_path / "dataset.rsqs") in printed
    echo = read_json(tmp_path / "config.json")
    assert echo == {"command": "gen-data", "classes": 10, "per_class": 50, "size": 16, "seed": 0}


def test_gen_data_checksum_deterministic(tmp_path):
    sums = []
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--classes", "3", "--per-class", "4",
                     "--seed", "7"]) == 0
        sums.append(sha256_file(tmp_path / name / "dataset.rsqs"))
    assert sums[0] == sums[1]
    main(["gen-data", "--out", str(tmp_path / "c"), "--classes", "3", "--per-class", "4", "--seed", "8"])
    assert sha256_file(tmp_path / "c" / "dataset.rsqs") != sums[0]


def test_gen_data_rejects_tiny_images(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--size", "4"]) == EXIT_CONFIG


def test_gen_data_explicit_file(tmp_path):
    target = tmp_path / "elsewhere.rsqs"
    assert main(["gen-data", "--out", str(tmp_path / "o"), "--classes", "2", "--per-class", "2",
                 "--file", str(target)]) == 0
    assert len(read_dataset(target)) == 4


# ---------------------------------------------------------------- train

def test_train_zero_epochs_writes_initialisation(tmp_path, data_file):
    assert main(["train", "--out", str(tmp_path), "--data", str(data_file), "--epochs", "0", "--seed", "3"]) == 0
    ckpt = load_checkpoint(tmp_path / "checkpoint.dual")
    ref = ModelBundle.init(ckpt.config, seed=3)
    assert dump_checkpoint(ckpt) == dump_checkpoint(ref)
    assert (tmp_path / "train_log.csv").read_text() == ",".join(LOG_COLUMNS) + "\n"
    echo = read_json(tmp_path / "config.json")
    assert echo["epochs"] == 0 and echo["seed"] == 3 and echo["data"] == str(data_file)
    assert set(TrainConfig().to_dict()) <= set(echo)


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--data", str(tmp_path / "nope.rsqs")]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_train_invalid_config(tmp_path, data_file):
    assert main(["train", "--out", str(tmp_path), "--data", str(data_file), "--beta", "1.5"]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path), "--data", str(data_file), "--optimizer", "lbfgs"]) == EXIT_CONFIG


def test_train_numeric_abort(tmp_path, data_file, monkeypatch):
    def explode(*args, **kw):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(cli, "train", explode)
    assert main(["train", "--out", str(tmp_path), "--data", str(data_file)]) == EXIT_NUMERIC


def test_train_writes_log_rows(tmp_path, data_file):
    assert main(["train", "--out", str(tmp_path), "--data", str(data_file), *TINY_TRAIN]) == 0
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0].split(",") == list(LOG_COLUMNS) and len(lines) == 2


def test_config_file_and_flag_precedence(tmp_path, data_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 0, "lr": 0.5, "batch-size": 16}))
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--config", str(cfg), "--data", str(data_file), "--lr", "0.25"]) == 0
    echo = read_json(out / "config.json")
    assert (echo["epochs"], echo["lr"], echo["batch_size"]) == (0, 0.25, 16)
    assert echo["patience"] == TrainConfig().patience


def test_config_file_unknown_key(tmp_path, data_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epoch": 3}))
    assert main(["train", "--out", str(tmp_path), "--config", str(cfg), "--data", str(data_file)]) == EXIT_CONFIG
    cfg.write_text("[1, 2]")
    assert main(["train", "--out", str(tmp_path), "--config", str(cfg), "--data", str(data_file)]) == EXIT_CONFIG


# ---------------------------------------------------------------- eval

@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_file):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out), "--data", str(data_file), *TINY_TRAIN]) == 0
    return out


def test_eval_smoke(run_dir, data_file, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--out", str(out), "--checkpoint", str(run_dir / "checkpoint.dual"), "--data",
                 str(data_file), "--episodes", "2", "--queries", "2"]) == 0
    rep = read_json(out / "benchmark.json")
    (block,) = rep["results"]
    assert {"mean", "ci95", "mean_acc", "n_episodes", "max_shifts", "k_shot"} <= set(block)
    assert 0 <= block["mean"] <= 1 and block["n_episodes"] == 2
    assert rep["options"]["use_ot"] and rep["options"]["use_repair"]
    assert read_json(out / "config.json")["episodes"] == 2


def test_eval_defaults_to_checkpoint_in_out(run_dir, data_file):
    assert main(["eval", "--out", str(run_dir), "--data", str(data_file), "--episodes", "2", "--queries", "1"]) == 0
    assert (run_dir / "benchmark.json").exists()


def test_eval_ablation_routes_to_plain_protonet(run_dir, data_file, tmp_path):
    from rsqs.fewshot import EpisodeParams, EvalOptions, run_benchmark

    out = tmp_path / "base"
    assert main(["eval", "--out", str(out), "--checkpoint", str(run_dir / "checkpoint.dual"), "--data",
                 str(data_file), "--episodes", "3", "--queries", "2", "--no-ot", "--no-repair"]) == 0
    rep = read_json(out / "benchmark.json")
    assert not rep["options"]["use_ot"] and not rep["options"]["use_repair"] and rep["options"]["use_tbn"]
    direct = run_benchmark(load_checkpoint(run_dir / "checkpoint.dual"), read_dataset(data_file), 3,
                           EpisodeParams(q_query=2), EvalOptions(use_ot=False, use_repair=False))
    assert rep["results"][0]["mean"] == direct.mean_acc
    assert rep["results"][0]["mean_plan_entropy"] is None


def test_eval_reports_every_requested_shift_count(run_dir, data_file, tmp_path):
    out = tmp_path / "ms"
    assert main(["eval", "--out", str(out), "--checkpoint", str(run_dir / "checkpoint.dual"), "--data",
                 str(data_file), "--episodes", "2", "--queries", "2", "--max-shifts", "1", "4",
                 "--shots", "1", "2"]) == 0
    blocks = read_json(out / "benchmark.json")["results"]
    assert [(b["k_shot"], b["max_shifts"]) for b in blocks] == [(1, 1), (1, 4), (2, 1), (2, 4)]


def test_eval_missing_checkpoint(tmp_path, data_file):
    assert main(["eval", "--out", str(tmp_path), "--data", str(data_file), "--episodes", "2"]) == EXIT_CONFIG


def test_eval_validation(run_dir, data_file, tmp_path):
    base = ["eval", "--out", str(tmp_path), "--checkpoint", str(run_dir / "checkpoint.dual"), "--data",
            str(data_file)]
    assert main(base + ["--episodes", "1"]) == EXIT_CONFIG
    assert main(base + ["--max-shifts", "5"]) == EXIT_CONFIG
    assert main(base + ["--beta", "0"]) == EXIT_CONFIG
    assert main(base + ["--episodes", "2", "--way", "9"]) == EXIT_CONFIG


def test_eval_is_reproducible(run_dir, data_file, tmp_path):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["eval", "--out", str(out), "--checkpoint", str(run_dir / "checkpoint.dual"), "--data",
                     str(data_file), "--episodes", "3", "--queries", "2", "--seed", "5", "--threads", "2"]) == 0
        reports.append((out / "benchmark.json").read_bytes())
    assert reports[0] == reports[1]


# ---------------------------------------------------------------- theory

THEORY_SMALL = ["--d", "3", "--n", "16", "--trials", "10", "--resamples", "5", "--scaling-n", "16",
                "--scaling-trials", "3"]


def test_theory_zero_sigma_exact_pass(tmp_path):
    assert main(["theory", "--out", str(tmp_path), "--sigma", "0", *THEORY_SMALL]) == 0
    rep = read_json(tmp_path / "theory.json")
    (lemma,) = rep["lemma"]
    assert lemma["pass_fraction"] == 1.0
    assert all(t["w"] == t["w_sigma"] for t in lemma["per_trial"])


def test_theory_output_matches_schema(tmp_path):
    assert main(["theory", "--out", str(tmp_path), *THEORY_SMALL]) == 0
    rep = read_json(tmp_path / "theory.json")
    jsonschema.validate(rep, THEORY_SCHEMA)
    assert [(r["sigma_s"], r["sigma_q"]) for r in rep["lemma"]] == [(0.1, 0.1), (0.3, 0.3)]
    assert (tmp_path / "theory_lemma.csv").exists() and (tmp_path / "theory_scaling.csv").exists()


def test_theory_invalid_grid(tmp_path):
    assert main(["theory", "--out", str(tmp_path), "--grid", "0.1", "0.2"]) == EXIT_CONFIG
    assert main(["theory", "--out", str(tmp_path), "--grid", "0.3", "0.2", "0.4"]) == EXIT_CONFIG
    assert main(["theory", "--out", str(tmp_path), "--trials", "5"]) == EXIT_CONFIG


def test_theory_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["theory", "--out", str(tmp_path / name), *THEORY_SMALL]) == 0
    assert (tmp_path / "a" / "theory.json").read_bytes() == (tmp_path / "b" / "theory.json").read_bytes()


# ---------------------------------------------------------------- entry point

def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rsqs.cli", "gen-data", "--out", str(tmp_path), "--size", "3"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "error" in proc.stderr


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2


def test_schema_rejects_malformed_report():
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"config": {}, "lemma": [{"d": 1}], "scaling": {}}, THEORY_SCHEMA)
