"""Command-line entry point: ``rsqs gen-data | train | eval | theory``.

Every subcommand resolves its configuration as defaults < JSON config file < flags,
writes the resolved config to ``<out>/config.json`` before doing any work, and
derives all randomness from ``--seed``.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

from . import data as datamod
from .data import SamplingError, gen_dataset, read_dataset, write_dataset
from .fewshot import EpisodeParams, EvalOptions, options_dict, run_benchmark
from .models import load_checkpoint, save_checkpoint
from .numerics import NumericError
from .rng import substream
from .shifts import Phase
from .theory import lemma1_sweep, thm_err_scaling
from .training import ConfigError, TrainConfig, log_to_csv, train

log = logging.getLogger("rsqs")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DATASET_FILE = "dataset.rsqs"
CHECKPOINT_FILE = "checkpoint.dual"
LOG_FILE = "train_log.csv"
BENCHMARK_FILE = "benchmark.json"
THEORY_FILE = "theory.json"

GEN_DEFAULTS = {"classes": 20, "per_class": 100, "size": 16, "seed": 0}
EVAL_DEFAULTS = {
    "checkpoint": None, "data": None, "episodes": 200, "way": 5, "shots": [1], "queries": 16,
    "max_shifts": [4], "phase": "test", "no_ot": False, "no_repair": False, "no_tbn": False,
    "classifier": "proto", "beta": 0.5, "repair_side": "both", "seed": 0, "threads": None,
}
THEORY_DEFAULTS = {
    "d": 8, "n": 256, "sigma": [0.1, 0.3], "trials": 100, "resamples": 50,
    "grid": [0.05, 0.1, 0.2, 0.4], "scaling_n": 128, "scaling_trials": 20, "beta": 0.5, "seed": 0,
}

# JSON Schema of theory.json
THEORY_SCHEMA = {
    "type": "object",
    "required": ["config", "lemma", "scaling"],
    "properties": {
        "config": {"type": "object"},
        "lemma": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["d", "n", "sigma_s", "sigma_q", "trials", "pass_fraction", "per_trial"],
                "properties": {
                    "d": {"type": "integer"}, "n": {"type": "integer"},
                    "sigma_s": {"type": "number"}, "sigma_q": {"type": "number"},
                    "trials": {"type": "integer"},
                    "pass_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                    "lower_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                    "per_trial": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["w", "w_sigma", "bound_rhs", "slack", "lower_ok", "upper_ok"],
                        },
                    },
                },
            },
        },
        "scaling": {
            "type": "object",
            "required": ["d", "n", "sigma_grid", "mean_errors", "predicted", "correlation",
                         "monotone_fraction", "per_trial"],
            "properties": {
                "sigma_grid": {"type": "array", "items": {"type": "number"}},
                "mean_errors": {"type": "array", "items": {"type": "number"}},
                "correlation": {"type": "number"},
            },
        },
    },
}


class CliError(Exception):
    """A configuration or validation failure reported with exit code 2."""


# ---------------------------------------------------------------- config plumbing

def _key(flag: str) -> str:
    return flag.replace("-", "_")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise CliError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a flat JSON object")
    return {_key(k): v for k, v in cfg.items()}


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, the --config file and explicitly given flags (highest priority)."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(file_cfg)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _write_json(path: str, obj) -> None:
    datamod.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _prepare_out(out: str, resolved: dict) -> None:
    try:
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "config.json"), resolved)
    except OSError as e:
        raise CliError(f"cannot write to output directory {out}: {e}") from e


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _train_defaults() -> dict:
    d = TrainConfig().to_dict()
    d.update({"data": None})
    return d


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        kind = float if f.name == "eps" or isinstance(default, float) else type(default)
        if default is None and f.name != "eps":
            kind = int
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None,
                       help=f"(default {default})")


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    cfg = resolve(args, GEN_DEFAULTS)
    _prepare_out(args.out, {"command": "gen-data", **cfg})
    try:
        ds = gen_dataset(cfg["classes"], cfg["per_class"], cfg["size"], cfg["size"], seed=cfg["seed"])
    except ValueError as e:
        raise CliError(str(e)) from e
    path = args.file or os.path.join(args.out, DATASET_FILE)
    try:
        write_dataset(path, ds)
    except OSError as e:
        raise CliError(f"cannot write dataset {path}: {e}") from e
    print(f"items {len(ds)} classes {len(ds.classes)} size {ds.hw[0]}x{ds.hw[1]} "
          f"sha256 {sha256_file(path)} -> {path}")
    return EXIT_OK


def _read_data(path: str | None) -> datamod.Dataset:
    if path is None:
        raise CliError("no dataset given (--data)")
    if not os.path.isfile(path):
        raise CliError(f"dataset {path} does not exist")
    try:
        return read_dataset(path)
    except ValueError as e:
        raise CliError(f"cannot read dataset {path}: {e}") from e


def cmd_train(args) -> int:
    cfg = resolve(args, _train_defaults())
    path = cfg.pop("data")
    try:
        tcfg = TrainConfig(**cfg)
    except (ConfigError, TypeError) as e:
        raise CliError(str(e)) from e
    _prepare_out(args.out, {"command": "train", "data": path, **tcfg.to_dict()})
    ds = _read_data(path)

    def progress(rec):
        log.info("epoch %(epoch)d step %(step)d val_acc %(val_acc).4f L_ori %(L_ori).4f L_r %(L_r).4f", rec)

    try:
        result = train(ds, tcfg, progress=progress)
    except ConfigError as e:
        raise CliError(str(e)) from e
    ckpt = os.path.join(args.out, CHECKPOINT_FILE)
    save_checkpoint(ckpt, result.bundle)
    datamod.atomic_write(os.path.join(args.out, LOG_FILE), log_to_csv(result.log).encode("utf-8"))
    print(f"epochs {len(result.log)} best_epoch {result.best_epoch} best_val {result.best_val} -> {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve(args, EVAL_DEFAULTS)
    ckpt = cfg["checkpoint"] or os.path.join(args.out, CHECKPOINT_FILE)
    cfg["checkpoint"] = ckpt
    try:
        opts = EvalOptions(use_repair=not cfg["no_repair"], use_ot=not cfg["no_ot"], use_tbn=not cfg["no_tbn"],
                           classifier=cfg["classifier"], beta=cfg["beta"], repair_side=cfg["repair_side"])
        phase = Phase(cfg["phase"])
    except ValueError as e:
        raise CliError(str(e)) from e
    if not 0 < cfg["beta"] <= 1:
        raise CliError("beta must lie in (0, 1]")
    if cfg["episodes"] < 2:
        raise CliError("need at least two episodes")
    if any(not 0 <= m <= 4 for m in cfg["max_shifts"]):
        raise CliError("max-shifts values must lie in 0..4")
    _prepare_out(args.out, {"command": "eval", **cfg})
    if not os.path.isfile(ckpt):
        raise CliError(f"checkpoint {ckpt} does not exist")
    try:
        bundle = load_checkpoint(ckpt)
    except ValueError as e:
        raise CliError(f"cannot load checkpoint {ckpt}: {e}") from e
    ds = _read_data(cfg["data"])
    blocks = []
    for shots in cfg["shots"]:
        for ms in cfg["max_shifts"]:
            params = EpisodeParams(n_way=cfg["way"], k_shot=shots, q_query=cfg["queries"], max_shifts=ms, phase=phase)
            try:
                res = run_benchmark(bundle, ds, cfg["episodes"], params, opts, seed=cfg["seed"], threads=cfg["threads"])
            except SamplingError as e:
                raise CliError(str(e)) from e
            block = {"max_shifts": ms, "k_shot": shots, "n_way": cfg["way"], "q_query": cfg["queries"],
                     "mean": res.mean_acc, "ci95": res.ci95, **res.summary()}
            blocks.append(block)
            print(f"{shots}-shot max_shifts {ms}: {res.mean_acc:.4f} +- {res.ci95:.4f}")
    report = {"options": options_dict(opts), "phase": phase.value, "seed": cfg["seed"], "results": blocks}
    _write_json(os.path.join(args.out, BENCHMARK_FILE), report)
    return EXIT_OK


def cmd_theory(args) -> int:
    cfg = resolve(args, THEORY_DEFAULTS)
    grid = cfg["grid"]
    if len(grid) < 3 or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 0:
        raise CliError("--grid needs at least 3 increasing non-negative values")
    if any(s < 0 for s in cfg["sigma"]) or not cfg["sigma"]:
        raise CliError("--sigma values must be non-negative")
    if cfg["trials"] < 10 or cfg["d"] < 1 or not 1 <= cfg["n"] <= 256:
        raise CliError("need trials >= 10, d >= 1 and 1 <= n <= 256")
    _prepare_out(args.out, {"command": "theory", **cfg})
    lemma = lemma1_sweep(cfg["d"], cfg["n"], [(s, s) for s in cfg["sigma"]], cfg["trials"],
                         substream(cfg["seed"], "theory.lemma"), resamples=cfg["resamples"])
    scaling = thm_err_scaling(cfg["d"], cfg["scaling_n"], grid, cfg["scaling_trials"],
                              substream(cfg["seed"], "theory.scaling"), beta=cfg["beta"])
    report = {"config": cfg, "lemma": [r.to_dict() for r in lemma], "scaling": scaling.to_dict()}
    _write_json(os.path.join(args.out, THEORY_FILE), report)
    csv_lemma = "".join(f"# sigma_s={r.sigma_s} sigma_q={r.sigma_q}\n" + r.to_csv() for r in lemma)
    datamod.atomic_write(os.path.join(args.out, "theory_lemma.csv"), csv_lemma.encode("utf-8"))
    datamod.atomic_write(os.path.join(args.out, "theory_scaling.csv"), scaling.to_csv().encode("utf-8"))
    for r in lemma:
        print(f"bound sigma=({r.sigma_s}, {r.sigma_q}) pass_fraction {r.pass_fraction:.3f}")
    print(f"scaling correlation {scaling.correlation:.4f} monotone_fraction {scaling.monotone_fraction:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsqs", description="Dual adversarial alignment for support-query shift.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", default="runs", help="output directory for all artifacts")
        sp.add_argument("--config", default=None, help="JSON file with flat keys mirroring the flags")
        sp.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("gen-data", help="write a procedural dataset")
    common(g)
    g.add_argument("--classes", type=int, default=None)
    g.add_argument("--per-class", dest="per_class", type=int, default=None)
    g.add_argument("--size", type=int, default=None, help="image height and width")
    g.add_argument("--file", default=None, help=f"dataset path (default <out>/{DATASET_FILE})")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run alternating dual-adversarial training")
    t.add_argument("--out", default="runs")
    t.add_argument("--config", default=None)
    t.add_argument("--data", default=None)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="benchmark a checkpoint on shifted episodes")
    common(e)
    e.add_argument("--checkpoint", default=None, help=f"default <out>/{CHECKPOINT_FILE}")
    e.add_argument("--data", default=None)
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--way", type=int, default=None)
    e.add_argument("--shots", type=int, nargs="+", default=None)
    e.add_argument("--queries", type=int, default=None)
    e.add_argument("--max-shifts", dest="max_shifts", type=int, nargs="+", default=None)
    e.add_argument("--phase", choices=[p.value for p in Phase], default=None)
    e.add_argument("--no-ot", dest="no_ot", action="store_const", const=True, default=None)
    e.add_argument("--no-repair", dest="no_repair", action="store_const", const=True, default=None)
    e.add_argument("--no-tbn", dest="no_tbn", action="store_const", const=True, default=None)
    e.add_argument("--classifier", choices=["proto", "matching"], default=None)
    e.add_argument("--beta", type=float, default=None)
    e.add_argument("--repair-side", dest="repair_side", choices=["both", "support", "query"], default=None)
    e.add_argument("--threads", type=int, default=None, help="worker threads (fallback: RSQS_THREADS)")
    e.set_defaults(func=cmd_eval)

    th = sub.add_parser("theory", help="Monte-Carlo checks of the noise bounds")
    common(th)
    th.add_argument("--d", type=int, default=None)
    th.add_argument("--n", type=int, default=None)
    th.add_argument("--sigma", type=float, nargs="+", default=None, help="noise scales (sigma_s = sigma_q)")
    th.add_argument("--trials", type=int, default=None)
    th.add_argument("--resamples", type=int, default=None)
    th.add_argument("--grid", type=float, nargs="+", default=None)
    th.add_argument("--scaling-n", dest="scaling_n", type=int, default=None)
    th.add_argument("--scaling-trials", dest="scaling_trials", type=int, default=None)
    th.add_argument("--beta", type=float, default=None)
    th.set_defaults(func=cmd_theory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"rsqs: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"rsqs: numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
