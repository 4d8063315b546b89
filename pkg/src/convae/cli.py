"""Command-line entry point: ``convae synth | train | eval | compare``.

Option values resolve as flag > ``--config`` JSON file > built-in default.
The config file holds either flat keys or one section per command
(``{"train": {...}}``); unknown keys are rejected.  ``CONVAE_DATA_DIR``
supplies ``--data`` when nothing else does.

Exit codes: 0 success, 2 data errors, 3 configuration or usage errors,
4 numeric failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import baselines as bl
from .checkpoint import load_checkpoint, save_checkpoint
from .data import FAULTED, HEALTHY, load_dataset, sample_windows, split_dataset, write_dataset
from .errors import (
    CheckpointError, ConfigurationError, ContractError, IngestionError, NumericError, StateError, TooShortError,
)
from .evaluation import (
    GRANULARITIES, boxplot_svg, calibrate_threshold, classify_and_report, report_dict, score, summarize,
    write_report, write_scores_csv,
)
from .model import ArchitectureSpec
from .synth import SynthConfig, generate_synthetic
from .training import StagePlan, TrainPlan, train, write_log

logger = logging.getLogger("convae")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ENV = "CONVAE_DATA_DIR"

DEFAULTS = {
    "synth": {
        "healthy": 20, "faulted": 10, "len": 2000, "seed": 0, "out": None, "features": 58,
        "sag_depth": 0.6, "sag_duty": 0.5, "coupling_perturbation": 0.6, "noise": 0.005,
    },
    "train": {
        "data": None, "out": "checkpoint.bin", "log": "loss_log.csv", "stages": "1:30:0,2:15:15",
        "seed": 0, "width_divisor": 8, "windows_per_cycle": 64, "cycles_per_batch": 4, "lr": 8e-4,
        "decay": 0.5, "decay_interval": 50, "validation_fraction": 0.2, "sigma": "matrix",
        "dtype": "float64", "resume": None, "threads": None,
    },
    "eval": {
        "data": None, "checkpoint": "checkpoint.bin", "granularity": "cycle", "threshold": "auto",
        "margin": 1.05, "scores": "scores.csv", "report": "report.json", "plot": None, "seed": None,
        "threads": None,
    },
    "compare": {
        "data": None, "method": ["knn"], "k": 5, "p": 2.0, "n_neighbors": 10, "epochs": 100,
        "granularity": "cycle", "margin": 1.05, "seed": 0, "validation_fraction": 0.2,
        "windows_per_cycle": 64, "scores": "compare_scores.csv", "report": "compare_report.json",
        "plot": None, "threads": None,
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="convae", description="Convolutional-autoencoder anomaly detection for drive cycles.")
    p.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    s = sub.add_parser("synth", help="write a seeded synthetic dataset", argument_default=S)
    s.add_argument("--healthy", type=int)
    s.add_argument("--faulted", type=int)
    s.add_argument("--len", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--features", type=int)
    s.add_argument("--sag-depth", dest="sag_depth", type=float)
    s.add_argument("--sag-duty", dest="sag_duty", type=float)
    s.add_argument("--coupling-perturbation", dest="coupling_perturbation", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--config")

    t = sub.add_parser("train", help="train the autoencoder on healthy cycles", argument_default=S)
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--log")
    t.add_argument("--stages", help="comma list of stage:epochs_frozen[:epochs_finetune]")
    t.add_argument("--seed", type=int)
    t.add_argument("--width-divisor", dest="width_divisor", type=int, help="1 for the full-width network")
    t.add_argument("--windows-per-cycle", dest="windows_per_cycle", type=int)
    t.add_argument("--cycles-per-batch", dest="cycles_per_batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--decay", type=float)
    t.add_argument("--decay-interval", dest="decay_interval", type=int)
    t.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    t.add_argument("--sigma", choices=("matrix", "rows"))
    t.add_argument("--dtype", choices=("float64", "float32"))
    t.add_argument("--resume")
    t.add_argument("--threads", type=int)
    t.add_argument("--config")

    e = sub.add_parser("eval", help="score, threshold and report", argument_default=S)
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--granularity")
    e.add_argument("--threshold", help="'auto' or a number")
    e.add_argument("--margin", type=float)
    e.add_argument("--scores")
    e.add_argument("--report")
    e.add_argument("--plot")
    e.add_argument("--seed", type=int)
    e.add_argument("--threads", type=int)
    e.add_argument("--config")

    c = sub.add_parser("compare", help="run the clustering and dense-AE baselines", argument_default=S)
    c.add_argument("--data")
    c.add_argument("--method", action="append", help=f"one of {', '.join(bl.METHODS)} or 'all'; repeatable")
    c.add_argument("--k", type=int)
    c.add_argument("--p", type=float)
    c.add_argument("--n-neighbors", dest="n_neighbors", type=int)
    c.add_argument("--epochs", type=int)
    c.add_argument("--granularity")
    c.add_argument("--margin", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    c.add_argument("--windows-per-cycle", dest="windows_per_cycle", type=int)
    c.add_argument("--scores")
    c.add_argument("--report")
    c.add_argument("--plot")
    c.add_argument("--threads", type=int)
    c.add_argument("--config")
    return p


def resolve(command: str, flags: dict) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    cfg = dict(DEFAULTS[command])
    if "data" in cfg and os.environ.get(DATA_ENV):
        cfg["data"] = os.environ[DATA_ENV]
    path = flags.pop("config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"config file {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path}: top level must be an object")
        section = loaded.get(command, loaded) if isinstance(loaded.get(command), dict) else loaded
        section = {k: v for k, v in section.items() if k not in DEFAULTS or k == command}
        section.pop(command, None)
        for key, value in section.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise ConfigurationError(f"unknown config key {key!r} for {command}")
            cfg[key] = value
    cfg.update(flags)
    return cfg


def parse_stages(text) -> tuple:
    if isinstance(text, (list, tuple)):
        items = [":".join(str(v) for v in s) if isinstance(s, (list, tuple)) else str(s) for s in text]
    else:
        items = [s for s in str(text).split(",") if s.strip()]
    out = []
    for item in items:
        parts = item.strip().split(":")
        try:
            nums = [int(v) for v in parts]
        except ValueError:
            raise ConfigurationError(f"stages: cannot parse {item!r}") from None
        if not 2 <= len(nums) <= 3:
            raise ConfigurationError(f"stages: {item!r} must be stage:epochs_frozen[:epochs_finetune]")
        out.append(StagePlan(*nums))
    return tuple(out)


def _threads(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    if int(n) < 1:
        raise ConfigurationError("threads must be >= 1")
    return threadpool_limits(limits=int(n))


def _load(data_dir):
    if not data_dir:
        raise IngestionError(f"no dataset directory (use --data or set {DATA_ENV})")
    if not Path(data_dir).is_dir():
        raise IngestionError(f"dataset directory {data_dir} does not exist")
    return load_dataset(data_dir)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    if not cfg["out"]:
        raise ConfigurationError("synth needs --out")
    sc = SynthConfig(
        seed=cfg["seed"], n_healthy=cfg["healthy"], n_faulted=cfg["faulted"], cycle_length=cfg["len"],
        feature_count=cfg["features"], sag_depth=cfg["sag_depth"], sag_duty=cfg["sag_duty"],
        coupling_perturbation=cfg["coupling_perturbation"], noise=cfg["noise"],
    )
    cycles = generate_synthetic(sc)
    if not cycles:
        print("warning: no cycles requested; writing an empty manifest", file=sys.stderr)
    try:
        path = write_dataset(cycles, cfg["out"], extra={"synth": {"seed": sc.seed, "cycle_length": sc.cycle_length}})
    except OSError as exc:
        raise IngestionError(f"cannot write dataset to {cfg['out']}: {exc}") from exc
    print(f"wrote {len(cycles)} cycles to {path.parent}")
    return EXIT_OK


def _plan_from(cfg: dict) -> TrainPlan:
    div = int(cfg["width_divisor"])
    if div < 1:
        raise ConfigurationError("width_divisor must be >= 1")
    arch = ArchitectureSpec.full() if div == 1 else ArchitectureSpec.desk(div)
    return TrainPlan(
        stages=parse_stages(cfg["stages"]), seed=int(cfg["seed"]),
        windows_per_cycle=int(cfg["windows_per_cycle"]), cycles_per_batch=int(cfg["cycles_per_batch"]),
        base_lr=float(cfg["lr"]), decay=float(cfg["decay"]), decay_interval=int(cfg["decay_interval"]),
        sigma=cfg["sigma"], dtype=cfg["dtype"], arch=arch,
    )


def cmd_train(cfg: dict) -> int:
    plan = _plan_from(cfg)
    cycles = _load(cfg["data"])
    train_c, val_c, _ = split_dataset(cycles, plan.seed, float(cfg["validation_fraction"]))
    if not train_c:
        raise IngestionError("dataset has no healthy training cycles")
    resume = None
    if cfg["resume"]:
        params, meta = load_checkpoint(cfg["resume"], with_metadata=True)
        resume = (params, int(meta.get("epoch", 0)))
    t0 = time.time()
    with _threads(cfg["threads"]):
        result = train(plan, train_c, resume=resume)
    last = result.log[-1] if result.log else None
    meta = {
        "epoch": result.epochs_done,
        "learning_rate": last.lr if last else None,
        "seed": plan.seed,
        "stage": result.params.stage,
        "stages": [[s.stage, s.epochs_frozen, s.epochs_finetune] for s in plan.stages],
        "validation_fraction": float(cfg["validation_fraction"]),
        "sigma": plan.sigma,
        "n_features": train_c[0].n_features,
        "train_ids": [c.id for c in train_c],
        "validation_ids": [c.id for c in val_c],
    }
    save_checkpoint(result.params, cfg["out"], meta)
    write_log(result.log, cfg["log"])
    wall = time.time() - t0
    final = f"{last.J:.6g}" if last else "n/a"
    print(f"final J={final} epochs={result.epochs_done} wall={wall:.1f}s checkpoint={cfg['out']}")
    return EXIT_OK


def _parse_threshold(value):
    if value is None or str(value) == "auto":
        return None
    try:
        return float(value)
    except ValueError:
        raise ConfigurationError(f"threshold must be 'auto' or a number, got {value!r}") from None


def cmd_eval(cfg: dict) -> int:
    gran = cfg["granularity"]
    if gran not in GRANULARITIES:
        raise ConfigurationError(f"granularity must be one of {', '.join(GRANULARITIES)}, got {gran!r}")
    fixed = _parse_threshold(cfg["threshold"])
    params, meta = load_checkpoint(cfg["checkpoint"], with_metadata=True)
    cycles = _load(cfg["data"])
    seed = int(meta.get("seed", 0) if cfg["seed"] is None else cfg["seed"])
    _, val_c, test_c = split_dataset(cycles, int(meta.get("seed", 0)), float(meta.get("validation_fraction", 0.2)))
    if not val_c and fixed is None:
        raise IngestionError("no validation cycles to calibrate an automatic threshold")
    sigma = meta.get("sigma", "matrix")
    with _threads(cfg["threads"]):
        val_rec = score(params, val_c, gran, seed=seed, sigma=sigma)
        test_rec = score(params, test_c, gran, seed=seed + 1, sigma=sigma)
    if fixed is None:
        th = calibrate_threshold(val_rec, "max-margin", float(cfg["margin"]))
    else:
        th = None
    records = val_rec + test_rec
    metrics = classify_and_report(records, th if th is not None else fixed)
    if records:
        summaries = {lab: summarize([r for r in records if r.label == lab]).__dict__
                     for lab in (HEALTHY, FAULTED) if any(r.label == lab for r in records)}
    else:
        summaries = {}
    report = report_dict(metrics, th, granularity=gran, n_records=len(records), summaries=summaries,
                         threshold_value=th.threshold if th is not None else fixed)
    write_scores_csv(records, cfg["scores"])
    write_report(report, cfg["report"])
    if cfg["plot"]:
        groups = {lab: [r.J for r in records if r.label == lab] for lab in (HEALTHY, FAULTED)}
        Path(cfg["plot"]).write_text(
            boxplot_svg(groups, f"J per {gran}", report["threshold_value"]), encoding="utf-8"
        )
    print(f"{gran}: accuracy={metrics.accuracy:.4f} recall={metrics.recall:.4f} f1={metrics.f1:.4f} "
          f"threshold={report['threshold_value']:.6g}")
    return EXIT_OK


def _methods(values) -> list:
    values = [values] if isinstance(values, str) else list(values)
    out = []
    for v in values:
        for m in str(v).split(","):
            m = m.strip()
            if m == "all":
                out.extend(bl.METHODS)
            elif m in bl.METHODS:
                out.append(m)
            else:
                raise ConfigurationError(f"unknown method {m!r}; valid methods: {', '.join(bl.METHODS)}, all")
    return list(dict.fromkeys(out))


def run_comparison(cycles, methods, seed=0, validation_fraction=0.2, granularity="cycle", margin=1.05,
                   k=5, p=2.0, n_neighbors=10, epochs=100, windows_per_cycle=64):
    """Fit each baseline on training windows and evaluate on validation + faulted cycles.

    Returns ``(records, blocks)``: all score records and one report block
    per method.
    """
    if granularity not in ("cycle", "sample"):
        raise ConfigurationError("baselines support granularity 'cycle' or 'sample'")
    train_c, val_c, test_c = split_dataset(cycles, seed, validation_fraction)
    if not train_c or not val_c:
        raise IngestionError("comparison needs healthy training and validation cycles")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    wins = [w for c in train_c for w in sample_windows(c, count=windows_per_cycle, rng=rng)]
    X = bl.feature_matrix(wins)
    records, blocks = [], {}
    for m in methods:
        det = bl.Detector(m, k=k, p=p, n_neighbors=n_neighbors, epochs=epochs, seed=seed).fit(X)
        v_s, v_c = bl.score_cycles(det, val_c)
        t_s, t_c = bl.score_cycles(det, test_c)
        val, test = (v_c, t_c) if granularity == "cycle" else (v_s, t_s)
        th = calibrate_threshold(val, "max-margin", margin, orientation=det.orientation)
        metrics = classify_and_report(val + test, th)
        records += val + test
        blocks[m] = report_dict(metrics, th, orientation=det.orientation, granularity=granularity)
    return records, blocks


def cmd_compare(cfg: dict) -> int:
    methods = _methods(cfg["method"])
    cycles = _load(cfg["data"])
    with _threads(cfg["threads"]):
        records, blocks = run_comparison(
            cycles, methods, int(cfg["seed"]), float(cfg["validation_fraction"]), cfg["granularity"],
            float(cfg["margin"]), int(cfg["k"]), float(cfg["p"]), cfg["n_neighbors"], int(cfg["epochs"]),
            int(cfg["windows_per_cycle"]),
        )
    write_scores_csv(records, cfg["scores"], with_method=True)
    write_report({"methods": blocks}, cfg["report"])
    if cfg["plot"]:
        groups = {f"{m}/{lab}": [r.J for r in records if r.method == m and r.label == lab]
                  for m in methods for lab in (HEALTHY, FAULTED)}
        Path(cfg["plot"]).write_text(boxplot_svg(groups, "baseline outlier scores", ylabel="score"),
                                     encoding="utf-8")
    for m, b in blocks.items():
        mt = b["metrics"]
        print(f"{m}: accuracy={mt['accuracy']:.4f} recall={mt['recall']:.4f} f1={mt['f1']:.4f} "
              f"orientation={b['orientation']}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}


def main(argv=None) -> int:
    try:
        args = vars(_parser().parse_args(argv))
    except UsageError as exc:
        print(f"convae: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.pop("command")
    try:
        cfg = resolve(command, args)
        return COMMANDS[command](cfg)
    except (ConfigurationError, ContractError, StateError) as exc:
        print(f"convae {command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, TooShortError, CheckpointError, FileNotFoundError) as exc:
        print(f"convae {command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"convae {command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
