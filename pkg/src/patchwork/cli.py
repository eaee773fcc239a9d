"""Command-line experiment runner.

Precedence: command-line flags override the config file, which overrides the
built-in defaults. Exit status is 0 on success, 1 for usage or configuration
errors and 2 when the run itself fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import config_hash, parse_config, serialize_config
from .errors import ConfigurationError
from .experiment import ExperimentConfig, ExperimentResult, run_experiment
from .federation import save_checkpoint

log = logging.getLogger("patchwork")

METRICS_FIELDS = ["round", "client_id", "mean_local_loss", "gq", "rq"]
SWEEP_FIELDS = ["method", "seed", "noised_modality", "scale", "gq"]
SUMMARY_FIELDS = ["method", "seed", "gq", "rq_mean", "collapse_score"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patchwork", description="Run a GraphPL patchwork-learning experiment.")
    p.add_argument("--config", type=Path, help="INI experiment config (defaults when omitted)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--method", choices=["graphpl", "poe-baseline"])
    p.add_argument("--rounds", type=int, help="global FedAvg rounds")
    p.add_argument("--workers", type=int, help="threads for client local rounds")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out is not None:
        cfg.run.out = str(args.out)
    if args.method is not None:
        cfg.run.method = args.method
    if args.rounds is not None:
        cfg.train.global_rounds = args.rounds
    if args.workers is not None:
        cfg.run.workers = args.workers
    return cfg.validate()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(row.get(k)) for k in fields})


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def summary_row(cfg: ExperimentConfig, result: ExperimentResult) -> dict:
    return {"method": cfg.run.method, "seed": cfg.run.seed,
            "gq": result.gq_mean if result.gq else None,
            "rq_mean": result.rq.mean if result.rq else None,
            "collapse_score": result.collapse.score if result.collapse else None}


def run(cfg: ExperimentConfig) -> ExperimentResult:
    """Run one experiment and write every artifact into ``cfg.run.out``."""
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    config_text = serialize_config(cfg)
    (out / "config.ini").write_text(config_text)
    paths = {"config": "config.ini", "metrics": "metrics.csv", "checkpoint": "model.gpl",
             "sweep": "sweep.csv", "summary": "summary.csv"}
    manifest = {"config_hash": config_hash(cfg), "seed": cfg.run.seed, "method": cfg.run.method,
                "version": __version__, "started": _now(), "finished": None, "artifacts": paths}
    _write_json(out / "manifest.json", manifest)

    t0 = time.perf_counter()
    result = run_experiment(cfg)
    log.info("trained %d rounds in %.1fs", cfg.train.global_rounds, time.perf_counter() - t0)

    write_csv(out / paths["metrics"], METRICS_FIELDS, result.rows)
    save_checkpoint(result.model, out / paths["checkpoint"])
    write_csv(out / paths["sweep"], SWEEP_FIELDS, result.sweep.rows(cfg.run.seed) if result.sweep else [])
    write_csv(out / paths["summary"], SUMMARY_FIELDS, [summary_row(cfg, result)])
    manifest["finished"] = _now()
    manifest["checksum"] = result.model.checksum()
    _write_json(out / "manifest.json", manifest)
    return result


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"patchwork: usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"patchwork: config error: {exc}", file=sys.stderr)
        return 1
    try:
        result = run(cfg)
    except Exception as exc:  # surfaced on stderr; the exit code carries the failure
        log.debug("run failed", exc_info=True)
        print(f"patchwork: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    row = summary_row(cfg, result)
    print(", ".join(f"{k}={_cell(v)}" for k, v in row.items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
