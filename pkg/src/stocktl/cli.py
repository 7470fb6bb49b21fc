"""Command line entry point: ``stocktl <subcommand> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as D
from . import experiment as ex
from .config import load_config, preset_config, save_config


def _build_config(args):
    config = preset_config(args.preset)
    if args.config:
        config = load_config(args.config, base=config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["output_dir"] = args.out
    return config.with_overrides(**overrides) if overrides else config


def cmd_synth(config, out_dir, args):
    panel = ex.load_panel(config.with_overrides(data_path=""))
    path = Path(args.panel_out) if args.panel_out else out_dir / "panel.csv"
    D.write_returns_csv(panel, path)
    return {"panel": str(path), "n_days": panel.n_days, "n_stocks": panel.n_stocks}


def cmd_train_source(config, out_dir, args):
    study = ex.Study(config)
    records = ex.run_source_training(config, study, out_dir)
    ex.save_source_manifest(records, out_dir, config)
    return {"splits": len(records), "ok": sum(r.status == "ok" for r in records),
            "val_accuracy": [r.val_accuracy for r in records]}


def _run_kinds(config, out_dir, kinds):
    study = ex.Study(config)
    records = ex.load_source_manifest(out_dir) if kinds != ("baseline",) else []
    results = ex.run_arms(config, study, records, out_dir, kinds=kinds)
    return {"arms": {r.arm: r.report.row() for r in results}}


def cmd_transfer(config, out_dir, args):
    return _run_kinds(config, out_dir, ("krauss", "transfer"))


def cmd_baseline(config, out_dir, args):
    return _run_kinds(config, out_dir, ("baseline",))


def cmd_report(config, out_dir, args):
    results = ex.load_arm_results(out_dir, config.arms)
    rows = ex.emit_report(results, out_dir, config)
    return {"rows": len(rows), "report": str(out_dir / "report.csv")}


def cmd_run_all(config, out_dir, args):
    manifest = ex.run_all(config, out_dir)
    return {"rows": len(manifest.report_rows), "report": str(out_dir / "report.csv"),
            "config_hash": manifest.config_hash}


def cmd_backtest(config, out_dir, args):
    if not args.predictions:
        raise ex.ExperimentError("backtest needs --predictions FILE")
    table = ex.read_predictions(args.predictions)
    rep = ex.backtest_predictions(table, config.portfolio_k, config.cost_per_trade)
    return {"report": rep.row()}


COMMANDS = {
    "synth": cmd_synth,
    "train-source": cmd_train_source,
    "transfer": cmd_transfer,
    "baseline": cmd_baseline,
    "report": cmd_report,
    "run-all": cmd_run_all,
    "backtest": cmd_backtest,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="stocktl", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--out", help="output directory (overrides output.dir)")
    parser.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    parser.add_argument("--preset", choices=["full", "desk"], help="built-in base config")
    parser.add_argument("--panel-out", help="synth: CSV path (default OUT/panel.csv)")
    parser.add_argument("--predictions", help="backtest: prediction CSV")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _build_config(args)
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, out_dir / "config.txt")
        result = COMMANDS[args.command](config, out_dir, args)
    except Exception as exc:  # noqa: BLE001 - reported as JSON for callers
        json.dump({"error": type(exc).__name__, "message": str(exc),
                   "command": args.command}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump({"command": args.command, "status": "ok", **result}, sys.stdout, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
