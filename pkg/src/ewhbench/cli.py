"""Command-line entry point: ``ewhbench <stage> [--seed N] [--config FILE] [--out DIR]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from .mpc import VARIANTS, SweepRow

log = logging.getLogger("ewhbench")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file overriding the packaged defaults")
    common.add_argument("--seed", type=int, help="dataset seed (overrides [experiment] seed)")
    common.add_argument("--es-seed", type=int, help="ES seed (overrides [es] seed)")
    common.add_argument("--out", type=Path, default=Path("ewhbench-out"), help="output directory")
    common.add_argument("--workers", type=int, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ewhbench", description="Water-heater control benchmark.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate the demand dataset")
    sub.add_parser("scenarios", parents=[common], help="build historical and k-means scenario sets")
    sub.add_parser("train-es", parents=[common], help="train the ES policy on the training scenarios")
    sw = sub.add_parser("sweep-mpc", parents=[common], help="MPC cost against lookahead on the evaluation days")
    sw.add_argument("--variants", default="pf,mf", help=f"comma list from {','.join(VARIANTS)}")
    sw.add_argument("--lookaheads", help="comma list of minutes (default from config)")
    sw.add_argument("--sources", help="comma list of scenario sources for mf/ts")
    sub.add_parser("evaluate", parents=[common], help="run the roster on the evaluation days")
    sub.add_parser("report", parents=[common], help="speed table and plot data from an evaluation")
    sub.add_parser("run", parents=[common], help="all stages in order")
    return p


def _config(args) -> ex.ExperimentConfig:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.workers is not None:
        over["workers"] = args.workers
    cfg = ex.ExperimentConfig.from_ini(args.config, **over)
    if args.es_seed is not None:
        cfg = replace(cfg, es=replace(cfg.es, seed=args.es_seed))
    return cfg


def _csv(text):
    return [s.strip() for s in text.split(",") if s.strip()] if text else None


def run(args) -> None:
    try:
        cfg = _config(args)
    except Exception as exc:
        raise ex.StageError("config", exc) from exc
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "run":
        report = ex.run_experiment(cfg, out)
        log.info("wrote %d report rows to %s", len(report.rows), out / "report.csv")
        return
    if cmd == "generate":
        trace = ex.stage_generate(cfg, out)
        log.info("%d days, mean %.1f gal/day", trace.days, trace.daily_gallons().mean())
        return
    if cmd == "scenarios":
        ex.stage_scenarios(cfg, ex.load_artifacts(out, ["demand"])["demand"], out)
        return
    if cmd == "train-es":
        res = ex.stage_train(cfg, ex.load_artifacts(out, ["scenarios"])["scenarios"], out)
        log.info("final training fitness %.4f", res.final_fitness)
        return
    if cmd == "sweep-mpc":
        a = ex.load_artifacts(out, ["demand", "scenarios"])
        lookaheads = [int(v) for v in _csv(args.lookaheads)] if args.lookaheads else None
        ex.stage_sweep(cfg, a["demand"], a["scenarios"], _csv(args.variants), lookaheads, _csv(args.sources), out)
        return
    if cmd == "evaluate":
        need = ["demand", "scenarios"] + (["policy"] if any(e.kind == "es" for e in cfg.roster) else [])
        a = ex.load_artifacts(out, need)
        ex.stage_evaluate(cfg, a["demand"], a["scenarios"], a.get("policy"), out)
        return
    if cmd == "report":
        try:
            report = ex.EvalReport.load(out, cfg.initial_temp)
        except Exception as exc:
            raise ex.StageError("report", exc) from exc
        sweep = None
        if (out / "sweep.csv").is_file():
            sweep = _read_sweep(out / "sweep.csv")
        ex.stage_report(cfg, report, out, sweep)
        return
    raise ex.StageError(cmd, ValueError("unknown command"))


def _read_sweep(path: Path):
    with open(path, newline="") as fh:
        return [SweepRow(r["variant"], r["source"], int(r["lookahead_min"]), int(r["day"]), float(r["cost"]), 0.0)
                for r in csv.DictReader(fh)]


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ex.StageError as exc:
        print(f"ewhbench: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
