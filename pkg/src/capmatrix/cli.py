"""Command-line entry point: ``capmatrix <subcommand> --config <path>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

from . import experiments as ex
from .dataset import DatasetError
from .evaluation import CYCLES, LOG10_CYCLES
from .features import FeatureError
from .matrix import MatrixError
from .synth import SynthScenario, write_synthetic

log = logging.getLogger("capmatrix")

SUBCOMMANDS = (
    "ingest",
    "matrices",
    "downsample-sweep",
    "univariate-grid",
    "percentile-sweep",
    "element-sweep",
    "multivariate",
    "negative-results",
    "table2",
    "synth",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capmatrix", description="Cycle-life models from capacity matrices")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "synth", help="experiment JSON config")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed (overrides config)")
        if name == "univariate-grid":
            p.add_argument("--target", choices=("log10", "cycles"), default="log10",
                           help="fit log10(cycle life) or raw cycles")
        if name in ("univariate-grid", "multivariate"):
            p.add_argument("--cycle-averaged", action="store_true",
                           help="use the cycle-averaged ΔQ windows")
        if name == "synth":
            p.add_argument("--shape", choices=("shoulder", "polynomial"), default=None)
    return parser


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config is not None else ex.ExperimentConfig()
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _synth(args, cfg: ex.ExperimentConfig) -> dict:
    known = {f.name for f in fields(SynthScenario)}
    params = dict(cfg.synth)
    unknown = set(params) - known
    if unknown:
        raise ex.ExperimentError(f"unknown synth keys: {sorted(unknown)}")
    if args.seed is not None:
        params["seed"] = args.seed
    if args.shape is not None:
        params["shape"] = args.shape
    out = args.out or cfg.output_dir
    manifest = write_synthetic(out, SynthScenario(**params))
    # a ready-to-use config pointing at the new dataset
    run_cfg = replace(cfg, manifest=manifest.resolve(), data_dir=None, output_dir=(Path(out) / "results").resolve())
    ex.write_json(Path(out) / "config.json", run_cfg.to_dict())
    return {"manifest": str(manifest), "config": str(Path(out) / "config.json")}


def run(args) -> object:
    if args.command == "synth":
        return _synth(args, _config(args))
    cfg = _config(args)
    ws = ex.Workspace(cfg)
    c = args.command
    if c == "ingest":
        return ex.run_ingest(cfg, ws)
    if c == "matrices":
        return ex.run_matrices(cfg, ws)
    if c == "downsample-sweep":
        return ex.run_downsample_sweep(cfg, ws)
    if c == "univariate-grid":
        target = LOG10_CYCLES if args.target == "log10" else CYCLES
        res = ex.run_univariate_grid(cfg, target, args.cycle_averaged, ws)
        return {"splits": res["splits"]}
    if c == "percentile-sweep":
        return ex.run_percentile_sweep(cfg, ws)["summary"]
    if c == "element-sweep":
        return ex.run_single_element_sweep(cfg, ws)["summary"]
    if c == "multivariate":
        res = ex.run_multivariate(cfg, args.cycle_averaged, ws)
        return {m: r.per_split_rmse for m, r in res["fits"].items()}
    if c == "negative-results":
        return ex.run_negative_results(cfg, ws)
    if c == "table2":
        return ex.run_table2(cfg, ws)
    raise ex.ExperimentError(f"unknown subcommand {c}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    t0 = time.perf_counter()
    try:
        result = run(args)
    except (ex.ExperimentError, DatasetError, FeatureError, MatrixError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"capmatrix {args.command}: error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
