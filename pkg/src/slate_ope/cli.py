"""``slate-ope`` command line: simulate logs, estimate policy values, run sweeps.

Every subcommand resolves its settings from built-in defaults, an optional
``--config`` JSON file and explicit flags (flags win), and writes the
resolved settings next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .core import DataValidationError, OverlapError, load_jsonl, save_jsonl
from .estimators import DEFAULT_THRESHOLD, UnknownEstimatorError
from .harness import (
    EstimatorSpec,
    ExperimentGrid,
    derive_seed,
    oracle_truth,
    run_estimator,
    run_grid,
    sweep_data_size,
    sweep_slate_size,
    sweep_threshold,
)
from .policies import UnknownPolicyError, parse_policy_spec, policy_from_config
from .pseudoinverse import PIPreconditionError
from .simulator import CascadeRewardModel, SimWorld, generate_world, log_impressions

EXIT_USAGE = 2
EXIT_OVERLAP = 3

WORLD_DEFAULTS = {"world": None, "contexts": 50, "candidates": 10, "cascade": "hard", "rho": 0.7,
                  "recovery": "chain"}

DEFAULTS = {
    "simulate": {**WORLD_DEFAULTS, "logging": "uniform", "slate_size": 10, "n": 10_000, "out": "sim"},
    "estimate": {"logs": None, "estimator": "rips", "threshold": DEFAULT_THRESHOLD, "target": None,
                 "logging": None, "world": None, "scores": None, "out": None},
    "truth": {"world": None, "target": None, "slate_size": 10, "mc_samples": None, "out": None},
    "grid": {**WORLD_DEFAULTS, "logging_policies": None, "target_policies": None,
             "estimators": ["online", "ips", "nis", "iips", "rips"], "n": 10_000, "repeats": 20,
             "slate_size": 10, "out": "grid", "plot_data": False, "jobs": 1},
    "sweep-threshold": {**WORLD_DEFAULTS, "logging": "uniform", "target": "anti-optimal",
                        "thresholds": [1.0, 0.1, 0.01, 0.001], "n": 10_000, "repeats": 20, "slate_size": 10,
                        "out": "sweep_threshold", "plot_data": False, "jobs": 1},
    "sweep-slate": {**WORLD_DEFAULTS, "logging": "uniform", "target": "optimal", "slate_sizes": [1, 3, 5, 10],
                    "estimators": ["ips", "nis", "iips", "iips_sn", "rips"], "n": 10_000, "repeats": 20,
                    "out": "sweep_slate", "plot_data": False, "jobs": 1},
    "sweep-data": {**WORLD_DEFAULTS, "logging": "uniform", "targets": ["optimal", "anti-optimal", "uniform"],
                   "fractions": [0.01, 0.05, 0.15, 0.5, 1.0], "estimators": ["ips", "iips", "rips"],
                   "n": 100_000, "repeats": 5, "slate_size": 10, "out": "sweep_data", "plot_data": False,
                   "jobs": 1},
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _world_flags(p):
    p.add_argument("--world", help="world JSON file (otherwise a world is generated)")
    p.add_argument("--contexts", type=int, help="contexts in a generated world")
    p.add_argument("--candidates", type=int, help="candidates per context in a generated world")
    p.add_argument("--cascade", choices=["hard", "probabilistic"])
    p.add_argument("--rho", type=float, help="depression strength for the probabilistic cascade")
    p.add_argument("--recovery", choices=["chain", "one_step"])


def _output_flags(p):
    p.add_argument("--out", help="output directory")
    p.add_argument("--plot-data", dest="plot_data", action="store_const", const=True,
                   help="also write long-format CSV for plotting")
    p.add_argument("--jobs", type=int, help="parallel worker processes for repeats")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slate-ope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"slate-ope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with settings; flags override it")
        p.add_argument("--seed", type=int, help="base seed for every random stream (default 0)")
        return p

    p = command("simulate", "generate a world and log impressions from a logging policy")
    _world_flags(p)
    p.add_argument("--logging", help="logging policy, e.g. uniform, sorted:desc, softmax:0.5")
    p.add_argument("--slate-size", dest="slate_size", type=int)
    p.add_argument("--n", type=int, help="number of impressions")
    p.add_argument("--out", help="output directory")

    p = command("estimate", "estimate a target policy's value from logged impressions")
    p.add_argument("--logs", help="JSONL impressions")
    p.add_argument("--estimator", help="online, ips, nis, iips, iips_sn, pi, pi_mc, rips_closed or rips")
    p.add_argument("--threshold", type=float, help="RIPS lookback threshold")
    p.add_argument("--target", help="target policy spec")
    p.add_argument("--logging", help="logging policy spec (pi_mc only)")
    p.add_argument("--world", help="world JSON providing candidate scores")
    p.add_argument("--scores", help="JSON {context_id: {candidate: score}}")
    p.add_argument("--out", help="report file (default: stdout)")

    p = command("truth", "exact or Monte-Carlo value of a target policy in a simulated world")
    p.add_argument("--world", help="world JSON")
    p.add_argument("--target", help="target policy spec")
    p.add_argument("--slate-size", dest="slate_size", type=int)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.add_argument("--out", help="result file (default: stdout)")

    p = command("grid", "logging x target grid of estimators against oracle truth")
    _world_flags(p)
    _output_flags(p)
    p.add_argument("--estimators", type=_strs)
    p.add_argument("--n", type=int, help="impressions per repeat")
    p.add_argument("--repeats", type=int)
    p.add_argument("--slate-size", dest="slate_size", type=int)

    p = command("sweep-threshold", "RIPS across lookback thresholds")
    _world_flags(p)
    _output_flags(p)
    p.add_argument("--logging")
    p.add_argument("--target")
    p.add_argument("--thresholds", type=_floats)
    p.add_argument("--n", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--slate-size", dest="slate_size", type=int)

    p = command("sweep-slate", "estimators across slate sizes")
    _world_flags(p)
    _output_flags(p)
    p.add_argument("--logging")
    p.add_argument("--target")
    p.add_argument("--slate-sizes", dest="slate_sizes", type=_ints)
    p.add_argument("--estimators", type=_strs)
    p.add_argument("--n", type=int)
    p.add_argument("--repeats", type=int)

    p = command("sweep-data", "RMSE across fractions of the logged data")
    _world_flags(p)
    _output_flags(p)
    p.add_argument("--logging")
    p.add_argument("--targets", type=_strs)
    p.add_argument("--fractions", type=_floats)
    p.add_argument("--estimators", type=_strs)
    p.add_argument("--n", type=int, help="impressions in the full dataset")
    p.add_argument("--repeats", type=int)
    p.add_argument("--slate-size", dest="slate_size", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    config = {"command": args.command, "seed": 0, **DEFAULTS[args.command]}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        config.update({k.replace("-", "_"): v for k, v in loaded.items()})
    config.update({k: v for k, v in vars(args).items() if v is not None and k != "config"})
    config["version"] = __version__
    return config


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(obj):
    if hasattr(obj, "item"):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _write_json(path: Path, obj) -> None:
    path.write_text(_dump(obj))


def _world(config: dict) -> SimWorld:
    if config.get("world"):
        return SimWorld.load(config["world"])
    if config["cascade"] == "hard":
        cascade = CascadeRewardModel.hard(config["recovery"])
    else:
        cascade = CascadeRewardModel.probabilistic(config["rho"], config["recovery"])
    return generate_world(config["contexts"], config["candidates"], cascade, derive_seed(config["seed"], "world"))


def _require(config: dict, *keys):
    missing = [k for k in keys if not config.get(k)]
    if missing:
        raise CliError(f"{config['command']}: missing required setting(s): {', '.join('--' + k for k in missing)}")


def _out_dir(config: dict) -> Path:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", config)
    return out


def _emit(config: dict, payload: dict) -> None:
    """Write a single-report command's result to ``--out`` or stdout."""
    if config.get("out"):
        out = Path(config["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out, payload)
        _write_json(out.with_name(out.stem + ".config.json"), config)
    else:
        sys.stdout.write(_dump({**payload, "config": config}))


def _csv(frame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format="%.12g")


def cmd_simulate(config: dict) -> None:
    world = _world(config)
    logging = policy_from_config(config["logging"], world.scores)
    data = log_impressions(world, logging, config["slate_size"], config["n"], derive_seed(config["seed"], "logs"))
    out = _out_dir(config)
    world.save(out / "world.json")
    save_jsonl(data, out / "logs.jsonl")


def cmd_estimate(config: dict) -> None:
    _require(config, "logs")
    spec = EstimatorSpec.parse(config["estimator"])
    if spec.kind == "rips":
        spec = EstimatorSpec("rips", threshold=float(config["threshold"]))
    data = load_jsonl(config["logs"])
    scores = None
    if config.get("scores"):
        scores = json.loads(Path(config["scores"]).read_text())
    elif config.get("world"):
        scores = SimWorld.load(config["world"]).scores
    target = None
    if spec.kind != "online":
        _require(config, "target")
        target = policy_from_config(config["target"], scores)
    logging = policy_from_config(config["logging"], scores) if config.get("logging") else None
    if spec.kind == "pi_mc" and logging is None:
        raise CliError("pi_mc needs --logging")
    try:
        report = run_estimator(spec, data, target, logging=logging, seed=derive_seed(config["seed"], "estimate"))
    except OverlapError as exc:
        raise CliError(f"estimator {spec.name}: {exc}", EXIT_OVERLAP) from None
    _emit(config, report.to_dict())


def cmd_truth(config: dict) -> None:
    _require(config, "world", "target")
    world = SimWorld.load(config["world"])
    target = policy_from_config(config["target"], world.scores)
    seed = derive_seed(config["seed"], "truth")
    if config.get("mc_samples"):
        from .simulator import true_value

        result = true_value(world, target, config["slate_size"], mc_samples=config["mc_samples"], seed=seed)
    else:
        result = oracle_truth(world, target, config["slate_size"], seed)
    _emit(config, {"target": parse_policy_spec(config["target"]), "slate_size": config["slate_size"],
                   **result.to_json()})


def cmd_grid(config: dict) -> None:
    world = _world(config)
    kwargs = dict(estimators=config["estimators"], n=config["n"], repeats=config["repeats"], seed=config["seed"],
                  slate_size=config["slate_size"])
    if config.get("logging_policies") or config.get("target_policies"):
        standard = ExperimentGrid.standard_grid(**kwargs)
        grid = ExperimentGrid(config.get("logging_policies") or standard.logging_policies,
                              config.get("target_policies") or standard.target_policies, **kwargs)
    else:
        grid = ExperimentGrid.standard_grid(**kwargs)
    result = run_grid(world, grid, jobs=config["jobs"])
    out = _out_dir(config)
    _csv(result.rows, out / "grid_rows.csv")
    _csv(result.cells, out / "grid_cells.csv")
    _write_json(out / "summary.json", {
        "grid": grid.to_json(),
        "truths": {k: v.to_json() for k, v in result.truths.items()},
        "cells": _records(result.cells),
        "rmse": _records(result.rmse),
    })
    if config["plot_data"]:
        _csv(result.plot_data(), out / "plot_grid.csv")


def _records(frame) -> list[dict]:
    return json.loads(frame.to_json(orient="records", double_precision=15))


def _write_sweep(config: dict, result, stem: str, figure: str) -> None:
    out = _out_dir(config)
    _csv(result.rows, out / f"{stem}_rows.csv")
    _csv(result.summary, out / f"{stem}_summary.csv")
    _write_json(out / "summary.json", {"parameter": result.parameter, "summary": _records(result.summary)})
    if config["plot_data"]:
        _csv(result.plot_data(), out / f"{figure}.csv")


def cmd_sweep_threshold(config: dict) -> None:
    result = sweep_threshold(_world(config), config["logging"], config["target"], config["thresholds"],
                             n=config["n"], repeats=config["repeats"], seed=config["seed"],
                             slate_size=config["slate_size"], jobs=config["jobs"])
    _write_sweep(config, result, "threshold", "plot_threshold")


def cmd_sweep_slate(config: dict) -> None:
    result = sweep_slate_size(_world(config), config["logging"], config["target"], config["slate_sizes"],
                              n=config["n"], repeats=config["repeats"], seed=config["seed"],
                              estimators=config["estimators"], jobs=config["jobs"])
    _write_sweep(config, result, "slate", "plot_slate_size")


def cmd_sweep_data(config: dict) -> None:
    result = sweep_data_size(_world(config), config["logging"], config["targets"], config["fractions"],
                             n=config["n"], repeats=config["repeats"], seed=config["seed"],
                             slate_size=config["slate_size"], estimators=config["estimators"], jobs=config["jobs"])
    _write_sweep(config, result, "data", "plot_data_size")


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "truth": cmd_truth,
    "grid": cmd_grid,
    "sweep-threshold": cmd_sweep_threshold,
    "sweep-slate": cmd_sweep_slate,
    "sweep-data": cmd_sweep_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        COMMANDS[args.command](config)
    except CliError as exc:
        print(f"slate-ope: error: {exc}", file=sys.stderr)
        return exc.code
    except DataValidationError as exc:
        print(f"slate-ope: invalid data: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UnknownPolicyError, UnknownEstimatorError, PIPreconditionError) as exc:
        print(f"slate-ope: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OverlapError as exc:
        print(f"slate-ope: overlap failure: {exc}", file=sys.stderr)
        return EXIT_OVERLAP
    except (ValueError, KeyError, OSError) as exc:
        print(f"slate-ope: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
