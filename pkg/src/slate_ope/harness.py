"""Repeated simulation experiments scored against oracle policy values.

Each experiment draws fresh logs per repeat from seeds derived from one base
seed, runs the requested estimators and compares them with the exact (or
Monte-Carlo) value of the target. Results are pandas frames: ``rows`` has one
line per repeat and estimator, ``summary`` aggregates over repeats.
"""
from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .core import Dataset, OverlapError, Policy, importance_weights
from .estimators import (
    DEFAULT_THRESHOLD,
    ESTIMATOR_NAMES,
    EstimateReport,
    UnknownEstimatorError,
    iips,
    iips_normalized,
    ips,
    nis,
    on_policy_mean,
    rips,
    rips_closed_form,
)
from .policies import parse_policy_spec, policy_from_config
from .pseudoinverse import PIPreconditionError, pi_mc, pi_uniform
from .simulator import SimWorld, TruthResult, log_impressions, true_value

Z95 = NormalDist().inv_cdf(0.975)
TRUTH_MC_SAMPLES = 1_000_000
PI_MC_SAMPLES = 100_000


def derive_seed(seed: int, *labels) -> int:
    """Independent, reproducible seed for a labelled random stream."""
    words = [int(seed)] + [zlib.crc32(str(label).encode()) for label in labels]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])


def ci_halfwidth(values) -> float:
    """Normal-approximation 95% half-width of the mean of ``values``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float("nan")
    return float(Z95 * v.std(ddof=1) / math.sqrt(v.size))


def rmse(estimates, truths) -> float:
    e = np.asarray(estimates, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    return float(np.sqrt(np.mean((e - t) ** 2)))


@dataclass(frozen=True)
class EstimatorSpec:
    """Estimator by kind, with a display name and an optional RIPS threshold."""

    kind: str
    name: str = ""
    threshold: float | None = None

    def __post_init__(self):
        if self.kind not in ESTIMATOR_NAMES:
            raise UnknownEstimatorError(f"unknown estimator {self.kind!r}")
        if not self.name:
            label = self.kind if self.threshold is None else f"{self.kind}:{self.threshold:g}"
            object.__setattr__(self, "name", label)

    @classmethod
    def parse(cls, spec) -> "EstimatorSpec":
        """Accept ``"rips"``, ``"rips:0.1"`` or ``{"kind": ..., "threshold": ..., "name": ...}``."""
        if isinstance(spec, EstimatorSpec):
            return spec
        if isinstance(spec, Mapping):
            t = spec.get("threshold")
            return cls(spec["kind"], spec.get("name", ""), None if t is None else float(t))
        kind, _, rest = str(spec).partition(":")
        if rest:
            try:
                return cls(kind, threshold=float(rest))
            except ValueError:
                raise UnknownEstimatorError(f"bad threshold in {spec!r}") from None
        return cls(kind)

    def to_json(self) -> dict:
        out = {"kind": self.kind, "name": self.name}
        if self.threshold is not None:
            out["threshold"] = self.threshold
        return out


def run_estimator(spec: EstimatorSpec, dataset: Dataset, target: Policy, weights: np.ndarray | None = None,
                  logging: Policy | None = None, seed: int = 0) -> EstimateReport:
    kind = spec.kind
    if kind == "online":
        return on_policy_mean(dataset)
    if kind in ("pi", "pi_mc"):
        if kind == "pi":
            return pi_uniform(dataset, target, seed=seed)
        if logging is None:
            raise ValueError("pi_mc needs the logging policy")
        return pi_mc(dataset, target, logging, mc_samples=PI_MC_SAMPLES, seed=seed)
    if weights is None:
        weights = importance_weights(dataset, target)
    if kind == "rips":
        t = DEFAULT_THRESHOLD if spec.threshold is None else spec.threshold
        return rips(dataset, config=t, weights=weights)
    func = {"ips": ips, "nis": nis, "iips": iips, "iips_sn": iips_normalized, "rips_closed": rips_closed_form}[kind]
    return func(dataset, weights=weights)


def _final_ess(report: EstimateReport) -> list[float]:
    out = []
    for trace in report.ess_trace:
        accepted = [e for _, e, a in trace if a]
        out.append(accepted[-1] if accepted else float("nan"))
    return out


def _row(spec: EstimatorSpec, report: EstimateReport | None, error: str = "") -> dict:
    if report is None:
        return {"estimator": spec.name, "estimate": float("nan"), "error": error, "mean_lookback": float("nan"),
                "lookbacks": "", "final_ess": ""}
    return {
        "estimator": spec.name,
        "estimate": report.value,
        "error": "",
        "mean_lookback": report.mean_lookback,
        "lookbacks": "|".join(str(b) for b in report.chosen_lookbacks),
        "final_ess": "|".join(f"{e:.6g}" for e in _final_ess(report)),
    }


def evaluate(dataset: Dataset, target: Policy, estimators: Sequence[EstimatorSpec],
             logging: Policy | None = None, seed: int = 0) -> list[dict]:
    """One row per estimator; overlap failures are recorded, not raised."""
    weights = importance_weights(dataset, target)
    rows = []
    for spec in estimators:
        try:
            report = run_estimator(spec, dataset, target, weights, logging, seed)
        except (OverlapError, PIPreconditionError) as exc:
            rows.append(_row(spec, None, f"{type(exc).__name__}: {exc}"))
        else:
            rows.append(_row(spec, report))
    return rows


def oracle_truth(world: SimWorld, target: Policy, slate_size: int, seed: int = 0) -> TruthResult:
    if target.deterministic or world.n_candidates <= 6:
        return true_value(world, target, slate_size)
    return true_value(world, target, slate_size, mc_samples=TRUTH_MC_SAMPLES, seed=seed)


def _aggregate(rows: pd.DataFrame, keys: list[str]) -> pd.DataFrame:
    def summarise(group: pd.DataFrame) -> pd.Series:
        ok = group["estimate"].dropna()
        mean = float(ok.mean()) if len(ok) else float("nan")
        truth = float(group["truth"].iloc[0])
        return pd.Series({
            "mean": mean,
            "ci_halfwidth": ci_halfwidth(ok),
            "truth": truth,
            "abs_error": abs(mean - truth),
            "mean_lookback": float(group["mean_lookback"].mean()),
            "n_ok": len(ok),
            "n_failed": int(len(group) - len(ok)),
        })

    out = rows.groupby(keys, sort=False).apply(summarise, include_groups=False).reset_index()
    out["n_ok"] = out["n_ok"].astype(int)
    out["n_failed"] = out["n_failed"].astype(int)
    return out


def _map(func, tasks, jobs: int):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(func, tasks))
    return [func(task) for task in tasks]


@dataclass
class ExperimentGrid:
    """Cross of logging and target policies, each cell repeated on fresh logs."""

    logging_policies: dict
    target_policies: dict
    estimators: list
    n: int = 10_000
    repeats: int = 20
    seed: int = 0
    slate_size: int = 10

    def __post_init__(self):
        if self.repeats < 2:
            raise ValueError("repeats must be at least 2 for confidence intervals")
        if self.n < 1:
            raise ValueError("n must be positive")
        self.estimators = [EstimatorSpec.parse(e) for e in self.estimators]
        self.logging_policies = {k: parse_policy_spec(v) for k, v in dict(self.logging_policies).items()}
        self.target_policies = {k: parse_policy_spec(v) for k, v in dict(self.target_policies).items()}

    @classmethod
    def standard_grid(cls, **kwargs) -> "ExperimentGrid":
        """Optimal, anti-optimal and uniform policies as both logging and target."""
        policies = {"optimal": "sorted:desc", "anti-optimal": "sorted:asc", "uniform": "uniform"}
        kwargs.setdefault("estimators", ["online", "ips", "nis", "iips", "rips"])
        return cls(dict(policies), dict(policies), **kwargs)

    def to_json(self) -> dict:
        return {
            "logging_policies": self.logging_policies,
            "target_policies": self.target_policies,
            "estimators": [e.to_json() for e in self.estimators],
            "n": self.n,
            "repeats": self.repeats,
            "seed": self.seed,
            "slate_size": self.slate_size,
        }


@dataclass
class GridResult:
    rows: pd.DataFrame
    cells: pd.DataFrame
    rmse: pd.DataFrame
    truths: dict = field(default_factory=dict)

    def cell(self, logging: str, target: str, estimator: str) -> pd.Series:
        c = self.cells
        hit = c[(c["logging"] == logging) & (c["target"] == target) & (c["estimator"] == estimator)]
        if hit.empty:
            raise KeyError((logging, target, estimator))
        return hit.iloc[0]

    def plot_data(self) -> pd.DataFrame:
        out = self.cells[["logging", "target", "estimator", "mean", "ci_halfwidth", "truth"]].copy()
        out["ci_low"] = out["mean"] - out["ci_halfwidth"]
        out["ci_high"] = out["mean"] + out["ci_halfwidth"]
        return out


def _grid_task(args):
    world, grid, log_name, repeat = args
    log_policy = policy_from_config(grid.logging_policies[log_name], world.scores)
    data = log_impressions(world, log_policy, grid.slate_size, grid.n,
                           derive_seed(grid.seed, "logs", log_name, repeat))
    rows = []
    for tgt_name, tgt_cfg in grid.target_policies.items():
        target = policy_from_config(tgt_cfg, world.scores)
        for row in evaluate(data, target, grid.estimators, log_policy, derive_seed(grid.seed, "pi", repeat)):
            rows.append({"logging": log_name, "target": tgt_name, "repeat": repeat, "n": grid.n, **row})
    return rows


def run_grid(world: SimWorld, grid: ExperimentGrid, jobs: int = 1) -> GridResult:
    """Every estimator on every (logging, target) cell, ``grid.repeats`` times.

    Logs are drawn once per (logging policy, repeat) and shared by the targets
    of that row.
    """
    truths = {
        name: oracle_truth(world, policy_from_config(cfg, world.scores), grid.slate_size,
                           derive_seed(grid.seed, "truth", name))
        for name, cfg in grid.target_policies.items()
    }
    tasks = [(world, grid, name, r) for name in grid.logging_policies for r in range(grid.repeats)]
    rows = pd.DataFrame([row for chunk in _map(_grid_task, tasks, jobs) for row in chunk])
    rows["truth"] = rows["target"].map({k: v.value for k, v in truths.items()})
    rows = rows.sort_values(["logging", "target", "estimator", "repeat"], kind="stable").reset_index(drop=True)
    cells = _aggregate(rows, ["logging", "target", "estimator"])
    sq = cells.assign(sq=(cells["mean"] - cells["truth"]) ** 2)
    table = sq.groupby(["logging", "estimator"], sort=False)["sq"].mean().reset_index()
    table["rmse"] = np.sqrt(table.pop("sq"))
    return GridResult(rows, cells, table, truths)


@dataclass
class SweepResult:
    rows: pd.DataFrame
    summary: pd.DataFrame
    parameter: str

    def plot_data(self) -> pd.DataFrame:
        return self.summary.copy()


def _sweep_threshold_task(args):
    world, logging_cfg, target_cfg, t_values, n, slate_size, seed, repeat = args
    log_policy = policy_from_config(logging_cfg, world.scores)
    target = policy_from_config(target_cfg, world.scores)
    data = log_impressions(world, log_policy, slate_size, n, derive_seed(seed, "logs", repeat))
    weights = importance_weights(data, target)
    try:
        sn_value = iips_normalized(data, weights=weights).value
    except OverlapError:
        sn_value = float("nan")
    rows = []
    for t in t_values:
        row = {"threshold": t, "repeat": repeat, "n": n, "iips_sn": sn_value}
        try:
            report = rips(data, config=t, weights=weights)
        except OverlapError as exc:
            row.update(_row(EstimatorSpec("rips", threshold=t), None, str(exc)))
        else:
            row.update(_row(EstimatorSpec("rips", threshold=t), report))
        rows.append(row)
    return rows


def sweep_threshold(world: SimWorld, logging, target, t_values: Sequence[float], n: int = 10_000,
                    repeats: int = 20, seed: int = 0, slate_size: int = 10, jobs: int = 1) -> SweepResult:
    """RIPS across lookback thresholds on shared logs per repeat."""
    t_values = [float(t) for t in t_values]
    if any(not 0.0 <= t <= 1.0 for t in t_values):
        raise ValueError("thresholds must lie in [0, 1]")
    logging, target = parse_policy_spec(logging), parse_policy_spec(target)
    truth = oracle_truth(world, policy_from_config(target, world.scores), slate_size, derive_seed(seed, "truth"))
    tasks = [(world, logging, target, t_values, n, slate_size, seed, r) for r in range(repeats)]
    rows = pd.DataFrame([row for chunk in _map(_sweep_threshold_task, tasks, jobs) for row in chunk])
    rows["truth"] = truth.value
    rows = rows.sort_values(["threshold", "repeat"], ascending=[False, True], kind="stable").reset_index(drop=True)
    summary = _aggregate(rows, ["threshold"])
    return SweepResult(rows, summary, "threshold")


def _sweep_slate_task(args):
    world, logging_cfg, target_cfg, k, n, estimators, seed, repeat = args
    log_policy = policy_from_config(logging_cfg, world.scores)
    target = policy_from_config(target_cfg, world.scores)
    data = log_impressions(world, log_policy, k, n, derive_seed(seed, "logs", k, repeat))
    return [{"slate_size": k, "repeat": repeat, "n": n, **row}
            for row in evaluate(data, target, estimators, log_policy, derive_seed(seed, "pi", k, repeat))]


def sweep_slate_size(world: SimWorld, logging, target, k_values: Sequence[int], n: int = 10_000,
                     repeats: int = 20, seed: int = 0, estimators=("ips", "nis", "iips", "iips_sn", "rips"),
                     jobs: int = 1) -> SweepResult:
    """Estimators across slate sizes, each size on its own fresh logs."""
    k_values = [int(k) for k in k_values]
    if max(k_values) > world.n_candidates:
        raise ValueError("slate sizes cannot exceed the number of candidates")
    estimators = [EstimatorSpec.parse(e) for e in estimators]
    logging, target = parse_policy_spec(logging), parse_policy_spec(target)
    target_policy = policy_from_config(target, world.scores)
    truths = {k: oracle_truth(world, target_policy, k, derive_seed(seed, "truth", k)).value for k in k_values}
    tasks = [(world, logging, target, k, n, estimators, seed, r) for k in k_values for r in range(repeats)]
    rows = pd.DataFrame([row for chunk in _map(_sweep_slate_task, tasks, jobs) for row in chunk])
    rows["truth"] = rows["slate_size"].map(truths)
    rows = rows.sort_values(["slate_size", "estimator", "repeat"], kind="stable").reset_index(drop=True)
    summary = _aggregate(rows, ["slate_size", "estimator"])
    return SweepResult(rows, summary, "slate_size")


def _sweep_data_task(args):
    world, logging_cfg, targets, fractions, n, slate_size, estimators, seed, repeat = args
    log_policy = policy_from_config(logging_cfg, world.scores)
    full = log_impressions(world, log_policy, slate_size, n, derive_seed(seed, "logs", repeat))
    rows = []
    for fraction in fractions:
        size = max(1, int(round(fraction * n)))
        data = full.subset(slice(0, size))
        for name, cfg in targets.items():
            target = policy_from_config(cfg, world.scores)
            for row in evaluate(data, target, estimators, log_policy, derive_seed(seed, "pi", repeat)):
                rows.append({"fraction": fraction, "n": size, "repeat": repeat, "target": name, **row})
    return rows


def sweep_data_size(world: SimWorld, logging, targets, fractions: Sequence[float], n: int = 100_000,
                    repeats: int = 5, seed: int = 0, slate_size: int = 10,
                    estimators=("ips", "iips", "rips"), jobs: int = 1) -> SweepResult:
    """RMSE over a set of targets when only a prefix fraction of the logs is used.

    ``summary`` holds, per fraction and estimator, the median, minimum and
    maximum RMSE across repeats.
    """
    fractions = [float(f) for f in fractions]
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    if not isinstance(targets, Mapping):
        targets = {str(t): t for t in ([targets] if isinstance(targets, str) else targets)}
    targets = {k: parse_policy_spec(v) for k, v in targets.items()}
    estimators = [EstimatorSpec.parse(e) for e in estimators]
    logging = parse_policy_spec(logging)
    truths = {
        name: oracle_truth(world, policy_from_config(cfg, world.scores), slate_size,
                           derive_seed(seed, "truth", name)).value
        for name, cfg in targets.items()
    }
    tasks = [(world, logging, targets, fractions, n, slate_size, estimators, seed, r) for r in range(repeats)]
    rows = pd.DataFrame([row for chunk in _map(_sweep_data_task, tasks, jobs) for row in chunk])
    rows["truth"] = rows["target"].map(truths)
    rows = rows.sort_values(["fraction", "estimator", "repeat", "target"], kind="stable").reset_index(drop=True)
    per_repeat = (
        rows.assign(sq=(rows["estimate"] - rows["truth"]) ** 2)
        .groupby(["fraction", "estimator", "repeat"], sort=False)["sq"]
        .agg(lambda s: math.sqrt(s.mean()) if s.notna().all() else float("nan"))
        .rename("rmse")
        .reset_index()
    )
    summary = (
        per_repeat.groupby(["fraction", "estimator"], sort=False)["rmse"]
        .agg(median="median", min="min", max="max", mean="mean")
        .reset_index()
    )
    return SweepResult(rows, summary, "fraction")
