"""Off-policy value estimators for sequential slates.

Every estimator takes a :class:`~slate_ope.core.Dataset` and a target
:class:`~slate_ope.core.Policy` and returns an :class:`EstimateReport`.
Per-position importance weights ``w[n, k] = h(A_k | X, A_<k) / pi(A_k | X, A_<k)``
condition the target on the logged prefix. Callers that evaluate several
estimators on the same data may pass the precomputed ``weights`` array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, DegenerateWeightsError, OverlapError, Policy, effective_sample_size, importance_weights

DEFAULT_THRESHOLD = 0.01
LOG_SPACE_LOW = 1e-6
LOG_SPACE_HIGH = 1e6


class ZeroMassError(OverlapError):
    """A normaliser vanished: no logged impression supports the target at this position."""

    def __init__(self, position: int, lookback: int | None = None):
        self.position = position
        self.lookback = lookback
        where = f"position {position + 1}"
        if lookback is not None:
            where += f", lookback {lookback}"
        super().__init__(f"zero cumulative weight mass at {where}")


@dataclass(frozen=True)
class RipsConfig:
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")


@dataclass
class EstimateReport:
    """Estimate of ``V(h) = E[sum_k R_k]`` with per-position diagnostics.

    ``ess_trace[k]`` lists ``(lookback, ess, accepted)`` for each weighting
    considered at position ``k``; ``chosen_lookbacks[k]`` counts the earlier
    positions folded into that position's weight. ``std_error`` is the plug-in
    standard error of the per-impression contributions and ignores the
    randomness of any normaliser. ``weights`` holds the final (N, K)
    reweighting factors, scaled to mean one where the estimator normalises.
    """

    estimator: str
    value: float
    per_position_value: list[float]
    ess_trace: list[list[tuple[int, float, bool]]]
    chosen_lookbacks: list[int]
    n_used: int
    std_error: float = float("nan")
    threshold: float | None = None
    weights: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        def clean(x):
            return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x

        out = {
            "estimator": self.estimator,
            "value": clean(self.value),
            "per_position_value": [clean(v) for v in self.per_position_value],
            "std_error": clean(self.std_error),
            "n_used": self.n_used,
            "chosen_lookbacks": list(self.chosen_lookbacks),
            "ess_trace": [
                [{"lookback": b, "ess": clean(e), "accepted": a} for b, e, a in trace] for trace in self.ess_trace
            ],
        }
        if self.threshold is not None:
            out["threshold"] = self.threshold
        return out

    @property
    def mean_lookback(self) -> float:
        return float(np.mean(self.chosen_lookbacks))


def _resolve(dataset: Dataset, target: Policy | None, weights: np.ndarray | None) -> np.ndarray:
    if weights is None:
        if target is None:
            raise ValueError("either target or weights is required")
        weights = importance_weights(dataset, target)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != dataset.rewards.shape:
        raise ValueError(f"weights shape {weights.shape} does not match rewards {dataset.rewards.shape}")
    return weights


def _ess_or_zero(w: np.ndarray) -> float:
    try:
        return effective_sample_size(w)
    except DegenerateWeightsError:
        return 0.0


def _report(name: str, gamma: np.ndarray, rewards: np.ndarray, ess_trace, lookbacks, **extra) -> EstimateReport:
    """Value ``(1/N) sum_n sum_k gamma[n, k] R[n, k]`` with diagnostics."""
    n = rewards.shape[0]
    contrib = gamma * rewards
    per_position = contrib.sum(axis=0) / n
    per_impression = contrib.sum(axis=1)
    se = float(per_impression.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return EstimateReport(
        estimator=name,
        value=float(per_position.sum()),
        per_position_value=per_position.tolist(),
        ess_trace=ess_trace,
        chosen_lookbacks=list(lookbacks),
        n_used=n,
        std_error=se,
        weights=gamma,
        **extra,
    )


def _normalise(column: np.ndarray) -> np.ndarray | None:
    """Scale nonnegative ``column`` to mean one; ``None`` when it sums to zero."""
    total = column.sum()
    if not total > 0:
        return None
    return column.shape[0] * column / total


def cumulative_weights(weights: np.ndarray) -> np.ndarray:
    """Prefix products ``prod_{j<=k} w[:, j]`` normalised to mean one per position.

    Columns with no mass are returned as zeros. Products are accumulated in
    log space when any nonzero weight falls outside ``[1e-6, 1e6]``.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    nonzero = w[w > 0]
    if nonzero.size and (nonzero.min() < LOG_SPACE_LOW or nonzero.max() > LOG_SPACE_HIGH):
        with np.errstate(divide="ignore"):
            logc = np.cumsum(np.log(w), axis=1)
        top = logc.max(axis=0)
        safe_top = np.where(np.isfinite(top), top, 0.0)
        scaled = np.exp(logc - safe_top)
    else:
        scaled = np.cumprod(w, axis=1)
    totals = scaled.sum(axis=0)
    out = np.zeros_like(scaled)
    ok = totals > 0
    out[:, ok] = n * scaled[:, ok] / totals[ok]
    return out


def recursive_weights(weights: np.ndarray) -> np.ndarray:
    """Iterative normalisation ``g_k = N g_{k-1} w_k / sum(g_{k-1} w_k)``, ``g_0 = 1``.

    Raises :class:`ZeroMassError` at the first position without mass.
    """
    w = np.asarray(weights, dtype=np.float64)
    gamma = np.empty_like(w)
    prev = np.ones(w.shape[0])
    for k in range(w.shape[1]):
        prev = _normalise(prev * w[:, k])
        if prev is None:
            raise ZeroMassError(k)
        gamma[:, k] = prev
    return gamma


def on_policy_mean(dataset: Dataset) -> EstimateReport:
    """Empirical mean slate reward of the logged data."""
    n, k = dataset.rewards.shape
    trace = [[(0, float(n), True)] for _ in range(k)]
    return _report("online", np.ones((n, k)), dataset.rewards, trace, [0] * k)


def ips(dataset: Dataset, target: Policy | None = None, weights=None) -> EstimateReport:
    """Whole-slate importance sampling: ``(1/N) sum_n prod_k w_k * sum_k R_k``."""
    w = _resolve(dataset, target, weights)
    full = np.prod(w, axis=1)
    k = w.shape[1]
    ess = _ess_or_zero(full)
    trace = [[(j, ess, True)] for j in range(k)]
    return _report("ips", np.repeat(full[:, None], k, axis=1), dataset.rewards, trace, range(k))


def nis(dataset: Dataset, target: Policy | None = None, weights=None) -> EstimateReport:
    """Self-normalised whole-slate importance sampling."""
    w = _resolve(dataset, target, weights)
    k = w.shape[1]
    with np.errstate(divide="ignore"):
        log_full = np.log(w).sum(axis=1)
    if not np.isfinite(log_full).any():
        raise OverlapError("no overlap: the target never matches a logged slate")
    factor = _normalise(np.exp(log_full - log_full.max()))
    ess = effective_sample_size(factor)
    trace = [[(j, ess, True)] for j in range(k)]
    return _report("nis", np.repeat(factor[:, None], k, axis=1), dataset.rewards, trace, range(k))


def iips(dataset: Dataset, target: Policy | None = None, weights=None) -> EstimateReport:
    """Independent IPS: each reward is reweighted by its own position's ratio only."""
    w = _resolve(dataset, target, weights)
    trace = [[(0, _ess_or_zero(w[:, j]), True)] for j in range(w.shape[1])]
    return _report("iips", w, dataset.rewards, trace, [0] * w.shape[1])


def iips_normalized(dataset: Dataset, target: Policy | None = None, weights=None) -> EstimateReport:
    """Independent IPS with each position's weights scaled to mean one."""
    w = _resolve(dataset, target, weights)
    gamma = np.empty_like(w)
    for j in range(w.shape[1]):
        col = _normalise(w[:, j])
        if col is None:
            raise ZeroMassError(j, 0)
        gamma[:, j] = col
    trace = [[(0, effective_sample_size(gamma[:, j]), True)] for j in range(w.shape[1])]
    return _report("iips_sn", gamma, dataset.rewards, trace, [0] * w.shape[1])


def rips_closed_form(dataset: Dataset, target: Policy | None = None, weights=None,
                     check: bool = False) -> EstimateReport:
    """RIPS without lookback capping.

    The reward at position ``k`` is weighted by the prefix product of weights
    up to ``k``, normalised over impressions. With ``check=True`` the result
    is also computed by the step-by-step recursion and the two compared.
    """
    w = _resolve(dataset, target, weights)
    gamma = cumulative_weights(w)
    totals = gamma.sum(axis=0)
    empty = np.flatnonzero(totals == 0)
    if empty.size:
        raise ZeroMassError(int(empty[0]))
    if check:
        recursed = recursive_weights(w)
        if not np.allclose(recursed, gamma, rtol=1e-9, atol=1e-12):
            raise AssertionError("closed-form and recursive RIPS weights disagree")
    trace = [[(j, effective_sample_size(gamma[:, j]), True)] for j in range(w.shape[1])]
    return _report("rips_closed", gamma, dataset.rewards, trace, range(w.shape[1]))


def rips(dataset: Dataset, target: Policy | None = None, config: RipsConfig | float | None = None,
         weights=None) -> EstimateReport:
    """RIPS with effective-sample-size gated lookback.

    At each position the weight starts from the position's own normalised
    ratio (always accepted) and folds in earlier positions one at a time.
    An extension is kept only while its ESS stays above ``N * threshold`` and
    strictly below the ESS of the weights it replaces; the first failure
    stops the lookback.
    """
    if config is None:
        config = RipsConfig()
    elif not isinstance(config, RipsConfig):
        config = RipsConfig(float(config))
    t = config.threshold
    w = _resolve(dataset, target, weights)
    n, k_max = w.shape
    gamma = np.empty_like(w)
    traces, lookbacks = [], []
    for k in range(k_max):
        g = _normalise(w[:, k])
        if g is None:
            raise ZeroMassError(k, 0)
        ess_g = effective_sample_size(g)
        trace = [(0, ess_g, True)]
        b = 1
        while b <= k:
            u = _normalise(g * w[:, k - b])
            if u is None:
                trace.append((b, 0.0, False))
                break
            ess_u = effective_sample_size(u)
            accepted = ess_u > n * t and ess_u < ess_g
            trace.append((b, ess_u, accepted))
            if not accepted:
                break
            g, ess_g = u, ess_u
            b += 1
        gamma[:, k] = g
        traces.append(trace)
        lookbacks.append(b - 1)
    return _report("rips", gamma, dataset.rewards, traces, lookbacks, threshold=t)


ESTIMATOR_NAMES = ("online", "ips", "nis", "iips", "iips_sn", "pi", "pi_mc", "rips_closed", "rips")


class UnknownEstimatorError(ValueError):
    pass
