"""Pseudoinverse (PI) estimator for slates with an additive reward model.

A slate of ``K`` positions over ``M`` candidates is encoded as a binary
vector of length ``K * M`` with one active entry per position block. The
estimate is ``(1/N) sum_n q_n' G^+ 1_{A_n} * sum_k R_k`` where ``q_n`` is the
target's slot marginals in the impression's context and ``G`` the logging
policy's second moment of the indicator.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import Context, Dataset, Policy
from .estimators import EstimateReport, _report
from .policies import UniformRandomPolicy

PINV_RCOND = 1e-10
TARGET_MC_SAMPLES = 10_000
ENUMERATION_LIMIT = 5040


class PIPreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class SlateIndicator:
    """Binary slot-by-candidate encoding of a slate."""

    vector: np.ndarray
    slate_size: int
    n_candidates: int

    def __post_init__(self):
        v = np.asarray(self.vector)
        if v.shape != (self.slate_size * self.n_candidates,):
            raise ValueError("indicator length must be slate_size * n_candidates")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("indicator entries must be 0 or 1")
        if not (v.reshape(self.slate_size, self.n_candidates).sum(axis=1) == 1).all():
            raise ValueError("each slot block must contain exactly one 1")

    @classmethod
    def from_actions(cls, actions, n_candidates: int) -> "SlateIndicator":
        actions = list(actions)
        v = np.zeros(len(actions) * n_candidates)
        v[np.arange(len(actions)) * n_candidates + np.asarray(actions)] = 1.0
        return cls(v, len(actions), n_candidates)


def pinv(matrix: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """Moore-Penrose pseudoinverse dropping singular values below ``rcond * s_max``."""
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    keep = s > rcond * s.max() if s.size else s.astype(bool)
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


def uniform_gamma(n_candidates: int, slate_size: int) -> np.ndarray:
    """Second moment of the slate indicator under uniform sampling without replacement."""
    m = n_candidates
    same_slot = np.eye(m) / m
    cross_slot = (np.ones((m, m)) - np.eye(m)) / (m * (m - 1)) if m > 1 else np.zeros((m, m))
    blocks = [[same_slot if i == j else cross_slot for j in range(slate_size)] for i in range(slate_size)]
    return np.block(blocks)


def _is_uniform_full_permutation(dataset: Dataset) -> bool:
    m = dataset.candidate_counts
    k = dataset.slate_size
    if np.any(m != k):
        return False
    expected = 1.0 / (m[:, None] - np.arange(k)[None, :])
    return bool(np.allclose(dataset.logging_propensities, expected, rtol=1e-9, atol=0))


def target_marginals(context: Context, target: Policy, slate_size: int,
                     rng: np.random.Generator | None = None, mc_samples: int = TARGET_MC_SAMPLES) -> np.ndarray:
    """``E_h[1_A | X]`` as a (K * M,) vector.

    Exact for deterministic and uniform targets and for small slate spaces;
    otherwise estimated from ``mc_samples`` draws of the target.
    """
    m = context.n_candidates
    if isinstance(target, UniformRandomPolicy):
        return np.full(slate_size * m, 1.0 / m)
    if target.deterministic:
        actions, _ = target.sample_batch([context], np.zeros(1, dtype=np.int64), slate_size,
                                         np.random.default_rng(0))
        return SlateIndicator.from_actions(actions[0], m).vector
    if math.perm(m, slate_size) <= ENUMERATION_LIMIT:
        q = np.zeros((slate_size, m))
        for slate in itertools.permutations(range(m), slate_size):
            names = [context.candidates[a] for a in slate]
            prob = 1.0
            for k, name in enumerate(names):
                prob *= target.propensity(context, names[:k], k, name)
                if prob == 0.0:
                    break
            if prob > 0.0:
                q[np.arange(slate_size), slate] += prob
        return q.ravel()
    rng = rng if rng is not None else np.random.default_rng(0)
    actions, _ = target.sample_batch([context], np.zeros(mc_samples, dtype=np.int64), slate_size, rng)
    q = np.zeros((slate_size, m))
    for k in range(slate_size):
        q[k] = np.bincount(actions[:, k], minlength=m) / mc_samples
    return q.ravel()


def _pi_report(name: str, dataset: Dataset, projections: list[np.ndarray]) -> EstimateReport:
    """Apply per-context vectors ``G^+ q`` to every logged slate."""
    k = dataset.slate_size
    coef = np.empty(dataset.n)
    for c, v in enumerate(projections):
        rows = np.flatnonzero(dataset.context_index == c)
        if rows.size == 0:
            continue
        m = dataset.contexts[c].n_candidates
        flat = np.arange(k)[None, :] * m + dataset.actions[rows]
        coef[rows] = v[flat].sum(axis=1)
    gamma = np.repeat(coef[:, None], k, axis=1)
    trace = [[(j, float("nan"), True)] for j in range(k)]
    return _report(name, gamma, dataset.rewards, trace, range(k))


def pi_uniform(dataset: Dataset, target: Policy, seed: int = 0) -> EstimateReport:
    """PI estimator for uniformly random logging over full permutations (``K == M``)."""
    if not _is_uniform_full_permutation(dataset):
        raise PIPreconditionError("PI preconditions not met: "
                                  "logging must be uniform over full permutations of the candidates")
    rng = np.random.default_rng(seed)
    k = dataset.slate_size
    gamma_pinv: dict[int, np.ndarray] = {}
    projections = []
    for ctx in dataset.contexts:
        m = ctx.n_candidates
        if m not in gamma_pinv:
            gamma_pinv[m] = pinv(uniform_gamma(m, k))
        projections.append(gamma_pinv[m] @ target_marginals(ctx, target, k, rng))
    return _pi_report("pi", dataset, projections)


def pi_mc(dataset: Dataset, target: Policy, logging: Policy, mc_samples: int = 100_000,
          seed: int = 0) -> EstimateReport:
    """Experimental PI with the logging second moment estimated by simulation.

    Each context's ``G`` is the average outer product of ``mc_samples``
    slates drawn from the known ``logging`` policy.
    """
    rng = np.random.default_rng(seed)
    k = dataset.slate_size
    projections = []
    for ctx in dataset.contexts:
        m = ctx.n_candidates
        actions, _ = logging.sample_batch([ctx], np.zeros(mc_samples, dtype=np.int64), k, rng)
        flat = np.arange(k)[None, :] * m + actions
        x = np.zeros((mc_samples, k * m))
        np.put_along_axis(x, flat, 1.0, axis=1)
        g = x.T @ x / mc_samples
        projections.append(pinv(g) @ target_marginals(ctx, target, k, rng))
    return _pi_report("pi_mc", dataset, projections)
