"""Synthetic worlds with cascading rewards and exact ground-truth policy values."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Context, Dataset, Policy

DEFAULT_RHO = 0.7
ENUMERATION_MAX_CANDIDATES = 6


@dataclass(frozen=True)
class CascadeRewardModel:
    """Markov reward interaction between consecutive positions.

    After a zero reward the next position is depressed: its success
    probability is scaled by ``1 - rho``. ``mode="hard"`` is ``rho = 1``.
    With ``recovery="one_step"`` only a zero drawn at an undepressed
    position depresses the next one, so a forced zero does not chain.
    """

    mode: str = "hard"
    rho: float = 1.0
    recovery: str = "chain"

    def __post_init__(self):
        if self.mode not in ("hard", "probabilistic"):
            raise ValueError(f"unknown cascade mode {self.mode!r}")
        if self.mode == "hard":
            object.__setattr__(self, "rho", 1.0)
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.recovery not in ("chain", "one_step"):
            raise ValueError(f"unknown cascade recovery {self.recovery!r}")

    @classmethod
    def hard(cls, recovery: str = "chain") -> "CascadeRewardModel":
        return cls("hard", 1.0, recovery)

    @classmethod
    def probabilistic(cls, rho: float = DEFAULT_RHO, recovery: str = "chain") -> "CascadeRewardModel":
        return cls("probabilistic", rho, recovery)

    def to_json(self) -> dict:
        return {"mode": self.mode, "rho": self.rho, "recovery": self.recovery}

    @classmethod
    def from_json(cls, obj) -> "CascadeRewardModel":
        if isinstance(obj, str):
            return cls.hard() if obj == "hard" else cls.probabilistic()
        return cls(obj.get("mode", "hard"), float(obj.get("rho", 1.0)), obj.get("recovery", "chain"))

    def sample(self, p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Binary rewards for success probabilities ``p`` of shape (N, K)."""
        p = np.atleast_2d(p)
        u = rng.random(p.shape)
        rewards = np.zeros(p.shape)
        depressed = np.zeros(p.shape[0], dtype=bool)
        for k in range(p.shape[1]):
            prob = np.where(depressed, p[:, k] * (1.0 - self.rho), p[:, k])
            hit = u[:, k] < prob
            rewards[:, k] = hit
            if self.recovery == "chain":
                depressed = ~hit
            else:
                depressed = ~hit & ~depressed
        return rewards

    def expected_rewards(self, p: np.ndarray) -> np.ndarray:
        """Per-position ``E[R_k]`` by forward recursion, same shape as ``p``."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        q = np.empty(p.shape)
        depressed = np.zeros(p.shape[0])
        for k in range(p.shape[1]):
            q[:, k] = p[:, k] * (1.0 - depressed + depressed * (1.0 - self.rho))
            if self.recovery == "chain":
                depressed = 1.0 - q[:, k]
            else:
                depressed = (1.0 - depressed) * (1.0 - p[:, k])
        return q


@dataclass(frozen=True)
class SimWorld:
    """Contexts with per-candidate stream probabilities and a cascade model."""

    contexts: tuple[Context, ...]
    true_rewards: np.ndarray
    cascade: CascadeRewardModel
    seed: int | None = None

    def __post_init__(self):
        tr = np.asarray(self.true_rewards, dtype=np.float64)
        if tr.shape != (len(self.contexts), self.n_candidates):
            raise ValueError("true_rewards must have shape (n_contexts, M)")
        if np.any(tr < 0) or np.any(tr > 1):
            raise ValueError("true reward probabilities must lie in [0, 1]")
        tr.setflags(write=False)
        object.__setattr__(self, "true_rewards", tr)

    @property
    def n_candidates(self) -> int:
        return self.contexts[0].n_candidates

    @property
    def scores(self) -> dict[str, dict[str, float]]:
        """True reward table as a score source for sorted/softmax policies."""
        return {
            ctx.context_id: dict(zip(ctx.candidates, row.tolist()))
            for ctx, row in zip(self.contexts, self.true_rewards)
        }

    def context_position(self, context: Context | str) -> int:
        cid = context if isinstance(context, str) else context.context_id
        for i, ctx in enumerate(self.contexts):
            if ctx.context_id == cid:
                return i
        raise KeyError(f"unknown context {cid!r}")

    def to_json(self) -> dict:
        return {
            "contexts": [
                {"id": ctx.context_id, "true_rewards": dict(zip(ctx.candidates, row.tolist()))}
                for ctx, row in zip(self.contexts, self.true_rewards)
            ],
            "cascade": self.cascade.to_json(),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj) -> "SimWorld":
        contexts, rows = [], []
        for entry in obj["contexts"]:
            table = entry["true_rewards"]
            contexts.append(Context(str(entry["id"]), tuple(table)))
            rows.append([float(v) for v in table.values()])
        if len({len(r) for r in rows}) != 1:
            raise ValueError("all contexts in a world must have the same number of candidates")
        return cls(tuple(contexts), np.array(rows), CascadeRewardModel.from_json(obj.get("cascade", "hard")),
                   obj.get("seed"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SimWorld":
        return cls.from_json(json.loads(Path(path).read_text()))


def generate_world(n_contexts: int = 50, n_candidates: int = 10,
                   cascade: CascadeRewardModel | None = None, seed: int = 0) -> SimWorld:
    """Draw i.i.d. Uniform(0, 1) stream probabilities for every (context, candidate)."""
    if n_contexts < 1:
        raise ValueError("n_contexts must be at least 1")
    if n_candidates < 1:
        raise ValueError("n_candidates must be at least 1")
    rng = np.random.default_rng(seed)
    true_rewards = rng.random((n_contexts, n_candidates))
    contexts = tuple(
        Context(f"ctx{i}", tuple(f"item{j}" for j in range(n_candidates))) for i in range(n_contexts)
    )
    return SimWorld(contexts, true_rewards, cascade or CascadeRewardModel.hard(), seed)


def sample_rewards(world: SimWorld, context: Context | str, actions: Sequence[str],
                   rng: np.random.Generator) -> list[float]:
    """Rewards for one slate shown in ``context``."""
    c = world.context_position(context)
    ctx = world.contexts[c]
    p = world.true_rewards[c, [ctx.index(a) for a in actions]]
    return world.cascade.sample(p[None, :], rng)[0].tolist()


def log_impressions(world: SimWorld, logging_policy: Policy, slate_size: int, n: int, seed) -> Dataset:
    """Run ``logging_policy`` for ``n`` impressions with uniformly drawn contexts."""
    if n < 1:
        raise ValueError("Dataset must be nonempty: n must be at least 1")
    if slate_size > world.n_candidates:
        raise ValueError(f"slate size {slate_size} exceeds {world.n_candidates} candidates")
    rng = np.random.default_rng(seed)
    context_index = rng.integers(len(world.contexts), size=n)
    actions, props = logging_policy.sample_batch(world.contexts, context_index, slate_size, rng)
    p = np.take_along_axis(world.true_rewards[context_index], actions, axis=1)
    rewards = world.cascade.sample(p, rng)
    return Dataset(world.contexts, context_index, actions, props, rewards)


@dataclass(frozen=True)
class TruthResult:
    value: float
    method: str
    stderr: float = 0.0

    def to_json(self) -> dict:
        return {"value": self.value, "method": self.method, "stderr": self.stderr}


def _slate_values(world: SimWorld, context_index: np.ndarray, actions: np.ndarray) -> np.ndarray:
    p = np.take_along_axis(world.true_rewards[context_index], actions, axis=1)
    return world.cascade.expected_rewards(p).sum(axis=1)


def true_value(world: SimWorld, target: Policy, slate_size: int, mc_samples: int | None = None,
               seed: int = 0) -> TruthResult:
    """Expected total slate reward of ``target``, averaged uniformly over contexts.

    Deterministic targets and small stochastic worlds are evaluated exactly;
    otherwise ``mc_samples`` slates (split evenly over contexts) are drawn and
    each is scored by the exact forward recursion.
    """
    if slate_size > world.n_candidates:
        raise ValueError(f"slate size {slate_size} exceeds {world.n_candidates} candidates")
    n_ctx = len(world.contexts)
    if target.deterministic:
        idx = np.arange(n_ctx)
        actions, _ = target.sample_batch(world.contexts, idx, slate_size, np.random.default_rng(0))
        return TruthResult(float(_slate_values(world, idx, actions).mean()), "exact")
    if mc_samples is None:
        if world.n_candidates > ENUMERATION_MAX_CANDIDATES:
            raise ValueError(
                f"stochastic target with M={world.n_candidates} > {ENUMERATION_MAX_CANDIDATES} needs mc_samples"
            )
        return TruthResult(float(_enumerate_value(world, target, slate_size)), "exact")
    per_context = max(1, math.ceil(mc_samples / n_ctx))
    rng = np.random.default_rng(seed)
    idx = np.repeat(np.arange(n_ctx), per_context)
    actions, _ = target.sample_batch(world.contexts, idx, slate_size, rng)
    values = _slate_values(world, idx, actions).reshape(n_ctx, per_context)
    # Stratified over contexts: the estimate is the mean of per-context means.
    ctx_means = values.mean(axis=1)
    if per_context > 1:
        var = values.var(axis=1, ddof=1).sum() / (per_context * n_ctx**2)
    else:
        var = float("nan")
    return TruthResult(float(ctx_means.mean()), "mc", float(np.sqrt(var)))


def _enumerate_value(world: SimWorld, target: Policy, slate_size: int) -> float:
    total = 0.0
    for c, ctx in enumerate(world.contexts):
        value = 0.0
        for slate in itertools.permutations(range(ctx.n_candidates), slate_size):
            names = [ctx.candidates[a] for a in slate]
            prob = 1.0
            for k, name in enumerate(names):
                prob *= target.propensity(ctx, names[:k], k, name)
                if prob == 0.0:
                    break
            if prob > 0.0:
                value += prob * _slate_values(world, np.array([c]), np.array([slate]))[0]
        total += value
    return total / len(world.contexts)
