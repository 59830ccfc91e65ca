"""Logged slate data, the policy interface, and importance-weight primitives."""
from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PROPENSITY_FLOOR = 1e-12


class DataValidationError(ValueError):
    """Raised when logged impressions violate the data model."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class OverlapError(ValueError):
    """The target policy puts no mass where the logged data has support."""


class DegenerateWeightsError(OverlapError):
    """All importance weights are zero."""


@dataclass(frozen=True)
class Context:
    """A context together with the candidate sub-actions available in it."""

    context_id: str
    candidates: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.candidates)) != len(self.candidates):
            raise DataValidationError(f"duplicate candidates in context {self.context_id!r}")

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    def index(self, candidate: str) -> int:
        try:
            return self.candidates.index(candidate)
        except ValueError:
            raise KeyError(f"unknown candidate {candidate!r} in context {self.context_id!r}") from None


@dataclass(frozen=True)
class LoggedImpression:
    """One logged slate: context, ordered actions, per-position propensities and rewards."""

    context_id: str
    candidate_set: tuple[str, ...]
    actions: tuple[str, ...]
    logging_propensities: tuple[float, ...]
    rewards: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "candidate_set", tuple(self.candidate_set))
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "logging_propensities", tuple(float(p) for p in self.logging_propensities))
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        k = len(self.actions)
        if k < 1:
            raise DataValidationError("an impression needs at least one action")
        if len(self.logging_propensities) != k or len(self.rewards) != k:
            raise DataValidationError(
                f"actions, logging_propensities and rewards must have equal length "
                f"(got {k}, {len(self.logging_propensities)}, {len(self.rewards)})"
            )
        for p in self.logging_propensities:
            if not (PROPENSITY_FLOOR <= p <= 1.0):
                raise DataValidationError(f"logging propensity {p!r} outside [{PROPENSITY_FLOOR}, 1]")
        for r in self.rewards:
            if not math.isfinite(r):
                raise DataValidationError(f"non-finite reward {r!r}")
        if len(set(self.actions)) != k:
            raise DataValidationError("actions must be distinct (sampling without replacement)")
        candidates = set(self.candidate_set)
        if len(candidates) != len(self.candidate_set):
            raise DataValidationError("duplicate entries in candidate set")
        missing = [a for a in self.actions if a not in candidates]
        if missing:
            raise DataValidationError(f"actions {missing} not in candidate set")

    @property
    def slate_size(self) -> int:
        return len(self.actions)

    @property
    def context(self) -> Context:
        return Context(self.context_id, self.candidate_set)

    def to_json(self) -> dict:
        return {
            "context_id": self.context_id,
            "candidates": list(self.candidate_set),
            "actions": list(self.actions),
            "logging_propensities": list(self.logging_propensities),
            "rewards": list(self.rewards),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "LoggedImpression":
        required = ("context_id", "candidates", "actions", "logging_propensities", "rewards")
        missing = [key for key in required if key not in obj]
        if missing:
            raise DataValidationError(f"missing fields {missing}")
        return cls(
            context_id=str(obj["context_id"]),
            candidate_set=tuple(str(c) for c in obj["candidates"]),
            actions=tuple(str(a) for a in obj["actions"]),
            logging_propensities=tuple(obj["logging_propensities"]),
            rewards=tuple(obj["rewards"]),
        )


class Dataset:
    """Columnar container of logged impressions sharing one slate size.

    Contexts are stored once in ``contexts``; each impression refers to one
    through ``context_index``. Actions are integer positions into the
    context's candidate tuple. All arrays are read-only.

    Parameters
    ----------
    contexts : sequence of Context
    context_index : int array, shape (N,)
    actions : int array, shape (N, K)
    logging_propensities : float array, shape (N, K)
    rewards : float array, shape (N, K)
    """

    def __init__(self, contexts, context_index, actions, logging_propensities, rewards, validate=True):
        self.contexts: tuple[Context, ...] = tuple(contexts)
        self.context_index = np.asarray(context_index, dtype=np.int64)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.logging_propensities = np.asarray(logging_propensities, dtype=np.float64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        for arr in (self.context_index, self.actions, self.logging_propensities, self.rewards):
            arr.setflags(write=False)
        if validate:
            self._validate()

    def _validate(self):
        if self.actions.ndim != 2 or self.actions.shape[0] == 0:
            raise DataValidationError("dataset must contain at least one impression")
        n, k = self.actions.shape
        if k < 1:
            raise DataValidationError("slate size must be at least 1")
        if self.logging_propensities.shape != (n, k) or self.rewards.shape != (n, k):
            raise DataValidationError("actions, propensities and rewards must share shape (N, K)")
        if self.context_index.shape != (n,):
            raise DataValidationError("context_index must have shape (N,)")
        if self.context_index.min() < 0 or self.context_index.max() >= len(self.contexts):
            raise DataValidationError("context_index out of range")
        sizes = self.candidate_counts
        if np.any(self.actions < 0) or np.any(self.actions >= sizes[:, None]):
            raise DataValidationError("action index outside candidate set")
        if k > 1:
            ordered = np.sort(self.actions, axis=1)
            if np.any(ordered[:, 1:] == ordered[:, :-1]):
                raise DataValidationError("actions must be distinct within a slate")
        p = self.logging_propensities
        if not np.all((p >= PROPENSITY_FLOOR) & (p <= 1.0)):
            raise DataValidationError(f"logging propensities must lie in [{PROPENSITY_FLOOR}, 1]")
        if not np.all(np.isfinite(self.rewards)):
            raise DataValidationError("rewards must be finite")

    @classmethod
    def from_impressions(cls, impressions: Iterable[LoggedImpression]) -> "Dataset":
        impressions = list(impressions)
        if not impressions:
            raise DataValidationError("dataset must contain at least one impression")
        k = impressions[0].slate_size
        lookup: dict[tuple, int] = {}
        contexts: list[Context] = []
        ctx_idx, actions = [], []
        for i, imp in enumerate(impressions):
            if imp.slate_size != k:
                raise DataValidationError(f"impression {i} has slate size {imp.slate_size}, expected {k}")
            key = (imp.context_id, imp.candidate_set)
            if key not in lookup:
                lookup[key] = len(contexts)
                contexts.append(Context(imp.context_id, imp.candidate_set))
            ctx = contexts[lookup[key]]
            ctx_idx.append(lookup[key])
            actions.append([ctx.candidates.index(a) for a in imp.actions])
        return cls(
            contexts,
            ctx_idx,
            actions,
            [imp.logging_propensities for imp in impressions],
            [imp.rewards for imp in impressions],
        )

    @property
    def n(self) -> int:
        return self.actions.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def slate_size(self) -> int:
        return self.actions.shape[1]

    @property
    def candidate_counts(self) -> np.ndarray:
        """Number of candidates available to each impression, shape (N,)."""
        sizes = np.array([c.n_candidates for c in self.contexts], dtype=np.int64)
        return sizes[self.context_index]

    def impression(self, i: int) -> LoggedImpression:
        ctx = self.contexts[self.context_index[i]]
        return LoggedImpression(
            context_id=ctx.context_id,
            candidate_set=ctx.candidates,
            actions=tuple(ctx.candidates[a] for a in self.actions[i]),
            logging_propensities=tuple(self.logging_propensities[i]),
            rewards=tuple(self.rewards[i]),
        )

    @property
    def impressions(self) -> list[LoggedImpression]:
        return [self.impression(i) for i in range(self.n)]

    def subset(self, rows) -> "Dataset":
        """Dataset restricted to ``rows`` (an index array or slice)."""
        return Dataset(
            self.contexts,
            self.context_index[rows],
            self.actions[rows],
            self.logging_propensities[rows],
            self.rewards[rows],
        )


def load_jsonl(path: str | Path) -> Dataset:
    """Read impressions from a JSON-lines file, reporting the offending line on failure."""
    impressions = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if not isinstance(obj, dict):
                raise DataValidationError("expected a JSON object", line=lineno)
            try:
                imp = LoggedImpression.from_json(obj)
            except (DataValidationError, TypeError, ValueError) as exc:
                raise DataValidationError(str(exc), line=lineno) from None
            if impressions and imp.slate_size != impressions[0].slate_size:
                raise DataValidationError(
                    f"slate size {imp.slate_size} differs from {impressions[0].slate_size}", line=lineno
                )
            impressions.append(imp)
    if not impressions:
        raise DataValidationError(f"{path}: no impressions found")
    return Dataset.from_impressions(impressions)


def save_jsonl(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        for i in range(dataset.n):
            fh.write(json.dumps(dataset.impression(i).to_json()) + "\n")


class Policy(ABC):
    """A stochastic sequential slate policy.

    Subclasses define the next-step distribution over the remaining
    candidates given the already chosen prefix. Sampling and propensity
    lookups are derived from it; vectorised overrides must agree with it.
    """

    deterministic: bool = False

    @abstractmethod
    def distribution(self, context: Context, previous_actions: Sequence[str]) -> dict[str, float]:
        """Next-step probabilities over candidates not in ``previous_actions``."""

    def propensity(self, context: Context, previous_actions: Sequence[str], position: int, candidate: str) -> float:
        # Position enters only through the prefix for the policies in this package.
        if candidate not in context.candidates:
            raise KeyError(f"unknown candidate {candidate!r} in context {context.context_id!r}")
        if candidate in previous_actions:
            return 0.0
        return self.distribution(context, previous_actions).get(candidate, 0.0)

    def sample_slate(self, context: Context, slate_size: int, rng: np.random.Generator):
        """Draw a slate without replacement; returns ``(actions, propensities)``."""
        if slate_size > context.n_candidates:
            raise ValueError(f"slate size {slate_size} exceeds {context.n_candidates} candidates")
        actions: list[str] = []
        propensities: list[float] = []
        for _ in range(slate_size):
            dist = self.distribution(context, actions)
            names = list(dist)
            probs = np.array([dist[c] for c in names])
            j = rng.choice(len(names), p=probs / probs.sum())
            actions.append(names[j])
            propensities.append(dist[names[j]])
        return actions, propensities

    def logged_propensities(self, dataset: Dataset) -> np.ndarray:
        """Probability of each logged action given the logged prefix, shape (N, K)."""
        out = np.empty(dataset.actions.shape)
        for i in range(dataset.n):
            ctx = dataset.contexts[dataset.context_index[i]]
            names = [ctx.candidates[a] for a in dataset.actions[i]]
            for k, name in enumerate(names):
                out[i, k] = self.propensity(ctx, names[:k], k, name)
        return out

    def sample_batch(self, contexts: Sequence[Context], context_index: np.ndarray, slate_size: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw one slate per entry of ``context_index``.

        Returns candidate indices and propensities, both shaped (N, K).
        """
        n = len(context_index)
        actions = np.empty((n, slate_size), dtype=np.int64)
        props = np.empty((n, slate_size))
        for i, c in enumerate(context_index):
            ctx = contexts[c]
            names, p = self.sample_slate(ctx, slate_size, rng)
            actions[i] = [ctx.index(a) for a in names]
            props[i] = p
        return actions, props


def effective_sample_size(weights) -> float:
    """Kish effective sample size ``(sum w)^2 / sum w^2``.

    For weights normalised to mean one this is ``N^2 / sum w^2``.

    Raises
    ------
    DegenerateWeightsError
        If every weight is zero.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("weights must be nonempty")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    sq = float(np.dot(w, w))
    if sq == 0.0:
        raise DegenerateWeightsError("degenerate weights")
    total = float(w.sum())
    return total * total / sq


def per_position_weight(impression: LoggedImpression, target: Policy, position: int) -> float:
    """Target-to-logging propensity ratio at ``position`` (0-indexed).

    The target propensity is evaluated on the logged prefix.
    """
    p_log = impression.logging_propensities[position]
    if not p_log > 0:
        raise DataValidationError(f"non-positive logging propensity at position {position}")
    prefix = impression.actions[:position]
    h = target.propensity(impression.context, prefix, position, impression.actions[position])
    return h / p_log


def importance_weights(dataset: Dataset, target: Policy) -> np.ndarray:
    """Per-position weights ``h / pi`` for every impression, shape (N, K)."""
    return target.logged_propensities(dataset) / dataset.logging_propensities
