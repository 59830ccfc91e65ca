"""Concrete slate policies: uniform random, score-sorted and softmax (Plackett-Luce)."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .core import Context, Dataset, Policy

ScoreSource = Mapping[str, Mapping[str, float]]


class UnknownPolicyError(ValueError):
    pass


def _score_table(score_source: ScoreSource, contexts: Sequence[Context]) -> tuple[np.ndarray, np.ndarray]:
    """Scores aligned with each context's candidates, padded to the widest context.

    Returns ``(scores, valid)`` both shaped (C, M_max).
    """
    width = max(c.n_candidates for c in contexts)
    scores = np.zeros((len(contexts), width))
    valid = np.zeros((len(contexts), width), dtype=bool)
    for i, ctx in enumerate(contexts):
        try:
            table = score_source[ctx.context_id]
        except KeyError:
            raise KeyError(f"no scores for context {ctx.context_id!r}") from None
        try:
            scores[i, : ctx.n_candidates] = [table[c] for c in ctx.candidates]
        except KeyError as exc:
            raise KeyError(f"no score for candidate {exc.args[0]!r} in context {ctx.context_id!r}") from None
        valid[i, : ctx.n_candidates] = True
    return scores, valid


def _chosen_mask(actions: np.ndarray, width: int, upto: int) -> np.ndarray:
    """Boolean (N, width) mask of candidates used in positions ``< upto``."""
    mask = np.zeros((actions.shape[0], width), dtype=bool)
    rows = np.arange(actions.shape[0])
    for k in range(upto):
        mask[rows, actions[:, k]] = True
    return mask


class UniformRandomPolicy(Policy):
    """Every remaining candidate is equally likely at each position."""

    def distribution(self, context, previous_actions):
        remaining = [c for c in context.candidates if c not in previous_actions]
        return {c: 1.0 / len(remaining) for c in remaining}

    def logged_propensities(self, dataset: Dataset) -> np.ndarray:
        m = dataset.candidate_counts[:, None].astype(np.float64)
        k = np.arange(dataset.slate_size)[None, :]
        return 1.0 / (m - k)

    def sample_batch(self, contexts, context_index, slate_size, rng):
        context_index = np.asarray(context_index)
        sizes = np.array([c.n_candidates for c in contexts])[context_index]
        if slate_size > sizes.min():
            raise ValueError(f"slate size {slate_size} exceeds {sizes.min()} candidates")
        keys = rng.random((len(context_index), sizes.max()))
        keys[np.arange(sizes.max())[None, :] >= sizes[:, None]] = np.inf
        actions = np.argsort(keys, axis=1, kind="stable")[:, :slate_size]
        props = 1.0 / (sizes[:, None] - np.arange(slate_size)[None, :])
        return actions, props

    def sample_slate(self, context, slate_size, rng):
        actions, props = self.sample_batch([context], np.zeros(1, dtype=np.int64), slate_size, rng)
        return [context.candidates[a] for a in actions[0]], list(props[0])

    def __repr__(self):
        return "UniformRandomPolicy()"


class _ScorePolicy(Policy):
    def __init__(self, score_source: ScoreSource, direction: str = "desc"):
        if direction not in ("asc", "desc"):
            raise ValueError(f"direction must be 'asc' or 'desc', got {direction!r}")
        self.score_source = score_source
        self.direction = direction

    @property
    def _sign(self) -> float:
        return 1.0 if self.direction == "desc" else -1.0

    def sample_slate(self, context, slate_size, rng):
        actions, props = self.sample_batch([context], np.zeros(1, dtype=np.int64), slate_size, rng)
        return [context.candidates[a] for a in actions[0]], list(props[0])


class ScoreSortedPolicy(_ScorePolicy):
    """Deterministic policy that lists candidates in score order.

    Ties are broken by candidate identifier, ascending, in both directions.
    ``direction="desc"`` over true rewards is the optimal policy and
    ``direction="asc"`` the anti-optimal one.
    """

    deterministic = True

    def _order(self, context: Context) -> list[str]:
        table = self.score_source[context.context_id]
        return sorted(context.candidates, key=lambda c: (-self._sign * table[c], c))

    def distribution(self, context, previous_actions):
        for c in self._order(context):
            if c not in previous_actions:
                return {c: 1.0}
        return {}

    def _ranks(self, contexts: Sequence[Context]) -> np.ndarray:
        width = max(c.n_candidates for c in contexts)
        ranks = np.full((len(contexts), width), np.iinfo(np.int64).max, dtype=np.int64)
        for i, ctx in enumerate(contexts):
            pos = {c: r for r, c in enumerate(self._order(ctx))}
            ranks[i, : ctx.n_candidates] = [pos[c] for c in ctx.candidates]
        return ranks

    def logged_propensities(self, dataset: Dataset) -> np.ndarray:
        ranks = self._ranks(dataset.contexts)[dataset.context_index]
        actions = dataset.actions
        rows = np.arange(dataset.n)
        out = np.empty(actions.shape)
        for k in range(dataset.slate_size):
            taken = _chosen_mask(actions, ranks.shape[1], k)
            best = np.where(taken, np.iinfo(np.int64).max, ranks).min(axis=1)
            out[:, k] = ranks[rows, actions[:, k]] == best
        return out

    def sample_batch(self, contexts, context_index, slate_size, rng):
        context_index = np.asarray(context_index)
        if slate_size > min(c.n_candidates for c in contexts):
            raise ValueError(f"slate size {slate_size} exceeds the candidate count")
        order = np.argsort(self._ranks(contexts), axis=1, kind="stable")[:, :slate_size]
        return order[context_index], np.ones((len(context_index), slate_size))

    def __repr__(self):
        return f"ScoreSortedPolicy(direction={self.direction!r})"


class SoftmaxPolicy(_ScorePolicy):
    """Sequential softmax over remaining candidates, ``p ∝ exp(score / temperature)``."""

    def __init__(self, score_source: ScoreSource, temperature: float = 1.0, direction: str = "desc"):
        super().__init__(score_source, direction)
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        self.temperature = float(temperature)

    def distribution(self, context, previous_actions):
        table = self.score_source[context.context_id]
        remaining = [c for c in context.candidates if c not in previous_actions]
        logits = np.array([self._sign * table[c] for c in remaining]) / self.temperature
        p = np.exp(logits - logits.max())
        p /= p.sum()
        return dict(zip(remaining, p.tolist()))

    def _logits(self, contexts):
        scores, valid = _score_table(self.score_source, contexts)
        return np.where(valid, self._sign * scores / self.temperature, -np.inf)

    def _propensities(self, logits: np.ndarray, actions: np.ndarray) -> np.ndarray:
        rows = np.arange(actions.shape[0])
        out = np.empty(actions.shape)
        for k in range(actions.shape[1]):
            taken = _chosen_mask(actions, logits.shape[1], k)
            masked = np.where(taken, -np.inf, logits)
            top = masked.max(axis=1)
            log_norm = top + np.log(np.exp(masked - top[:, None]).sum(axis=1))
            out[:, k] = np.exp(logits[rows, actions[:, k]] - log_norm)
        return np.minimum(out, 1.0)

    def logged_propensities(self, dataset: Dataset) -> np.ndarray:
        logits = self._logits(dataset.contexts)[dataset.context_index]
        return self._propensities(logits, dataset.actions)

    def sample_batch(self, contexts, context_index, slate_size, rng):
        # Gumbel-top-k draws exactly from the sequential softmax without replacement.
        context_index = np.asarray(context_index)
        if slate_size > min(c.n_candidates for c in contexts):
            raise ValueError(f"slate size {slate_size} exceeds the candidate count")
        logits = self._logits(contexts)[context_index]
        perturbed = logits + rng.gumbel(size=logits.shape)
        actions = np.argsort(-perturbed, axis=1, kind="stable")[:, :slate_size]
        return actions, self._propensities(logits, actions)

    def __repr__(self):
        return f"SoftmaxPolicy(temperature={self.temperature!r}, direction={self.direction!r})"


_ALIASES = {
    "optimal": {"kind": "sorted", "direction": "desc"},
    "anti-optimal": {"kind": "sorted", "direction": "asc"},
    "anti_optimal": {"kind": "sorted", "direction": "asc"},
    "random": {"kind": "uniform"},
    "uniform": {"kind": "uniform"},
}


def parse_policy_spec(spec: str | Mapping) -> dict:
    """Normalise ``"sorted:desc"``, ``"softmax:0.5[:asc]"``, aliases or a config dict."""
    if isinstance(spec, Mapping):
        config = dict(spec)
    else:
        text = spec.strip().lower()
        if text in _ALIASES:
            config = dict(_ALIASES[text])
        else:
            kind, *rest = text.split(":")
            config = {"kind": kind}
            if kind == "sorted":
                if rest:
                    config["direction"] = rest[0]
            elif kind == "softmax":
                try:
                    if rest:
                        config["temperature"] = float(rest[0])
                except ValueError:
                    raise UnknownPolicyError(f"bad softmax temperature in {spec!r}") from None
                if len(rest) > 1:
                    config["direction"] = rest[1]
            elif kind != "uniform":
                raise UnknownPolicyError(f"unknown policy {spec!r}")
    kind = config.get("kind")
    if kind not in ("uniform", "sorted", "softmax"):
        raise UnknownPolicyError(f"unknown policy kind {kind!r}")
    if kind != "uniform":
        config.setdefault("direction", "desc")
        if config["direction"] not in ("asc", "desc"):
            raise UnknownPolicyError(f"unknown direction {config['direction']!r}")
    if kind == "softmax":
        config.setdefault("temperature", 1.0)
    return config


def policy_from_config(spec: str | Mapping, score_source: ScoreSource | None = None) -> Policy:
    """Build a policy from a spec string or ``{"kind", "direction", "temperature"}`` dict."""
    config = parse_policy_spec(spec)
    kind = config["kind"]
    if kind == "uniform":
        return UniformRandomPolicy()
    if score_source is None:
        raise UnknownPolicyError(f"policy {kind!r} needs a score source (world or scores file)")
    if kind == "sorted":
        return ScoreSortedPolicy(score_source, direction=config["direction"])
    return SoftmaxPolicy(score_source, temperature=float(config["temperature"]), direction=config["direction"])
