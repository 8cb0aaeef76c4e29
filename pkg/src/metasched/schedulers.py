"""Hand-designed task schedulers and without-replacement batch sampling.

Every scheduler maps a list of :class:`TaskFactors` (one per candidate task)
to a probability vector over the pool. ``sample_without_replacement`` draws an
ordered batch of distinct indices from those weights (Plackett-Luce) and
reports the exact log-probability of the draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metalearn import TaskFactors

LOSS_FLOOR = 1e-8


@dataclass(frozen=True)
class SampledBatch:
    indices: tuple
    log_prob: float
    weights_snapshot: np.ndarray


def _normalize(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    total = raw.sum()
    if not np.isfinite(total) or total <= 0:
        return np.full(raw.size, 1.0 / raw.size)
    return raw / total


def _losses(factors: Sequence[TaskFactors]) -> np.ndarray:
    return np.array([f.query_loss for f in factors], dtype=float)


def uniform_weights(n_pool: int) -> np.ndarray:
    if n_pool < 1:
        raise ValueError("n_pool must be at least 1")
    return np.full(n_pool, 1.0 / n_pool)


def spl_weights(factors: Sequence[TaskFactors], lambda_threshold: float) -> np.ndarray:
    """Self-paced: keep tasks whose query loss is below the threshold; uniform if none."""
    if lambda_threshold <= 0:
        raise ValueError("lambda must be positive")
    return _normalize((_losses(factors) < lambda_threshold).astype(float))


def focal_weights(factors: Sequence[TaskFactors], gamma: float) -> np.ndarray:
    """Weights proportional to ``(1 - exp(-loss)) ** gamma``."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0:
        return uniform_weights(len(factors))
    return _normalize((1.0 - np.exp(-_losses(factors))) ** gamma)


def difficulty_weights(factors: Sequence[TaskFactors], temperature: float = 1.0) -> np.ndarray:
    """Softmax of query loss: harder tasks are sampled more often."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = _losses(factors) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def ratio_order(factors: Sequence[TaskFactors], use_cosine: bool = False) -> np.ndarray:
    """Indices sorted by descending similarity / loss; ties keep the lower index first."""
    sims = np.array([f.cosine if use_cosine else f.grad_similarity for f in factors])
    ratio = sims / np.maximum(_losses(factors), LOSS_FLOOR)
    return np.lexsort((np.arange(ratio.size), -ratio))


def rank_by_ratio(factors: Sequence[TaskFactors], batch_size: int = 1,
                  use_cosine: bool = False) -> np.ndarray:
    """Deterministic top-B selection by similarity/loss, as a probability vector."""
    order = ratio_order(factors, use_cosine)
    b = min(batch_size, len(factors))
    w = np.zeros(len(factors))
    w[order[:b]] = 1.0 / b
    return w


class SPLSchedule:
    """Loss threshold that starts at the median initial loss and grows geometrically."""

    def __init__(self, growth: float = 1.1, epoch_iters: int = 100, start: float | None = None):
        self.growth = growth
        self.epoch_iters = epoch_iters
        self.start = start

    def threshold(self, iteration: int, factors: Sequence[TaskFactors]) -> float:
        if self.start is None:
            self.start = max(float(np.median(_losses(factors))), LOSS_FLOOR)
        return self.start * self.growth ** (iteration // self.epoch_iters)


def sample_without_replacement(weights: np.ndarray, batch_size: int,
                               rng: np.random.Generator) -> SampledBatch:
    """Sequential draws, each proportional to the renormalised remaining weights.

    When fewer than ``batch_size`` weights are positive the remaining slots are
    filled uniformly from the zero-weight indices.
    """
    w = np.asarray(weights, dtype=float)
    n = w.size
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds pool size {n}")
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    remaining = w.copy()
    alive = np.ones(n, dtype=bool)
    chosen, log_prob = [], 0.0
    for _ in range(batch_size):
        total = remaining.sum()
        if total > 0:
            pos = np.flatnonzero(remaining > 0)
            cut = np.cumsum(remaining[pos])
            j = int(np.searchsorted(cut, rng.random() * cut[-1], side="right"))
            idx = int(pos[min(j, pos.size - 1)])
            log_prob += math.log(remaining[idx] / total)
        else:
            free = np.flatnonzero(alive)
            idx = int(free[rng.integers(free.size)])
            log_prob -= math.log(free.size)
        chosen.append(idx)
        alive[idx] = False
        remaining[idx] = 0.0
    return SampledBatch(tuple(chosen), log_prob, w.copy())


def ordered_log_prob(weights: np.ndarray, indices: Sequence[int]) -> float:
    """Log-probability of drawing ``indices`` in order under sequential renormalised draws."""
    w = np.asarray(weights, dtype=float).copy()
    lp = 0.0
    for i in indices:
        total = w.sum()
        lp += math.log(w[i] / total)
        w[i] = 0.0
    return lp


class Scheduler:
    """Common interface: ``score_pool(factors, k) -> weights``."""

    name = "base"
    needs_factors = True

    def score_pool(self, factors: Sequence[TaskFactors], k: int) -> np.ndarray:
        raise NotImplementedError


class UniformScheduler(Scheduler):
    name = "uniform"
    needs_factors = False

    def score_pool(self, factors, k):
        return uniform_weights(len(factors))


class SPLScheduler(Scheduler):
    name = "spl"

    def __init__(self, growth: float = 1.1, epoch_iters: int = 100):
        self.schedule = SPLSchedule(growth, epoch_iters)

    def score_pool(self, factors, k):
        return spl_weights(factors, self.schedule.threshold(k, factors))


class FocalScheduler(Scheduler):
    name = "focal"

    def __init__(self, gamma: float = 2.0):
        self.gamma = gamma

    def score_pool(self, factors, k):
        return focal_weights(factors, self.gamma)


class DifficultyScheduler(Scheduler):
    name = "difficulty"

    def __init__(self, temperature: float = 1.0):
        self.temperature = temperature

    def score_pool(self, factors, k):
        return difficulty_weights(factors, self.temperature)


class RankRatioScheduler(Scheduler):
    name = "rank_ratio"

    def __init__(self, batch_size: int, use_cosine: bool = False):
        self.batch_size = batch_size
        self.use_cosine = use_cosine

    def score_pool(self, factors, k):
        return rank_by_ratio(factors, self.batch_size, self.use_cosine)
