"""Synthetic task families, label corruption, candidate pools and frozen universes.

Three desk-scale families stand in for real benchmarks:

* sinusoid regression ``y = A sin(x + phase)``,
* clustered linear regression with imbalanced cluster weights,
* N-way classification over 2-D Gaussian class blobs.

Two corruption regimes act on support labels only: symmetric label flipping
for classification and additive ``eta * N(0, 1)`` noise for regression.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

REGRESSION = "regression"
CLASSIFICATION = "classification"

# task ids of different streams never collide
STREAM_ID_STRIDE = 1_000_000_000
STREAMS = {"train": 0, "validation": 1, "test": 2, "pretrain": 3}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskInstance:
    support_inputs: np.ndarray
    support_labels: np.ndarray
    query_inputs: np.ndarray
    query_labels: np.ndarray
    kind: str
    cluster_id: int = 0
    is_noisy: bool = False
    task_id: int = 0
    n_way: int | None = None

    @property
    def support(self):
        return self.support_inputs, self.support_labels

    @property
    def query(self):
        return self.query_inputs, self.query_labels

    def replace(self, **changes) -> "TaskInstance":
        return dataclasses.replace(self, **changes)


@dataclass
class TaskPool:
    tasks: list[TaskInstance]
    iteration: int = 0

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate task ids in pool: {ids}")

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]


@dataclass(frozen=True)
class FlipMatrix:
    """Row-stochastic symmetric flip matrix: keep with ``1 - ratio``, else flip uniformly."""

    n_classes: int
    probabilities: np.ndarray

    @classmethod
    def symmetric(cls, n_classes: int, noise_ratio: float) -> "FlipMatrix":
        if n_classes < 2:
            raise ConfigError("symmetric flipping needs at least 2 classes")
        if not 0.0 <= noise_ratio <= 1.0:
            raise ConfigError(f"noise ratio must be in [0, 1], got {noise_ratio}")
        off = noise_ratio / (n_classes - 1)
        p = np.full((n_classes, n_classes), off)
        np.fill_diagonal(p, 1.0 - noise_ratio)
        return cls(n_classes, p)

    @property
    def noise_ratio(self) -> float:
        return float(1.0 - self.probabilities[0, 0])


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _check_sizes(k_shot, q_size):
    if k_shot <= 0 or q_size <= 0:
        raise ConfigError(f"k_shot and q_size must be positive, got {k_shot}, {q_size}")


def gen_sinusoid_task(rng: np.random.Generator, k_shot: int, q_size: int,
                      amp_range=(0.1, 5.0), phase_range=(0.0, math.pi),
                      x_range=(-5.0, 5.0), task_id: int = 0,
                      amplitude: float | None = None, phase: float | None = None) -> TaskInstance:
    """Sinusoid regression task; ``amplitude``/``phase`` pin the task parameters."""
    _check_sizes(k_shot, q_size)
    if amp_range[1] < amp_range[0] or phase_range[1] < phase_range[0]:
        raise ConfigError("degenerate amplitude or phase range")
    a = rng.uniform(*amp_range) if amplitude is None else amplitude
    ph = rng.uniform(*phase_range) if phase is None else phase
    xs = rng.uniform(*x_range, size=(k_shot + q_size, 1))
    ys = a * np.sin(xs[:, 0] + ph)
    return TaskInstance(xs[:k_shot], ys[:k_shot], xs[k_shot:], ys[k_shot:],
                        REGRESSION, 0, False, task_id)


@dataclass(frozen=True)
class ClusterFamily:
    """Per-cluster distributions for linear-plus-noise regression tasks.

    Task weights are ``center[c] + spread * N(0, I)``; labels are
    ``x @ w + bias + noise_std * N(0, 1)`` with inputs uniform on [-1, 1]^dim.
    """

    centers: np.ndarray
    spread: float = 0.3
    noise_std: float = 0.1
    bias_range: tuple = (-0.5, 0.5)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def default(cls, n_clusters: int = 2, dim: int = 4, seed: int = 7) -> "ClusterFamily":
        g = np.random.default_rng(seed)
        c = g.normal(size=(n_clusters, dim))
        c *= 2.0 / np.linalg.norm(c, axis=1, keepdims=True)
        return cls(c)


def gen_cluster_regression_task(rng: np.random.Generator, cluster_weights: Sequence[float],
                                k_shot: int, q_size: int, family: ClusterFamily | None = None,
                                task_id: int = 0) -> TaskInstance:
    _check_sizes(k_shot, q_size)
    w = np.asarray(cluster_weights, dtype=float)
    if w.size == 0:
        raise ConfigError("cluster_weights is empty")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError("cluster_weights must be a probability vector")
    family = family or ClusterFamily.default(n_clusters=w.size)
    if family.centers.shape[0] != w.size:
        raise ConfigError("cluster_weights length does not match the family")
    c = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
    c = min(c, w.size - 1)
    slope = family.centers[c] + family.spread * rng.normal(size=family.dim)
    bias = rng.uniform(*family.bias_range)
    xs = rng.uniform(-1.0, 1.0, size=(k_shot + q_size, family.dim))
    ys = xs @ slope + bias + family.noise_std * rng.normal(size=k_shot + q_size)
    return TaskInstance(xs[:k_shot], ys[:k_shot], xs[k_shot:], ys[k_shot:],
                        REGRESSION, c, False, task_id)


@dataclass(frozen=True)
class BlobUniverse:
    """Class prototypes in 2-D; each class is an isotropic Gaussian blob."""

    means: np.ndarray
    std: float = 1.0

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @classmethod
    def default(cls, n_classes: int = 64, box: float = 8.0, std: float = 1.0,
                seed: int = 11) -> "BlobUniverse":
        g = np.random.default_rng(seed)
        return cls(g.uniform(-box, box, size=(n_classes, 2)), std)


def gen_blob_classification_task(rng: np.random.Generator, n_way: int, k_shot: int, q_size: int,
                                 universe: BlobUniverse | None = None,
                                 classes: Sequence[int] | None = None,
                                 task_id: int = 0) -> TaskInstance:
    """N-way task; ``k_shot`` and ``q_size`` are per class.

    Inputs are centred on the mean of the chosen prototypes so that the
    absolute position of a class carries no label information.
    """
    _check_sizes(k_shot, q_size)
    universe = universe or BlobUniverse.default()
    if classes is None:
        classes = rng.choice(universe.n_classes, size=n_way, replace=False)
    classes = np.asarray(classes)
    if len(classes) != n_way:
        raise ConfigError("number of classes does not match n_way")
    perm = rng.permutation(n_way)
    centre = universe.means[classes].mean(axis=0)

    def draw(per_class):
        labels = np.repeat(np.arange(n_way), per_class)
        means = universe.means[classes[perm[labels]]] - centre
        xs = means + universe.std * rng.normal(size=(labels.size, 2))
        order = rng.permutation(labels.size)
        return xs[order], labels[order]

    sx, sy = draw(k_shot)
    qx, qy = draw(q_size)
    return TaskInstance(sx, sy, qx, qy, CLASSIFICATION, 0, False, task_id, n_way)


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------

def flip_support_labels(task: TaskInstance, matrix: FlipMatrix,
                        rng: np.random.Generator) -> TaskInstance:
    if task.kind != CLASSIFICATION:
        raise ConfigError("label flipping applies to classification tasks")
    if matrix.n_classes != task.n_way:
        raise ConfigError(f"flip matrix is {matrix.n_classes}x{matrix.n_classes}, task is {task.n_way}-way")
    cdf = np.cumsum(matrix.probabilities, axis=1)
    u = rng.random(task.support_labels.shape[0])
    rows = cdf[task.support_labels]
    new = (u[:, None] >= rows).sum(axis=1)
    new = np.minimum(new, matrix.n_classes - 1)
    return task.replace(support_labels=new.astype(task.support_labels.dtype),
                        is_noisy=matrix.noise_ratio > 0)


def add_gaussian_label_noise(task: TaskInstance, eta: float,
                             rng: np.random.Generator) -> TaskInstance:
    if task.kind != REGRESSION:
        raise ConfigError("Gaussian label noise applies to regression tasks")
    if eta < 0:
        raise ConfigError(f"eta must be non-negative, got {eta}")
    if eta == 0:
        return task
    noise = eta * rng.normal(size=task.support_labels.shape)
    return task.replace(support_labels=task.support_labels + noise, is_noisy=True)


# ---------------------------------------------------------------------------
# streams, pools, frozen universes
# ---------------------------------------------------------------------------

def stream_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator per (seed, purpose)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[stream]]))


class TaskSource:
    """Callable producing fresh clean tasks with stream-unique ids."""

    def __init__(self, make: Callable[[np.random.Generator, int], TaskInstance],
                 stream: str = "train"):
        self._make = make
        self.stream = stream
        self._next = STREAM_ID_STRIDE * STREAMS[stream]

    def __call__(self, rng: np.random.Generator) -> TaskInstance:
        task = self._make(rng, self._next)
        self._next += 1
        return task

    def sample_distinct(self, rng: np.random.Generator, n: int) -> list[TaskInstance]:
        return [self(rng) for _ in range(n)]


class FrozenUniverse:
    """A fixed, enumerable set of distinct tasks; episodes redraw data points only."""

    def __init__(self, kind: str, n_tasks: int, make_task: Callable, describe: Callable,
                 stream: str = "train"):
        self.kind = kind
        self.n_tasks = n_tasks
        self._make_task = make_task
        self._describe = describe
        self.stream = stream
        self._offset = STREAM_ID_STRIDE * STREAMS[stream]

    def __len__(self):
        return self.n_tasks

    def task_ids(self) -> list[int]:
        return [self._offset + i for i in range(self.n_tasks)]

    def describe(self, index: int):
        """Stable identity of the ``index``-th task (class tuple or parameters)."""
        return self._describe(index)

    def draw(self, rng: np.random.Generator, index: int) -> TaskInstance:
        return self._make_task(rng, index, self._offset + index)

    def __call__(self, rng: np.random.Generator) -> TaskInstance:
        return self.draw(rng, int(rng.integers(self.n_tasks)))

    def sample_distinct(self, rng: np.random.Generator, n: int) -> list[TaskInstance]:
        if n > self.n_tasks:
            raise ConfigError(f"pool of {n} exceeds the {self.n_tasks} distinct tasks")
        idx = rng.choice(self.n_tasks, size=n, replace=False)
        return [self.draw(rng, int(i)) for i in idx]


def limited_budget_universe(n_classes_or_tasks: int, rng: np.random.Generator, *,
                            kind: str = CLASSIFICATION, n_way: int = 5, k_shot: int = 1,
                            q_size: int = 15, universe: BlobUniverse | None = None,
                            amp_range=(0.1, 5.0), phase_range=(0.0, math.pi),
                            stream: str = "train") -> FrozenUniverse:
    """Freeze a budget of classes (classification) or task parameters (regression).

    Classification: ``budget`` classes are drawn once; every ``n_way`` subset
    of them is one distinct task, so there are ``C(budget, n_way)`` tasks.
    Regression: ``budget`` sinusoid (amplitude, phase) pairs are drawn once.
    """
    budget = int(n_classes_or_tasks)
    if kind == CLASSIFICATION:
        universe = universe or BlobUniverse.default()
        if budget < n_way:
            raise ConfigError(f"budget {budget} is smaller than n_way {n_way}")
        if budget > universe.n_classes:
            raise ConfigError(f"budget {budget} exceeds the {universe.n_classes} available classes")
        chosen = np.sort(rng.choice(universe.n_classes, size=budget, replace=False))
        combos = list(itertools.combinations(chosen.tolist(), n_way))

        def make(g, index, task_id):
            return gen_blob_classification_task(g, n_way, k_shot, q_size, universe,
                                                classes=combos[index], task_id=task_id)
        return FrozenUniverse(kind, len(combos), make, lambda i: combos[i], stream)

    if budget < 1:
        raise ConfigError("regression budget must be at least 1")
    amps = rng.uniform(*amp_range, size=budget)
    phases = rng.uniform(*phase_range, size=budget)

    def make_reg(g, index, task_id):
        return gen_sinusoid_task(g, k_shot, q_size, amp_range, phase_range, task_id=task_id,
                                 amplitude=amps[index], phase=phases[index])
    return FrozenUniverse(kind, budget, make_reg,
                          lambda i: (float(amps[i]), float(phases[i])), stream)


def build_pool(source, n_pool: int, noisy_fraction: float, rng: np.random.Generator,
               corrupt: Callable[[TaskInstance, np.random.Generator], TaskInstance] | None = None,
               iteration: int = 0) -> TaskPool:
    """Draw ``n_pool`` distinct tasks and corrupt each with probability ``noisy_fraction``.

    ``noisy_fraction=1`` corrupts every task (the all-tasks regression regime).
    """
    if n_pool <= 0:
        raise ConfigError("n_pool must be positive")
    if not 0.0 <= noisy_fraction <= 1.0:
        raise ConfigError("noisy_fraction must be in [0, 1]")
    if hasattr(source, "sample_distinct"):
        tasks = source.sample_distinct(rng, n_pool)
    else:
        tasks = [source(rng) for _ in range(n_pool)]
    if corrupt is not None and noisy_fraction > 0:
        flags = rng.random(n_pool) < noisy_fraction
        tasks = [corrupt(t, rng) if f else t for t, f in zip(tasks, flags)]
    return TaskPool(tasks, iteration)


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


def task_summary(task: TaskInstance) -> dict:
    return {
        "task_id": task.task_id,
        "kind": task.kind,
        "cluster_id": task.cluster_id,
        "is_noisy": task.is_noisy,
        "n_support": int(task.support_labels.shape[0]),
        "n_query": int(task.query_labels.shape[0]),
        "support_digest": _digest(task.support_inputs) + _digest(task.support_labels),
        "query_digest": _digest(task.query_inputs) + _digest(task.query_labels),
    }


def export_pool(pool: TaskPool, path) -> None:
    """One JSON object per line describing each task (ids, flags, tensor digests)."""
    with open(path, "w") as fh:
        for task in pool.tasks:
            fh.write(json.dumps(task_summary(task), sort_keys=True) + "\n")
