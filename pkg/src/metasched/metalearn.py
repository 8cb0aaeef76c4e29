"""Base learner, ANIL adaptation, first-order meta-updates and per-task factors.

The base learner is an MLP split into a *body* (feature layers) and a linear
*head*. Adaptation (the inner loop) updates only the head; the outer loop
updates body and head initialisation from the gradient of the adapted query
loss, evaluated at the adapted parameters (first-order meta-gradient).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .numkit import ParamSet
from .taskgen import CLASSIFICATION, REGRESSION, TaskInstance


class AdaptationError(nk.NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"adaptation diverged at step {step} (support loss {loss})")
        self.step = step


@dataclass(frozen=True)
class Arch:
    in_dim: int
    hidden: tuple = (64, 64)
    out_dim: int = 1
    kind: str = REGRESSION


@dataclass(frozen=True)
class MetaModel:
    body: ParamSet
    head: ParamSet
    arch: Arch

    def __post_init__(self):
        if set(self.body) & set(self.head):
            raise ValueError("body and head parameter names overlap")

    @property
    def params(self) -> ParamSet:
        return self.body.merge(self.head)

    def with_params(self, params: ParamSet) -> "MetaModel":
        return MetaModel(params.subset(self.body), params.subset(self.head), self.arch)


@dataclass(frozen=True)
class AdaptedModel:
    base: MetaModel
    adapted_head: ParamSet
    steps_taken: int
    alpha: float
    support_losses: tuple = field(default=(), compare=False)

    @property
    def params(self) -> ParamSet:
        return self.base.body.merge(self.adapted_head)


@dataclass(frozen=True)
class TaskFactors:
    """Scheduler inputs for one candidate task, all measured at the current meta-model."""

    task_id: int
    query_loss: float
    grad_similarity: float
    cosine: float
    support_grad_norm: float
    query_grad_norm: float
    progress: float
    degenerate: bool = False


def init_model(arch: Arch, rng: np.random.Generator) -> MetaModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.

    Keeps feature magnitudes small enough that head-only SGD with the default
    inner rate is stable.
    """
    def uni(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    body = {}
    fan_in = arch.in_dim
    for i, width in enumerate(arch.hidden):
        body[f"body.{i}.w"] = uni((fan_in, width), fan_in)
        body[f"body.{i}.b"] = uni((width,), fan_in)
        fan_in = width
    head = {
        "head.w": uni((fan_in, arch.out_dim), fan_in),
        "head.b": uni((arch.out_dim,), fan_in),
    }
    return MetaModel(ParamSet(body), ParamSet(head), arch)


# ---------------------------------------------------------------------------
# forward pieces (work on recorded Vars and on plain arrays alike)
# ---------------------------------------------------------------------------

def _n_layers(p) -> int:
    return sum(1 for k in p if k.startswith("body.") and k.endswith(".w"))


def features(p, x):
    h = x
    for i in range(_n_layers(p)):
        h = nk.leaky_relu(nk.affine(h, p[f"body.{i}.w"], p[f"body.{i}.b"]))
    return h


def head_output(p, h):
    return nk.affine(h, p["head.w"], p["head.b"])


def loss_from_output(out, y, kind: str):
    if kind == REGRESSION:
        return nk.squared_error(nk.reshape(out, (-1,)), y)
    return nk.cross_entropy(out, y)


def task_loss(p, x, y, kind: str):
    return loss_from_output(head_output(p, features(p, x)), y, kind)


def _loss_fn(kind):
    def f(p, x, y):
        return task_loss(p, x, y, kind)
    return f


# ---------------------------------------------------------------------------
# head-only inner loop
# ---------------------------------------------------------------------------

def head_loss_and_grad(phi: np.ndarray, w: np.ndarray, b: np.ndarray, y: np.ndarray,
                       kind: str) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss of a linear head on fixed features and its gradient (closed form)."""
    out = phi @ w + b
    m = phi.shape[0]
    if kind == REGRESSION:
        r = out[:, 0] - y
        loss = float(r @ r) / m
        d = (2.0 / m) * r[:, None]
    else:
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.arange(m)
        loss = float(-logp[rows, y].mean())
        d = np.exp(logp)
        d[rows, y] -= 1.0
        d /= m
    return loss, phi.T @ d, d.sum(axis=0)


def adapt(model: MetaModel, support, steps: int, alpha: float,
          phi: np.ndarray | None = None) -> AdaptedModel:
    """``steps`` gradient steps on the support loss, head only; the body is untouched."""
    if steps < 1:
        raise ValueError("adapt needs at least one step")
    x, y = support
    if phi is None:
        phi = features(model.body, np.asarray(x, dtype=float))
    w, b = model.head["head.w"], model.head["head.b"]
    losses = []
    for step in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, gw, gb = head_loss_and_grad(phi, w, b, y, model.arch.kind)
        if not np.isfinite(loss) or not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise AdaptationError(step, loss)
        losses.append(loss)
        w = w - alpha * gw
        b = b - alpha * gb
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
        raise AdaptationError(steps, float("nan"))
    return AdaptedModel(model, ParamSet({"head.w": w, "head.b": b}), steps, alpha, tuple(losses))


def predict(adapted: AdaptedModel | MetaModel, x) -> np.ndarray:
    base = adapted.base if isinstance(adapted, AdaptedModel) else adapted
    head = adapted.adapted_head if isinstance(adapted, AdaptedModel) else adapted.head
    out = head_output(head, features(base.body, np.asarray(x, dtype=float)))
    return out[:, 0] if base.arch.kind == REGRESSION else out


def query_loss(adapted: AdaptedModel, query) -> float:
    x, y = query
    kind = adapted.base.arch.kind
    out = head_output(adapted.adapted_head, features(adapted.base.body, np.asarray(x, dtype=float)))
    value = float(loss_from_output(out, np.asarray(y), kind))
    if not np.isfinite(value):
        raise nk.NumericError("non-finite query loss")
    return value


# ---------------------------------------------------------------------------
# gradients at the meta-model
# ---------------------------------------------------------------------------

def full_gradient(model: MetaModel, x, y, params: ParamSet | None = None) -> tuple[float, ParamSet]:
    """Loss and gradient over all (body + head) parameters."""
    params = model.params if params is None else params
    return nk.value_and_grad(_loss_fn(model.arch.kind), params, x, y)


def _cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0)), False


def grad_similarity(model: MetaModel, task: TaskInstance, mode: str = "inner_product") -> float:
    """Similarity of support and query gradients, both taken at the meta-model."""
    _, gs = full_gradient(model, *task.support)
    _, gq = full_gradient(model, *task.query)
    a, b = gs.flatten(), gq.flatten()
    if mode == "inner_product":
        return float(a @ b)
    if mode == "cosine":
        return _cosine(a, b)[0]
    raise ValueError(f"unknown similarity mode {mode!r}")


def meta_gradient(model: MetaModel, task: TaskInstance, alpha: float, steps: int,
                  adapted: AdaptedModel | None = None) -> tuple[float, ParamSet]:
    """First-order meta-gradient: query-loss gradient at the adapted parameters."""
    adapted = adapted or adapt(model, task.support, steps, alpha)
    return full_gradient(model, *task.query, params=adapted.params)


def analyze_task(model: MetaModel, task: TaskInstance, alpha: float, steps: int,
                 progress: float = 0.0) -> tuple[TaskFactors, ParamSet]:
    """Factors for one candidate task plus its first-order meta-gradient."""
    sx, sy = task.support
    qx, qy = task.query
    _, gs = full_gradient(model, sx, sy)
    _, gq = full_gradient(model, qx, qy)
    a, b = gs.flatten(), gq.flatten()
    cos, degenerate = _cosine(a, b)
    adapted = adapt(model, task.support, steps, alpha)
    qloss, mgrad = full_gradient(model, qx, qy, params=adapted.params)
    factors = TaskFactors(task.task_id, qloss, float(a @ b), cos,
                          float(np.linalg.norm(a)), float(np.linalg.norm(b)),
                          float(progress), degenerate)
    return factors, mgrad


def compute_factors(model: MetaModel, task: TaskInstance, alpha: float, steps: int,
                    iteration: int = 0, max_iterations: int = 1) -> TaskFactors:
    return analyze_task(model, task, alpha, steps, iteration / max(max_iterations, 1))[0]


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def combine_gradients(grads: Sequence[ParamSet], weights: Sequence[float] | None = None) -> ParamSet:
    """Weighted sum of per-task gradients (mean when ``weights`` is None)."""
    if not grads:
        raise ValueError("empty batch")
    if weights is None:
        weights = np.full(len(grads), 1.0 / len(grads))
    flat = sum(w * g.flatten() for w, g in zip(weights, grads))
    return grads[0].unflatten(flat)


def apply_meta_gradient(model: MetaModel, grad: ParamSet, beta: float) -> MetaModel:
    if beta == 0:
        return model
    return model.with_params(nk.sgd_step(model.params, grad, beta))


def outer_update(model: MetaModel, batch: Sequence[TaskInstance], alpha: float, beta: float,
                 steps: int, weights: Sequence[float] | None = None) -> MetaModel:
    """One SGD step on the (weighted) mean adapted query loss of ``batch``."""
    if not batch:
        raise ValueError("outer_update needs a non-empty batch")
    grads = [meta_gradient(model, t, alpha, steps)[1] for t in batch]
    return apply_meta_gradient(model, combine_gradients(grads, weights), beta)


def exact_anil_meta_gradient(model: MetaModel, task: TaskInstance, alpha: float,
                             steps: int) -> tuple[float, ParamSet]:
    """Exact meta-gradient for a linear regression head under squared loss.

    The head update is written as explicit recorded operations, so reverse
    mode differentiates through the inner loop (including the body's effect
    on the support features).
    """
    if model.arch.kind != REGRESSION:
        raise ValueError("exact meta-gradient is only available for regression heads")
    sx, sy = task.support
    qx, qy = task.query
    m = sx.shape[0]

    def f(p, sx, sy, qx, qy):
        phi_s = features(p, sx)
        phi_q = features(p, qx)
        phi_t = nk.transpose(phi_s)
        ones = np.ones((1, m))
        w, b = p["head.w"], p["head.b"]
        for _ in range(steps):
            r = nk.sub(nk.add(nk.matmul(phi_s, w), b), sy[:, None])
            w = nk.sub(w, nk.scale(nk.matmul(phi_t, r), 2.0 * alpha / m))
            b = nk.sub(b, nk.scale(nk.reshape(nk.matmul(ones, r), (1,)), 2.0 * alpha / m))
        pred = nk.add(nk.matmul(phi_q, w), b)
        return nk.squared_error(nk.reshape(pred, (-1,)), qy)

    return nk.value_and_grad(f, model.params, sx, sy, qx, qy)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def r_squared(pred: np.ndarray, y: np.ndarray) -> float:
    """Squared Pearson correlation; 0 when either side has zero variance."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    pc, yc = pred - pred.mean(), y - y.mean()
    denom = (pc @ pc) * (yc @ yc)
    if denom <= 0 or not np.isfinite(denom):
        return 0.0
    return float(min((pc @ yc) ** 2 / denom, 1.0))


def task_metric(model: MetaModel, task: TaskInstance, alpha: float, steps: int) -> dict:
    """Adapt on the support set, then score the query set."""
    adapted = adapt(model, task.support, steps, alpha)
    qx, qy = task.query
    out = head_output(adapted.adapted_head, features(model.body, np.asarray(qx, dtype=float)))
    loss = float(loss_from_output(out, qy, model.arch.kind))
    if model.arch.kind == REGRESSION:
        return {"loss": loss, "r2": r_squared(out[:, 0], qy)}
    return {"loss": loss, "accuracy": float(np.mean(out.argmax(axis=1) == qy))}


def evaluate(model: MetaModel, tasks: Sequence[TaskInstance], alpha: float, steps: int,
             r2_threshold: float = 0.3) -> dict:
    per_task = [task_metric(model, t, alpha, steps) for t in tasks]
    losses = np.array([p["loss"] for p in per_task])
    out = {"n_tasks": len(per_task), "loss_mean": float(losses.mean()),
           "loss_per_task": losses.tolist()}
    if model.arch.kind == REGRESSION:
        r2 = np.array([p["r2"] for p in per_task])
        out.update(r2_mean=float(r2.mean()), r2_median=float(np.median(r2)),
                   r2_count_above=int((r2 > r2_threshold).sum()), r2_per_task=r2.tolist())
    else:
        acc = np.array([p["accuracy"] for p in per_task])
        out.update(accuracy=float(acc.mean()), accuracy_per_task=acc.tolist())
    return out


__all__ = [
    "AdaptationError", "AdaptedModel", "Arch", "MetaModel", "TaskFactors", "adapt",
    "analyze_task", "apply_meta_gradient", "combine_gradients", "compute_factors",
    "evaluate", "exact_anil_meta_gradient", "features", "full_gradient", "grad_similarity",
    "head_loss_and_grad", "init_model", "meta_gradient", "outer_update", "predict",
    "query_loss", "r_squared", "task_loss", "task_metric", "CLASSIFICATION", "REGRESSION",
]
