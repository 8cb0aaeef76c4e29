"""Numerical checks of the weighted meta-training loss identities.

Instances are small tanh networks on synthetic regression tasks. For every task
``i`` we record the query loss at a parameter point, the inner product between
its support and query gradients, and the first-order (Taylor) surrogate of the
loss after one full-parameter inner step::

    surrogate_i = loss_i - alpha * <g_support_i, g_query_i>

Covariances are sums of centred products over the pool (no division); the
``"mean"`` mode divides by the pool size and exists only so tests can pin
which convention makes the weighted-loss identity exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .numkit import ParamSet
from .taskgen import TaskInstance, TaskPool, gen_sinusoid_task

COV_MODES = ("sum", "mean")


def cov(x, y, mode: str = "sum") -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s = float(np.sum((x - x.mean()) * (y - y.mean())))
    if mode == "sum":
        return s
    if mode == "mean":
        return s / x.size
    raise ValueError(f"unknown covariance mode {mode!r}")


def var(x, mode: str = "sum") -> float:
    return cov(x, x, mode)


# ---------------------------------------------------------------------------
# tiny smooth model
# ---------------------------------------------------------------------------

def init_small_net(rng: np.random.Generator, hidden: int = 8, in_dim: int = 1) -> ParamSet:
    return ParamSet({
        "w0": rng.normal(size=(in_dim, hidden)) * 0.8,
        "b0": rng.normal(size=hidden) * 0.3,
        "w1": rng.normal(size=(hidden, 1)) / np.sqrt(hidden),
        "b1": np.zeros(1),
    })


def small_net_loss(p, x, y):
    h = nk.tanh(nk.affine(x, p["w0"], p["b0"]))
    out = nk.affine(h, p["w1"], p["b1"])
    return nk.squared_error(nk.reshape(out, (-1,)), y)


def _loss_grad(theta: ParamSet, x, y):
    return nk.value_and_grad(small_net_loss, theta, x, y)


@dataclass(frozen=True)
class SurrogateLoss:
    losses: np.ndarray
    inner_products: np.ndarray
    alpha: float

    @property
    def values(self) -> np.ndarray:
        return self.losses - self.alpha * self.inner_products


@dataclass(frozen=True)
class PropInstance:
    pool: TaskPool
    theta0: ParamSet
    alpha: float
    weights: np.ndarray
    losses: np.ndarray
    inner_products: np.ndarray
    true_losses: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.pool.tasks)
        for name in ("weights", "losses", "inner_products"):
            if np.asarray(getattr(self, name)).shape != (n,):
                raise ValueError(f"{name} must have length {n}")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def surrogate(self) -> SurrogateLoss:
        return SurrogateLoss(self.losses, self.inner_products, self.alpha)


def task_quantities(theta: ParamSet, task: TaskInstance, alpha: float):
    """(query loss, support/query gradient inner product, true loss after one inner step)."""
    sx, sy = task.support
    qx, qy = task.query
    _, gs = _loss_grad(theta, sx, sy)
    lq, gq = _loss_grad(theta, qx, qy)
    stepped = nk.sgd_step(theta, gs, alpha)
    true_loss = float(nk.evaluate(small_net_loss, stepped, qx, qy))
    return float(lq), float(gs.flatten() @ gq.flatten()), true_loss


def pool_quantities(theta: ParamSet, pool: TaskPool, alpha: float):
    q = np.array([task_quantities(theta, t, alpha) for t in pool.tasks])
    return q[:, 0], q[:, 1], q[:, 2]


def random_pool(rng: np.random.Generator, n_pool: int, k_shot: int = 10, q_size: int = 10) -> TaskPool:
    return TaskPool([gen_sinusoid_task(rng, k_shot, q_size, amp_range=(0.2, 2.0),
                                       x_range=(-2.0, 2.0), task_id=i) for i in range(n_pool)])


def random_instance(rng: np.random.Generator, n_pool: int | None = None, alpha: float | None = None,
                    weights: np.ndarray | None = None, theta: ParamSet | None = None,
                    pool: TaskPool | None = None) -> PropInstance:
    n_pool = n_pool or int(rng.integers(3, 9))
    pool = pool or random_pool(rng, n_pool)
    theta = theta if theta is not None else init_small_net(rng)
    alpha = alpha if alpha is not None else float(10 ** rng.uniform(-3, -1))
    if weights is None:
        weights = rng.dirichlet(np.ones(len(pool.tasks)))
    losses, ips, true = pool_quantities(theta, pool, alpha)
    return PropInstance(pool, theta, alpha, np.asarray(weights, dtype=float), losses, ips, true)


# ---------------------------------------------------------------------------
# weighted-loss identity
# ---------------------------------------------------------------------------

def weighted_loss_decomposition(values, losses, inner_products, weights, alpha,
                                mode: str = "sum"):
    """(weighted loss, uniform loss + covariance terms) for per-task loss ``values``."""
    values = np.asarray(values, dtype=float)
    lw = float(np.dot(weights, values))
    rhs = float(values.mean()) + cov(losses, weights, mode) - alpha * cov(inner_products, weights, mode)
    return lw, rhs


def check_prop1(instance: PropInstance, mode: str = "sum", use_true_losses: bool = False) -> float:
    """Absolute residual of ``L^w = L + Cov(loss, w) - alpha * Cov(inner, w)``.

    With surrogate values the identity is algebraic; with true one-step losses
    the residual is the Taylor remainder.
    """
    if use_true_losses:
        if instance.true_losses is None:
            raise ValueError("instance has no true one-step losses")
        values = instance.true_losses
    else:
        values = instance.surrogate.values
    lw, rhs = weighted_loss_decomposition(values, instance.losses, instance.inner_products,
                                          instance.weights, instance.alpha, mode)
    return abs(lw - rhs)


def alpha_slope(rng: np.random.Generator, alphas: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4),
                n_pool: int = 6) -> tuple[float, np.ndarray]:
    """Log-log slope of the true-loss residual against alpha, on one fixed pool and weights."""
    pool = random_pool(rng, n_pool)
    theta = init_small_net(rng)
    w = rng.dirichlet(np.ones(n_pool))
    res = np.array([check_prop1(random_instance(rng, alpha=a, weights=w, theta=theta, pool=pool),
                                use_true_losses=True) for a in alphas])
    slope = float(np.polyfit(np.log(alphas), np.log(res), 1)[0])
    return slope, res


# ---------------------------------------------------------------------------
# optimal weights and the landscape implications
# ---------------------------------------------------------------------------

def optimal_weights(losses, inner_products, alpha: float) -> np.ndarray:
    """Softmax of ``-(loss - alpha * inner)`` over the whole pool."""
    a = np.asarray(losses, dtype=float) - alpha * np.asarray(inner_products, dtype=float)
    if not np.all(np.isfinite(a)):
        raise nk.NumericError("non-finite surrogate values")
    e = np.exp(-(a - a.min()))
    return e / e.sum()


@dataclass
class Prop2Report:
    n_instances: int = 0
    branch1_active: int = 0
    branch1_violations: int = 0
    branch2_active: int = 0
    branch2_violations: int = 0
    both_active: int = 0
    vacuous: int = 0
    out_of_domain: int = 0
    out_of_domain_violations: int = 0
    details: list = field(default_factory=list)

    @property
    def non_vacuous(self) -> int:
        return self.branch1_active + self.branch2_active - self.both_active

    @property
    def violations(self) -> int:
        return self.branch1_violations + self.branch2_violations

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "details"}
        d["non_vacuous"] = self.non_vacuous
        d["violations"] = self.violations
        return d


@dataclass(frozen=True)
class Prop2Case:
    """Surrogate values at a parameter point and at the reference point."""

    values: np.ndarray
    ref_values: np.ndarray


def prop2_terms(case: Prop2Case, tol: float = 1e-12):
    """Conditions and implication gaps for one case.

    Returns ``(cond1, cond2, gap)`` where ``gap = [L^w(t) - L^w(t*)] - [L(t) - L(t*)]``
    under ``w* = softmax(-ref_values)``; branch 1 claims ``gap >= 0``, branch 2 ``gap <= 0``.
    """
    a, a_ref = case.values, case.ref_values
    e = np.exp(-(a_ref - a_ref.min()))  # positive rescaling keeps every sign below
    c = cov(a, e)
    scale = np.exp(-a_ref.min())  # undo the rescaling for the variance comparison
    cond1 = c >= -tol
    cond2 = c * scale <= -var(a_ref) + tol
    w = e / e.sum()
    gap = (float(w @ a) - float(w @ a_ref)) - (float(a.mean()) - float(a_ref.mean()))
    return bool(cond1), bool(cond2), gap


def check_prop2(cases: Sequence[Prop2Case], tol: float = 1e-10) -> Prop2Report:
    """Count active branches and implication failures.

    The second branch leans on ``-Var(a*) <= Cov(a*, exp(-a*))``, which holds
    when every reference value is non-negative; cases with a negative reference
    value are tallied under ``out_of_domain`` instead of the branch counters.
    """
    rep = Prop2Report()
    for case in cases:
        rep.n_instances += 1
        cond1, cond2, gap = prop2_terms(case)
        bad1 = cond1 and gap < -tol
        bad2 = cond2 and gap > tol
        if np.any(case.ref_values < 0):
            rep.out_of_domain += 1
            rep.out_of_domain_violations += int(bad1 or bad2)
            continue
        if not (cond1 or cond2):
            rep.vacuous += 1
            continue
        rep.branch1_active += int(cond1)
        rep.branch2_active += int(cond2)
        rep.both_active += int(cond1 and cond2)
        rep.branch1_violations += int(bad1)
        rep.branch2_violations += int(bad2)
        if bad1 or bad2:
            rep.details.append({"values": case.values.tolist(),
                                "ref_values": case.ref_values.tolist(), "gap": gap})
    return rep


def model_case(rng: np.random.Generator, n_pool: int | None = None,
               alpha: float | None = None) -> Prop2Case:
    """Surrogate values of one pool at a random point and at a random reference point."""
    n_pool = n_pool or int(rng.integers(3, 9))
    alpha = alpha if alpha is not None else float(10 ** rng.uniform(-3, -1.5))
    pool = random_pool(rng, n_pool)
    theta_ref = init_small_net(rng)
    spread = float(10 ** rng.uniform(-1.5, 0.5))
    theta = theta_ref.zip_map(init_small_net(rng), lambda r, d: r + spread * d)
    l0, g0, _ = pool_quantities(theta, pool, alpha)
    l1, g1, _ = pool_quantities(theta_ref, pool, alpha)
    return Prop2Case(l0 - alpha * g0, l1 - alpha * g1)


def sample_prop2_cases(rng: np.random.Generator, n_non_vacuous: int = 500,
                       max_cases: int = 20000) -> list[Prop2Case]:
    """Draw model-derived cases until enough non-vacuous in-domain ones are collected."""
    cases, count = [], 0
    while count < n_non_vacuous and len(cases) < max_cases:
        case = model_case(rng)
        cases.append(case)
        cond1, cond2, _ = prop2_terms(case)
        if (cond1 or cond2) and not np.any(case.ref_values < 0):
            count += 1
    return cases


def branch2_case(rng: np.random.Generator, n_pool: int = 6) -> Prop2Case:
    """A case engineered so the variance-bounded condition is active.

    The point's surrogate values rise steeply with the reference values, so
    they are rank-opposed to ``exp(-a*)``.
    """
    a_ref = np.sort(rng.uniform(0.2, 2.0, size=n_pool))
    a = 3.0 * a_ref + rng.uniform(0, 0.05, size=n_pool)
    return Prop2Case(a, a_ref)


def verify_theory(seed: int = 0, n_prop1: int = 200, n_prop2: int = 500) -> dict:
    """Run all checks and return a structured summary."""
    rng = np.random.default_rng(seed)
    res = np.array([check_prop1(random_instance(rng)) for _ in range(n_prop1)])
    slope, slope_res = alpha_slope(rng)
    cases = sample_prop2_cases(rng, n_prop2)
    cases.append(branch2_case(rng))
    rep = check_prop2(cases)
    out = {
        "prop1": {"n": n_prop1, "max_residual": float(res.max()),
                  "mean_residual": float(res.mean()), "pass": bool(res.max() <= 1e-10)},
        "prop1_taylor": {"slope": slope, "residuals": slope_res.tolist(),
                         "pass": bool(1.8 <= slope <= 2.2)},
        "prop2": {**rep.as_dict(), "pass": bool(rep.violations == 0 and rep.non_vacuous >= n_prop2)},
    }
    out["pass"] = all(v["pass"] for v in out.values() if isinstance(v, dict))
    return out
