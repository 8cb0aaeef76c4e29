"""Adaptive task scheduler: a neural policy over task factors trained by REINFORCE.

Per meta-iteration the driver builds a candidate pool, measures each task's
factors at the current meta-model, turns them into sampling weights with the
policy, samples a batch, takes a one-step *temporal* meta-update on a copy,
rewards the policy with validation performance of that temporal model,
updates the policy, resamples with the updated policy and finally updates the
real meta-model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import metalearn as ml
from . import numkit as nk
from .metalearn import MetaModel, TaskFactors
from .numkit import ParamSet
from .schedulers import SampledBatch, Scheduler, sample_without_replacement
from .taskgen import REGRESSION, TaskInstance, build_pool

ENCODERS = ("bilstm", "mlp")


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"training aborted at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


# ---------------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SchedulerPolicy:
    params: ParamSet
    tau: float = 0.1
    encoder: str = "bilstm"
    use_loss: bool = True
    use_sim: bool = True
    hidden: int = 10
    progress_dim: int = 5
    fusion_hidden: int = 20
    sim_measure: str = "cosine"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")

    def with_params(self, params: ParamSet) -> "SchedulerPolicy":
        return replace(self, params=params)


LOSS_INPUTS = 1
SIM_INPUTS = 3  # similarity, support grad norm, query grad norm


def init_policy(rng: np.random.Generator, *, tau: float = 0.1, encoder: str = "bilstm",
                use_loss: bool = True, use_sim: bool = True, hidden: int = 10,
                progress_dim: int = 5, fusion_hidden: int = 20,
                sim_measure: str = "cosine") -> SchedulerPolicy:
    p = {}

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    enc_width = 0
    for name, n_in, used in (("loss", LOSS_INPUTS, use_loss), ("sim", SIM_INPUTS, use_sim)):
        if not used:
            continue
        if encoder == "bilstm":
            for d in ("fwd", "bwd"):
                p[f"{name}.{d}"] = uniform((n_in + hidden, 4 * hidden), hidden)
        else:
            p[f"{name}.enc.w"] = uniform((n_in, 2 * hidden), n_in)
            p[f"{name}.enc.b"] = uniform((2 * hidden,), n_in)
        enc_width += 2 * hidden
    p["prog.w"] = uniform((1, progress_dim), 1)
    p["prog.b"] = uniform((progress_dim,), 1)
    width = enc_width + progress_dim
    p["fuse.0.w"] = uniform((width, fusion_hidden), width)
    p["fuse.0.b"] = uniform((fusion_hidden,), width)
    p["fuse.1.w"] = uniform((fusion_hidden, 1), fusion_hidden)
    p["fuse.1.b"] = uniform((1,), fusion_hidden)
    return SchedulerPolicy(ParamSet(p), tau, encoder, use_loss, use_sim, hidden,
                           progress_dim, fusion_hidden, sim_measure)


def _zscore(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    if not np.isfinite(sd) or sd < 1e-12:
        return np.zeros_like(v)
    return (v - v.mean()) / sd


def _signed_log(v):
    return np.sign(v) * np.log1p(np.abs(v))


def factor_inputs(factors: Sequence[TaskFactors], sim_measure: str = "cosine"):
    """Pool-standardised encoder inputs, rows in the given factor order."""
    for f in factors:
        vals = (f.query_loss, f.grad_similarity, f.cosine, f.support_grad_norm, f.query_grad_norm)
        if not all(np.isfinite(vals)):
            raise nk.NumericError(f"non-finite factors for task {f.task_id}")
    loss = np.log1p(np.array([f.query_loss for f in factors]))
    if sim_measure == "cosine":
        sim = np.array([f.cosine for f in factors])
    else:
        sim = _signed_log(np.array([f.grad_similarity for f in factors]))
    ns = np.log1p(np.array([f.support_grad_norm for f in factors]))
    nq = np.log1p(np.array([f.query_grad_norm for f in factors]))
    loss_x = _zscore(loss)[:, None]
    sim_x = np.stack([_zscore(sim), _zscore(ns), _zscore(nq)], axis=1)
    return loss_x, sim_x


def _encode(p, name, x, policy: SchedulerPolicy):
    hdim = policy.hidden
    if policy.encoder == "mlp":
        return nk.tanh(nk.affine(x, p[f"{name}.enc.w"], p[f"{name}.enc.b"]))
    n = x.shape[0]
    no_bias = np.zeros(4 * hdim)
    outs = {}
    for d, order in (("fwd", range(n)), ("bwd", range(n - 1, -1, -1))):
        state = np.zeros((1, 2 * hdim))
        seq = [None] * n
        for t in order:
            state = nk.lstm_step(x[t:t + 1], state, p[f"{name}.{d}"], no_bias)
            seq[t] = nk.take(state, slice(0, hdim), axis=1)
        outs[d] = nk.concat(seq, axis=0)
    return nk.concat([outs["fwd"], outs["bwd"]], axis=1)


def policy_scores(p, loss_x, sim_x, progress: float, policy: SchedulerPolicy):
    """Scaled logits ``logit / tau`` for each row (works recorded or eager)."""
    n = loss_x.shape[0]
    parts = []
    if policy.use_loss:
        parts.append(_encode(p, "loss", loss_x, policy))
    if policy.use_sim:
        parts.append(_encode(p, "sim", sim_x, policy))
    prog = nk.tanh(nk.affine(np.array([[progress]]), p["prog.w"], p["prog.b"]))
    parts.append(nk.matmul(np.ones((n, 1)), prog))
    h = nk.tanh(nk.affine(nk.concat(parts, axis=1), p["fuse.0.w"], p["fuse.0.b"]))
    logits = nk.affine(h, p["fuse.1.w"], p["fuse.1.b"])
    return nk.scale(nk.reshape(logits, (n,)), 1.0 / policy.tau)


def _sorted_view(factors: Sequence[TaskFactors]):
    """Permutation sorting the pool by task id, and its inverse."""
    order = np.argsort([f.task_id for f in factors], kind="stable")
    return order, np.argsort(order)


class _ScoreHandle:
    """Recorded scoring pass kept for the policy-gradient update."""

    __slots__ = ("tape", "scores", "weights")

    def __init__(self, tape, scores, weights):
        self.tape, self.scores, self.weights = tape, scores, weights


def _record_scores(policy: SchedulerPolicy, factors: Sequence[TaskFactors]):
    if not factors:
        raise ValueError("empty factor list")
    order, inverse = _sorted_view(factors)
    loss_x, sim_x = factor_inputs([factors[i] for i in order], policy.sim_measure)
    progress = float(factors[0].progress)
    holder = {}

    def f(p):
        s_sorted = policy_scores(p, loss_x, sim_x, progress, policy)
        s = nk.take(s_sorted, inverse, axis=0)
        _check_scores(s.value, factors)
        holder["s"] = s
        return s

    value, tape = nk.forward_record(f, policy.params)
    return _ScoreHandle(tape, holder["s"], _softmax(value)), value


def score_pool_neural(policy: SchedulerPolicy, factors: Sequence[TaskFactors]) -> np.ndarray:
    """Softmax over the pool of the policy's temperature-scaled logits."""
    if not factors:
        raise ValueError("empty factor list")
    order, inverse = _sorted_view(factors)
    loss_x, sim_x = factor_inputs([factors[i] for i in order], policy.sim_measure)
    with np.errstate(all="ignore"):
        scores = policy_scores(dict(policy.params), loss_x, sim_x, float(factors[0].progress),
                               policy)[inverse]
    _check_scores(scores, factors)
    return _softmax(scores)


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = np.exp(scores - scores.max())
    return z / z.sum()


def _check_scores(scores, factors):
    if not np.all(np.isfinite(scores)):
        bad = int(np.flatnonzero(~np.isfinite(scores))[0])
        raise nk.NumericError(f"non-finite logit for task {factors[bad].task_id}")


def plackett_luce_log_prob(scores, indices: Sequence[int]):
    """Recorded log-probability of an ordered draw from ``softmax(scores)`` without replacement."""
    n = scores.shape[0]
    remaining = list(range(n))
    terms = []
    for i in indices:
        pos = remaining.index(i)
        terms.append(nk.take(nk.log_softmax(nk.take(scores, np.array(remaining), axis=0)), pos, axis=0))
        remaining.pop(pos)
    total = terms[0]
    for t in terms[1:]:
        total = nk.add(total, t)
    return total


@dataclass
class RewardBaseline:
    """Exponential moving average of rewards, seeded with the first observed reward."""

    decay: float = 0.9
    value: float = 0.0
    initialized: bool = False
    adv_sq: float = 0.0
    normalize: bool = False

    def advantage(self, reward: float) -> float:
        if not self.initialized:
            return 0.0
        adv = reward - self.value
        if self.normalize:
            if self.adv_sq <= 0:
                return 0.0
            return adv / math.sqrt(self.adv_sq)
        return adv

    def update(self, reward: float) -> "RewardBaseline":
        if not self.initialized:
            return replace(self, value=float(reward), initialized=True)
        adv = reward - self.value
        return replace(self, value=self.decay * self.value + (1 - self.decay) * reward,
                       adv_sq=(self.decay * self.adv_sq + (1 - self.decay) * adv * adv
                               if self.adv_sq > 0 else adv * adv))


def policy_log_prob_grad(policy: SchedulerPolicy, factors: Sequence[TaskFactors],
                         indices: Sequence[int], handle: _ScoreHandle | None = None) -> ParamSet:
    """Gradient of log P(ordered batch) with respect to the policy parameters."""
    if handle is None or handle.tape.consumed:
        handle, _ = _record_scores(policy, factors)
    logp = plackett_luce_log_prob(handle.scores, indices)
    handle.tape.output = logp
    return nk.backward(handle.tape, 1.0)


def reinforce_update(policy: SchedulerPolicy, factors: Sequence[TaskFactors],
                     batch: SampledBatch, mean_reward: float, baseline: RewardBaseline,
                     gamma: float, handle: _ScoreHandle | None = None):
    """One policy-gradient step; above-baseline rewards make the batch more likely.

    Returns ``(policy, baseline, advantage)``.
    """
    advantage = baseline.advantage(mean_reward)
    new_baseline = baseline.update(mean_reward)
    if advantage == 0.0 or gamma == 0.0 or len(factors) == 1:
        return policy, new_baseline, advantage
    grad = policy_log_prob_grad(policy, factors, batch.indices, handle)
    # ascent on advantage * log P, written as descent on -advantage * log P
    step = grad.map(lambda g: -advantage * g)
    return policy.with_params(nk.sgd_step(policy.params, step, gamma)), new_baseline, advantage


def reinforce_gradient(policy: SchedulerPolicy, factors: Sequence[TaskFactors],
                       indices: Sequence[int], advantage: float) -> np.ndarray:
    """Flat estimator ``advantage * grad log P`` (used for estimator diagnostics)."""
    return advantage * policy_log_prob_grad(policy, factors, indices).flatten()


# ---------------------------------------------------------------------------
# bi-level driver
# ---------------------------------------------------------------------------

@dataclass
class Streams:
    """Task sources for one run. ``train`` yields clean tasks; ``corrupt`` adds noise."""

    train: Callable
    validation: list
    test: list
    corrupt: Callable | None = None
    noisy_fraction: float = 0.0


@dataclass
class BiLevelState:
    meta_model: MetaModel
    policy: SchedulerPolicy | None
    baseline: RewardBaseline
    iteration: int = 0
    alpha: float = 0.01
    beta: float = 0.001
    gamma: float = 0.001
    pool_size: int = 10
    batch_size: int = 2
    n_val: int = 8
    inner_steps: int = 5

    def __post_init__(self):
        for name in ("alpha", "beta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.batch_size > self.pool_size:
            raise ValueError("batch size exceeds pool size")


@dataclass
class TrainOptions:
    max_iters: int = 3000
    warm_start_iters: int = 0
    mode: str = "ats"  # ats | random_phi | reweight | fixed
    reward_metric: str = "auto"  # auto | r2 | neg_loss | accuracy
    reward_pairing: bool = False
    seed: int = 0


@dataclass
class EpisodeRecord:
    iteration: int
    phase: str
    task_ids: list
    noisy: list
    clusters: list
    factors: list
    weights: list
    sampled: list
    resampled: list
    rewards: list = field(default_factory=list)
    mean_reward: float | None = None
    baseline: float | None = None
    advantage: float | None = None
    train_loss: float | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        return cls(**d)


def factors_to_dict(f: TaskFactors) -> dict:
    return {"task_id": f.task_id, "query_loss": f.query_loss, "grad_similarity": f.grad_similarity,
            "cosine": f.cosine, "support_grad_norm": f.support_grad_norm,
            "query_grad_norm": f.query_grad_norm, "progress": f.progress,
            "degenerate": f.degenerate}


def temporal_meta_step(meta_model: MetaModel, batch: Sequence[TaskInstance], alpha: float,
                       beta: float, steps: int) -> MetaModel:
    """One-step look-ahead copy of the meta-model; the input model is not modified."""
    return ml.outer_update(meta_model, batch, alpha, beta, steps)


def _reward_metric(kind: str, metric: str) -> str:
    if metric != "auto":
        return metric
    return "r2" if kind == REGRESSION else "accuracy"


def task_reward(model: MetaModel, task: TaskInstance, alpha: float, steps: int,
                metric: str = "auto") -> float:
    m = ml.task_metric(model, task, alpha, steps)
    metric = _reward_metric(model.arch.kind, metric)
    if metric == "r2":
        return max(0.0, min(1.0, m["r2"]))
    if metric == "neg_loss":
        return -m["loss"]
    return m["accuracy"]


def validation_reward(model: MetaModel, validation_tasks: Sequence[TaskInstance], alpha: float,
                      steps: int, metric: str = "auto") -> tuple[list, float]:
    """Per-task rewards after adapting ``model`` to each validation task, and their mean."""
    rewards = [task_reward(model, t, alpha, steps, metric) for t in validation_tasks]
    return rewards, float(np.mean(rewards))


def _pool_analysis(state: BiLevelState, pool, progress):
    out = [ml.analyze_task(state.meta_model, t, state.alpha, state.inner_steps, progress)
           for t in pool]
    return [o[0] for o in out], [o[1] for o in out]


def _subsample(rng, tasks, n):
    if n >= len(tasks):
        return list(tasks)
    return [tasks[i] for i in rng.choice(len(tasks), size=n, replace=False)]


class _Rngs:
    def __init__(self, seed: int):
        ss = np.random.SeedSequence([int(seed), 17])
        pool, sample, val, policy = ss.spawn(4)
        self.pool = np.random.default_rng(pool)
        self.sample = np.random.default_rng(sample)
        self.val = np.random.default_rng(val)
        self.policy = np.random.default_rng(policy)


def _policy_like(policy: SchedulerPolicy, rng) -> SchedulerPolicy:
    return init_policy(rng, tau=policy.tau, encoder=policy.encoder, use_loss=policy.use_loss,
                       use_sim=policy.use_sim, hidden=policy.hidden,
                       progress_dim=policy.progress_dim, fusion_hidden=policy.fusion_hidden,
                       sim_measure=policy.sim_measure)


def _reweight_policy_step(state: BiLevelState, factors, grads, val_tasks, temporal, metric):
    """Hypergradient step for the reweighting ablation.

    d(val loss)/d(w_i) ~ -beta <grad val loss at temporal model, g_i>; pushed
    through the softmax weights into the policy parameters.
    """
    vgrads = [ml.meta_gradient(temporal, t, state.alpha, state.inner_steps)[1] for t in val_tasks]
    vflat = ml.combine_gradients(vgrads).flatten()
    coeff = np.array([-state.beta * float(vflat @ g.flatten()) for g in grads])
    handle, _ = _record_scores(state.policy, factors)
    w = nk.softmax(handle.scores)
    handle.tape.output = nk.sum_all(nk.mul(w, coeff))
    g = nk.backward(handle.tape, 1.0)
    return state.policy.with_params(nk.sgd_step(state.policy.params, g, state.gamma))


def ats_train(state: BiLevelState, streams: Streams, options: TrainOptions,
              on_record: Callable[[EpisodeRecord], None] | None = None,
              scheduler: Scheduler | None = None) -> BiLevelState:
    """Run the meta-training loop; returns the final state.

    ``options.mode``: ``ats`` (learned policy), ``random_phi`` (fresh random
    policy every iteration), ``reweight`` (weighted update over the whole
    pool), ``fixed`` (hand-designed ``scheduler``).
    """
    rngs = _Rngs(options.seed)
    mode = options.mode
    if mode == "fixed" and scheduler is None:
        raise ValueError("fixed mode needs a scheduler")
    if mode != "fixed" and state.policy is None:
        raise ValueError(f"mode {mode!r} needs a policy")
    metric = _reward_metric(state.meta_model.arch.kind, options.reward_metric)

    for k in range(state.iteration, options.max_iters):
        try:
            record = _iteration(state, streams, options, rngs, k, metric, scheduler)
        except TrainingAborted:
            raise
        except Exception as exc:  # noqa: BLE001 - any failure aborts with context
            raise TrainingAborted(k, exc) from exc
        state.iteration = k + 1
        if on_record is not None:
            on_record(record)
    return state


def _iteration(state, streams, options, rngs, k, metric, scheduler):
    mode = options.mode
    progress = k / max(options.max_iters, 1)
    warm = k < options.warm_start_iters
    pool = build_pool(streams.train, state.pool_size, streams.noisy_fraction, rngs.pool,
                      streams.corrupt, iteration=k)
    tasks = pool.tasks
    needs_factors = mode != "fixed" or scheduler.needs_factors
    if needs_factors:
        factors, grads = _pool_analysis(state, tasks, progress)
    else:
        factors = [TaskFactors(t.task_id, float("nan"), float("nan"), float("nan"),
                               float("nan"), float("nan"), progress) for t in tasks]
        grads = None

    rec = dict(iteration=k, phase="warm_start" if warm else "joint",
               task_ids=[t.task_id for t in tasks], noisy=[bool(t.is_noisy) for t in tasks],
               clusters=[int(t.cluster_id) for t in tasks],
               factors=[factors_to_dict(f) for f in factors] if needs_factors else [],
               sampled=[], resampled=[])

    def grads_for(idx):
        if grads is not None:
            return [grads[i] for i in idx]
        return [ml.meta_gradient(state.meta_model, tasks[i], state.alpha, state.inner_steps)[1]
                for i in idx]

    def real_update(idx, weights=None):
        g = grads_for(idx)
        losses = None
        if grads is not None:
            losses = float(np.mean([factors[i].query_loss for i in idx]))
        if not warm:
            state.meta_model = ml.apply_meta_gradient(
                state.meta_model, ml.combine_gradients(g, weights), state.beta)
        return losses

    if mode == "fixed":
        weights = scheduler.score_pool(factors, k)
        batch = sample_without_replacement(weights, state.batch_size, rngs.sample)
        rec.update(weights=weights.tolist(), sampled=list(batch.indices))
        rec["train_loss"] = real_update(batch.indices)
        return EpisodeRecord(**rec)

    if mode == "random_phi":
        state.policy = _policy_like(state.policy, rngs.policy)
        weights = score_pool_neural(state.policy, factors)
        batch = sample_without_replacement(weights, state.batch_size, rngs.sample)
        rec.update(weights=weights.tolist(), sampled=list(batch.indices))
        rec["train_loss"] = real_update(batch.indices)
        return EpisodeRecord(**rec)

    handle, _ = _record_scores(state.policy, factors)
    weights = handle.weights
    rec["weights"] = weights.tolist()
    val_tasks = _subsample(rngs.val, streams.validation, state.n_val)

    if mode == "reweight":
        all_idx = list(range(len(tasks)))
        temporal = ml.apply_meta_gradient(
            state.meta_model, ml.combine_gradients(grads_for(all_idx), weights), state.beta)
        state.policy = _reweight_policy_step(state, factors, grads, val_tasks, temporal, metric)
        new_w = score_pool_neural(state.policy, factors)
        rec["train_loss"] = real_update(all_idx, new_w)
        rec["resampled"] = all_idx
        return EpisodeRecord(**rec)

    # ats
    batch = sample_without_replacement(weights, state.batch_size, rngs.sample)
    temporal = ml.apply_meta_gradient(
        state.meta_model, ml.combine_gradients(grads_for(batch.indices)), state.beta)
    rewards, mean_reward = validation_reward(temporal, val_tasks, state.alpha,
                                             state.inner_steps, metric)
    signal = mean_reward
    if options.reward_pairing:
        _, current = validation_reward(state.meta_model, val_tasks, state.alpha,
                                       state.inner_steps, metric)
        signal = mean_reward - current
    state.policy, state.baseline, adv = reinforce_update(
        state.policy, factors, batch, signal, state.baseline, state.gamma, handle)
    new_weights = score_pool_neural(state.policy, factors)
    batch2 = sample_without_replacement(new_weights, state.batch_size, rngs.sample)
    rec.update(sampled=list(batch.indices), resampled=list(batch2.indices), rewards=rewards,
               mean_reward=mean_reward, baseline=state.baseline.value, advantage=adv)
    rec["train_loss"] = real_update(batch2.indices)
    return EpisodeRecord(**rec)
