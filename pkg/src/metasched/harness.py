"""Experiment orchestration: configs, seeded runs, sweeps, ablations, analyses and the CLI."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml
from scipy import stats

from . import ats
from . import metalearn as ml
from . import schedulers as sc
from . import taskgen as tg
from . import theoryx

REGIMES = ("noise", "budget")
FAMILIES = ("sinusoid", "blobs")
FIXED_SCHEDULERS = ("uniform", "spl", "focal", "difficulty", "rank_ratio")
NEURAL_SCHEDULERS = ("ats", "random_phi", "ats_loss", "ats_sim", "reweight")
SCHEDULERS = FIXED_SCHEDULERS + NEURAL_SCHEDULERS
ABLATION_ROWS = (
    ("Random φ", "random_phi"),
    ("Rank by Sim/Loss", "rank_ratio"),
    ("φ+Loss", "ats_loss"),
    ("φ+Sim", "ats_sim"),
    ("Reweighting", "reweight"),
    ("φ+Loss+Sim", "ats"),
)
SWEEP_AXES = {"noise_ratio": "noise.task_fraction", "eta": "noise.eta", "budget": "budget.size"}
RECORD_SCHEMA = {"schema": "metasched.episode_record", "version": 1}
SERIES_FIELDS = ("iteration", "phase", "train_loss", "mean_reward", "baseline", "advantage",
                 "weight_clean", "weight_noisy", "batch_noisy_fraction")
BLOB_UNIVERSE_SEEDS = {"train": 11, "validation": 12, "test": 13, "pretrain": 11}
BLOB_UNIVERSE_SIZES = {"train": 64, "validation": 16, "test": 20, "pretrain": 64}
_SEED_PURPOSES = {"model": 101, "policy": 102, "pretrain": 103, "finetune": 104, "universe": 105}


class ConfigError(tg.ConfigError):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment settings; file keys are dotted (``meta.alpha``), attributes use ``_``.

    ``None`` means "regime default" and is filled in by :meth:`resolved`.
    """

    regime: str = "noise"
    family: str = "sinusoid"
    scheduler: str = "ats"
    seed: int = 0
    out: str | None = None
    preset: str | None = None

    task_k_shot: int | None = None
    task_q_size: int = 15
    task_n_way: int = 5

    noise_task_fraction: float = 0.6
    noise_eta: float = 4.0
    noise_flip_ratio: float = 0.8

    budget_size: int | None = None

    meta_hidden: tuple = (64, 64)
    meta_alpha: float = 0.01
    meta_beta: float = 0.001
    meta_inner_steps: int = 5
    meta_batch_size: int | None = None
    meta_pool_size: int | None = None
    meta_max_iterations: int = 3000
    meta_pretrain_iters: int = 0
    meta_finetune_iters: int = 100

    ats_gamma: float = 0.001
    ats_tau: float | None = None
    ats_n_val: int = 8
    ats_warm_start_iters: int | None = None
    ats_encoder: str = "bilstm"
    ats_sim_measure: str = "cosine"
    ats_hidden: int = 10
    ats_baseline_decay: float = 0.9
    ats_reward_metric: str = "auto"
    ats_reward_pairing: bool = False
    ats_advantage_norm: bool = False

    sched_spl_growth: float = 1.1
    sched_spl_epoch_iters: int = 100
    sched_focal_gamma: float = 2.0
    sched_difficulty_temperature: float = 1.0
    sched_rank_use_cosine: bool = False

    eval_n_validation: int = 64
    eval_n_test: int = 200
    eval_r2_threshold: float = 0.3

    log_records: bool = True

    # -- key mapping ------------------------------------------------------
    @staticmethod
    def attr(key: str) -> str:
        return key.replace(".", "_")

    @classmethod
    def keys(cls) -> list[str]:
        out = []
        for f in dataclasses.fields(cls):
            head, _, rest = f.name.partition("_")
            out.append(f"{head}.{rest}" if head in _SECTIONS and rest else f.name)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        preset = raw.get("preset")
        values = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
            values.update(PRESETS[preset])
        values.update(raw)
        known = set(cls.keys())
        unknown = sorted(k for k in values if k not in known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {cls.attr(k): v for k, v in values.items()}
        if "meta_hidden" in kwargs:
            kwargs["meta_hidden"] = tuple(int(h) for h in kwargs["meta_hidden"])
        return cls(**kwargs).validated()

    def to_dict(self) -> dict:
        d = {}
        for key in self.keys():
            v = getattr(self, self.attr(key))
            d[key] = list(v) if isinstance(v, tuple) else v
        return d

    def override(self, **changes) -> "ExperimentConfig":
        """Copy with dotted or attribute-style keys replaced."""
        d = self.to_dict()
        for k, v in changes.items():
            d[k if k in d else k.replace("_", ".", 1)] = v
        return ExperimentConfig.from_dict(d)

    # -- defaults and checks ----------------------------------------------
    def resolved(self) -> "ExperimentConfig":
        cls_task = self.family == "blobs"
        noise = self.regime == "noise"
        fill = {}
        if self.task_k_shot is None:
            fill["task_k_shot"] = 1 if cls_task else 10
        if self.budget_size is None:
            fill["budget_size"] = 16 if cls_task else 8
        if self.meta_batch_size is None:
            fill["meta_batch_size"] = 8 if (noise and not cls_task) else 2
        if self.meta_pool_size is None:
            if not noise:
                fill["meta_pool_size"] = 6
            elif cls_task:
                fill["meta_pool_size"] = 15 if self.noise_task_fraction >= 0.8 else 10
            else:
                fill["meta_pool_size"] = 20
        if self.ats_tau is None:
            # the sinusoid noise pool samples 8 of 20; at 0.1 the softmax puts ~90% of the
            # mass on one task and the other slots are filled almost at random
            fill["ats_tau"] = (0.1 if cls_task else 0.3) if noise else 1.0
        if self.ats_warm_start_iters is None:
            fill["ats_warm_start_iters"] = 200 if noise else 0
        return dataclasses.replace(self, **fill).validated() if fill else self

    def validated(self) -> "ExperimentConfig":
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {SCHEDULERS}")
        for name in ("meta_alpha", "meta_beta", "ats_gamma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name.replace('_', '.', 1)} must be positive")
        if self.ats_tau is not None and not self.ats_tau > 0:
            raise ConfigError("ats.tau must be positive")
        if not 0.0 <= self.noise_task_fraction <= 1.0:
            raise ConfigError("noise.task_fraction must be in [0, 1]")
        if self.noise_eta < 0 or not 0.0 <= self.noise_flip_ratio <= 1.0:
            raise ConfigError("noise.eta must be >= 0 and noise.flip_ratio in [0, 1]")
        if not 0.0 < self.ats_baseline_decay < 1.0:
            raise ConfigError("ats.baseline_decay must be in (0, 1)")
        if self.meta_max_iterations < 1 or self.meta_inner_steps < 1:
            raise ConfigError("meta.max_iterations and meta.inner_steps must be >= 1")
        if self.ats_encoder not in ats.ENCODERS:
            raise ConfigError(f"ats.encoder must be one of {ats.ENCODERS}")
        if self.ats_sim_measure not in ("cosine", "inner_product"):
            raise ConfigError("ats.sim_measure must be cosine or inner_product")
        if self.ats_reward_metric not in ("auto", "r2", "neg_loss", "accuracy"):
            raise ConfigError("ats.reward_metric must be auto, r2, neg_loss or accuracy")
        b, p = self.meta_batch_size, self.meta_pool_size
        if b is not None and p is not None and b > p:
            raise ConfigError(f"meta.batch_size {b} exceeds meta.pool_size {p}")
        if self.regime == "budget" and self.family == "sinusoid" and p is not None \
                and self.budget_size is not None and p > self.budget_size:
            raise ConfigError(f"pool of {p} exceeds the budget of {self.budget_size} tasks")
        return self


_SECTIONS = ("task", "noise", "budget", "meta", "ats", "sched", "eval", "log")

# Desk presets: the iteration budget is a tenth of the reference setting, so
# the outer rate is scaled up by ten; the policy rate is raised so the
# scheduler can move within that budget.
PRESETS = {
    "reference": {},
    "desk": {"meta.beta": 0.01, "ats.gamma": 0.1},
}


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping")
    raw.update(overrides or {})
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------

def _seed_rng(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _SEED_PURPOSES[purpose]]))


def _blob_universe(stream: str) -> tg.BlobUniverse:
    return tg.BlobUniverse.default(BLOB_UNIVERSE_SIZES[stream], seed=BLOB_UNIVERSE_SEEDS[stream])


def _maker(cfg: ExperimentConfig, stream: str):
    if cfg.family == "sinusoid":
        return lambda rng, tid: tg.gen_sinusoid_task(rng, cfg.task_k_shot, cfg.task_q_size,
                                                     task_id=tid)
    universe = _blob_universe(stream)
    return lambda rng, tid: tg.gen_blob_classification_task(
        rng, cfg.task_n_way, cfg.task_k_shot, cfg.task_q_size, universe, task_id=tid)


def _fixed_tasks(cfg: ExperimentConfig, stream: str, n: int) -> list:
    source = tg.TaskSource(_maker(cfg, stream), stream)
    rng = tg.stream_rng(cfg.seed, stream)
    return [source(rng) for _ in range(n)]


def _corruptor(cfg: ExperimentConfig):
    if cfg.family == "sinusoid":
        return lambda task, rng: tg.add_gaussian_label_noise(task, cfg.noise_eta, rng)
    matrix = tg.FlipMatrix.symmetric(cfg.task_n_way, cfg.noise_flip_ratio)
    return lambda task, rng: tg.flip_support_labels(task, matrix, rng)


def build_streams(cfg: ExperimentConfig) -> ats.Streams:
    """Train source, fixed clean validation and test sets; identical for every scheduler."""
    cfg = cfg.resolved()
    val = _fixed_tasks(cfg, "validation", cfg.eval_n_validation)
    test = _fixed_tasks(cfg, "test", cfg.eval_n_test)
    if cfg.regime == "noise":
        return ats.Streams(tg.TaskSource(_maker(cfg, "train"), "train"), val, test,
                           _corruptor(cfg), cfg.noise_task_fraction)
    kind = tg.REGRESSION if cfg.family == "sinusoid" else tg.CLASSIFICATION
    universe = tg.limited_budget_universe(
        cfg.budget_size, _seed_rng(cfg.seed, "universe"), kind=kind, n_way=cfg.task_n_way,
        k_shot=cfg.task_k_shot, q_size=cfg.task_q_size,
        universe=_blob_universe("train") if kind == tg.CLASSIFICATION else None)
    return ats.Streams(universe, val, test, None, 0.0)


def build_arch(cfg: ExperimentConfig) -> ml.Arch:
    if cfg.family == "sinusoid":
        return ml.Arch(1, tuple(cfg.meta_hidden), 1, tg.REGRESSION)
    return ml.Arch(2, tuple(cfg.meta_hidden), cfg.task_n_way, tg.CLASSIFICATION)


def make_scheduler(cfg: ExperimentConfig) -> sc.Scheduler:
    name = cfg.scheduler
    if name == "uniform":
        return sc.UniformScheduler()
    if name == "spl":
        return sc.SPLScheduler(cfg.sched_spl_growth, cfg.sched_spl_epoch_iters)
    if name == "focal":
        return sc.FocalScheduler(cfg.sched_focal_gamma)
    if name == "difficulty":
        return sc.DifficultyScheduler(cfg.sched_difficulty_temperature)
    if name == "rank_ratio":
        return sc.RankRatioScheduler(cfg.meta_batch_size, cfg.sched_rank_use_cosine)
    raise ConfigError(f"{name!r} is not a hand-designed scheduler")


def make_policy(cfg: ExperimentConfig) -> ats.SchedulerPolicy:
    return ats.init_policy(_seed_rng(cfg.seed, "policy"), tau=cfg.ats_tau, encoder=cfg.ats_encoder,
                           use_loss=cfg.scheduler != "ats_sim", use_sim=cfg.scheduler != "ats_loss",
                           hidden=cfg.ats_hidden, sim_measure=cfg.ats_sim_measure)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass
class RunArtifact:
    metrics: dict
    series: list
    config: dict
    seed: int
    records: list = field(default_factory=list, repr=False)
    records_path: str | None = None


def _series_row(rec: ats.EpisodeRecord) -> dict:
    w = np.asarray(rec.weights)
    noisy = np.asarray(rec.noisy, dtype=bool)
    chosen = rec.resampled or rec.sampled
    return {
        "iteration": rec.iteration,
        "phase": rec.phase,
        "train_loss": rec.train_loss,
        "mean_reward": rec.mean_reward,
        "baseline": rec.baseline,
        "advantage": rec.advantage,
        "weight_clean": float(w[~noisy].mean()) if (~noisy).any() else None,
        "weight_noisy": float(w[noisy].mean()) if noisy.any() else None,
        "batch_noisy_fraction": float(np.mean([rec.noisy[i] for i in chosen])) if chosen else None,
    }


def _pretrain(model, cfg: ExperimentConfig):
    source = tg.TaskSource(_maker(cfg, "pretrain"), "pretrain")
    rng = _seed_rng(cfg.seed, "pretrain")
    for _ in range(cfg.meta_pretrain_iters):
        batch = [source(rng) for _ in range(cfg.meta_batch_size)]
        model = ml.outer_update(model, batch, cfg.meta_alpha, cfg.meta_beta, cfg.meta_inner_steps)
    return model


def _finetune(model, cfg: ExperimentConfig, validation):
    rng = _seed_rng(cfg.seed, "finetune")
    b = min(cfg.meta_batch_size, len(validation))
    for _ in range(cfg.meta_finetune_iters):
        idx = rng.choice(len(validation), size=b, replace=False)
        model = ml.outer_update(model, [validation[i] for i in idx], cfg.meta_alpha,
                                cfg.meta_beta, cfg.meta_inner_steps)
    return model


def weight_separation(records: Sequence, start_fraction: float = 2 / 3) -> dict:
    """Clean vs noisy sampling weights over the tail of training (one-sided rank test)."""
    tail = list(records)[int(len(records) * start_fraction):]
    clean = [w for r in tail for w, n in zip(_get(r, "weights"), _get(r, "noisy")) if not n]
    noisy = [w for r in tail for w, n in zip(_get(r, "weights"), _get(r, "noisy")) if n]
    out = {"n_clean": len(clean), "n_noisy": len(noisy),
           "mean_weight_clean": float(np.mean(clean)) if clean else None,
           "mean_weight_noisy": float(np.mean(noisy)) if noisy else None, "p_value": None}
    if clean and noisy:
        out["p_value"] = float(stats.mannwhitneyu(clean, noisy, alternative="greater").pvalue)
    return out


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> RunArtifact:
    """Train with the configured scheduler, evaluate on the clean test set, persist artifacts."""
    cfg = cfg.resolved()
    out = out if out is not None else cfg.out
    streams = build_streams(cfg)
    model = ml.init_model(build_arch(cfg), _seed_rng(cfg.seed, "model"))
    if cfg.meta_pretrain_iters:
        model = _pretrain(model, cfg)
    neural = cfg.scheduler in NEURAL_SCHEDULERS
    policy = make_policy(cfg) if neural else None
    scheduler = None if neural else make_scheduler(cfg)
    mode = {"random_phi": "random_phi", "reweight": "reweight"}.get(
        cfg.scheduler, "ats" if neural else "fixed")
    state = ats.BiLevelState(
        model, policy, ats.RewardBaseline(cfg.ats_baseline_decay, normalize=cfg.ats_advantage_norm),
        alpha=cfg.meta_alpha, beta=cfg.meta_beta, gamma=cfg.ats_gamma,
        pool_size=cfg.meta_pool_size, batch_size=cfg.meta_batch_size, n_val=cfg.ats_n_val,
        inner_steps=cfg.meta_inner_steps)
    options = ats.TrainOptions(cfg.meta_max_iterations,
                               cfg.ats_warm_start_iters if mode in ("ats", "reweight") else 0,
                               mode, cfg.ats_reward_metric, cfg.ats_reward_pairing, cfg.seed)

    records, series = [], []
    out_dir = Path(out) if out is not None else None
    fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if cfg.log_records:
            fh = open(out_dir / "records.jsonl", "w")
            fh.write(json.dumps({**RECORD_SCHEMA, "fields": [f.name for f in dataclasses.fields(
                ats.EpisodeRecord)]}, sort_keys=True) + "\n")

    def sink(rec):
        records.append(rec)
        series.append(_series_row(rec))
        if fh is not None:
            fh.write(rec.to_json() + "\n")

    try:
        state = ats.ats_train(state, streams, options, sink, scheduler)
    finally:
        if fh is not None:
            fh.close()
    model = state.meta_model
    # every method gets the same fine-tune pass on the clean validation tasks
    if cfg.meta_finetune_iters:
        model = _finetune(model, cfg, streams.validation)

    test = ml.evaluate(model, streams.test, cfg.meta_alpha, cfg.meta_inner_steps,
                       cfg.eval_r2_threshold)
    metrics = {"scheduler": cfg.scheduler, "regime": cfg.regime, "family": cfg.family,
               "seed": cfg.seed, "iterations": state.iteration,
               "test": {k: v for k, v in test.items() if not k.endswith("per_task")},
               "test_loss_per_task": test["loss_per_task"]}
    if cfg.regime == "noise" and neural:
        metrics["weights"] = weight_separation(records)
    # the output location is not part of the experiment, so repeated runs write identical files
    config = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    artifact = RunArtifact(metrics, series, config, cfg.seed, records,
                           str(out_dir / "records.jsonl") if fh is not None else None)
    if out_dir is not None:
        write_artifact(artifact, out_dir)
    return artifact


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_artifact(artifact: RunArtifact, out_dir: Path) -> None:
    (out_dir / "metrics.json").write_text(json.dumps(artifact.metrics, sort_keys=True, indent=1) + "\n")
    (out_dir / "config.json").write_text(json.dumps(artifact.config, sort_keys=True, indent=1) + "\n")
    with open(out_dir / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_FIELDS)
        for row in artifact.series:
            w.writerow([_fmt(row[k]) for k in SERIES_FIELDS])


def read_records(path: str | Path) -> list[dict]:
    """Episode records from a log written by :func:`run_experiment` (header line checked)."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != RECORD_SCHEMA["schema"]:
            raise ConfigError(f"{path} is not an episode record log")
        if header.get("version") != RECORD_SCHEMA["version"]:
            raise ConfigError(f"unsupported record log version {header.get('version')}")
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# sweeps and ablations
# ---------------------------------------------------------------------------

def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, schedulers: Sequence[str] = ("uniform", "ats"),
          runner: Callable = run_experiment, out: str | Path | None = None) -> list[dict]:
    """One run per (value, scheduler); failures are recorded and the sweep continues."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    key = SWEEP_AXES[axis]
    rows = []
    for v in values:
        for name in schedulers:
            row = {"axis": axis, "value": v, "scheduler": name}
            try:
                c = cfg.override(**{key: v, "scheduler": name})
                cell_out = Path(out) / f"{axis}={v}" / name if out is not None else None
                art = runner(c, cell_out) if runner is run_experiment else runner(c)
                row.update(status="ok", test=art.metrics["test"])
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                row.update(status="error", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    return rows


def ablation_suite(cfg: ExperimentConfig, runner: Callable = run_experiment,
                   out: str | Path | None = None) -> list[dict]:
    """Ablation rows sharing seed and streams; the full model is labelled φ+Loss+Sim."""
    rows = []
    for label, name in ABLATION_ROWS:
        c = cfg.override(scheduler=name)
        cell_out = Path(out) / name if out is not None else None
        art = runner(c, cell_out) if runner is run_experiment else runner(c)
        rows.append({"label": label, "scheduler": name, "test": art.metrics["test"]})
    return rows


# ---------------------------------------------------------------------------
# weight/factor analysis
# ---------------------------------------------------------------------------

def _get(rec, key):
    return rec[key] if isinstance(rec, dict) else getattr(rec, key)


def rank_normalize(weights) -> np.ndarray:
    """Ranks scaled to [0, 1] within one pool (average ranks for ties)."""
    w = np.asarray(weights, dtype=float)
    if w.size == 1:
        return np.array([0.5])
    return (stats.rankdata(w) - 1.0) / (w.size - 1)


def weight_factor_analysis(records: Sequence, n_bins: int = 20,
                           factors: Sequence[str] = ("query_loss", "grad_similarity", "cosine"),
                           start_fraction: float = 0.0) -> dict:
    """Bin pool tasks by within-pool weight rank; per-bin factor mean and standard error.

    Also returns the clean/noisy weight distributions and the rank correlation
    between bin index and each factor's bin mean.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to analyse")
    records = records[int(len(records) * start_fraction):]
    ranks, fac, weights, noisy = [], {f: [] for f in factors}, [], []
    for rec in records:
        fl = _get(rec, "factors")
        if not fl:
            continue
        ranks.extend(rank_normalize(_get(rec, "weights")))
        weights.extend(_get(rec, "weights"))
        noisy.extend(_get(rec, "noisy"))
        for f in factors:
            fac[f].extend(d[f] for d in fl)
    n_points = len(ranks)
    if n_points == 0:
        raise ValueError("records carry no factors")
    reduced = n_points < n_bins
    bins = min(n_bins, n_points)
    ranks = np.asarray(ranks)
    idx = np.minimum((ranks * bins).astype(int), bins - 1)
    table = []
    for b in range(bins):
        m = idx == b
        row = {"bin": b, "count": int(m.sum())}
        for f in factors:
            v = np.asarray(fac[f])[m]
            row[f"{f}_mean"] = float(v.mean()) if v.size else None
            row[f"{f}_stderr"] = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else None
        table.append(row)
    trend = {}
    for f in factors:
        xs = [r["bin"] for r in table if r[f"{f}_mean"] is not None]
        ys = [r[f"{f}_mean"] for r in table if r[f"{f}_mean"] is not None]
        if len(xs) > 2 and np.ptp(ys) > 0:
            rho, p = stats.spearmanr(xs, ys)
            trend[f] = {"spearman": float(rho), "p_value": float(p)}
        else:
            trend[f] = {"spearman": 0.0, "p_value": 1.0}
    weights = np.asarray(weights)
    noisy = np.asarray(noisy, dtype=bool)
    edges = np.linspace(0.0, max(float(weights.max()), 1e-12), 21)
    dist = {}
    for name, m in (("clean", ~noisy), ("noisy", noisy)):
        dist[name] = {"count": int(m.sum()),
                      "mean": float(weights[m].mean()) if m.any() else None,
                      "histogram": np.histogram(weights[m], bins=edges)[0].tolist()}
    return {"n_bins": bins, "bins_reduced": reduced, "n_points": n_points, "table": table,
            "trend": trend, "weights": dist, "bin_edges": edges.tolist()}


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def _config_from_args(args) -> ExperimentConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.scheduler is not None:
        overrides["scheduler"] = args.scheduler
    if args.out is not None:
        overrides["out"] = args.out
    return load_config(args.config, overrides)


def _dump(obj, out_dir: str | None, name: str) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / name).write_text(text + "\n")
    print(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metasched", description="Task scheduling for meta-learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML or JSON file with dotted keys")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--scheduler", default=None, choices=SCHEDULERS)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    common(sub.add_parser("train", help="one run"))
    p = sub.add_parser("sweep", help="runs over one axis for several schedulers")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--schedulers", default="uniform,ats")
    common(sub.add_parser("ablate", help="ablation table"))
    p = sub.add_parser("verify-theory", help="numerical checks of the weighting identities")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--n-prop1", type=int, default=200)
    p.add_argument("--n-prop2", type=int, default=500)
    p = sub.add_parser("analyze", help="weight/factor analysis of a records file")
    p.add_argument("--records", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--start-fraction", type=float, default=0.0)
    p.add_argument("--out", default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            cfg = _config_from_args(args)
            art = run_experiment(cfg)
            print(json.dumps({"scheduler": cfg.scheduler, "seed": cfg.seed, "test": art.metrics["test"]},
                             sort_keys=True))
        elif args.command == "sweep":
            cfg = _config_from_args(args)
            values = [yaml.safe_load(v) for v in args.values.split(",") if v.strip()]
            rows = sweep(cfg, args.axis, values, args.schedulers.split(","), out=cfg.out)
            _dump(rows, cfg.out, "sweep.json")
            if any(r["status"] != "ok" for r in rows):
                print("error: some sweep cells failed", file=sys.stderr)
                return 1
        elif args.command == "ablate":
            cfg = _config_from_args(args)
            _dump(ablation_suite(cfg, out=cfg.out), cfg.out, "ablation.json")
        elif args.command == "verify-theory":
            res = theoryx.verify_theory(args.seed, args.n_prop1, args.n_prop2)
            for name in ("prop1", "prop1_taylor", "prop2"):
                status = "PASS" if res[name]["pass"] else "FAIL"
                detail = {k: v for k, v in res[name].items() if k not in ("pass", "residuals")}
                print(f"{name:<13} {status}  {json.dumps(detail, sort_keys=True)}")
            if args.out is not None:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "theory.json").write_text(json.dumps(res, sort_keys=True, indent=1) + "\n")
            if not res["pass"]:
                return 1
        elif args.command == "analyze":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = weight_factor_analysis(read_records(args.records), args.bins,
                                             start_fraction=args.start_fraction)
            _dump(res, args.out, "analysis.json")
    except (ConfigError, tg.ConfigError, ValueError, OSError, ats.TrainingAborted, yaml.YAMLError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
