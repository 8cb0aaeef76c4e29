import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck as gc
from metasched import ats
from metasched import metalearn as ml
from metasched import numkit as nk
from metasched import schedulers as sc
from metasched import taskgen as tg
from metasched.metalearn import TaskFactors


def rng(seed=0):
    return np.random.default_rng(seed)


def random_factors(seed, n, progress=0.3):
    g = rng(seed)
    return [TaskFactors(100 + 7 * i, float(g.uniform(0.1, 5)), float(g.normal()),
                        float(g.uniform(-1, 1)), float(g.uniform(0, 3)), float(g.uniform(0, 3)),
                        progress) for i in g.permutation(n)]


def policy(seed=0, **kw):
    return ats.init_policy(rng(seed), **kw)


# -- policy scoring --------------------------------------------------------------

@pytest.mark.parametrize("encoder", ats.ENCODERS)
def test_identical_factors_give_exactly_uniform_weights(encoder):
    f = [TaskFactors(i, 1.5, 0.2, 0.3, 1.0, 2.0, 0.4) for i in range(7)]
    w = ats.score_pool_neural(policy(encoder=encoder), f)
    assert np.all(w == w[0]) and w.sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("encoder", ats.ENCODERS)
def test_permuting_pool_permutes_weights(encoder):
    p = policy(1, encoder=encoder)
    f = random_factors(2, 8)
    perm = rng(3).permutation(8)
    w = ats.score_pool_neural(p, f)
    wp = ats.score_pool_neural(p, [f[i] for i in perm])
    np.testing.assert_array_equal(wp, w[perm])


@pytest.mark.parametrize("n", [3, 4, 5])
def test_sampled_task_distribution_invariant_to_pool_order(n):
    p = policy(4, tau=1.0)
    f = random_factors(5, n)
    perm = rng(6).permutation(n)
    w, wp = ats.score_pool_neural(p, f), ats.score_pool_neural(p, [f[i] for i in perm])

    def dist(weights, factors):
        out = {}
        for draw in itertools.permutations(range(n), 2):
            key = tuple(factors[i].task_id for i in draw)
            out[key] = math.exp(sc.ordered_log_prob(weights, draw))
        return out

    a, b = dist(w, f), dist(wp, [f[i] for i in perm])
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-14)


def test_recorded_and_eager_scores_agree():
    p, f = policy(7), random_factors(8, 6)
    handle, value = ats._record_scores(p, f)
    w = ats.score_pool_neural(p, f)
    np.testing.assert_allclose(handle.weights, w, rtol=1e-13, atol=1e-15)
    e = np.exp(value - value.max())
    np.testing.assert_allclose(w, e / e.sum(), rtol=1e-13)


def test_small_temperature_gives_one_hot_at_argmax():
    f = random_factors(9, 6)
    base = policy(10, tau=1.0)
    _, logits = ats._record_scores(base, f)
    cold = ats.SchedulerPolicy(base.params, tau=1e-4)
    w = ats.score_pool_neural(cold, f)
    assert int(np.argmax(w)) == int(np.argmax(logits))
    gap = np.sort(logits)[-1] - np.sort(logits)[-2]
    assert 1.0 - w.max() <= (len(f) - 1) * math.exp(-gap / 1e-4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=10), st.data())
def test_softmax_head_monotone_in_own_logit(scores, data):
    s = np.array(scores)
    i = data.draw(st.integers(0, len(scores) - 1))
    bumped = s.copy()
    bumped[i] += 0.5
    w, wb = ats._softmax(s), ats._softmax(bumped)
    assert wb.sum() == pytest.approx(1.0) and wb[i] > w[i]


def test_non_finite_factor_names_task():
    f = random_factors(11, 4)
    bad = TaskFactors(f[2].task_id, float("nan"), 0.0, 0.0, 1.0, 1.0, 0.0)
    f[2] = bad
    with pytest.raises(nk.NumericError, match=str(bad.task_id)):
        ats.score_pool_neural(policy(), f)


def test_non_finite_logit_names_task():
    p = policy(12)
    broken = p.with_params(p.params.map(lambda a: a * np.inf if a.shape == (1,) and a.ndim == 1 else a))
    f = random_factors(13, 3)
    with pytest.raises(nk.NumericError, match="task"):
        ats.score_pool_neural(broken, f)


def test_ablation_variants_have_expected_encoders():
    assert not any(k.startswith("sim") for k in policy(use_sim=False).params)
    assert not any(k.startswith("loss") for k in policy(use_loss=False).params)
    assert "loss.enc.w" in policy(encoder="mlp").params
    with pytest.raises(ValueError):
        policy(tau=0.0)


# -- Plackett-Luce -------------------------------------------------------------------

def test_plackett_luce_matches_ordered_log_prob():
    p, f = policy(14, tau=1.0), random_factors(15, 6)
    handle, value = ats._record_scores(p, f)
    w = ats._softmax(value)
    for idx in [(0,), (3, 1), (5, 0, 2, 4)]:
        lp = ats.plackett_luce_log_prob(handle.scores, idx).value
        assert float(lp) == pytest.approx(sc.ordered_log_prob(w, idx), abs=1e-10)


@pytest.mark.parametrize("encoder", ats.ENCODERS)
def test_log_prob_gradient_matches_finite_differences(encoder):
    p, f = policy(16, tau=1.0, encoder=encoder), random_factors(17, 5)
    idx = (4, 0)
    loss_x, sim_x = None, None
    order, inverse = ats._sorted_view(f)
    loss_x, sim_x = ats.factor_inputs([f[i] for i in order])

    def logp(q):
        s = nk.take(ats.policy_scores(q, loss_x, sim_x, 0.3, p), inverse, axis=0)
        return ats.plackett_luce_log_prob(s, idx)

    g = ats.policy_log_prob_grad(p, f, idx)
    assert gc.max_violation(g, gc.fd_grad(logp, p.params)) <= 1.0


# -- baseline and REINFORCE ---------------------------------------------------------

def test_baseline_seeded_then_moving_average():
    b = ats.RewardBaseline()
    assert b.advantage(0.7) == 0.0
    b = b.update(0.7)
    assert b.value == 0.7
    assert b.advantage(0.9) == pytest.approx(0.2)
    b = b.update(0.9)
    assert b.value == pytest.approx(0.9 * 0.7 + 0.1 * 0.9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_baseline_stays_within_reward_range(rewards):
    b = ats.RewardBaseline()
    for r in rewards:
        b = b.update(r)
    assert min(rewards) - 1e-12 <= b.value <= max(rewards) + 1e-12


def _batch(weights, idx):
    return sc.SampledBatch(tuple(idx), sc.ordered_log_prob(weights, idx), weights)


def test_reinforce_no_update_when_reward_equals_baseline():
    p, f = policy(18), random_factors(19, 5)
    base = ats.RewardBaseline().update(0.5)
    new, _, adv = ats.reinforce_update(p, f, _batch(np.ones(5) / 5, (0, 1)), 0.5, base, 0.1)
    assert adv == 0.0 and new.params.equal(p.params)


def test_reinforce_no_update_on_single_task_pool():
    p, f = policy(20), random_factors(21, 1)
    base = ats.RewardBaseline().update(0.1)
    new, _, adv = ats.reinforce_update(p, f, _batch(np.ones(1), (0,)), 0.9, base, 0.1)
    assert adv != 0.0 and new.params.equal(p.params)


@pytest.mark.parametrize("reward,direction", [(0.9, 1), (0.1, -1)])
def test_reinforce_sign_moves_batch_probability(reward, direction):
    p, f = policy(22, tau=1.0), random_factors(23, 6)
    w = ats.score_pool_neural(p, f)
    idx = (2, 5)
    base = ats.RewardBaseline().update(0.5)
    new, nb, adv = ats.reinforce_update(p, f, _batch(w, idx), reward, base, 1e-3)
    w2 = ats.score_pool_neural(new, f)
    change = sc.ordered_log_prob(w2, idx) - sc.ordered_log_prob(w, idx)
    assert np.sign(change) == direction and np.sign(adv) == direction
    assert nb.value == pytest.approx(0.9 * 0.5 + 0.1 * reward)


def test_baseline_keeps_estimator_unbiased_and_reduces_variance():
    p, f = policy(24, tau=1.0), random_factors(25, 6)
    w = ats.score_pool_neural(p, f)
    g = rng(26)
    rewards = {i: 0.5 + 0.1 * i for i in range(6)}
    b = 0.75
    plain, centred = [], []
    for _ in range(300):
        idx = sc.sample_without_replacement(w, 2, g).indices
        r = float(np.mean([rewards[i] for i in idx]))
        grad = ats.policy_log_prob_grad(p, f, idx).flatten()
        plain.append(r * grad)
        centred.append((r - b) * grad)
    plain, centred = np.array(plain), np.array(centred)
    se = np.sqrt(plain.var(axis=0, ddof=1) / len(plain) + centred.var(axis=0, ddof=1) / len(centred))
    diff = np.abs(plain.mean(axis=0) - centred.mean(axis=0))
    assert np.all(diff <= 4 * se + 1e-12)
    assert np.mean(centred.var(axis=0) <= plain.var(axis=0)) >= 0.9


# -- temporal step and rewards ---------------------------------------------------------

def reg_model(seed=0):
    return ml.init_model(ml.Arch(1, (16, 16)), rng(seed))


def test_temporal_step_equals_outer_update_bitwise():
    m = reg_model()
    g = rng(27)
    batch = [tg.gen_sinusoid_task(g, 10, 15) for _ in range(3)]
    before = m.params.flatten().tobytes()
    t = ats.temporal_meta_step(m, batch, 0.01, 0.01, 5)
    assert t.params.equal(ml.outer_update(m, batch, 0.01, 0.01, 5).params)
    assert m.params.flatten().tobytes() == before


def test_temporal_step_with_zero_beta_is_identity():
    m = reg_model()
    batch = [tg.gen_sinusoid_task(rng(28), 10, 15)]
    assert ats.temporal_meta_step(m, batch, 0.01, 0.0, 5).params.equal(m.params)


def test_uninformed_classifier_reward_near_chance():
    # a negligible inner rate keeps the random head uninformed by the support set
    arch = ml.Arch(2, (32, 32), 5, tg.CLASSIFICATION)
    m = ml.init_model(arch, rng(29))
    g = rng(30)
    tasks = [tg.gen_blob_classification_task(g, 5, 1, 15) for _ in range(50)]
    _, mean = ats.validation_reward(m, tasks, 1e-8, 5)
    assert 0.15 <= mean <= 0.25


def test_perfect_model_reward_is_one():
    arch = ml.Arch(2, (8,), 5, tg.CLASSIFICATION)
    m = ml.init_model(arch, rng(31))
    g = rng(32)
    tasks = []
    for _ in range(4):
        t = tg.gen_blob_classification_task(g, 5, 2, 6)
        a = ml.adapt(m, t.support, 5, 0.01)
        tasks.append(t.replace(query_labels=ml.predict(a, t.query_inputs).argmax(axis=1)))
    rewards, mean = ats.validation_reward(m, tasks, 0.01, 5)
    assert rewards == [1.0] * 4 and mean == 1.0


def test_regression_reward_is_clipped_r2():
    m = reg_model()
    t = tg.gen_sinusoid_task(rng(33), 10, 15)
    r = ats.task_reward(m, t, 0.01, 5)
    r2 = ml.task_metric(m, t, 0.01, 5)["r2"]
    assert r == min(max(r2, 0.0), 1.0)
    assert ats.task_reward(m, t, 0.01, 5, "neg_loss") == -ml.task_metric(m, t, 0.01, 5)["loss"]


# -- driver -----------------------------------------------------------------------------

def small_setup(seed=0, mode_policy=True, pool=6, batch=2, noisy=0.5):
    make = lambda g, i: tg.gen_sinusoid_task(g, 5, 5, task_id=i)
    val = [make(tg.stream_rng(seed, "validation"), i) for i in range(6)]
    streams = ats.Streams(tg.TaskSource(make, "train"), val, [],
                          corrupt=lambda t, g: tg.add_gaussian_label_noise(t, 2.0, g),
                          noisy_fraction=noisy)
    pol = ats.init_policy(rng(seed + 1), tau=1.0) if mode_policy else None
    state = ats.BiLevelState(ml.init_model(ml.Arch(1, (8, 8)), rng(seed)), pol, ats.RewardBaseline(),
                             alpha=0.01, beta=0.01, gamma=0.01, pool_size=pool, batch_size=batch,
                             n_val=3, inner_steps=2)
    return state, streams


def run(mode="ats", iters=6, warm=0, scheduler=None, seed=0, **kw):
    state, streams = small_setup(seed, **kw)
    recs = []
    ats.ats_train(state, streams, ats.TrainOptions(max_iters=iters, warm_start_iters=warm,
                                                   mode=mode, seed=seed), recs.append, scheduler)
    return state, recs


def test_ats_records_are_consistent():
    state, recs = run(iters=5)
    assert [r.iteration for r in recs] == list(range(5)) and state.iteration == 5
    for r in recs:
        assert len(r.task_ids) == 6 and sum(r.weights) == pytest.approx(1.0, abs=1e-9)
        assert len(set(r.sampled)) == 2 and len(set(r.resampled)) == 2
        assert len(r.rewards) == 3 and r.mean_reward == pytest.approx(np.mean(r.rewards))
    assert recs[0].advantage == 0.0


def test_warm_start_freezes_meta_model_but_trains_policy():
    state0, _ = small_setup()
    before = state0.meta_model.params.flatten().tobytes()
    pol_before = state0.policy.params
    state, recs = run(iters=4, warm=4)
    assert state.meta_model.params.flatten().tobytes() == before
    assert all(r.phase == "warm_start" for r in recs)
    assert not state.policy.params.equal(pol_before)


def test_joint_training_moves_meta_model():
    state0, _ = small_setup()
    state, recs = run(iters=3, warm=1)
    assert [r.phase for r in recs] == ["warm_start", "joint", "joint"]
    assert not state.meta_model.params.equal(state0.meta_model.params)


def test_training_is_deterministic():
    a, ra = run(iters=4)
    b, rb = run(iters=4)
    assert a.meta_model.params.equal(b.meta_model.params) and a.policy.params.equal(b.policy.params)
    assert [r.to_json() for r in ra] == [r.to_json() for r in rb]


def test_random_phi_draws_fresh_policy_each_iteration():
    state0, _ = small_setup()
    state, recs = run("random_phi", iters=3)
    assert not state.policy.params.equal(state0.policy.params)
    assert all(r.rewards == [] for r in recs)


def test_reweight_mode_uses_whole_pool():
    _, recs = run("reweight", iters=3)
    assert all(r.resampled == list(range(6)) for r in recs)


def test_fixed_mode_with_uniform_scheduler():
    state, recs = run("fixed", iters=3, scheduler=sc.UniformScheduler(), mode_policy=False)
    assert all(r.weights == pytest.approx([1 / 6] * 6) for r in recs)
    assert all(r.factors == [] for r in recs)


def test_failure_aborts_with_iteration_index():
    state, streams = small_setup()
    calls = {"n": 0}

    def corrupt(t, g):
        calls["n"] += 1
        if calls["n"] > 4:
            raise nk.NumericError("boom")
        return t

    streams.corrupt = corrupt
    with pytest.raises(ats.TrainingAborted) as err:
        ats.ats_train(state, streams, ats.TrainOptions(max_iters=10))
    assert err.value.iteration >= 1 and isinstance(err.value.cause, nk.NumericError)


def test_state_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        small_setup(pool=2, batch=3)
    m = reg_model()
    with pytest.raises(ValueError):
        ats.BiLevelState(m, None, ats.RewardBaseline(), beta=0.0)


def test_episode_record_round_trip():
    _, recs = run(iters=2)
    for r in recs:
        back = ats.EpisodeRecord.from_dict(json.loads(r.to_json()))
        assert back.to_json() == r.to_json()
