import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck as gc
from metasched import numkit as nk


def P(**kw):
    return nk.ParamSet({k: np.asarray(v, dtype=float) for k, v in kw.items()})


# -- ParamSet ---------------------------------------------------------------

def test_paramset_sorted_and_readonly():
    p = P(b=[1.0], a=[[1.0, 2.0]])
    assert list(p) == ["a", "b"]
    with pytest.raises(ValueError):
        p["a"][0, 0] = 5.0


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2**31 - 1))
def test_flatten_unflatten_round_trip(dims, seed):
    rng = np.random.default_rng(seed)
    p = nk.ParamSet({f"p{i}": rng.normal(size=(d, i + 1)) for i, d in enumerate(dims)})
    assert p.unflatten(p.flatten()).equal(p)


def test_unflatten_rejects_wrong_length():
    with pytest.raises(nk.ShapeError):
        P(a=[1.0, 2.0]).unflatten(np.zeros(3))


def test_merge_rejects_duplicates():
    with pytest.raises(ValueError):
        P(a=[1.0]).merge(P(a=[2.0]))


# -- forward/backward examples ------------------------------------------------

def test_identity_records_nothing():
    value, tape = nk.forward_record(lambda p, x: x, nk.ParamSet(), np.array([3.0, 4.0]))
    np.testing.assert_array_equal(value, [3.0, 4.0])
    assert len(tape) == 0


def test_mean_squared_error_value():
    value, _ = nk.forward_record(lambda p: nk.squared_error(p["a"], np.zeros(2)), P(a=[1.0, 2.0]))
    assert float(value) == 2.5


def test_scalar_identity_gradient():
    value, tape = nk.forward_record(lambda p: p["x"], P(x=5.0))
    assert float(nk.backward(tape, 1.0)["x"]) == 1.0


def test_linear_map_gradient():
    f = lambda p, x: nk.sum_all(nk.mul(p["w"], x))
    _, g = nk.value_and_grad(f, P(w=[0.0, 0.0, 0.0]), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(g["w"], [1.0, 2.0, 3.0])


def _mlp(p, x):
    h = nk.leaky_relu(nk.affine(x, p["w0"], p["b0"]))
    h = nk.leaky_relu(nk.affine(h, p["w1"], p["b1"]))
    return nk.affine(h, p["w2"], p["b2"])


def _mlp_straight(p, x):
    lr = lambda z: np.where(z > 0, z, 0.01 * z)
    h = lr(x @ p["w0"] + p["b0"])
    h = lr(h @ p["w1"] + p["b1"])
    return h @ p["w2"] + p["b2"]


def test_wide_mlp_matches_tape_free_evaluation():
    rng = np.random.default_rng(0)
    p = P(w0=rng.normal(size=(3, 500)) * 0.5, b0=rng.normal(size=500) * 0.1,
          w1=rng.normal(size=(500, 500)) * 0.05, b1=rng.normal(size=500) * 0.1,
          w2=rng.normal(size=(500, 1)) * 0.05, b2=np.zeros(1))
    x = rng.normal(size=(7, 3))
    value, _ = nk.forward_record(_mlp, p, x)
    expected = _mlp_straight(dict(p), x)
    np.testing.assert_allclose(value, expected, rtol=1e-12, atol=0)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    p = P(w0=rng.normal(size=(2, 6)), b0=rng.normal(size=6) * 0.1,
          w1=rng.normal(size=(6, 5)) * 0.4, b1=rng.normal(size=5) * 0.1,
          w2=rng.normal(size=(5, 1)) * 0.4, b2=np.zeros(1))
    x, y = rng.normal(size=(8, 2)), rng.normal(size=8)
    f = lambda q, x, y: nk.squared_error(nk.reshape(_mlp(q, x), (-1,)), y)
    assert gc.check(f, p, x, y) <= 1.0


@pytest.mark.parametrize("name", [n for n, _ in gc._UNARY])
def test_each_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = gc.composition_params(rng)
    op = dict(gc._UNARY)[name]
    r = rng.normal(size=(3, 4))
    f = lambda p: nk.sum_all(nk.mul(op(p["x"], p), r))
    assert gc.check(f, params) <= 1.0


@pytest.mark.parametrize("head", [n for n, _ in gc._HEADS])
def test_each_loss_head_matches_finite_differences(head):
    rng = np.random.default_rng(3)
    params = gc.composition_params(rng)
    fn = dict(gc._HEADS)[head]
    r = rng.normal(size=(3, 4))
    assert gc.check(lambda p: fn(nk.tanh(p["x"]), p, r), params) <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_random_compositions_match_finite_differences(seed):
    worst, names = gc.composition_case(seed)
    assert worst <= 1.0, names


def test_lstm_gradient_wrt_all_inputs():
    rng = np.random.default_rng(5)
    p = P(x=rng.normal(size=(2, 3)), s=rng.normal(size=(2, 8)), w=rng.normal(size=(7, 16)) * 0.5,
          b=rng.normal(size=16) * 0.1)
    r = rng.normal(size=(2, 8))
    f = lambda q: nk.sum_all(nk.mul(nk.lstm_step(q["x"], q["s"], q["w"], q["b"]), r))
    assert gc.check(f, p) <= 1.0


# -- properties -------------------------------------------------------------

@given(st.integers(0, 10**6))
@settings(max_examples=20, deadline=None)
def test_backward_is_linear_in_seed(seed):
    rng = np.random.default_rng(seed)
    params = gc.composition_params(rng)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    f = lambda p: nk.tanh(nk.affine(p["x"], p["w"], p["v"]))

    def grad(s):
        _, tape = nk.forward_record(f, params)
        return nk.backward(tape, s).flatten()
    np.testing.assert_allclose(grad(a + b), grad(a) + grad(b), rtol=0, atol=1e-12)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(9)
        params = gc.composition_params(rng)
        f, _ = gc.random_composition(rng, depth=6)
        return nk.value_and_grad(f, params)
    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2 and g1.equal(g2)


# -- errors -----------------------------------------------------------------

def test_tape_is_single_use():
    _, tape = nk.forward_record(lambda p: nk.sum_all(p["a"]), P(a=[1.0]))
    nk.backward(tape)
    with pytest.raises(nk.TapeConsumedError):
        nk.backward(tape)


def test_seed_shape_checked():
    _, tape = nk.forward_record(lambda p: p["a"], P(a=[1.0, 2.0]))
    with pytest.raises(nk.ShapeError):
        nk.backward(tape, 1.0)


def test_unsupported_numpy_op_rejected():
    with pytest.raises(nk.UnsupportedPrimitiveError):
        nk.forward_record(lambda p: np.sin(p["a"]), P(a=[1.0]))


def test_shape_mismatch_rejected():
    with pytest.raises(nk.ShapeError):
        nk.forward_record(lambda p: nk.matmul(p["a"], p["a"]), P(a=np.ones((2, 3))))


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_output_rejected():
    with pytest.raises(nk.NumericError):
        nk.forward_record(lambda p: nk.exp(p["a"]), P(a=[1000.0]))


# -- sgd_step -----------------------------------------------------------------

def test_sgd_step_examples():
    assert float(nk.sgd_step(P(p=1.0), P(p=2.0), 0.5)["p"]) == 0.0
    np.testing.assert_array_equal(nk.sgd_step(P(p=[1.0, 1.0]), P(p=[0.0, 0.0]), 0.01)["p"], [1.0, 1.0])


def test_sgd_step_is_pure():
    p = P(p=[1.0])
    nk.sgd_step(p, P(p=[1.0]), 0.1)
    assert float(p["p"][0]) == 1.0


def test_sgd_step_names_non_finite_entry():
    with pytest.raises(nk.NumericError, match="'bad'"):
        nk.sgd_step(P(ok=[1.0], bad=[1.0]), P(ok=[0.0], bad=[np.nan]), 0.1)


def test_sgd_step_rejects_mismatched_names_and_lr():
    with pytest.raises(nk.ShapeError):
        nk.sgd_step(P(a=[1.0]), P(b=[1.0]), 0.1)
    with pytest.raises(ValueError):
        nk.sgd_step(P(a=[1.0]), P(a=[1.0]), 0.0)
