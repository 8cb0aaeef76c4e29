"""Finite-difference oracle and random op compositions shared by gradient tests."""

import numpy as np

from metasched import numkit as nk

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def fd_grad(f, params: nk.ParamSet, *inputs, eps=FD_STEP) -> nk.ParamSet:
    """Central differences of the scalar ``f(params, *inputs)`` evaluated eagerly."""
    out = {}
    for name in params:
        base = np.array(params[name])
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            for sign in (1, -1):
                bumped = base.copy()
                bumped[idx] += sign * eps
                p = dict(params)
                p[name] = bumped
                g[idx] += sign * float(f(p, *inputs))
            g[idx] /= 2 * eps
        out[name] = g
    return nk.ParamSet(out)


def max_violation(analytic: nk.ParamSet, numeric: nk.ParamSet,
                  rel=REL_TOL, floor=ABS_FLOOR) -> float:
    """Largest |a - n| / max(rel * |n|, floor) ratio; <= 1 means within tolerance."""
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        ratio = np.abs(a - n) / np.maximum(rel * np.abs(n), floor)
        worst = max(worst, float(ratio.max()) if ratio.size else 0.0)
    return worst


def check(f, params, *inputs) -> float:
    _, g = nk.value_and_grad(f, params, *inputs)
    return max_violation(g, fd_grad(f, params, *inputs))


# each entry: (name, fn(x, p) -> y) keeping a (3, 4) shaped intermediate
_UNARY = [
    ("tanh", lambda x, p: nk.tanh(x)),
    ("sigmoid", lambda x, p: nk.sigmoid(x)),
    ("leaky_relu", lambda x, p: nk.leaky_relu(x)),
    ("exp", lambda x, p: nk.exp(nk.scale(nk.tanh(x), 0.5))),
    ("log", lambda x, p: nk.log(nk.add(nk.sigmoid(x), 0.5))),
    ("softmax", lambda x, p: nk.softmax(x, axis=1)),
    ("log_softmax", lambda x, p: nk.log_softmax(x, axis=0)),
    ("scale", lambda x, p: nk.scale(x, -1.7)),
    ("add", lambda x, p: nk.add(x, p["b"])),
    ("sub", lambda x, p: nk.sub(p["b"], x)),
    ("mul", lambda x, p: nk.mul(x, p["b"])),
    ("broadcast_add", lambda x, p: nk.add(x, p["v"])),
    ("matmul", lambda x, p: nk.matmul(x, p["w"])),
    ("affine", lambda x, p: nk.affine(x, p["w"], p["v"])),
    ("concat_take", lambda x, p: nk.take(nk.concat([x, p["b"]], axis=1), np.array([0, 5, 2, 7]), axis=1)),
    ("transpose2", lambda x, p: nk.transpose(nk.matmul(nk.transpose(x), p["s"]))),
    ("reshape", lambda x, p: nk.reshape(nk.reshape(x, (4, 3)), (3, 4))),
    ("lstm", lambda x, p: nk.take(nk.lstm_step(x, nk.concat([x, p["b"]], axis=1), p["lw"], p["lb"]),
                                  slice(0, 4), axis=1)),
]

_HEADS = [
    ("sum_proj", lambda y, p, r: nk.sum_all(nk.mul(y, r))),
    ("mean", lambda y, p, r: nk.mean(nk.mul(y, y))),
    ("squared_error", lambda y, p, r: nk.squared_error(y, r)),
    ("cross_entropy", lambda y, p, r: nk.cross_entropy(y, np.array([0, 3, 1]))),
]


def composition_params(rng) -> nk.ParamSet:
    return nk.ParamSet({
        "x": rng.normal(size=(3, 4)),
        "b": rng.normal(size=(3, 4)),
        "v": rng.normal(size=4),
        "w": rng.normal(size=(4, 4)) * 0.5,
        "s": rng.normal(size=(3, 3)) * 0.5,
        "lw": rng.normal(size=(8, 16)) * 0.4,
        "lb": rng.normal(size=16) * 0.1,
    })


def random_composition(rng, depth=None):
    """A random scalar function of the composition params, depth 1..6."""
    depth = depth or int(rng.integers(1, 7))
    ops = [_UNARY[i] for i in rng.integers(len(_UNARY), size=depth)]
    head = _HEADS[int(rng.integers(len(_HEADS)))]
    r = rng.normal(size=(3, 4))

    def f(p):
        y = p["x"]
        for _, op in ops:
            y = op(y, p)
        return head[1](y, p, r)

    names = [n for n, _ in ops] + [head[0]]
    return f, names


def composition_case(seed: int) -> tuple[float, list]:
    rng = np.random.default_rng(seed)
    params = composition_params(rng)
    f, names = random_composition(rng)
    return check(f, params), names
