"""Dense numeric core: parameter bundles, a recording tape, reverse-mode gradients.

Tensors are plain float64 ``numpy`` arrays. A computation is recorded by
``forward_record(f, params, *inputs)``: each parameter is wrapped in a
:class:`Var` leaf and every primitive applied to a ``Var`` appends one node
to the tape owned by its operands. ``backward`` walks that tape in reverse
recording order and returns a :class:`ParamSet` of gradients.

Only first-order reverse mode is provided. Tapes are single-use.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class NumkitError(Exception):
    """Base class for numeric-core failures."""


class ShapeError(NumkitError):
    pass


class NumericError(NumkitError):
    """Non-finite value produced or consumed."""


class UnsupportedPrimitiveError(NumkitError):
    pass


class TapeConsumedError(NumkitError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _frozen(x) -> np.ndarray:
    a = np.array(x, dtype=np.float64)
    a.flags.writeable = False
    return a


class ParamSet(Mapping[str, np.ndarray]):
    """Immutable mapping ``name -> array`` iterated in lexicographic name order."""

    __slots__ = ("_data", "_names")

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = dict(entries)
        self._names = tuple(sorted(items))
        self._data = {k: _frozen(items[k]) for k in self._names}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {self._data[k].shape}" for k in self._names)
        return f"ParamSet({shapes})"

    @property
    def size(self) -> int:
        return sum(v.size for v in self._data.values())

    def flatten(self) -> np.ndarray:
        if not self._names:
            return np.zeros(0)
        return np.concatenate([self._data[k].ravel() for k in self._names])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        """Inverse of :meth:`flatten` using this set's names and shapes."""
        vec = _as_array(vec)
        if vec.shape != (self.size,):
            raise ShapeError(f"expected flat vector of length {self.size}, got {vec.shape}")
        out, pos = {}, 0
        for k in self._names:
            shape = self._data[k].shape
            n = self._data[k].size
            out[k] = vec[pos:pos + n].reshape(shape)
            pos += n
        return ParamSet(out)

    def merge(self, other: "ParamSet") -> "ParamSet":
        clash = set(self._names) & set(other)
        if clash:
            raise ValueError(f"duplicate parameter names: {sorted(clash)}")
        return ParamSet({**self._data, **dict(other.items())})

    def subset(self, names: Iterable[str]) -> "ParamSet":
        return ParamSet({k: self._data[k] for k in names})

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._data.items()})

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        if self._names != tuple(other):
            raise ShapeError("parameter sets have different names")
        return ParamSet({k: fn(self._data[k], other[k]) for k in self._names})

    def allclose(self, other: "ParamSet", **kw) -> bool:
        return self._names == tuple(other) and all(
            np.allclose(self._data[k], other[k], **kw) for k in self._names)

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        return self._names == tuple(other) and all(
            self._data[k].shape == other[k].shape
            and np.array_equal(self._data[k], other[k]) for k in self._names)


class Tape:
    """Ordered record of primitive applications for one computation."""

    __slots__ = ("nodes", "leaves", "consumed", "output")

    def __init__(self):
        self.nodes: list[tuple[Var, tuple, Callable]] = []
        self.leaves: dict[str, Var] = {}
        self.consumed = False
        self.output: Var | None = None

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    """A value recorded on a tape. Only the primitives in this module accept it."""

    __slots__ = ("value", "tape", "__weakref__")
    __array_ufunc__ = None  # numpy ufuncs applied to a Var raise TypeError

    def __init__(self, value: np.ndarray, tape: Tape):
        self.value = value
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __array__(self, *a, **k):
        raise UnsupportedPrimitiveError("numpy operation applied to a recorded value")

    # arithmetic sugar maps onto primitives
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def _val(x):
    return x.value if isinstance(x, Var) else _as_array(x)


def _find_tape(args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _record(out: np.ndarray, inputs: tuple, vjp: Callable) -> Var | np.ndarray:
    """Append a node; with no recorded operand the op is evaluated eagerly."""
    tape = _find_tape(inputs)
    if tape is None:
        return out
    v = Var(out, tape)
    tape.nodes.append((v, inputs, vjp))
    return v


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _check_broadcast(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "add")
    return _record(av + bv, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "sub")
    return _record(av - bv, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "mul")
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float):
    c = float(c)
    return _record(_val(a) * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def affine(x, w, b):
    """``x @ w + b`` for ``x`` (n, d_in), ``w`` (d_in, d_out), ``b`` (d_out,)."""
    xv, wv, bv = _val(x), _val(w), _val(b)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"affine: input {xv.shape} vs weight {wv.shape}")
    if bv.shape != (wv.shape[1],):
        raise ShapeError(f"affine: bias {bv.shape} vs weight {wv.shape}")
    return _record(xv @ wv + bv, (x, w, b),
                   lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def tanh(x):
    y = np.tanh(_val(x))
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * _val(x)))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    xv = _val(x)
    d = np.where(xv > 0, 1.0, slope)
    return _record(xv * d, (x,), lambda g: (g * d,))


def exp(x):
    y = np.exp(_val(x))
    return _record(y, (x,), lambda g: (g * y,))


def log(x):
    xv = _val(x)
    if np.any(xv <= 0):
        raise NumericError("log of non-positive value")
    return _record(np.log(xv), (x,), lambda g: (g / xv,))


def softmax(x, axis: int = -1):
    xv = _val(x)
    e = np.exp(xv - xv.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _record(y, (x,), vjp)


def log_softmax(x, axis: int = -1):
    xv = _val(x)
    z = xv - xv.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(y)
    return _record(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def mean(x):
    xv = _val(x)
    n = xv.size
    return _record(np.asarray(xv.mean()), (x,), lambda g: (np.full(xv.shape, g / n),))


def sum_all(x):
    xv = _val(x)
    return _record(np.asarray(xv.sum()), (x,), lambda g: (np.full(xv.shape, g * 1.0),))


def squared_error(pred, target):
    """Mean squared error (a scalar)."""
    pv, tv = _val(pred), _val(target)
    if pv.shape != tv.shape:
        raise ShapeError(f"squared_error: {pv.shape} vs {tv.shape}")
    diff = pv - tv
    n = diff.size
    return _record(np.asarray((diff * diff).mean()), (pred, target),
                   lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; ``labels`` are integer class indices (constant)."""
    lv = _val(logits)
    lab = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2 or lab.shape != (lv.shape[0],):
        raise ShapeError(f"cross_entropy: logits {lv.shape}, labels {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= lv.shape[1]):
        raise ShapeError("cross_entropy: label out of range")
    z = lv - lv.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = lv.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, lab].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, lab] -= 1.0
        return (g * d / n,)
    return _record(np.asarray(loss), (logits,), vjp)


def concat(xs: Sequence, axis: int = -1):
    vals = [_val(x) for x in xs]
    try:
        y = np.concatenate(vals, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _record(y, tuple(xs), vjp)


def take(x, index, axis: int = -1):
    """Gather along ``axis`` with a constant integer (or slice) index."""
    xv = _val(x)
    idx = index if isinstance(index, slice) else np.asarray(index)
    sl = [slice(None)] * xv.ndim
    sl[axis] = idx
    sl = tuple(sl)
    y = xv[sl]

    def vjp(g):
        out = np.zeros_like(xv)
        np.add.at(out, sl, g)
        return (out,)
    return _record(np.array(y), (x,), vjp)


def transpose(x):
    xv = _val(x)
    if xv.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {xv.shape}")
    return _record(xv.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape):
    xv = _val(x)
    return _record(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def lstm_step(x, state, w, b):
    """One LSTM cell step.

    ``state`` packs ``[h, c]`` as an (n, 2H) array; ``w`` is (d_in + H, 4H) with
    gate blocks ordered input, forget, output, candidate. Returns the new packed
    state.
    """
    xv, sv, wv, bv = _val(x), _val(state), _val(w), _val(b)
    hdim = sv.shape[1] // 2
    if wv.shape != (xv.shape[1] + hdim, 4 * hdim) or bv.shape != (4 * hdim,):
        raise ShapeError(f"lstm_step: x {xv.shape}, state {sv.shape}, w {wv.shape}, b {bv.shape}")
    h, c = sv[:, :hdim], sv[:, hdim:]
    z = np.concatenate([xv, h], axis=1)
    pre = z @ wv + bv
    gates = 0.5 * (1.0 + np.tanh(0.5 * pre[:, :3 * hdim]))
    i, f, o = gates[:, :hdim], gates[:, hdim:2 * hdim], gates[:, 2 * hdim:]
    cand = np.tanh(pre[:, 3 * hdim:])
    c_new = f * c + i * cand
    tc = np.tanh(c_new)
    h_new = o * tc
    out = np.concatenate([h_new, c_new], axis=1)

    def vjp(g):
        gh, gc = g[:, :hdim], g[:, hdim:]
        dc = gc + gh * o * (1.0 - tc * tc)
        do = gh * tc
        di = dc * cand
        df = dc * c
        dcand = dc * i
        dpre = np.concatenate([
            di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o),
            dcand * (1.0 - cand * cand)], axis=1)
        dz = dpre @ wv.T
        dstate = np.concatenate([dz[:, xv.shape[1]:], dc * f], axis=1)
        return dz[:, :xv.shape[1]], dstate, z.T @ dpre, dpre.sum(axis=0)
    return _record(out, (x, state, w, b), vjp)


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "matmul": matmul,
    "affine": affine, "tanh": tanh, "sigmoid": sigmoid, "leaky_relu": leaky_relu,
    "exp": exp, "log": log, "softmax": softmax, "log_softmax": log_softmax,
    "mean": mean, "sum_all": sum_all, "squared_error": squared_error,
    "cross_entropy": cross_entropy, "concat": concat, "take": take,
    "reshape": reshape, "transpose": transpose, "lstm_step": lstm_step,
}


# ---------------------------------------------------------------------------
# recording and differentiation
# ---------------------------------------------------------------------------

def forward_record(f: Callable, params: ParamSet, *inputs) -> tuple[np.ndarray, Tape]:
    """Evaluate ``f(p, *inputs)`` with every entry of ``params`` recorded as a leaf.

    ``p`` is a dict of :class:`Var`; ``inputs`` are passed as constants.
    Returns the output value and the tape needed by :func:`backward`.
    """
    tape = Tape()
    leaves = {k: Var(params[k], tape) for k in params}
    tape.leaves = leaves
    try:
        out = f(leaves, *[_as_array(x) for x in inputs])
    except TypeError as e:
        if "Var" in str(e) or "unsupported operand" in str(e) or "__array_ufunc__" in str(e):
            raise UnsupportedPrimitiveError(str(e)) from e
        raise
    if isinstance(out, Var):
        if out.tape is not tape:
            raise UnsupportedPrimitiveError("output recorded on a foreign tape")
        value = out.value
    elif isinstance(out, np.ndarray) or np.isscalar(out):
        # output independent of the parameters
        value = _as_array(out)
        out = Var(value, tape)
    else:
        raise UnsupportedPrimitiveError(f"computation returned {type(out).__name__}")
    if not np.all(np.isfinite(value)):
        raise NumericError("non-finite output in forward_record")
    tape.output = out
    return value, tape


def backward(tape: Tape, seed=1.0) -> ParamSet:
    """Reverse pass; returns d<seed, output>/d(param) for every recorded parameter."""
    if tape.consumed:
        raise TapeConsumedError("tape already consumed; re-record to differentiate again")
    out = tape.output
    if out is None:
        raise NumkitError("tape has no recorded output")
    seed = _as_array(seed)
    if seed.shape != out.value.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {out.value.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(out): seed}
    for node, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parts = vjp(g)
        for inp, gi in zip(inputs, parts):
            if isinstance(inp, Var):
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    result = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(id(leaf))
        result[name] = np.zeros_like(leaf.value) if g is None else g
    for name, g in result.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
    return ParamSet(result)


def value_and_grad(f: Callable, params: ParamSet, *inputs) -> tuple[float, ParamSet]:
    """Convenience: scalar output of ``f`` and its gradient."""
    value, tape = forward_record(f, params, *inputs)
    return float(value), backward(tape, 1.0)


def evaluate(f: Callable, params: ParamSet, *inputs) -> np.ndarray:
    value, _ = forward_record(f, params, *inputs)
    return value


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    """Pure update ``p - lr * g`` for every entry."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if tuple(params) != tuple(grads):
        raise ShapeError(f"gradient names {list(grads)} do not match parameters {list(params)}")
    out = {}
    for k in params:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient entry in {k!r}")
        out[k] = params[k] - lr * g
    return ParamSet(out)
