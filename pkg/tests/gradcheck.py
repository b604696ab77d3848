"""Randomized finite-difference checks for every differentiable op.

Each case builds float64 inputs of a random shape, reduces the op output to
a scalar through a fixed random projection, and compares the analytic
gradient of every input against central differences.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from rkd import tensor as T
from oracles import numeric_grad, relative_error

EPS = 1e-5
TOL = 1e-4
SAMPLES = 12


@dataclass
class Case:
    op: str
    shapes: list
    fn: Callable  # Tensors -> Tensor (non-scalar allowed)
    arrays: list


def _conv(rng):
    n, c, cout = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 9)
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(k, 17)), int(rng.integers(k, 17))
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((cout, c, k, k))
    b = rng.standard_normal(cout)
    return Case("conv2d", [x.shape, wt.shape, b.shape],
                lambda x, w, b: T.conv2d(x, w, b, stride, pad), [x, wt, b])


def _linear(rng):
    n, fin, fout = (int(v) for v in rng.integers(1, 9, size=3))
    x, w, b = rng.standard_normal((n, fin)), rng.standard_normal((fout, fin)), rng.standard_normal(fout)
    return Case("linear", [x.shape, w.shape, b.shape],
                lambda x, w, b: T.linear(x, w, b), [x, w, b])


def _matmul(rng):
    a, b, c = (int(v) for v in rng.integers(1, 9, size=3))
    x, y = rng.standard_normal((a, b)), rng.standard_normal((b, c))
    return Case("matmul", [x.shape, y.shape], lambda x, y: T.matmul(x, y), [x, y])


def _bn(rng, training):
    n, c = int(rng.integers(2, 5)), int(rng.integers(1, 9))
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    x = rng.standard_normal((n, c, h, w)) * 2 + 0.5
    g, b = rng.standard_normal(c), rng.standard_normal(c)
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def fn(x, g, b):
        return T.batch_norm(x, g, b, rm.copy(), rv.copy(), training)

    return Case(f"batch_norm[{'train' if training else 'eval'}]", [x.shape, g.shape, b.shape], fn, [x, g, b])


def _elementwise(rng, name):
    shape = tuple(int(v) for v in rng.integers(1, 6, size=int(rng.integers(1, 5))))
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    if name == "relu":
        a = a + np.sign(a) * 0.05  # keep away from the kink
        return Case(name, [shape], lambda a: T.relu(a), [a])
    if name == "square":
        return Case(name, [shape], lambda a: T.square(a), [a])
    if name == "add[broadcast]":
        bb = rng.standard_normal(shape[-1:])
        return Case(name, [shape, bb.shape], lambda a, b: T.add(a, b), [a, bb])
    op = {"add": T.add, "sub": T.sub, "mul": T.mul}[name]
    return Case(name, [shape, shape], lambda a, b: op(a, b), [a, b])


def _reduce(rng, name):
    shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
    a = rng.standard_normal(shape)
    axis = None if rng.random() < 0.3 else int(rng.integers(0, 3))
    if name == "reshape":
        return Case(name, [shape], lambda a: T.reshape(a, (-1,)), [a])
    op = T.tsum if name == "sum" else T.mean
    return Case(f"{name}[axis={axis}]", [shape], lambda a: op(a, axis=axis), [a])


def _pool(rng):
    n, c = int(rng.integers(1, 5)), int(rng.integers(1, 9))
    k = int(rng.choice([2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
    h, w = int(rng.integers(k, 17)), int(rng.integers(k, 17))
    x = rng.standard_normal((n, c, h, w))
    return Case("avg_pool2d", [x.shape], lambda x: T.avg_pool2d(x, k, stride, pad), [x])


def _gap(rng):
    x = rng.standard_normal(tuple(int(v) for v in rng.integers(1, 9, size=4)))
    return Case("global_avg_pool", [x.shape], lambda x: T.global_avg_pool(x), [x])


def _softmaxes(rng, name):
    n, c = int(rng.integers(1, 9)), int(rng.integers(2, 11))
    z = rng.standard_normal((n, c)) * 3
    if name == "softmax_cross_entropy":
        y = np.eye(c)[rng.integers(0, c, n)]
        return Case(name, [z.shape], lambda z: T.softmax_cross_entropy(z, T.Tensor(y)), [z])
    op = T.softmax if name == "softmax" else T.log_softmax
    return Case(name, [z.shape], lambda z: op(z), [z])


BUILDERS = [
    _conv, _conv, _conv, _conv, _linear, _matmul,
    lambda r: _bn(r, True), lambda r: _bn(r, False), _pool, _gap,
    lambda r: _elementwise(r, "add"), lambda r: _elementwise(r, "add[broadcast]"),
    lambda r: _elementwise(r, "sub"), lambda r: _elementwise(r, "mul"),
    lambda r: _elementwise(r, "square"), lambda r: _elementwise(r, "relu"),
    lambda r: _reduce(r, "sum"), lambda r: _reduce(r, "mean"), lambda r: _reduce(r, "reshape"),
    lambda r: _softmaxes(r, "softmax"), lambda r: _softmaxes(r, "log_softmax"),
    lambda r: _softmaxes(r, "softmax_cross_entropy"),
]


def make_cases(seed: int = 0, rounds: int = 2) -> list[Case]:
    rng = np.random.default_rng(seed)
    return [build(rng) for _ in range(rounds) for build in BUILDERS]


def check_case(case: Case, seed: int = 0) -> float:
    """Worst relative error over all inputs of ``case``."""
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        with T.no_grad():
            proj = rng.standard_normal(case.fn(*[T.Tensor(a) for a in case.arrays]).shape)

        def scalar(*arrays):
            with T.no_grad():
                return float((case.fn(*[T.Tensor(a) for a in arrays]).data * proj).sum())

        leaves = [T.Tensor(a.copy(), requires_grad=True) for a in case.arrays]
        T.backward(T.tsum(T.mul(case.fn(*leaves), T.Tensor(proj))))
        worst = 0.0
        for i, leaf in enumerate(leaves):
            size = case.arrays[i].size
            coords = rng.choice(size, min(size, SAMPLES), replace=False)
            num = numeric_grad(scalar, [a.copy() for a in case.arrays], i, coords, EPS)
            ana = leaf.grad.reshape(-1)[coords]
            worst = max(worst, relative_error(ana, num))
    return worst
