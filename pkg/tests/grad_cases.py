"""Finite-difference gradient cases for every differentiable op.

Each case builds float64 inputs for one of several shapes and a function
mapping input Tensors to an output Tensor. The output is contracted with a
fixed random projection so the checked quantity is a scalar.
"""

from __future__ import annotations

import numpy as np

from nervc import tensor as T
from nervc.tensor import Tensor

H = 1e-4
TOL = 1e-4


def numeric_grad(fn, arrays, index, h=H):
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = fn(arrays)
        x[i] = orig - h
        down = fn(arrays)
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check(op, arrays, seed=0):
    """Largest relative error between analytic and numeric gradients over all inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe_shape = op(*[Tensor(a) for a in arrays]).shape
    proj = np.random.default_rng(seed + 99).normal(size=probe_shape)

    def scalar(arrs):
        with T.no_grad():
            return float(np.sum(op(*[Tensor(a) for a in arrs]).data * proj))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = T.tsum(T.mul(op(*leaves), Tensor(proj)))
    analytic = T.backward(loss, leaves)
    return max(rel_error(analytic[i], numeric_grad(scalar, arrays, i)) for i in range(len(arrays)))


def _rng(seed):
    return np.random.default_rng(seed)


def _shapes(*shapes):
    return list(shapes)


def _dropout(x):
    return T.dropout(x, 0.3, True, np.random.default_rng(5))


def _make_cases():
    cases = {}

    def unary(name, fn, shapes):
        def make(shape, seed):
            return fn, [_rng(seed).normal(size=shape)]
        cases[name] = [(make, s) for s in shapes]

    elem = _shapes((3,), (2, 3), (4, 1, 2), (2, 3, 4), (1, 5, 2, 2))
    unary("gelu", T.gelu, elem)
    unary("scale", lambda x: T.scale(x, -1.7), elem)
    unary("dropout", _dropout, elem)
    unary("tsum_axis", lambda x: T.tsum(x, axis=-1, keepdims=True), elem)
    unary("mean", lambda x: T.mean(x, axis=0), elem)
    unary("reshape", lambda x: T.reshape(x, (-1,)), elem)
    unary("transpose", lambda x: T.transpose(x), elem)
    unary("softmax", lambda x: T.softmax(x, axis=-1), elem)
    unary("l2_normalize", lambda x: T.l2_normalize(x, axes=(-1,)), elem)
    unary("repeat", lambda x: T.repeat(x, 3, axis=0), elem)
    unary("tile", lambda x: T.tile(x, 2, axis=-1), elem)
    unary("getitem_slice", lambda x: x[1:], _shapes((3,), (3, 2), (4, 1, 2), (2, 3, 4), (2, 5, 2, 2)))
    unary("getitem_fancy", lambda x: x[np.array([0, 1, 0, 1])],
          _shapes((2,), (2, 3), (3, 1, 2), (2, 3, 4), (4, 5, 2, 2)))
    unary("swapaxes", lambda x: T.swapaxes(x, 0, -1), _shapes((2, 3), (4, 1, 2), (2, 3, 4), (1, 5, 2, 2), (3, 3)))
    unary("pixel_shuffle", lambda x: T.pixel_shuffle(x, 2),
          _shapes((1, 4, 1, 1), (2, 8, 2, 3), (1, 12, 3, 3), (2, 4, 2, 2), (1, 16, 1, 2)))
    unary("pixel_unshuffle", lambda x: T.pixel_unshuffle(x, 2),
          _shapes((1, 1, 2, 2), (2, 2, 4, 6), (1, 3, 6, 6), (2, 1, 4, 4), (1, 4, 2, 4)))

    def binary(name, fn, shape_pairs):
        def make(shapes, seed):
            r = _rng(seed)
            return fn, [r.normal(size=s) for s in shapes]
        cases[name] = [(make, s) for s in shape_pairs]

    same = [(s, s) for s in elem]
    bcast = [((2, 3), (3,)), ((4, 1, 2), (1, 3, 2)), ((2, 3, 4), (1,)), ((3,), (2, 3)), ((5, 1), (1, 4))]
    binary("add", T.add, same + bcast)
    binary("sub", T.sub, same + bcast)
    binary("mul", T.mul, same + bcast)

    def make_mse(shape, seed):
        r = _rng(seed)
        target = r.normal(size=shape)  # constant: the loss is differentiated in pred only
        return (lambda p: T.mse_loss(p, target)), [r.normal(size=shape)]
    cases["mse_loss"] = [(make_mse, s) for s in elem]
    binary("matmul", T.matmul, [((5, 7), (7, 3)), ((1, 4), (4, 1)), ((2, 3, 4), (2, 4, 5)),
                                ((3, 2, 4), (4, 2)), ((2, 2, 3, 3), (2, 2, 3, 2))])
    binary("concat", lambda a, b: T.concat([a, b], axis=0),
           [((2,), (3,)), ((1, 3), (2, 3)), ((2, 2, 2), (1, 2, 2)), ((3, 1), (3, 1)), ((1, 4, 2, 2), (2, 4, 2, 2))])

    def make_linear(shapes, seed):
        r = _rng(seed)
        x, w, b = (r.normal(size=s) for s in shapes)
        return T.linear, [x, w, b]
    cases["linear"] = [(make_linear, s) for s in [((2, 3), (3, 4), (4,)), ((5, 1), (1, 2), (2,)),
                                                    ((2, 3, 4), (4, 2), (2,)), ((1, 6), (6, 6), (6,)),
                                                    ((3, 2, 2, 3), (3, 5), (5,))]]

    def make_ln(shape, seed):
        r = _rng(seed)
        return (lambda x, g, b: T.layer_norm(x, g, b)), [r.normal(size=shape), r.normal(size=shape[-1:]),
                                                          r.normal(size=shape[-1:])]
    cases["layer_norm"] = [(make_ln, s) for s in _shapes((4,), (2, 3), (3, 1, 5), (2, 3, 4), (1, 2, 2, 6))]

    def make_conv(spec, seed):
        b, cin, cout, k, g, hw = spec
        r = _rng(seed)
        x = r.normal(size=(b, cin, hw[0], hw[1]))
        kern = r.normal(size=(cout, cin // g, k, k))
        bias = r.normal(size=(cout,))
        return (lambda x_, k_, b_: T.conv2d(x_, k_, b_, groups=g)), [x, kern, bias]
    cases["conv2d"] = [(make_conv, s) for s in [(1, 4, 2, 3, 1, (5, 5)), (2, 2, 4, 1, 2, (3, 4)),
                                                 (1, 6, 3, 3, 3, (4, 3)), (2, 4, 4, 5, 2, (5, 6)),
                                                 (1, 1, 2, 3, 1, (1, 1))]]
    return cases


CASES = _make_cases()


def all_cases():
    """(op name, case index, builder, shape spec) tuples in a fixed order."""
    out = []
    for name, entries in CASES.items():
        for i, (make, spec) in enumerate(entries):
            out.append((name, i, make, spec))
    return out


def run_case(make, spec, seed) -> float:
    fn, arrays = make(spec, seed)
    return check(fn, arrays, seed)
