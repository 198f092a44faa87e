"""Randomized finite-difference cases, one builder per layer kind.

Each builder takes a Generator and returns ``(loss_fn, leaves)`` where the
loss is ``sum(layer(x) * R)`` for a fixed random projection ``R``.
"""

import numpy as np

from screenpipe.nn import Tensor, functional as F


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _project(rng, fn, leaves):
    out_shape = fn().shape
    r = rng.normal(size=out_shape)
    return (lambda: (fn() * r).sum()), leaves


def case_conv2d(rng):
    x, w, b = _leaf(rng, 2, 3, 7, 7), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    stride, pad = [(1, 1), (2, 1), (1, 0)][rng.integers(3)]
    return _project(rng, lambda: F.conv2d(x, w, b, stride, pad), [x, w, b])


def case_conv2d_transpose(rng):
    x, w, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 3, 2, 4, 4), _leaf(rng, 2)
    stride, pad = [(2, 1), (1, 0), (2, 0)][rng.integers(3)]
    return _project(rng, lambda: F.conv2d_transpose(x, w, b, stride, pad), [x, w, b])


def case_dense(rng):
    x, w, b = _leaf(rng, 5, 7), _leaf(rng, 7, 3), _leaf(rng, 3)
    return _project(rng, lambda: F.dense(x, w, b), [x, w, b])


def case_maxpool2x2(rng):
    side = int(rng.choice([4, 5]))
    x = _leaf(rng, 2, 2, side, side)
    return _project(rng, lambda: F.maxpool2x2(x), [x])


def case_upsample2x(rng):
    x = _leaf(rng, 2, 3, 3, 4)
    return _project(rng, lambda: F.upsample2x(x), [x])


def case_concat(rng):
    a, b = _leaf(rng, 2, 2, 3, 3), _leaf(rng, 2, 3, 3, 3)
    return _project(rng, lambda: F.concat([a, b]), [a, b])


def case_relu(rng):
    x = _leaf(rng, 3, 4, 3)
    return _project(rng, lambda: F.relu(x), [x])


def case_leaky_relu(rng):
    x = _leaf(rng, 3, 4, 3)
    return _project(rng, lambda: F.leaky_relu(x, 0.2), [x])


def case_sigmoid(rng):
    x = _leaf(rng, 3, 5, scale=3.0)
    return _project(rng, lambda: F.sigmoid(x), [x])


def case_tanh(rng):
    x = _leaf(rng, 3, 5)
    return _project(rng, lambda: F.tanh(x), [x])


def case_softmax(rng):
    x = _leaf(rng, 4, 3, scale=2.0)
    return _project(rng, lambda: F.softmax(x), [x])


def case_dropout(rng):
    x = _leaf(rng, 4, 6)
    seed = int(rng.integers(1 << 30))
    return _project(rng, lambda: F.dropout(x, 0.3, seed, training=True), [x])


def case_batchnorm2d(rng):
    x = _leaf(rng, 3, 2, 3, 3)
    g, b = _leaf(rng, 2), _leaf(rng, 2)
    training = bool(rng.integers(2))
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, size=2)

    def fn():
        # running stats are copied so repeated forwards see identical state
        return F.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training=training)

    return _project(rng, fn, [x, g, b])


def case_global_avg_pool(rng):
    x = _leaf(rng, 2, 3, 4, 5)
    return _project(rng, lambda: F.global_avg_pool(x), [x])


def case_flatten(rng):
    x = _leaf(rng, 2, 3, 2, 2)
    return _project(rng, lambda: F.flatten(x), [x])


def case_softmax_cross_entropy(rng):
    x = _leaf(rng, 5, 3)
    t = np.eye(3)[rng.integers(3, size=5)]
    return (lambda: F.softmax_cross_entropy(x, t)), [x]


def case_binary_cross_entropy(rng):
    p = Tensor(rng.uniform(0.05, 0.95, size=(6, 1)), requires_grad=True)
    t = rng.integers(2, size=(6, 1)).astype(float)
    return (lambda: F.binary_cross_entropy(p, t)), [p]


LAYER_CASES = {
    "conv2d": case_conv2d,
    "conv2d-transpose": case_conv2d_transpose,
    "dense": case_dense,
    "maxpool2x2": case_maxpool2x2,
    "upsample2x": case_upsample2x,
    "concat": case_concat,
    "relu": case_relu,
    "leaky-relu": case_leaky_relu,
    "sigmoid": case_sigmoid,
    "tanh": case_tanh,
    "softmax": case_softmax,
    "dropout": case_dropout,
    "batchnorm2d": case_batchnorm2d,
    "global-avg-pool": case_global_avg_pool,
    "flatten": case_flatten,
    "softmax-cross-entropy": case_softmax_cross_entropy,
    "binary-cross-entropy": case_binary_cross_entropy,
}
