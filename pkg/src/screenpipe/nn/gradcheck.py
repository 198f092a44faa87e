"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def numerical_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. each ndarray in ``arrays``.

    ``f`` must read the arrays by reference; they are perturbed in place and
    restored.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    """Max elementwise relative error, scaled by the larger gradient magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradients(build_loss, tensors, h=1e-5):
    """Return the worst relative error between autodiff and finite differences.

    ``build_loss`` re-runs the forward pass and returns a scalar Tensor;
    ``tensors`` are the leaves (with ``requires_grad``) to check.
    """
    for t in tensors:
        t.grad = None
    build_loss().backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = numerical_grad(lambda: build_loss().item(), [t.data for t in tensors], h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))
