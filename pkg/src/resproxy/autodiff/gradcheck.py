from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``f`` maps the tensors in ``inputs`` to a scalar tensor. The error per
    element is ``|g_ad - g_fd| / max(1, |g_fd|)``.
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for t, g_ad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = g_ad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                g_fd = (fp - fm) / (2 * eps)
                worst = max(worst, abs(gflat[i] - g_fd) / max(1.0, abs(g_fd)))
    for t in inputs:
        t.zero_grad()
    return worst


def randn(rng: np.random.Generator, *shape, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)
