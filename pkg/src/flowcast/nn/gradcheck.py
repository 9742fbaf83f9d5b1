"""Finite-difference gradient checking.

The check compares reverse-mode gradients against central differences
(f(x+h) - f(x-h)) / 2h coordinate by coordinate and reports the worst
relative error |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).

f must be a deterministic scalar function of the given params (re-run it,
get the same graph): no dropout, no rng draws inside.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def grad_check(f, params: dict[str, Tensor] | list[Tensor],
               h: float = 1e-5) -> float:
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    for p in tensors:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in tensors]

    worst = 0.0
    for p, g_ad in zip(tensors, analytic):
        flat = p.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            g_fd = (up - down) / (2.0 * h)
            err = abs(g_flat[i] - g_fd) / max(1e-8, abs(g_flat[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst
