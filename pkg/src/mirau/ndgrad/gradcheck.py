"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ConfigError
from .tensor import GradTape, Tensor


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_per_param: Optional[int] = None, seed: int = 0,
               atol: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar objective from the current values of ``params``
    every call. It is evaluated under a tape with a fixed seed so dropout masks
    are identical across perturbed evaluations. The per-element error is
    ``|g - n| / max(|g|, |n|, atol)``. ``max_per_param`` checks a seeded random
    subset of elements of each parameter instead of all of them.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError("grad_check needs float64 parameters")

    with GradTape(seed=seed) as tape:
        for p in params:
            p.grad = None
        out = f()
        if out.size != 1:
            raise ConfigError("grad_check needs a scalar objective")
        tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def evaluate() -> float:
        with GradTape(seed=seed, record=False):
            return float(f().data.sum())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = g.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), atol)
            worst = max(worst, err)
    return worst
