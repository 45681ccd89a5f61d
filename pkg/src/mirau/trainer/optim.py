"""AdamW with decoupled weight decay, EMA updates and the plateau LR rule."""

from __future__ import annotations

from collections import OrderedDict
from typing import Mapping, Optional

import numpy as np

from ..errors import ConfigError
from ..ndgrad import Module, Parameter


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               lr: float, wd: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place update of ``param``, ``m`` and ``v``; ``t`` is the 1-based step count."""
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    param -= lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * param)


class AdamW:
    def __init__(self, params: Mapping[str, Parameter], lr: float, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = OrderedDict(params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adamw_step(p.data, g.astype(p.data.dtype, copy=False), self.m[k], self.v[k], self.t,
                       self.lr, self.weight_decay, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k][...] = arrays[f"m.{k}"]
            self.v[k][...] = arrays[f"v.{k}"]
        self.t = t


class EmaMismatchError(ConfigError):
    pass


def ema_update(phi, theta, alpha: float):
    """phi <- alpha*phi + (1-alpha)*theta, elementwise by parameter name (in place).

    Accepts modules or name->array mappings; returns ``phi``.
    """
    def named(x):
        if isinstance(x, Module):
            return OrderedDict((k, p.data) for k, p in x.named_parameters())
        return x

    a, b = named(phi), named(theta)
    offenders = sorted(set(a) ^ set(b))
    offenders += [f"{k} {a[k].shape}!={b[k].shape}" for k in a if k in b and a[k].shape != b[k].shape]
    if offenders:
        raise EmaMismatchError("EMA parameter mismatch: " + "; ".join(offenders))
    for k, arr in a.items():
        arr[...] = alpha * arr + (1.0 - alpha) * b[k]
    return phi


class Plateau:
    """Multiply the LR by ``factor`` after ``patience`` epochs without a new best metric."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 10, floor: float = 1e-5):
        self.lr, self.factor, self.patience, self.floor = lr, factor, patience, floor
        self.best: Optional[float] = None
        self.bad = 0

    def update(self, metric: Optional[float]) -> float:
        if metric is None or not np.isfinite(metric):
            return self.lr
        if self.best is None or metric > self.best:
            self.best, self.bad = metric, 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad": self.bad}

    def load(self, s: dict) -> None:
        self.lr, self.best, self.bad = s["lr"], s["best"], s["bad"]
