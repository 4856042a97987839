"""Adaptive optimizer for the harness; the core algorithms only use plain
gradient descent."""

from __future__ import annotations

import numpy as np

from ..params import ParameterSet
from ..tensor import ContractError


class Adam:
    """Adam keyed by ``(role, name)`` so state survives bundle snapshots."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m: dict[tuple[str, str], np.ndarray] = {}
        self._v: dict[tuple[str, str], np.ndarray] = {}
        self._t: dict[tuple[str, str], int] = {}

    def step(self, sets: list[ParameterSet]) -> None:
        for ps in sets:
            for name, t in ps.items():
                if t.grad is None:
                    raise ContractError(f"{ps.role}/{name} has no gradient")
                key = (ps.role, name)
                g = t.grad
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(g)
                    self._v[key] = np.zeros_like(g)
                    self._t[key] = 0
                v = self._v[key]
                self._t[key] += 1
                step = self._t[key]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mhat = m / (1 - self.beta1 ** step)
                vhat = v / (1 - self.beta2 ** step)
                t.values -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
                t.grad = None


def make_optimizer(kind: str, lr: float):
    """``None`` means plain gradient descent inside the training step."""
    if kind == "sgd":
        return None
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
