"""Adam with bias correction and decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import NonFiniteError, ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], s: AdamState) -> None:
    """Update every array in ``params`` in place.

    p <- p - lr*wd*p, then p <- p - lr * m_hat / (sqrt(v_hat) + eps).
    All gradients are validated before anything is modified.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    s.step += 1
    t = s.step
    c1 = 1.0 - s.beta1 ** t
    c2 = 1.0 - s.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = s.m.get(name)
        if m is None:
            m = s.m[name] = np.zeros_like(p)
            s.v[name] = np.zeros_like(p)
        v = s.v[name]
        if s.weight_decay:
            p -= s.lr * s.weight_decay * p
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * g * g
        p -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)


class Adam:
    """Adam over a fixed name -> tensor mapping, reading ``.grad`` off the tensors."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-5):
        self.params = dict(params)
        self.state = AdamState(lr, betas[0], betas[1], eps, weight_decay)

    def step(self) -> None:
        adam_step({n: p.data for n, p in self.params.items()},
                  {n: p.grad for n, p in self.params.items() if p.grad is not None}, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
