"""Adam with bias correction and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state, t, lr, beta1=0.9, beta2=0.999, eps=1e-10, weight_decay=0.0):
    """One in-place update of the arrays in ``params``; ``t`` counts from 1.

    The decay term is decoupled from the moment estimates:
    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
    """
    if t < 1:
        raise ValueError(f"step counter starts at 1, got {t}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"adam: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            upd += weight_decay * p
        p -= lr * upd
    state.t = t


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-10, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.state.t + 1, self.lr if lr is None else lr,
                  self.betas[0], self.betas[1], self.eps, self.weight_decay)
