"""NAdam with bias correction and decoupled weight decay.

For step t (1-based), gradient g and parameter theta::

    m     = b1*m + (1-b1)*g
    v     = b2*v + (1-b2)*g^2
    m_hat = b1*m/(1 - b1^(t+1)) + (1-b1)*g/(1 - b1^t)
    v_hat = v/(1 - b2^t)
    theta = theta - lr*m_hat/(sqrt(v_hat) + eps) - lr*wd*theta

The decay term uses the pre-update theta, so with g = 0 the parameter
shrinks by exactly lr*wd*theta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ArgumentError, NumericError


@dataclass
class OptimizerState:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ArgumentError("beta1 and beta2 must lie in (0, 1)")
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ArgumentError("lr and weight_decay must be >= 0, eps > 0")


def nadam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState):
    """Update ``params`` in place and return them."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1_next = 1.0 - b1 ** (t + 1)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        if m.shape != theta.shape:
            raise ArgumentError(f"optimizer state shape mismatch for {name}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = b1 * m / c1_next + (1 - b1) * g / c1
        v_hat = v / c2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            update = update + state.lr * state.weight_decay * theta
        theta -= update.astype(theta.dtype)
    return params


class NAdam:
    """Stateful wrapper over :func:`nadam_step` for a dict of Tensors."""

    def __init__(self, params, lr=2e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.state = OptimizerState(lr, beta1, beta2, eps, weight_decay)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        values = {k: p.values for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        nadam_step(values, grads, self.state)
