"""Plain SGD and Adam updates over named parameter dicts.

Updates mutate parameter buffers in place between forward passes; the
tape never records optimizer arithmetic.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


def sgd_step(params: dict[str, Tensor], lr: float) -> None:
    """p -= lr * p.grad for every parameter that has a gradient."""
    for p in params.values():
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"sgd_step: grad {p.grad.shape} != param {p.data.shape}")
        p.data -= np.asarray(lr * p.grad, dtype=p.data.dtype)


def adam_step(params: dict[str, Tensor], state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update.

    state starts empty and carries first/second moments plus the step
    counter between calls.
    """
    t = state.get("t", 0) + 1
    state["t"] = t
    m_all: dict = state.setdefault("m", {})
    v_all: dict = state.setdefault("v", {})
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {g.shape} != param {p.data.shape} for {name}")
        m = m_all.get(name)
        v = v_all.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_all[name] = m
        v_all[name] = v
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p.data -= np.asarray(lr * mhat / (np.sqrt(vhat) + eps), dtype=p.data.dtype)


class Adam:
    """Stateful wrapper so training loops don't thread the dicts around."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
