"""Trainable parameters and gradient-descent update rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ContractError
from .tensor import Tensor

__all__ = ["Parameter", "Sgd", "Adam", "optimizer_step", "zero_grads"]


class Parameter:
    """A leaf tensor with requires_grad plus per-parameter optimizer state."""

    def __init__(self, t: Tensor):
        t.requires_grad = True
        self.tensor = t
        self.state: dict = {}

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter(shape={list(self.tensor.shape)})"


@dataclass(frozen=True)
class Sgd:
    lr: float

    def apply(self, p: Parameter):
        p.tensor.data -= np.asarray(p.tensor.grad * self.lr, dtype=p.tensor.data.dtype)


@dataclass(frozen=True)
class Adam:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def apply(self, p: Parameter):
        g = p.tensor.grad
        st = p.state
        if "adam_m" not in st:
            st["adam_m"] = np.zeros_like(p.tensor.data, dtype=np.float64)
            st["adam_v"] = np.zeros_like(p.tensor.data, dtype=np.float64)
            st["adam_t"] = 0
        st["adam_t"] += 1
        t = st["adam_t"]
        m = st["adam_m"]
        v = st["adam_v"]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * (g.astype(np.float64) ** 2)
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        step = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        p.tensor.data -= step.astype(p.tensor.data.dtype)


Rule = Union[Sgd, Adam]


def optimizer_step(params: Sequence[Parameter], rule: Rule):
    """Apply one update to every parameter, then clear its gradient.

    Raises if any parameter has no populated gradient; a silent no-op there
    usually means a detached graph, which should fail loudly.
    """
    for p in params:
        if p.tensor.grad is None:
            raise ContractError("optimizer_step: parameter has no gradient")
    for p in params:
        rule.apply(p)
        p.tensor.zero_grad()


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.tensor.zero_grad()
