"""Adam optimizer and the warmup + polynomial-decay learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .engine import Var


class Adam:
    """Bias-corrected Adam over named parameters.

    ``params`` is a list of (name, Var); moments are kept per parameter and
    the step counter increases by one per ``step`` call.  Missing gradients
    count as zero.  A NaN gradient aborts with the parameter's name.
    """

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in self.params}
        self.v = {name: np.zeros_like(p.value) for name, p in self.params}

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError(f"adam: negative learning rate {lr}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.value)
            elif np.isnan(g).any():
                raise ValueError(f"adam: NaN gradient for parameter '{name}'")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p.value = p.value - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {name: arr.copy() for name, arr in self.m.items()},
            "v": {name: arr.copy() for name, arr in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name, _ in self.params:
            self.m[name] = np.array(state["m"][name])
            self.v[name] = np.array(state["v"][name])


def poly_decay_lr(step: int, total_steps: int, lr0: float, warmup_steps: int = 0, power: float = 1.0) -> float:
    """Linear warmup to ``lr0`` then polynomial decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError(f"poly_decay_lr: total_steps must be positive, got {total_steps}")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"poly_decay_lr: warmup_steps {warmup_steps} must lie in [0, total_steps)")
    step = min(max(step, 0), total_steps)
    if warmup_steps and step < warmup_steps:
        return lr0 * step / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr0 * (1.0 - frac) ** power


__all__ = ["Adam", "poly_decay_lr", "Var"]
