"""Adam optimizer over a ParameterSet, with the standard bias correction."""

from __future__ import annotations

import numpy as np

from .tensor import ParameterSet


class Adam:
    """Bias-corrected Adam (beta1=0.9, beta2=0.999, eps=1e-8).

    Updates parameters in place. `step` takes the gradient dict returned by
    `ValueGraph.backward`; a missing gradient for any trainable parameter
    is an error rather than a silent skip.
    """

    def __init__(
        self,
        params: ParameterSet,
        lr: float = 5e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        if lr is None:
            lr = self.lr
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in self.params:
            if name not in grads:
                raise KeyError(f"missing gradient for trainable parameter '{name}'")
            g = grads[name]
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != parameter '{name}' shape {p.data.shape}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def exponential_lr(step: int, total_steps: int, lr0: float, lr_final: float) -> float:
    """Exponential decay from lr0 to lr_final over total_steps."""
    if total_steps <= 0 or lr0 <= 0:
        return lr0
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr0 * (lr_final / lr0) ** frac
