"""Adam with L2-style weight decay and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ParameterError


def lr_schedule(epoch: int, base_lr: float, decay_every: int = 100, factor: float = 0.1) -> float:
    if epoch < 0:
        raise ParameterError("epoch must be >= 0")
    return base_lr * factor ** (epoch // decay_every)


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": self.step_count,
        }


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Weight decay enters as ``wd * theta`` added to the gradient before the
    moment updates.  Returns ``params`` for convenience.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        if params[name].shape != g.shape:
            raise ParameterError(f"gradient shape mismatch for {name}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, theta in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        theta -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
