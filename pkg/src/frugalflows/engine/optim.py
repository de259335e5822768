from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, InvalidParameterError, NumericError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m=[np.zeros_like(np.asarray(p.value if hasattr(p, "value") else p)) for p in params],
                   v=[np.zeros_like(np.asarray(p.value if hasattr(p, "value") else p)) for p in params])


def adam_step(params, grads, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` may be engine Parameters or plain float arrays.
    """
    if state.lr <= 0:
        raise InvalidParameterError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimiser state differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to adam_step", op="adam_step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        value = p.value if hasattr(p, "value") else p
        if g.shape != value.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {value.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        value -= update
    return state
