"""Adam optimizer with decoupled weight decay on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericsError


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adamw_step(
    state: AdamWState,
    params: np.ndarray,
    grads: np.ndarray,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One update; mutates ``state``, returns new params (input untouched).

    Weight decay is applied directly to the parameters, decoupled from the
    adaptive gradient term.
    """
    if params.shape != grads.shape:
        raise NumericsError("parameter/gradient length mismatch")
    if not np.isfinite(grads).all():
        raise NumericsError("non-finite gradient; aborting step")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads**2
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    update = params - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * params
    if not np.isfinite(update).all():
        raise NumericsError("non-finite parameter update; aborting step")
    return update
