"""Adam over :class:`~underspec.core.MlpParams`."""

from dataclasses import dataclass

import numpy as np

from .core import MlpParams, zeros_like_params
from .errors import NumericalError, ShapeError


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(zeros_like_params(params), zeros_like_params(params), 0, lr, beta1, beta2, eps)


def adam_step(state, params, grads):
    """One Adam update. Returns new ``(params, state)``; inputs are not modified."""
    p_arr, g_arr = params.arrays(), grads.arrays()
    m_arr, v_arr = state.m.arrays(), state.v.arrays()
    if len(p_arr) != len(g_arr) or len(p_arr) != len(m_arr):
        raise ShapeError("params, grads and optimizer state have different layer counts")
    for p, g, m in zip(p_arr, g_arr, m_arr):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("grad", "non-finite gradient passed to adam_step")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arr, g_arr, m_arr, v_arr):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(MlpParams.from_arrays(new_m), MlpParams.from_arrays(new_v), t,
                          state.lr, b1, b2, state.eps)
    return MlpParams.from_arrays(new_p), new_state
