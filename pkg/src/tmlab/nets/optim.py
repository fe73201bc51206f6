from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tmlab.nets.params import NetParams

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, p: NetParams) -> AdamState:
        return cls(np.zeros_like(p.values), np.zeros_like(p.values), 0)


def adam_step(p: NetParams, g: np.ndarray, state: AdamState, lr: float) -> tuple[NetParams, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    g = np.asarray(g, dtype=p.dtype)
    if g.shape != p.values.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {p.values.shape}")
    step = state.step + 1
    m = BETA1 * state.m + (1.0 - BETA1) * g
    v = BETA2 * state.v + (1.0 - BETA2) * g * g
    m_hat = m / (1.0 - BETA1**step)
    v_hat = v / (1.0 - BETA2**step)
    update = (lr * m_hat / (np.sqrt(v_hat) + EPS)).astype(p.dtype)
    return p.with_values(p.values - update), AdamState(m.astype(p.dtype), v.astype(p.dtype), step)
