from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from tmlab.nets.autodiff import NonFiniteError, Tensor, first_non_finite
from tmlab.nets.params import NetParams

LossClosure = Callable[[Mapping[str, Tensor]], Tensor]


def value_and_grad(loss_closure: LossClosure, p: NetParams) -> tuple[float, np.ndarray]:
    """Evaluate a scalar loss of the parameters and its exact reverse-mode gradient.

    Raises NonFiniteError naming the first layer whose forward values are not
    finite.
    """
    leaves = p.leaves()
    # non-finite values are detected and reported below, so silence numpy here
    with np.errstate(all="ignore"):
        loss = loss_closure(leaves)
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.value).all():
        bad = first_non_finite(loss)
        raise NonFiniteError(bad.scope if bad is not None else "loss")
    if not loss.requires_grad:
        return float(loss.value), np.zeros_like(p.values)
    with np.errstate(all="ignore"):
        loss.backward()
    g = p.gather_grad(leaves)
    if not np.isfinite(g).all():
        raise NonFiniteError("backward", "non-finite gradient")
    return float(loss.value), g


def grad(loss_closure: LossClosure, p: NetParams) -> np.ndarray:
    return value_and_grad(loss_closure, p)[1]


def finite_difference_grad(loss_closure: LossClosure, p: NetParams, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the loss, one coordinate at a time (float64)."""
    base = p.astype(np.float64)
    out = np.empty(base.size)
    for i in range(base.size):
        vals = base.values.copy()
        vals[i] += step
        plus = float(loss_closure(base.with_values(vals).constants()).value)
        vals[i] -= 2 * step
        minus = float(loss_closure(base.with_values(vals).constants()).value)
        out[i] = (plus - minus) / (2 * step)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
