"""Linear supervising process and the Y-parameterizations of the transition kernel.

States are numpy arrays whose trailing axes are ``(n, d)`` (tokens, channels);
any leading batch axes are carried through. Every operation here is
elementwise, so the same code serves one state or a batch of chains.
"""

from __future__ import annotations

import enum

import numpy as np

# Margin keeping the Noise/Denoiser updates away from their singular endpoints.
SINGULAR_EPS = 1e-9


class Parameterization(str, enum.Enum):
    """Which posterior quantity Y the head samples."""

    DIFFERENCE = "difference"  # Y = X1 - X0
    DENOISER = "denoiser"  # Y = X1
    NOISE = "noise"  # Y = X0

    @classmethod
    def parse(cls, value: str | Parameterization) -> Parameterization:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown parameterization {value!r}; expected one of {[p.value for p in cls]}"
            ) from None


class SingularityError(ValueError):
    """A parameterization was used at a time where its update divides by zero."""


def _check_shapes(*arrays: np.ndarray) -> None:
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {np.shape(a)}")


def _check_unit(name: str, t) -> None:
    t = np.asarray(t)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValueError(f"{name} must lie in [0, 1], got {t}")


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """Point of the linear path ``(1 - t) x0 + t x1``.

    ``t`` may be a scalar or an array broadcastable against the states (one
    time per chain, shaped ``(B, 1, 1)``).
    """
    _check_shapes(x0, x1)
    _check_unit("t", t)
    return (1.0 - t) * x0 + t * x1


def target_y(x0: np.ndarray, x1: np.ndarray, p: Parameterization) -> np.ndarray:
    _check_shapes(x0, x1)
    p = Parameterization.parse(p)
    if p is Parameterization.DIFFERENCE:
        return x1 - x0
    if p is Parameterization.DENOISER:
        return np.array(x1, copy=True)
    return np.array(x0, copy=True)


def check_advance_domain(t: float, t2: float, p: Parameterization, eps: float = SINGULAR_EPS) -> None:
    if not (0.0 <= t < t2 <= 1.0):
        raise ValueError(f"advance_state needs 0 <= t < t2 <= 1, got t={t}, t2={t2}")
    if p is Parameterization.DENOISER and t > 1.0 - eps:
        raise SingularityError(f"denoiser update is singular at t={t} (needs t <= 1 - {eps})")
    if p is Parameterization.NOISE and t < eps:
        raise SingularityError(f"noise update is singular at t={t} (needs t >= {eps})")


def advance_state(
    x_t: np.ndarray, t: float, t2: float, y: np.ndarray, p: Parameterization, eps: float = SINGULAR_EPS
) -> np.ndarray:
    """Move a state from time ``t`` to ``t2`` given a sample of Y."""
    _check_shapes(x_t, y)
    p = Parameterization.parse(p)
    t, t2 = float(t), float(t2)
    check_advance_domain(t, t2, p, eps)
    if p is Parameterization.DIFFERENCE:
        return x_t + (t2 - t) * y
    if p is Parameterization.DENOISER:
        return ((1.0 - t2) * x_t + (t2 - t) * y) / (1.0 - t)
    return (t2 * x_t + (t - t2) * y) / t


def conditional_path_params(x1: np.ndarray, t: float) -> tuple[np.ndarray, float]:
    """Mean and isotropic std of ``q_t(x | x1) = N(t x1, (1 - t)^2 I)``."""
    _check_unit("t", t)
    return t * np.asarray(x1), 1.0 - float(t)


def time_grid(T: int, p: Parameterization = Parameterization.DIFFERENCE, eps: float = SINGULAR_EPS) -> np.ndarray:
    """Equidistant grid ``t_i = i / T``; the first node is lifted to ``eps`` for Noise."""
    if T < 1:
        raise ValueError("T must be >= 1")
    grid = np.arange(T + 1, dtype=np.float64) / T
    if Parameterization.parse(p) is Parameterization.NOISE:
        grid[0] = eps
    return grid


# Smallest flow time used when a Noise/Denoiser flow target is turned into a velocity.
TARGET_EPS = 1e-3


def velocity_from_prediction(pred: np.ndarray, y_s: np.ndarray, s, target: Parameterization) -> np.ndarray:
    """Velocity of the flow ``Y_s = (1 - s) Y0 + s Y1`` from a network prediction.

    ``target`` names what the network regressed: the difference ``Y1 - Y0``
    (already a velocity), the endpoint ``Y1``, or the source ``Y0``. ``s``
    broadcasts against the states.
    """
    target = Parameterization.parse(target)
    if target is Parameterization.DIFFERENCE:
        return pred
    s = np.asarray(s, dtype=np.float64)
    if target is Parameterization.DENOISER:
        return (pred - y_s) / np.maximum(1.0 - s, TARGET_EPS)
    return (y_s - pred) / np.maximum(s, TARGET_EPS)
