"""D-TM and FM samplers, including the re-noising stochastic sampler.

Randomness is split into three substreams of the caller's ``Streams``:
``init`` (the source draw X0), ``head`` (head-ODE starting noise and oracle
posterior draws) and ``renoise`` (the Gaussian added when jumping back in
time). Changing how often re-noising happens therefore never shifts the
other two streams.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from tmlab.model import Counters, cfg_velocity, solve_head_ode
from tmlab.oracle import GaussianMixtureTarget, marginal_velocity, sample_posterior_y
from tmlab.process import Parameterization, advance_state, time_grid
from tmlab.rng import Streams, as_streams

MODES = ("dtm_linear", "dtm_stochastic", "fm_linear", "fm_midpoint", "fm_stochastic")

__all__ = [
    "MODES",
    "OracleHead",
    "OracleVelocity",
    "SamplerSpec",
    "cfg_velocity",
    "dtm_sample",
    "fm_sample",
    "fm_stochastic_sample",
    "renoise",
    "renoise_variance",
    "run_sampler",
    "solve_head_ode",
    "stochastic_dtm_sample",
]


@dataclass(frozen=True)
class SamplerSpec:
    T: int = 32
    S: int = 32
    c: float = 0.0
    tau: int = 1
    omega: float = 6.5
    mode: str = "dtm_linear"
    cfg_convention: str = "conventional"
    # integrator used inside fm_stochastic jumps
    ode_solver: str = "euler"

    def __post_init__(self):
        if self.T < 1 or self.S < 1:
            raise ValueError("T and S must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}; expected one of {MODES}")
        if self.cfg_convention not in ("conventional", "paper_literal"):
            raise ValueError(f"unknown CFG convention {self.cfg_convention!r}")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.ode_solver not in ("euler", "midpoint"):
            raise ValueError(f"unknown ode_solver {self.ode_solver!r}")
        if self.stochastic:
            if not 0.0 <= self.c <= 1.0:
                raise ValueError("c must lie in [0, 1]")
            if not 1 <= self.tau <= self.T:
                raise ValueError("tau must lie in [1, T]")

    @property
    def stochastic(self) -> bool:
        return self.mode.endswith("stochastic")

    @property
    def period(self) -> int:
        """Steps between re-noising moves: ``ceil(T / tau)``."""
        return math.ceil(self.T / self.tau)

    def injects_at(self, i: int) -> bool:
        return i % self.period == 0

    def to_dict(self) -> dict:
        return asdict(self)


class OracleHead:
    """Perfect transition model: draws Y from the exact posterior of a mixture target.

    With ``cond`` set to a component index the target is restricted to that
    component.
    """

    def __init__(self, target: GaussianMixtureTarget, parameterization=Parameterization.DIFFERENCE):
        self.target = target
        self.parameterization = Parameterization.parse(parameterization)
        self.counters = Counters()
        self.state_shape = target.state_shape

    def _target(self, cond):
        if cond is None:
            return self.target
        k = int(np.asarray(cond).reshape(-1)[0])
        return self.target if k < 0 else self.target.component(k)

    def sample_y(self, x, t, cond, spec, rng):
        self.counters.backbone_nfe += 1
        self.counters.head_nfe += spec.S
        return sample_posterior_y(x, t, self._target(cond), self.parameterization, rng)


class OracleVelocity:
    """Exact marginal FM velocity of a mixture target."""

    def __init__(self, target: GaussianMixtureTarget):
        self.target = target
        self.counters = Counters()
        self.state_shape = target.state_shape

    def velocity(self, x, t, cond, spec):
        self.counters.backbone_nfe += 1
        return marginal_velocity(x, min(float(t), 1.0 - 1e-12), self.target)


def renoise_variance(t2: float, t3: float) -> float:
    """Variance of the noise that maps an exact time-``t3`` sample to time ``t2``."""
    return (t3 - t2) * (t2 + t3 - 2.0 * t2 * t3)


def renoise(x_tpp: np.ndarray, t2: float, t3: float, rng: np.random.Generator) -> np.ndarray:
    """Re-noise a sample at time ``t3`` back to the earlier time ``t2``.

    ``X_t2 = (t2 X_t3 + Z) / t3`` with ``Z ~ N(0, renoise_variance(t2, t3) I)``
    sends ``N(t3 x1, (1 - t3)^2 I)`` to ``N(t2 x1, (1 - t2)^2 I)``. When
    ``t3 == t2`` the input is returned unchanged and no noise is drawn.
    """
    t2, t3 = float(t2), float(t3)
    if t3 <= 0.0:
        raise ValueError("renoise needs t3 > 0")
    if not 0.0 <= t2 <= t3 <= 1.0:
        raise ValueError(f"renoise needs 0 <= t2 <= t3 <= 1, got t2={t2}, t3={t3}")
    if t3 == t2:
        return np.array(x_tpp, copy=True)
    z = math.sqrt(renoise_variance(t2, t3)) * rng.standard_normal(np.shape(x_tpp))
    return (t2 * x_tpp + z) / t3


def _streams(rng):
    s = as_streams(rng)
    return s.child("init").generator(), s.child("head").generator(), s.child("renoise").generator()


def _check_mode(spec: SamplerSpec, allowed: tuple[str, ...]) -> None:
    if spec.mode not in allowed:
        raise ValueError(f"sampler mode {spec.mode!r} does not match this sampler ({allowed})")


def _dtm_loop(model, spec: SamplerSpec, rng, cond, n: int, stochastic: bool) -> np.ndarray:
    if getattr(model, "kind", "dtm") != "dtm":
        raise ValueError("D-TM sampling needs a dtm model")
    init, head, noise = _streams(rng)
    p = model.parameterization
    grid = time_grid(spec.T, p)
    model.counters.reset()
    x = init.standard_normal((n,) + tuple(model.state_shape))
    for i in range(spec.T):
        t, t_next = grid[i], grid[i + 1]
        y = model.sample_y(x, t, cond, spec, head)
        if stochastic and spec.injects_at(i):
            model.counters.injections += 1
            t_far = t_next + spec.c * (1.0 - t_next)
            x = renoise(advance_state(x, t, t_far, y, p), t_next, t_far, noise)
        else:
            x = advance_state(x, t, t_next, y, p)
    return x


def dtm_sample(model, spec: SamplerSpec, rng: Streams | int, cond=None, n: int = 1) -> np.ndarray:
    """Standard D-TM sampling of ``n`` chains; returns states at t = 1, shape (n, tokens, d)."""
    _check_mode(spec, ("dtm_linear", "dtm_stochastic"))
    return _dtm_loop(model, spec, rng, cond, n, stochastic=False)


def stochastic_dtm_sample(model, spec: SamplerSpec, rng: Streams | int, cond=None, n: int = 1) -> np.ndarray:
    """D-TM sampling with re-noising jumps.

    At steps ``i`` with ``i mod ceil(T / tau) == 0`` the state is pushed to
    ``t'' = t' + c (1 - t')`` with the sampled Y and re-noised back to ``t'``.
    """
    _check_mode(spec, ("dtm_stochastic",))
    return _dtm_loop(model, spec, rng, cond, n, stochastic=True)


def _ode_segment(model, x, t0: float, t1: float, n_steps: int, cond, spec, solver: str) -> np.ndarray:
    dt = (t1 - t0) / n_steps
    for j in range(n_steps):
        t = t0 + j * dt
        v = model.velocity(x, t, cond, spec)
        if solver == "midpoint":
            v = model.velocity(x + 0.5 * dt * v, t + 0.5 * dt, cond, spec)
        x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"FM state became non-finite at t={t + dt:.4f}")
    return x


def fm_sample(model, spec: SamplerSpec, rng: Streams | int, cond=None, n: int = 1) -> np.ndarray:
    """Euler (``fm_linear``) or midpoint (``fm_midpoint``) integration over T steps."""
    _check_mode(spec, ("fm_linear", "fm_midpoint"))
    init, _, _ = _streams(rng)
    model.counters.reset()
    x = init.standard_normal((n,) + tuple(model.state_shape))
    solver = "midpoint" if spec.mode == "fm_midpoint" else "euler"
    return _ode_segment(model, x, 0.0, 1.0, spec.T, cond, spec, solver)


def fm_stochastic_sample(model, spec: SamplerSpec, rng: Streams | int, cond=None, n: int = 1) -> np.ndarray:
    """FM sampling with the re-noising schedule of the stochastic D-TM sampler.

    The closed-form jump is replaced by an ODE solve from ``t`` to ``t''`` using
    steps no longer than ``1 / T``, so each jump costs extra evaluations.
    """
    _check_mode(spec, ("fm_stochastic",))
    init, _, noise = _streams(rng)
    model.counters.reset()
    x = init.standard_normal((n,) + tuple(model.state_shape))
    for i in range(spec.T):
        t, t_next = i / spec.T, (i + 1) / spec.T
        if spec.injects_at(i):
            model.counters.injections += 1
            t_far = t_next + spec.c * (1.0 - t_next)
            steps = max(1, math.ceil((t_far - t) * spec.T - 1e-9))
            x = _ode_segment(model, x, t, t_far, steps, cond, spec, spec.ode_solver)
            x = renoise(x, t_next, t_far, noise)
        else:
            x = _ode_segment(model, x, t, t_next, 1, cond, spec, spec.ode_solver)
    return x


def run_sampler(model, spec: SamplerSpec, rng: Streams | int, cond=None, n: int = 1) -> np.ndarray:
    """Dispatch on ``spec.mode``."""
    if spec.mode == "dtm_linear":
        return dtm_sample(model, spec, rng, cond, n)
    if spec.mode == "dtm_stochastic":
        return stochastic_dtm_sample(model, spec, rng, cond, n)
    if spec.mode == "fm_stochastic":
        return fm_stochastic_sample(model, spec, rng, cond, n)
    return fm_sample(model, spec, rng, cond, n)
