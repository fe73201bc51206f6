"""A trained (or trainable) model: configuration, parameters and NFE counters."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from tmlab.nets import autodiff as ad
from tmlab.nets.models import NULL_CLASS, ModelConfig, backbone_forward, fm_forward, head_forward, init_params
from tmlab.nets.params import NetParams, load_checkpoint, save_checkpoint
from tmlab.process import velocity_from_prediction


@dataclass
class Counters:
    backbone_nfe: int = 0
    head_nfe: int = 0
    injections: int = 0

    def reset(self) -> None:
        self.backbone_nfe = self.head_nfe = self.injections = 0

    def to_dict(self) -> dict:
        return asdict(self)


def cfg_velocity(u_cond: np.ndarray, u_uncond: np.ndarray, omega: float, convention: str = "conventional") -> np.ndarray:
    """Classifier-free guidance combination of conditional and unconditional velocities.

    ``conventional``: ``(1 + w) u_c - w u_0``. ``paper_literal``:
    ``(1 - w) u_c - w u_0``, the formula as printed, kept for comparison.
    """
    if np.shape(u_cond) != np.shape(u_uncond):
        raise ValueError("conditional and unconditional velocities differ in shape")
    if convention == "conventional":
        return (1.0 + omega) * u_cond - omega * u_uncond
    if convention == "paper_literal":
        return (1.0 - omega) * u_cond - omega * u_uncond
    raise ValueError(f"unknown CFG convention {convention!r}")


def solve_head_ode(velocity_fn, y0: np.ndarray, S: int) -> np.ndarray:
    """Explicit Euler on ``s_j = j / S`` from ``y0``; returns Y at ``s = 1``."""
    if S < 1:
        raise ValueError("S must be >= 1")
    y = np.array(y0, dtype=np.float64, copy=True)
    ds = 1.0 / S
    for j in range(S):
        y = y + ds * velocity_fn(y, j / S)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"head ODE state became non-finite at step {j + 1}/{S}")
    return y


def _guided(cond, omega: float, n_classes: int) -> bool:
    return cond is not None and n_classes > 0 and omega > 0 and np.any(np.asarray(cond) != NULL_CLASS)


class Model:
    """Network model usable by every sampler.

    D-TM models implement ``sample_y`` (backbone once, then the head ODE);
    FM models implement ``velocity``. Counters tally network calls, one per
    batched evaluation over all chains (guided evaluations stack the
    conditional and null inputs into the same call).
    """

    def __init__(self, config: ModelConfig, params: NetParams):
        self.config = config
        self.params = params
        self.counters = Counters()
        self._consts = None

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> Model:
        from tmlab.rng import Streams

        return cls(config, init_params(config, Streams(seed).child("init").generator(), dtype))

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def parameterization(self):
        return self.config.parameterization

    @property
    def state_shape(self) -> tuple[int, int]:
        return (self.config.backbone.n_tokens, self.config.backbone.d_in)

    @property
    def n_classes(self) -> int:
        return self.config.backbone.cond_classes

    def set_params(self, params: NetParams) -> None:
        self.params = params
        self._consts = None

    def _p(self):
        if self._consts is None:
            self._consts = self.params.constants()
        return self._consts

    def _stack_cond(self, x, cond, omega):
        batch = x.shape[0]
        if not _guided(cond, omega, self.n_classes):
            return x, cond, False
        c = np.broadcast_to(np.asarray(cond, dtype=np.int64), (batch,))
        return np.concatenate([x, x]), np.concatenate([c, np.full(batch, NULL_CLASS)]), True

    def latent(self, x, t, cond=None) -> np.ndarray:
        self.counters.backbone_nfe += 1
        with ad.no_grad():
            return backbone_forward(self._p(), self.config.backbone, x, t, cond).value.astype(np.float64)

    def sample_y(self, x, t, cond, spec, rng: np.random.Generator) -> np.ndarray:
        if self.kind != "dtm":
            raise ValueError("sample_y needs a dtm model")
        batch = x.shape[0]
        x_in, cond_in, guided = self._stack_cond(x, cond, spec.omega)
        h = self.latent(x_in, t, cond_in)
        y0 = rng.standard_normal(x.shape)
        head_cfg, target = self.config.head, self.config.fm_target

        def velocity(y, s):
            self.counters.head_nfe += 1
            y_in = np.concatenate([y, y]) if guided else y
            with ad.no_grad():
                pred = head_forward(self._p(), head_cfg, y_in, h, s).value.astype(np.float64)
            u = velocity_from_prediction(pred, y_in, s, target)
            if guided:
                return cfg_velocity(u[:batch], u[batch:], spec.omega, spec.cfg_convention)
            return u

        return solve_head_ode(velocity, y0, spec.S)

    def velocity(self, x, t, cond, spec) -> np.ndarray:
        if self.kind != "fm":
            raise ValueError("velocity needs an fm model")
        batch = x.shape[0]
        x_in, cond_in, guided = self._stack_cond(x, cond, spec.omega)
        self.counters.backbone_nfe += 1
        with ad.no_grad():
            pred = fm_forward(self._p(), self.config.backbone, x_in, t, cond_in).value.astype(np.float64)
        u = velocity_from_prediction(pred, x_in, t, self.config.fm_target)
        if guided:
            return cfg_velocity(u[:batch], u[batch:], spec.omega, spec.cfg_convention)
        return u

    def save(self, path: str | Path, **extra) -> None:
        header = {"model": self.config.to_dict(), **extra}
        save_checkpoint(path, self.params, header)

    @classmethod
    def load(cls, path: str | Path) -> tuple[Model, dict]:
        params, header = load_checkpoint(path)
        return cls(ModelConfig.from_dict(header["model"]), params), header
