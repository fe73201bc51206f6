"""Time-weighting distributions for the backbone time t and the head time s."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats


@dataclass(frozen=True)
class TimeWeighting:
    """One of ``uniform``, ``logit_normal(mu, sigma)`` or ``beta(alpha, beta)``.

    ``logit_normal`` is the sigmoid of a Gaussian, the usual reading of the
    "log-normal" time weighting for a variable living in (0, 1).
    """

    kind: str = "uniform"
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "logit_normal", "beta"):
            raise ValueError(f"unknown time weighting {self.kind!r}")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("time weighting parameters must be finite")
        if self.kind == "logit_normal" and self.b <= 0:
            raise ValueError("logit_normal sigma must be > 0")
        if self.kind == "beta" and (self.a <= 0 or self.b <= 0):
            raise ValueError("beta parameters must be > 0")

    @classmethod
    def uniform(cls) -> TimeWeighting:
        return cls("uniform")

    @classmethod
    def logit_normal(cls, mu: float = 0.0, sigma: float = 1.0) -> TimeWeighting:
        return cls("logit_normal", float(mu), float(sigma))

    @classmethod
    def beta(cls, alpha: float, beta: float) -> TimeWeighting:
        return cls("beta", float(alpha), float(beta))

    @classmethod
    def from_dict(cls, d: dict) -> TimeWeighting:
        kind = d["kind"]
        if kind == "uniform":
            return cls.uniform()
        if kind == "logit_normal":
            return cls.logit_normal(d.get("mu", 0.0), d.get("sigma", 1.0))
        if kind == "beta":
            return cls.beta(d["alpha"], d["beta"])
        raise ValueError(f"unknown time weighting {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform"}
        if self.kind == "logit_normal":
            return {"kind": "logit_normal", "mu": self.a, "sigma": self.b}
        return {"kind": "beta", "alpha": self.a, "beta": self.b}

    def __str__(self) -> str:
        if self.kind == "uniform":
            return "U(0,1)"
        if self.kind == "logit_normal":
            return f"LogitNormal({self.a:g},{self.b:g})"
        return f"Beta({self.a:g},{self.b:g})"


_TINY = np.finfo(np.float64).tiny


def sample_times(w: TimeWeighting, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw times in the open interval (0, 1)."""
    if w.kind == "uniform":
        # random() is on [0, 1); shift the zero draw off the boundary
        u = rng.random(size)
        return np.where(u == 0.0, _TINY, u) if size is not None else (u or _TINY)
    if w.kind == "logit_normal":
        z = rng.normal(w.a, w.b, size)
        return np.clip(special.expit(z), _TINY, 1.0 - 1e-16)
    x = rng.beta(w.a, w.b, size)
    return np.clip(x, _TINY, 1.0 - 1e-16)


def sample_time(w: TimeWeighting, rng: np.random.Generator) -> float:
    return float(sample_times(w, rng))


def density(w: TimeWeighting, t) -> np.ndarray | float:
    """Analytic pdf of the weighting at ``t`` in (0, 1)."""
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValueError("density is defined on the open interval (0, 1)")
    if w.kind == "uniform":
        out = np.ones_like(arr)
    elif w.kind == "logit_normal":
        z = special.logit(arr)
        out = stats.norm.pdf(z, loc=w.a, scale=w.b) / (arr * (1.0 - arr))
    else:
        out = stats.beta.pdf(arr, w.a, w.b)
    return float(out) if np.ndim(t) == 0 else out


def cdf(w: TimeWeighting, t) -> np.ndarray:
    arr = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    if w.kind == "uniform":
        return arr
    if w.kind == "logit_normal":
        with np.errstate(divide="ignore"):
            return stats.norm.cdf(special.logit(arr), loc=w.a, scale=w.b)
    return stats.beta.cdf(arr, w.a, w.b)
