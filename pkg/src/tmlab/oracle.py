"""Closed-form posteriors for isotropic Gaussian-mixture targets.

With ``X0 ~ N(0, I)`` and ``X1 ~ sum_k w_k N(m_k, sigma^2 I)``, each mixture
component makes ``(X_t, Y)`` jointly Gaussian, coordinate by coordinate, so
the posterior of Y given ``X_t = x`` is again a Gaussian mixture: components
are reweighted by their evidence ``N(x; t m_k, v_t I)`` and each is the usual
Gaussian conditional.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from tmlab.process import Parameterization


@dataclass(frozen=True)
class GaussianMixtureTarget:
    weights: np.ndarray
    means: np.ndarray  # (K, n, d)
    std: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim == 2:
            m = m[:, None, :]
        if w.ndim != 1 or w.size < 1 or m.shape[0] != w.size or m.ndim != 3:
            raise ValueError("weights must be (K,) and means (K, n, d)")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must lie on the simplex")
        if not self.std > 0:
            raise ValueError("component std must be > 0")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "std", float(self.std))

    @classmethod
    def gauss8(cls, radius: float = 2.0, std: float = 0.1) -> GaussianMixtureTarget:
        angles = 2.0 * np.pi * np.arange(8) / 8
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        return cls(np.full(8, 1.0 / 8), means[:, None, :], std)

    @classmethod
    def single(cls, mean, std: float) -> GaussianMixtureTarget:
        mean = np.asarray(mean, dtype=np.float64)
        if mean.ndim == 1:
            mean = mean[None, :]
        return cls(np.ones(1), mean[None], std)

    @property
    def state_shape(self) -> tuple[int, int]:
        return self.means.shape[1:]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def component(self, k: int) -> GaussianMixtureTarget:
        return GaussianMixtureTarget(np.ones(1), self.means[k : k + 1], self.std)

    def mean(self) -> np.ndarray:
        return np.tensordot(self.weights, self.means, axes=1)

    def cov_diag(self) -> np.ndarray:
        mu = self.mean()
        return np.tensordot(self.weights, (self.means - mu) ** 2, axes=1) + self.std**2

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        x = self.means[labels] + self.std * rng.standard_normal((n,) + self.state_shape)
        return x, labels


@dataclass
class PosteriorMixture:
    """Per-chain mixture: ``weights`` (B, K), ``means`` (B, K, n, d), shared isotropic ``var``."""

    weights: np.ndarray
    means: np.ndarray
    var: float

    def mean(self) -> np.ndarray:
        return np.einsum("bk,bk...->b...", self.weights, self.means)

    def variance(self) -> np.ndarray:
        mu = self.mean()
        spread = np.einsum("bk,bk...->b...", self.weights, (self.means - mu[:, None]) ** 2)
        return spread + self.var


def _moments(t: float, target: GaussianMixtureTarget, p: Parameterization):
    """Per-component (mean of Y, var of Y, cov(X_t, Y)) per coordinate."""
    s2 = target.std**2
    if p is Parameterization.DENOISER:
        return target.means, s2, t * s2
    if p is Parameterization.NOISE:
        return np.zeros_like(target.means), 1.0, 1.0 - t
    return target.means, s2 + 1.0, t * s2 - (1.0 - t)


def posterior_y_params(x_t: np.ndarray, t: float, target: GaussianMixtureTarget, p: Parameterization) -> PosteriorMixture:
    """Exact posterior of Y given ``X_t = x_t``; ``x_t`` is (n, d) or (B, n, d)."""
    p = Parameterization.parse(p)
    t = float(t)
    if not 0.0 <= t < 1.0:
        raise ValueError(f"posterior needs t in [0, 1), got {t} (X_t determines X_1 at t = 1)")
    x = np.asarray(x_t, dtype=np.float64)
    if x.shape[-2:] != target.state_shape:
        raise ValueError(f"state shape {x.shape[-2:]} does not match target {target.state_shape}")
    if x.ndim == 2:
        x = x[None]
    v_t = (1.0 - t) ** 2 + t**2 * target.std**2
    mu_y, var_y, cov = _moments(t, target, p)
    resid = x[:, None] - t * target.means[None]  # (B, K, n, d)
    log_w = np.log(target.weights)[None] - 0.5 * (resid**2).sum(axis=(2, 3)) / v_t
    # max-shifted softmax: exactly tied components get exactly equal weights
    w = np.exp(log_w - log_w.max(axis=1, keepdims=True))
    weights = w / w.sum(axis=1, keepdims=True)
    means = mu_y[None] + (cov / v_t) * resid
    var = max(var_y - cov**2 / v_t, 0.0)
    return PosteriorMixture(weights, means, var)


def sample_posterior_y(x_t, t, target, p, rng: np.random.Generator) -> np.ndarray:
    """One exact posterior draw of Y per chain; output has the shape of ``x_t``."""
    post = posterior_y_params(x_t, t, target, p)
    batch = post.weights.shape[0]
    u = rng.random(batch)
    cdf = np.cumsum(post.weights, axis=1)
    k = np.minimum((u[:, None] > cdf).sum(axis=1), cdf.shape[1] - 1)
    y = post.means[np.arange(batch), k] + np.sqrt(post.var) * rng.standard_normal(post.means.shape[:1] + post.means.shape[2:])
    return y if np.ndim(x_t) == 3 else y[0]


def marginal_velocity(x_t, t, target: GaussianMixtureTarget) -> np.ndarray:
    """Flow-matching marginal velocity ``E[X1 - X0 | X_t = x]``."""
    post = posterior_y_params(x_t, t, target, Parameterization.DIFFERENCE)
    v = post.mean()
    return v if np.ndim(x_t) == 3 else v[0]


def posterior_quadrature_1d(x: float, t: float, target: GaussianMixtureTarget, p: Parameterization,
                            grid: np.ndarray) -> tuple[float, float]:
    """Posterior mean and variance of Y by brute-force quadrature (1-D targets).

    Uses the change of variables ``(X0, X1) -> (X_t, Y)`` (unit Jacobian for
    Difference) and Bayes' rule on a dense grid of y values; independent of
    the closed form above.
    """
    p = Parameterization.parse(p)
    means = target.means.reshape(-1)

    def p1(v):
        comps = np.exp(-0.5 * ((v[:, None] - means[None]) / target.std) ** 2) / (np.sqrt(2 * np.pi) * target.std)
        return comps @ target.weights

    def p0(v):
        return np.exp(-0.5 * v**2) / np.sqrt(2 * np.pi)

    y = grid
    if p is Parameterization.DIFFERENCE:
        dens = p0(x - t * y) * p1(x + (1 - t) * y)
    elif p is Parameterization.DENOISER:
        dens = p1(y) * np.exp(-0.5 * ((x - t * y) / (1 - t)) ** 2)
    else:
        dens = p0(y) * p1((x - (1 - t) * y) / t)
    z = np.trapezoid(dens, y)
    m = np.trapezoid(y * dens, y) / z
    v = np.trapezoid((y - m) ** 2 * dens, y) / z
    return float(m), float(v)


@dataclass
class MomentReport:
    passed: bool
    mean_z: np.ndarray
    var_z: np.ndarray
    sample_mean: np.ndarray
    sample_var: np.ndarray
    z: float
    n: int
    notes: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return float(max(np.max(self.mean_z), np.max(self.var_z)))

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} N={self.n} z={self.z:g} max|mean z|={np.max(self.mean_z):.3f} "
                f"max|var z|={np.max(self.var_z):.3f}")


def mc_moment_check(sample_fn: Callable[[int], np.ndarray], expected_mean, expected_cov, n: int, z: float = 4.0) -> MomentReport:
    """Compare empirical mean and variance of ``n`` draws with expected values.

    The mean deviation of each coordinate is scaled by ``sqrt(var / n)``; the
    variance deviation by the standard error of the sample variance estimated
    from the fourth central moment, so heavy- and light-tailed targets get
    honest bounds. Both must stay within ``z`` standard errors.
    """
    if n < 1000:
        raise ValueError("mc_moment_check needs at least 1000 samples")
    x = np.asarray(sample_fn(n), dtype=np.float64).reshape(n, -1)
    mu = np.asarray(expected_mean, dtype=np.float64).reshape(-1)
    cov = np.asarray(expected_cov, dtype=np.float64)
    var = np.diag(cov) if cov.ndim == 2 and cov.shape[0] == cov.shape[1] == mu.size else cov.reshape(-1)
    m_hat = x.mean(axis=0)
    centered = x - m_hat
    v_hat = (centered**2).mean(axis=0) * n / (n - 1)
    m4 = (centered**4).mean(axis=0)
    se_mean = np.sqrt(var / n)
    se_var = np.sqrt(np.maximum(m4 - v_hat**2, 0.0) / n)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_z = np.abs(m_hat - mu) / se_mean
        var_z = np.abs(v_hat - var) / se_var
    mean_z = np.where(se_mean == 0, np.where(np.abs(m_hat - mu) < 1e-12, 0.0, np.inf), mean_z)
    var_z = np.where(se_var == 0, np.where(np.abs(v_hat - var) < 1e-12, 0.0, np.inf), var_z)
    finite = bool(np.all(np.isfinite(x)))
    passed = finite and bool(np.all(mean_z <= z)) and bool(np.all(var_z <= z))
    notes = [] if finite else ["non-finite samples"]
    return MomentReport(passed, mean_z, var_z, m_hat, v_hat, z, n, notes)
