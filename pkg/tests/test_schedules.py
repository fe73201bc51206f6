import numpy as np
import pytest
from scipy import stats

from tmlab.schedules import TimeWeighting, cdf, density, sample_time, sample_times

TW = TimeWeighting
ALL = [TW.uniform(), TW.logit_normal(0, 1), TW.logit_normal(-0.5, 1), TW.beta(0.1, 1.3), TW.beta(0.5, 2.0),
       TW.beta(1.1, 2.4), TW.beta(2, 2)]


def test_density_examples():
    assert density(TW.uniform(), 0.3) == 1.0
    assert density(TW.beta(2, 2), 0.5) == pytest.approx(1.5, abs=1e-12)
    # change of variables through the sigmoid: phi(0) / (0.5 * 0.5)
    assert density(TW.logit_normal(0, 1), 0.5) == pytest.approx(4 / np.sqrt(2 * np.pi), abs=1e-12)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.2])
def test_density_rejects_closed_endpoints(t):
    with pytest.raises(ValueError):
        density(TW.uniform(), t)


@pytest.mark.parametrize("w", ALL, ids=str)
def test_density_integrates_to_one(w):
    eps = 1e-6
    t = np.linspace(eps, 1 - eps, 10_000)
    # mass outside (eps, 1 - eps) comes from the cdf
    tail = float(cdf(w, eps) + 1 - cdf(w, 1 - eps))
    if w.kind == "beta" and w.a < 2:
        # singular or cusped at the ends: log-spaced nodes towards both endpoints
        half = np.geomspace(eps, 0.5, 5_000)
        t = np.concatenate([half, 1 - half[::-1][1:]])
    assert np.trapezoid(density(w, t), t) + tail == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("w", ALL, ids=str)
def test_samples_in_open_interval_and_ks(w):
    x = sample_times(w, np.random.default_rng(1), 100_000)
    assert np.all((x > 0) & (x < 1))
    assert stats.kstest(x, lambda v: cdf(w, v)).pvalue > 0.001


def test_uniform_mean_and_logit_median():
    g = np.random.default_rng(2)
    u = sample_times(TW.uniform(), g, 100_000)
    assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / 1e5)
    ln = sample_times(TW.logit_normal(0, 1), g, 100_000)
    assert abs(np.median(ln) - 0.5) < 0.01


def test_beta11_matches_uniform():
    g = np.random.default_rng(3)
    a = sample_times(TW.beta(1, 1), g, 100_000)
    b = sample_times(TW.uniform(), g, 100_000)
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_sample_time_scalar_and_determinism():
    t = sample_time(TW.logit_normal(), np.random.default_rng(5))
    assert isinstance(t, float) and 0 < t < 1
    assert t == sample_time(TW.logit_normal(), np.random.default_rng(5))


def test_invalid_parameters():
    for bad in (lambda: TW.logit_normal(0, 0), lambda: TW.beta(0, 1), lambda: TW("cosine"), lambda: TW.beta(np.inf, 1)):
        with pytest.raises(ValueError):
            bad()


def test_dict_round_trip():
    for w in ALL:
        assert TW.from_dict(w.to_dict()) == w
