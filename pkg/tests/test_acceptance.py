"""Acceptance criteria 1-10, one test each.

Every test prints a single ``PASS``/``FAIL`` line (also collected into the
pytest terminal summary) before asserting. Run with
``pytest tests/test_acceptance.py -s`` to see the lines inline.
"""

import time

import numpy as np
from scipy import stats

from conftest import GAUSS8_SEEDS
from tmlab.checks import RENOISE_PAIRS, gradient_cases, renoise_marginal_stats
from tmlab.evaluation import MetricTable, rank_aggregate
from tmlab.model import Model
from tmlab.nets.grad import finite_difference_grad, max_relative_error, value_and_grad
from tmlab.nets.models import BackboneConfig, HeadConfig, ModelConfig
from tmlab.oracle import GaussianMixtureTarget, mc_moment_check
from tmlab.process import Parameterization, advance_state, interpolate, target_y
from tmlab.rng import Streams
from tmlab.samplers import (
    OracleHead,
    OracleVelocity,
    SamplerSpec,
    dtm_sample,
    fm_stochastic_sample,
    stochastic_dtm_sample,
)
from tmlab.schedules import TimeWeighting, cdf, sample_times


def test_criterion_01_parameterization_equivalence(report):
    g = np.random.default_rng(20)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        x0, x1 = g.standard_normal((2, 1, 2))
        # kept off the Noise (t = 0) and Denoiser (t = 1) singularities, where the
        # rounding already present in x_t is amplified by t2 / t or 1 / (1 - t)
        t, t2 = np.sort(g.uniform(0.01, 0.99, 2))
        want = interpolate(x0, x1, t2)
        x_t = interpolate(x0, x1, t)
        for p in Parameterization:
            got = advance_state(x_t, t, t2, target_y(x0, x1, p), p)
            worst = max(worst, float(np.max(np.abs(got - want)) / np.max(np.abs(want))))
    seconds = time.perf_counter() - start
    ok = worst <= 1e-12 and seconds < 1.0
    assert report(1, "parameterization equivalence", ok, f"max rel err {worst:.2e} (<=1e-12), {seconds:.2f}s (<1s)")


def test_criterion_02_renoise_marginals(report):
    n = 200_000
    x1 = np.array([[1.3, -0.7]])
    g = np.random.default_rng(21)
    start = time.perf_counter()
    parts, ok = [], True
    for t2, t3 in RENOISE_PAIRS:
        mean_err, var_err = renoise_marginal_stats(t2, t3, x1, n, g)
        mean_bound = 4 * (1 - t2) / np.sqrt(n)
        ok &= mean_err <= mean_bound and var_err <= 0.015
        parts.append(f"({t2},{t3}) mean {mean_err:.2e}/{mean_bound:.2e} var {var_err:.2%}")
    seconds = time.perf_counter() - start
    ok &= seconds < 10.0
    assert report(2, "re-noising marginals", ok, "; ".join(parts) + f"; {seconds:.2f}s (<10s)")


def test_criterion_03_c_zero_bit_identical(report):
    cfg = ModelConfig("dtm", BackboneConfig(2, 32, 2), HeadConfig("mlp", 32, 2))
    model = Model.init(cfg, 3)
    g = np.random.default_rng(3)
    model.set_params(model.params.with_values(model.params.values + 0.1 * g.standard_normal(model.params.size).astype(np.float32)))
    cells = []
    for T in (1, 8, 32):
        for tau in sorted({1, max(1, T // 2), T}):
            lin = dtm_sample(model, SamplerSpec(T=T, S=8), 5, n=256)
            sto = stochastic_dtm_sample(model, SamplerSpec(T=T, S=8, c=0.0, tau=tau, mode="dtm_stochastic"), 5, n=256)
            cells.append(lin.tobytes() == sto.tobytes())
    ok = all(cells)
    assert report(3, "c=0 degeneracy", ok, f"{sum(cells)}/{len(cells)} (T,tau) cells bit-identical")


def test_criterion_04_gradients(report):
    worst = {}
    for seed in (0, 1, 2):
        for name, (closure, params) in gradient_cases(seed).items():
            _, analytic = value_and_grad(closure, params)
            err = max_relative_error(analytic, finite_difference_grad(closure, params))
            worst[name] = max(worst.get(name, 0.0), err)
    expected = {"backbone", "mlp_head", "transformer_head", "seq_scale_l1", "seq_scale_l4"}
    ok = set(worst) == expected and max(worst.values()) < 1e-4
    assert report(4, "finite-difference gradients", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<1e-4)")


def test_criterion_05_oracle_end_to_end(report):
    gm = GaussianMixtureTarget.gauss8()
    mean, var = gm.mean().ravel(), gm.cov_diag().ravel()
    n = 100_000
    start = time.perf_counter()
    failures, count, worst = [], 0, 0.0
    for p in Parameterization:
        for T in (1, 4, 32):
            rep = mc_moment_check(lambda k: dtm_sample(OracleHead(gm, p), SamplerSpec(T=T, S=1), Streams(5).child(p.value, T), n=k),
                                  mean, var, n, 4.0)
            count, worst = count + 1, max(worst, rep.worst)
            if not rep.passed:
                failures.append(f"{p.value} T={T}: {rep.summary()}")
    for T in (1, 4, 32):
        for c in (0.0, 0.2, 0.8):
            for tau in sorted({1, T}):
                spec = SamplerSpec(T=T, S=1, c=c, tau=tau, mode="dtm_stochastic")
                rep = mc_moment_check(lambda k: stochastic_dtm_sample(OracleHead(gm), spec, Streams(5).child("s", T, c, tau), n=k),
                                      mean, var, n, 4.0)
                count, worst = count + 1, max(worst, rep.worst)
                if not rep.passed:
                    failures.append(f"stochastic T={T} c={c} tau={tau}: {rep.summary()}")
    seconds = time.perf_counter() - start
    ok = not failures and seconds < 60.0
    detail = f"{count - len(failures)}/{count} configurations within z=4 (worst z {worst:.2f}), {seconds:.1f}s (<60s)"
    assert report(5, "oracle end-to-end", ok, detail + "".join("; " + f for f in failures))


def test_criterion_06_stochastic_fm(report):
    target = GaussianMixtureTarget.single([1.5, -0.5], 0.5)
    n, T = 200_000, 32
    mean_bound = 4 * target.std / np.sqrt(n)
    parts, ok = [], True
    for c in (0.0, 0.2, 0.8):
        for tau in (1, T):
            spec = SamplerSpec(T=T, mode="fm_stochastic", c=c, tau=tau, ode_solver="midpoint")
            x = fm_stochastic_sample(OracleVelocity(target), spec, Streams(6).child(c, tau), n=n).reshape(n, -1)
            mean_err = float(np.max(np.abs(x.mean(axis=0) - target.means[0].ravel())))
            var_err = float(np.max(np.abs(x.var(axis=0, ddof=1) / target.std**2 - 1)))
            ok &= mean_err <= mean_bound and var_err <= 0.015
            parts.append(f"c={c} tau={tau} mean {mean_err:.1e} var {var_err:.2%}")
    assert report(6, "stochastic FM terminal moments", ok, f"bounds mean {mean_bound:.1e}, var 1.5%; " + "; ".join(parts))


def test_criterion_07_time_weighting_ks(report):
    weightings = [TimeWeighting.uniform(), TimeWeighting.logit_normal(0, 1), TimeWeighting.logit_normal(-0.5, 1),
                  TimeWeighting.beta(0.1, 1.3), TimeWeighting.beta(0.5, 2.0), TimeWeighting.beta(1.1, 2.4)]
    pvals = {}
    for i, w in enumerate(weightings):
        x = sample_times(w, Streams(7).child(i).generator(), 100_000)
        pvals[str(w)] = stats.kstest(x, lambda v, w=w: cdf(w, v)).pvalue
    ok = min(pvals.values()) > 0.001
    assert report(7, "time-weighting KS", ok, ", ".join(f"{k} p={v:.3f}" for k, v in pvals.items()) + " (>0.001)")


def test_criterion_08_rank_aggregation(report):
    metrics = [("m1", True), ("m2", False), ("m3", True), ("m4", False)]
    scores = np.array([
        [0.9, 2.0, 10.0, 0.3],
        [0.5, 1.0, 10.0, 0.1],
        [0.7, 3.0, 5.0, 0.2],
    ])
    # ranks (best = 3): A 3, 2, 2.5, 1   B 1, 3, 2.5, 3   C 2, 1, 1, 2
    want = {"A": 17 / 24, "B": 19 / 24, "C": 12 / 24}
    got = rank_aggregate(MetricTable(["A", "B", "C"], metrics, scores))
    exact = got == want
    transforms = [np.exp, lambda v: v**3 - 4.0, lambda v: -1.0 / (v + 1.0), np.log]
    invariant = True
    for col in range(4):
        for f in transforms:
            moved = scores.copy()
            moved[:, col] = f(moved[:, col])
            invariant &= rank_aggregate(MetricTable(["A", "B", "C"], metrics, moved)) == want
    ok = exact and invariant
    detail = f"scores {got} (expected {want}); monotone invariance over 4 columns x 4 transforms: {invariant}"
    assert report(8, "rank aggregation", ok, detail)


def test_criterion_09_gauss8_learning_signal(report, gauss8_runs):
    ratios = [r["sw"]["untrained"] / r["sw"]["trained"] for r in gauss8_runs]
    trained = np.array([r["sw"]["trained"] for r in gauss8_runs])
    variation = float(trained.std(ddof=1) / trained.mean())
    slowest = max(r["seconds"] for r in gauss8_runs)
    ok = len(gauss8_runs) == len(GAUSS8_SEEDS) and min(ratios) >= 5 and variation <= 0.2 and slowest < 300
    detail = (f"SW reduction {', '.join(f'{x:.1f}x' for x in ratios)} (>=5x); trained SW "
              f"{', '.join(f'{v:.4f}' for v in trained)}, variation {variation:.1%} (<=20%); "
              f"slowest run {slowest:.0f}s (<300s)")
    assert report(9, "gauss8 learning signal", ok, detail)


def test_criterion_10_nfe_accounting(report):
    cfg = ModelConfig("dtm", BackboneConfig(2, 16, 2), HeadConfig("mlp", 16, 2))
    model = Model.init(cfg, 10)
    cells = []
    for T, S in ((1, 1), (4, 8), (32, 4), (16, 32)):
        for spec in (SamplerSpec(T=T, S=S), SamplerSpec(T=T, S=S, c=0.5, tau=max(1, T // 2), mode="dtm_stochastic")):
            (dtm_sample if spec.mode == "dtm_linear" else stochastic_dtm_sample)(model, spec, 0, n=16)
            cells.append((spec.mode, T, S, model.counters.backbone_nfe, model.counters.head_nfe))
    bad = [c for c in cells if (c[3], c[4]) != (c[1], c[1] * c[2])]
    ok = not bad
    assert report(10, "NFE accounting", ok, f"{len(cells) - len(bad)}/{len(cells)} runs report exactly T and T*S" + (f"; off: {bad}" if bad else ""))
