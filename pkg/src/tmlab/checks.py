"""Self-check suites run by ``tmlab check``.

Each check returns a :class:`CheckResult` with a margin: positive means the
observed statistic is inside its bound by that much (in the check's own
units), negative means it failed.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import asdict, dataclass

import numpy as np

from tmlab import samplers
from tmlab.nets import autodiff as ad
from tmlab.nets.grad import finite_difference_grad, max_relative_error, value_and_grad
from tmlab.nets.models import BackboneConfig, HeadConfig, ModelConfig, backbone_forward, head_forward, init_params
from tmlab.oracle import GaussianMixtureTarget, mc_moment_check, posterior_quadrature_1d, posterior_y_params
from tmlab.process import Parameterization, advance_state, interpolate, target_y
from tmlab.rng import Streams

SUITES = ("process", "gradients", "marginals", "oracle_end2end")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    margin: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.suite}/{self.name}: margin={self.margin:+.4g} ({self.detail}) {self.seconds:.2f}s"

    def to_dict(self) -> dict:
        return asdict(self)


def _result(suite, name, observed, bound, detail="") -> CheckResult:
    ok = bool(np.isfinite(observed) and observed <= bound)
    margin = float(bound - observed) if np.isfinite(observed) else float("-inf")
    return CheckResult(suite, name, ok, margin, detail or f"observed {observed:.4g} <= {bound:.4g}")


# ---------------------------------------------------------------- process


def advance_identity_error(n: int, rng: np.random.Generator) -> float:
    """Worst relative error of the three one-step advances against the true path point."""
    worst = 0.0
    for _ in range(n):
        x0, x1 = rng.standard_normal((2, 1, 2))
        t, t2 = np.sort(rng.uniform(0.01, 0.99, 2))
        want = interpolate(x0, x1, t2)
        x_t = interpolate(x0, x1, t)
        scale = max(np.max(np.abs(want)), 1e-300)
        for p in Parameterization:
            got = advance_state(x_t, t, t2, target_y(x0, x1, p), p)
            worst = max(worst, float(np.max(np.abs(got - want)) / scale))
    return worst


def _process_checks(seed: int):
    rng = Streams(seed).child("check", "process").generator()
    yield _result("process", "advance_identity", advance_identity_error(1000, rng), 1e-12)

    x0, x1 = rng.standard_normal((2, 4, 2))
    grid = np.sort(np.concatenate([[0.0, 1.0], rng.random(30)]))
    x = x0.copy()
    for a, b in zip(grid[:-1], grid[1:]):
        x = advance_state(x, a, b, x1 - x0, Parameterization.DIFFERENCE)
    yield _result("process", "telescoping", float(np.max(np.abs(x - x1))), 1e-10)


# ---------------------------------------------------------------- gradients


def gradient_cases(seed: int) -> dict[str, tuple[Callable, object]]:
    """Small f64 networks and scalar losses covering every trainable block."""
    g = Streams(seed).child("check", "grad").generator()
    cases = {}
    rows, d, d_b = 3, 2, 5

    def build(head, n_tokens=1, classes=3):
        cfg = ModelConfig("dtm", BackboneConfig(d, d_b, 2, classes, n_tokens), head)
        p = init_params(cfg, g, np.float64)
        # zero-initialized readouts would hide gradients of everything before them
        return cfg, p.with_values(p.values + 0.3 * g.standard_normal(p.values.size))

    cfg, p = build(HeadConfig("mlp", 6, 2), n_tokens=2)
    x, t, cond = g.standard_normal((rows, 2, d)), g.random(rows), np.array([0, 2, -1])
    w = g.standard_normal((rows, 2, d_b))
    cases["backbone"] = (lambda q: ad.sum_(backbone_forward(q, cfg.backbone, x, t, cond) * w), p)

    heads = {
        "mlp_head": (HeadConfig("mlp", 6, 2), 2, g.random((rows, 2))),
        "transformer_head": (HeadConfig("transformer", 6, 2), 3, g.random(rows)),
        "seq_scale_l1": (HeadConfig("mlp", 6, 1, seq_scale=1, scale_maps=True), 2, g.random(rows)),
        "seq_scale_l4": (HeadConfig("transformer", 6, 1, seq_scale=4), 1, g.random(rows)),
    }
    for name, (head, n, s) in heads.items():
        cfg_h, p_h = build(head, n_tokens=n)
        y, h = g.standard_normal((rows, n, d)), g.standard_normal((rows, n, d_b))
        cases[name] = ((lambda q, c=cfg_h, y=y, h=h, s=s: ad.mean(ad.square(head_forward(q, c.head, y, h, s)))), p_h)
    return cases


def _gradient_checks(seed: int, seeds=(0, 1, 2)):
    for name in gradient_cases(seed):
        worst = 0.0
        for k in seeds:
            closure, p = gradient_cases(seed + k)[name]
            _, analytic = value_and_grad(closure, p)
            worst = max(worst, max_relative_error(analytic, finite_difference_grad(closure, p)))
        yield _result("gradients", name, worst, 1e-4, f"max rel err {worst:.2e} < 1e-4 over {len(seeds)} seeds")


# ---------------------------------------------------------------- marginals

RENOISE_PAIRS = ((0.3, 0.6), (0.3, 1.0), (0.7, 0.9))


def renoise_marginal_stats(t2: float, t3: float, x1: np.ndarray, n: int, rng: np.random.Generator):
    """Re-noise exact time-``t3`` samples to ``t2``; return (max mean error, max relative variance error)."""
    x_t3 = t3 * x1 + (1.0 - t3) * rng.standard_normal((n,) + x1.shape)
    x_t2 = samplers.renoise(x_t3, t2, t3, rng)
    flat = x_t2.reshape(n, -1)
    mean_err = np.max(np.abs(flat.mean(axis=0) - (t2 * x1).reshape(-1)))
    var_err = np.max(np.abs(flat.var(axis=0, ddof=1) / (1.0 - t2) ** 2 - 1.0))
    return float(mean_err), float(var_err)


def _marginal_checks(seed: int, n: int = 200_000):
    rng = Streams(seed).child("check", "marginals").generator()
    x1 = np.array([[1.3, -0.7]])
    for t2, t3 in RENOISE_PAIRS:
        mean_err, var_err = renoise_marginal_stats(t2, t3, x1, n, rng)
        bound = 4.0 * (1.0 - t2) / np.sqrt(n)
        name = f"renoise_{t2:g}_{t3:g}"
        yield _result("marginals", name + "_mean", mean_err, bound)
        yield _result("marginals", name + "_var", var_err, 0.015)

    target = GaussianMixtureTarget.single([1.5, -0.5], 0.5)
    n_fm = 100_000
    for c, tau in ((0.2, 1), (0.8, 4)):
        spec = samplers.SamplerSpec(T=32, mode="fm_stochastic", c=c, tau=tau, ode_solver="midpoint")
        x = samplers.fm_stochastic_sample(samplers.OracleVelocity(target), spec, Streams(seed).child("fm", c, tau), n=n_fm)
        flat = x.reshape(n_fm, -1)
        mean_err = np.max(np.abs(flat.mean(axis=0) - target.means[0].reshape(-1)))
        var_err = np.max(np.abs(flat.var(axis=0, ddof=1) / target.std**2 - 1.0))
        yield _result("marginals", f"fm_stochastic_c{c:g}_tau{tau}_mean", mean_err, 4.0 * target.std / np.sqrt(n_fm))
        yield _result("marginals", f"fm_stochastic_c{c:g}_tau{tau}_var", var_err, 0.015)


# ---------------------------------------------------------------- oracle


def _oracle_checks(seed: int, n: int = 100_000):
    gm = GaussianMixtureTarget.gauss8()
    one_d = GaussianMixtureTarget(np.array([0.3, 0.7]), np.array([[[-1.0]], [[2.0]]]), 0.4)
    worst = 0.0
    for p in Parameterization:
        for x, t in ((0.3, 0.2), (-0.5, 0.6), (1.4, 0.9)):
            post = posterior_y_params(np.array([[[x]]]), t, one_d, p)
            qm, qv = posterior_quadrature_1d(x, t, one_d, p, np.linspace(-12.0, 12.0, 200_001))
            worst = max(worst, abs(float(post.mean().ravel()[0]) - qm), abs(float(post.variance().ravel()[0]) - qv))
    yield _result("oracle_end2end", "posterior_vs_quadrature", worst, 1e-6)

    mean, var = gm.mean().ravel(), gm.cov_diag().ravel()
    for p in Parameterization:
        for T in (1, 4, 32):
            spec = samplers.SamplerSpec(T=T, S=1)
            head = samplers.OracleHead(gm, p)
            rep = mc_moment_check(lambda k: samplers.dtm_sample(head, spec, Streams(seed).child("e2e", p.value, T), n=k),
                                  mean, var, n, 4.0)
            yield CheckResult("oracle_end2end", f"dtm_{p.value}_T{T}", rep.passed, 4.0 - rep.worst, rep.summary())
    for T in (1, 4, 32):
        for c in (0.0, 0.2, 0.8):
            for tau in sorted({1, T}):
                spec = samplers.SamplerSpec(T=T, S=1, c=c, tau=tau, mode="dtm_stochastic")
                head = samplers.OracleHead(gm)
                rep = mc_moment_check(
                    lambda k: samplers.stochastic_dtm_sample(head, spec, Streams(seed).child("e2e-s", T, c, tau), n=k),
                    mean, var, n, 4.0)
                yield CheckResult("oracle_end2end", f"stochastic_T{T}_c{c:g}_tau{tau}", rep.passed, 4.0 - rep.worst, rep.summary())


_RUNNERS = {
    "process": _process_checks,
    "gradients": _gradient_checks,
    "marginals": _marginal_checks,
    "oracle_end2end": _oracle_checks,
}


def run_suite(suite: str, seed: int = 0) -> list[CheckResult]:
    if suite not in _RUNNERS:
        raise ValueError(f"unknown check suite {suite!r}; expected one of {SUITES}")
    out = []
    it = iter(_RUNNERS[suite](seed))
    while True:
        start = time.perf_counter()
        try:
            res = next(it)
        except StopIteration:
            break
        res.seconds = time.perf_counter() - start
        out.append(res)
    return out
