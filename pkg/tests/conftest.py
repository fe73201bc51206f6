import numpy as np
import pytest

from tmlab.evaluation import gen_dataset, sliced_wasserstein
from tmlab.model import Model
from tmlab.nets.models import BackboneConfig, HeadConfig, ModelConfig
from tmlab.rng import Streams
from tmlab.samplers import SamplerSpec, dtm_sample
from tmlab.schedules import TimeWeighting
from tmlab.training import TrainConfig, train

GAUSS8_SEEDS = (0, 1, 2)


def gauss8_model_config() -> ModelConfig:
    return ModelConfig("dtm", BackboneConfig(2, 64, 2), HeadConfig("mlp", 64, 2))


def gauss8_train_config(steps: int = 5000) -> TrainConfig:
    return TrainConfig(mode="dtm", k_h=4, steps=steps, batch=256, lr=2e-3,
                       weighting_t=TimeWeighting.logit_normal(), weighting_s=TimeWeighting.logit_normal())


@pytest.fixture(scope="session")
def gauss8_runs():
    """Train one D-TM MLP-head model per seed on gauss8 and score it against held-out data.

    Shared by the acceptance suite and the training tests so the 5k-step runs
    happen once per session.
    """
    import time

    runs = []
    for seed in GAUSS8_SEEDS:
        start = time.perf_counter()
        root = Streams(seed)
        data = gen_dataset("gauss8", 20_000, root.child("data", "train").generator())
        held = gen_dataset("gauss8", 10_000, root.child("data", "heldout").generator()).x.reshape(-1, 2)
        model = Model.init(gauss8_model_config(), seed)
        res = train(model, data, gauss8_train_config(), root.child("train"))
        spec = SamplerSpec(T=32, S=32)
        sw = {}
        for name, m in (("untrained", model), ("trained", res.model)):
            x = dtm_sample(m, spec, root.child("sample"), n=10_000).reshape(-1, 2)
            sw[name] = sliced_wasserstein(x, held, 512, root.child("eval").generator())
        runs.append({"seed": seed, "trace": res.trace, "sw": sw, "seconds": time.perf_counter() - start})
    return runs


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion and return whether it passed."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {title}: {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
