"""Experiment configuration: a JSON document validated field by field.

``seed`` and ``mode`` have no defaults; everything else does. Unknown keys
are rejected so that a typo never silently falls back to a default.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from tmlab.nets.models import BackboneConfig, HeadConfig, ModelConfig
from tmlab.samplers import MODES, SamplerSpec
from tmlab.schedules import TimeWeighting
from tmlab.training import TrainConfig

MANIFEST_FORMAT = "tmlab-run-manifest-v1"

ParamName = Literal["difference", "denoiser", "noise"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WeightingSection(_Strict):
    kind: Literal["uniform", "logit_normal", "beta"] = "uniform"
    mu: float | None = None
    sigma: float | None = Field(default=None, gt=0)
    alpha: float | None = Field(default=None, gt=0)
    beta: float | None = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _params_match_kind(self):
        allowed = {"uniform": set(), "logit_normal": {"mu", "sigma"}, "beta": {"alpha", "beta"}}[self.kind]
        given = {k for k in ("mu", "sigma", "alpha", "beta") if getattr(self, k) is not None}
        if given - allowed:
            raise ValueError(f"{sorted(given - allowed)} not valid for a {self.kind} weighting")
        if self.kind == "beta" and given != allowed:
            raise ValueError("beta weighting needs both alpha and beta")
        return self

    def build(self) -> TimeWeighting:
        if self.kind == "uniform":
            return TimeWeighting.uniform()
        if self.kind == "logit_normal":
            return TimeWeighting.logit_normal(self.mu or 0.0, 1.0 if self.sigma is None else self.sigma)
        return TimeWeighting.beta(self.alpha, self.beta)


class DatasetSection(_Strict):
    name: Literal["gauss8", "two_moons", "checkerboard"] = "gauss8"
    n: int = Field(default=20000, ge=1)
    heldout: int = Field(default=10000, ge=1)


class HeadSection(_Strict):
    arch: Literal["mlp", "transformer"] = "mlp"
    d_h: int = Field(default=64, ge=1)
    layers: int = Field(default=2, ge=1)
    seq_scale: int = Field(default=1, ge=1)


class ModelSection(_Strict):
    d_b: int = Field(default=64, ge=1)
    layers: int = Field(default=2, ge=1)
    conditional: bool = False
    parameterization: ParamName = "difference"
    fm_target: ParamName = "difference"
    head: HeadSection = HeadSection()


class TrainSection(_Strict):
    steps: int = Field(default=5000, ge=0)
    batch: int = Field(default=256, ge=1)
    lr: float = Field(default=2e-3, gt=0)
    lr_decay: bool = True
    k_h: int = Field(default=4, ge=1)
    tpt: bool = False
    cond_drop_p: float = Field(default=0.15, ge=0, le=1)
    weighting_t: WeightingSection = WeightingSection(kind="logit_normal")
    weighting_s: WeightingSection = WeightingSection(kind="logit_normal")
    log_every: int = Field(default=100, ge=1)


class SamplerSection(_Strict):
    mode: Literal[MODES] | None = None  # defaults to the linear sampler of the model kind
    T: int = Field(default=32, ge=1)
    S: int = Field(default=32, ge=1)
    c: float = Field(default=0.0, ge=0, le=1)
    tau: int = Field(default=1, ge=1)
    omega: float = Field(default=6.5, ge=0)
    cfg_convention: Literal["conventional", "paper_literal"] = "conventional"
    ode_solver: Literal["euler", "midpoint"] = "euler"
    n: int = Field(default=10000, ge=1)
    cond: int | None = None
    # optional sweep: one sample file per (c, tau) cell
    sweep_c: list[float] | None = None
    sweep_tau: list[int] | None = None

    @model_validator(mode="after")
    def _tau_within_T(self):
        for tau in [self.tau] + list(self.sweep_tau or []):
            if tau > self.T:
                raise ValueError(f"tau={tau} exceeds T={self.T}")
        for c in self.sweep_c or []:
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"sweep_c value {c} outside [0, 1]")
        return self


class EvalSection(_Strict):
    metrics: list[Literal["sliced_wasserstein", "energy_distance"]] = ["sliced_wasserstein", "energy_distance"]
    n_proj: int = Field(default=512, ge=1)


class ExperimentConfig(_Strict):
    seed: int = Field(ge=0, lt=2**64)
    mode: Literal["dtm", "fm"]
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    sampler: SamplerSection = SamplerSection()
    eval: EvalSection = EvalSection()
    out_dir: str | None = None

    @model_validator(mode="after")
    def _consistent(self):
        mode = self.sampler.mode
        if mode is not None and not mode.startswith(self.mode):
            raise ValueError(f"sampler.mode {mode!r} does not match mode {self.mode!r}")
        if self.train.tpt and self.model.head.arch != "mlp":
            raise ValueError("train.tpt needs an mlp head")
        return self

    # ------------------------------------------------------------ builders

    @property
    def n_classes(self) -> int:
        return 8 if self.dataset.name in ("gauss8", "checkerboard") else 2

    def build_model_config(self) -> ModelConfig:
        m = self.model
        backbone = BackboneConfig(2, m.d_b, m.layers, self.n_classes if m.conditional else 0)
        head = HeadConfig(m.head.arch, m.head.d_h, m.head.layers, m.head.seq_scale) if self.mode == "dtm" else None
        return ModelConfig(self.mode, backbone, head, m.parameterization, m.fm_target)

    def build_train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            mode=self.mode, k_h=t.k_h, weighting_t=t.weighting_t.build(), weighting_s=t.weighting_s.build(),
            tpt=t.tpt, cond_drop_p=t.cond_drop_p, lr=t.lr, lr_decay=t.lr_decay, steps=t.steps,
            batch=t.batch, fm_target=self.model.fm_target, log_every=t.log_every,
        )

    def sampler_spec(self, c: float | None = None, tau: int | None = None) -> SamplerSpec:
        s = self.sampler
        mode = s.mode or ("dtm_linear" if self.mode == "dtm" else "fm_linear")
        return SamplerSpec(T=s.T, S=s.S, c=s.c if c is None else c, tau=s.tau if tau is None else tau,
                           omega=s.omega, mode=mode, cfg_convention=s.cfg_convention, ode_solver=s.ode_solver)

    def to_json_dict(self) -> dict:
        return self.model_dump(mode="json")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]], source: str = ""):
        self.errors = errors
        lines = [f"  {path}: {msg}" for path, msg in errors]
        head = f"invalid config{f' {source}' if source else ''}:"
        super().__init__("\n".join([head] + lines))


def _field_errors(exc: ValidationError) -> list[tuple[str, str]]:
    out = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append((path, err["msg"]))
    return out


def parse_config(data: dict, seed_override: int | None = None, source: str = "") -> ExperimentConfig:
    """Validate a config dict (or a run manifest, whose ``config`` entry is used)."""
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a JSON object")], source)
    if data.get("format") == MANIFEST_FORMAT:
        data = data["config"]
    data = dict(data)
    if seed_override is not None:
        data["seed"] = seed_override
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_field_errors(exc), source) from None


def load_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([("<root>", f"not valid JSON: {exc}")], str(path)) from None
    return parse_config(data, seed_override, str(path))
