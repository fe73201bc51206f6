"""Transition-matching and flow-matching objectives and the training loop.

Per-item randomness: for a loss call with stream ``rng`` every random
quantity (t, condition dropout, head times s, head noise Y0) comes from its own
child stream (``rng.child("t")`` and so on) drawn as a table indexed by item
id. An item therefore sees the same draws wherever it sits in the batch, and
a test can replay the draws exactly.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np

from tmlab.model import Model
from tmlab.nets import autodiff as ad
from tmlab.nets.autodiff import NonFiniteError
from tmlab.nets.grad import value_and_grad
from tmlab.nets.models import NULL_CLASS, backbone_forward, fm_forward, head_forward
from tmlab.nets.optim import AdamState, adam_step
from tmlab.process import Parameterization, interpolate, target_y
from tmlab.rng import Streams, as_streams
from tmlab.schedules import TimeWeighting, sample_times


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "dtm"
    k_h: int = 4
    weighting_t: TimeWeighting = field(default_factory=TimeWeighting.uniform)
    weighting_s: TimeWeighting = field(default_factory=TimeWeighting.uniform)
    tpt: bool = False
    cond_drop_p: float = 0.15
    lr: float = 1e-3
    lr_decay: bool = True
    steps: int = 5000
    batch: int = 256
    fm_target: Parameterization = Parameterization.DIFFERENCE
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in ("dtm", "fm"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.k_h < 1:
            raise ValueError("head batch size k_h must be >= 1")
        if not 0.0 <= self.cond_drop_p <= 1.0:
            raise ValueError("cond_drop_p must lie in [0, 1]")
        if self.steps < 0 or self.batch < 1 or self.log_every < 1:
            raise ValueError("steps >= 0, batch >= 1 and log_every >= 1 are required")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        object.__setattr__(self, "fm_target", Parameterization.parse(self.fm_target))


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"training diverged at step {step}: {cause}")


@dataclass
class Batch:
    x0: np.ndarray
    x1: np.ndarray
    cond: np.ndarray | None = None
    ids: np.ndarray | None = None
    # fixed backbone times; drawn from the weighting when None
    t: np.ndarray | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.shape != self.x1.shape or self.x0.ndim != 3 or self.x0.shape[0] == 0:
            raise ValueError("batch needs non-empty x0 and x1 of equal shape (B, n, d)")
        if self.ids is None:
            self.ids = np.arange(len(self))
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (len(self),) or len(np.unique(self.ids)) != len(self) or self.ids.min() < 0:
            raise ValueError("batch ids must be distinct non-negative integers, one per item")

    def __len__(self) -> int:
        return self.x0.shape[0]


def cfg_dropout(cond: int, p: float, rng: np.random.Generator) -> int:
    """Replace a class id with the null condition with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    return NULL_CLASS if rng.random() < p else cond


@dataclass
class ItemDraws:
    t: np.ndarray  # (B,)
    keep: np.ndarray  # (B,) bool, False where the condition is dropped
    s: np.ndarray  # (B, k_h) or (B, k_h, n)
    y0: np.ndarray  # (B, k_h, n, d)


def draw_item_randomness(batch: Batch, cfg: TrainConfig, rng: Streams, state_shape) -> ItemDraws:
    rows = int(batch.ids.max()) + 1
    ids = batch.ids
    n, d = state_shape
    if batch.t is None:
        t = sample_times(cfg.weighting_t, rng.child("t").generator(), rows)[ids]
    else:
        t = np.broadcast_to(np.asarray(batch.t, dtype=np.float64), (len(batch),))
    keep = rng.child("drop").generator().random(rows)[ids] >= cfg.cond_drop_p
    s_shape = (rows, cfg.k_h, n) if cfg.tpt else (rows, cfg.k_h)
    s = sample_times(cfg.weighting_s, rng.child("s").generator(), s_shape)[ids]
    y0 = rng.child("y0").generator().standard_normal((rows, cfg.k_h, n, d))[ids]
    return ItemDraws(t, keep, s, y0)


def _conditions(model: Model, batch: Batch, keep: np.ndarray):
    if model.n_classes == 0 or batch.cond is None:
        return None
    cond = np.asarray(batch.cond, dtype=np.int64)
    return np.where(keep, cond, NULL_CLASS)


def _flow_target(y0, y1, target: Parameterization):
    if target is Parameterization.DIFFERENCE:
        return y1 - y0
    if target is Parameterization.DENOISER:
        return y1
    return y0


def tm_loss_closure(model: Model, batch: Batch, draws: ItemDraws, cfg: TrainConfig) -> Callable:
    mc = model.config
    if mc.head.arch != "mlp" and cfg.tpt:
        raise ValueError("time-per-token needs an MLP head")
    dtype = model.params.dtype
    B, k = len(batch), cfg.k_h
    t = draws.t
    x_t = interpolate(batch.x0, batch.x1, t[:, None, None])
    y1 = target_y(batch.x0, batch.x1, mc.parameterization)
    cond = _conditions(model, batch, draws.keep)
    rep = np.repeat(np.arange(B), k)
    y1_r = y1[rep]
    y0 = draws.y0.reshape((B * k,) + y1.shape[1:])
    s = draws.s.reshape((B * k,) + draws.s.shape[2:])
    s_b = s[:, :, None] if cfg.tpt else s[:, None, None]
    y_s = ((1.0 - s_b) * y0 + s_b * y1_r).astype(dtype)
    target = _flow_target(y0, y1_r, cfg.fm_target).astype(dtype)

    def closure(p):
        h = backbone_forward(p, mc.backbone, x_t, t, cond)
        h_r = ad.take(h, rep)
        pred = head_forward(p, mc.head, y_s, h_r, s)
        with ad.scope("loss"):
            return ad.sum_(ad.square(pred - target)) * (1.0 / (B * k))

    return closure


def fm_loss_closure(model: Model, batch: Batch, draws: ItemDraws, cfg: TrainConfig) -> Callable:
    mc = model.config
    dtype = model.params.dtype
    B = len(batch)
    t = draws.t
    x_t = interpolate(batch.x0, batch.x1, t[:, None, None])
    target = _flow_target(batch.x0, batch.x1, cfg.fm_target).astype(dtype)
    cond = _conditions(model, batch, draws.keep)

    def closure(p):
        pred = fm_forward(p, mc.backbone, x_t, t, cond)
        with ad.scope("loss"):
            return ad.sum_(ad.square(pred - target)) * (1.0 / B)

    return closure


def _check_mode(model: Model, cfg: TrainConfig, mode: str) -> None:
    if cfg.mode != mode or model.kind != mode:
        raise ValueError(f"{mode} loss needs a {mode} model and config (model={model.kind}, config={cfg.mode})")
    if cfg.fm_target is not model.config.fm_target:
        raise ValueError("training fm_target differs from the model's fm_target")


def tm_loss(model: Model, batch: Batch, cfg: TrainConfig, rng: Streams | int) -> tuple[float, np.ndarray]:
    """Head-batch TM loss and its gradient w.r.t. all model parameters.

    Each item draws ``t``, forms ``X_t`` and its target ``Y1``, then ``k_h``
    pairs ``(s_i, Y0_i)``; the loss averages
    ``|u(Y_{s_i} | h_t, s_i) - (Y1 - Y0_i)|^2`` over items and pairs.
    """
    _check_mode(model, cfg, "dtm")
    draws = draw_item_randomness(batch, cfg, as_streams(rng), model.state_shape)
    return value_and_grad(tm_loss_closure(model, batch, draws, cfg), model.params)


def fm_loss(model: Model, batch: Batch, cfg: TrainConfig, rng: Streams | int) -> tuple[float, np.ndarray]:
    _check_mode(model, cfg, "fm")
    draws = draw_item_randomness(batch, replace(cfg, k_h=1, tpt=False), as_streams(rng), model.state_shape)
    return value_and_grad(fm_loss_closure(model, batch, draws, cfg), model.params)


@dataclass
class TrainResult:
    model: Model
    trace: list[tuple[int, float, float]]
    optimizer: AdamState


def train(model: Model, dataset, cfg: TrainConfig, rng: Streams | int, log: Callable | None = None) -> TrainResult:
    """Adam training on ``dataset`` (an object with ``x`` (N, n, d) and ``labels``).

    Returns a new model; the input model is not modified. The trace holds
    ``(step, loss, wallclock_ms)`` for step 0, every ``log_every`` steps and the
    final step.
    """
    streams = as_streams(rng)
    loss_fn = tm_loss if cfg.mode == "dtm" else fm_loss
    _check_mode(model, cfg, cfg.mode)
    out = Model(model.config, model.params.copy())
    state = AdamState.zeros_like(out.params)
    data_x = np.asarray(dataset.x, dtype=np.float64)
    labels = getattr(dataset, "labels", None)
    if data_x.shape[1:] != tuple(model.state_shape):
        raise ValueError(f"dataset states {data_x.shape[1:]} do not match model {model.state_shape}")
    trace = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        st = streams.child("step", step)
        g = st.child("batch").generator()
        idx = g.integers(0, data_x.shape[0], cfg.batch)
        x0 = g.standard_normal((cfg.batch,) + data_x.shape[1:])
        cond = labels[idx] if (labels is not None and out.n_classes > 0) else None
        batch = Batch(x0, data_x[idx], cond)
        try:
            loss, grad = loss_fn(out, batch, cfg, st)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, exc) from exc
        lr = cfg.lr * (1.0 - step / cfg.steps) if cfg.lr_decay else cfg.lr
        params, state = adam_step(out.params, grad, state, lr)
        out.set_params(params)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = (step, loss, (time.perf_counter() - start) * 1e3)
            trace.append(row)
            if log is not None:
                log(*row)
    return TrainResult(out, trace, state)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,wallclock_ms\n")
        for step, loss, ms in trace:
            fh.write(f"{step},{loss:.9g},{ms:.3f}\n")
