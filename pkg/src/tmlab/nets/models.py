"""Backbone encoder, MLP and transformer-lite heads, sequence-scaling maps.

Forward functions are pure in ``(params, inputs)``; ``params`` is a mapping
from parameter name to ``Tensor`` (differentiable leaves during training,
constants during sampling). Inputs are numpy arrays shaped ``(B, n, d)``.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass

import numpy as np

from tmlab.nets import autodiff as ad
from tmlab.nets.autodiff import Tensor
from tmlab.nets.params import NetParams, ParamBuilder
from tmlab.process import Parameterization

TIME_EMB_DIM = 16
NULL_CLASS = -1
_FREQS = np.exp(np.linspace(0.0, math.log(1000.0), TIME_EMB_DIM // 2))


def time_embedding(t, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal features of a time in [0, 1]; shape ``t.shape + (16,)``."""
    phase = np.asarray(t, dtype=np.float64)[..., None] * _FREQS
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1).astype(dtype)


@dataclass(frozen=True)
class BackboneConfig:
    d_in: int
    d_b: int
    layers: int = 2
    cond_classes: int = 0
    n_tokens: int = 1

    def __post_init__(self):
        if self.d_in < 1 or self.d_b < 1 or self.layers < 1 or self.n_tokens < 1:
            raise ValueError(f"invalid backbone config {self}")
        if self.cond_classes < 0:
            raise ValueError("cond_classes must be >= 0")


@dataclass(frozen=True)
class HeadConfig:
    arch: str = "mlp"
    d_h: int = 64
    layers: int = 2
    seq_scale: int = 1
    # None: the three scaling maps exist iff seq_scale > 1
    scale_maps: bool | None = None

    def __post_init__(self):
        if self.arch not in ("mlp", "transformer"):
            raise ValueError(f"unknown head arch {self.arch!r}")
        if self.d_h < 1 or self.layers < 1 or self.seq_scale < 1:
            raise ValueError(f"invalid head config {self}")
        if self.scale_maps is False and self.seq_scale > 1:
            raise ValueError("seq_scale > 1 requires the scaling maps")

    @property
    def has_scale_maps(self) -> bool:
        return self.seq_scale > 1 if self.scale_maps is None else self.scale_maps


@dataclass(frozen=True)
class ModelConfig:
    """A D-TM model (backbone + head) or an FM baseline (backbone + linear readout)."""

    kind: str
    backbone: BackboneConfig
    head: HeadConfig | None = None
    parameterization: Parameterization = Parameterization.DIFFERENCE
    fm_target: Parameterization = Parameterization.DIFFERENCE

    def __post_init__(self):
        if self.kind not in ("dtm", "fm"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "dtm" and self.head is None:
            raise ValueError("a dtm model needs a head config")
        object.__setattr__(self, "parameterization", Parameterization.parse(self.parameterization))
        object.__setattr__(self, "fm_target", Parameterization.parse(self.fm_target))
        if self.head is not None and self.backbone.n_tokens > 1 and self.head.seq_scale > 1:
            root = math.isqrt(self.head.seq_scale)
            if root * root != self.head.seq_scale:
                raise ValueError("seq_scale must be a perfect square on token grids")

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "backbone": asdict(self.backbone),
            "head": asdict(self.head) if self.head is not None else None,
            "parameterization": self.parameterization.value,
            "fm_target": self.fm_target.value,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(
            kind=d["kind"],
            backbone=BackboneConfig(**d["backbone"]),
            head=HeadConfig(**d["head"]) if d.get("head") is not None else None,
            parameterization=d.get("parameterization", "difference"),
            fm_target=d.get("fm_target", "difference"),
        )


# ---------------------------------------------------------------- init


def init_backbone(cfg: BackboneConfig, b: ParamBuilder) -> None:
    d_in = cfg.d_in + TIME_EMB_DIM
    b.gaussian("bb.in.w", (d_in, cfg.d_b))
    b.zeros("bb.in.b", (cfg.d_b,))
    if cfg.n_tokens > 1:
        b.gaussian("bb.pos", (cfg.n_tokens, cfg.d_b), fan_in=cfg.d_b)
    if cfg.cond_classes > 0:
        # the last row is the learned null condition
        b.gaussian("bb.cond", (cfg.cond_classes + 1, cfg.d_b), fan_in=cfg.d_b)
    for i in range(cfg.layers):
        b.gaussian(f"bb.l{i}.w", (cfg.d_b, cfg.d_b))
        b.zeros(f"bb.l{i}.b", (cfg.d_b,))
        if cfg.n_tokens > 1:
            b.gaussian(f"bb.l{i}.mix", (cfg.d_b, cfg.d_b))
    b.gaussian("bb.out.w", (cfg.d_b, cfg.d_b))
    b.zeros("bb.out.b", (cfg.d_b,))


def init_scale_maps(d: int, d_b: int, l: int, b: ParamBuilder) -> None:
    b.gaussian("seq.in_y", (d, l * d))
    b.gaussian("seq.in_h", (d_b, l * d_b))
    b.gaussian("seq.out_y", (l * d, d))


def init_head(cfg: HeadConfig, d: int, d_b: int, b: ParamBuilder) -> None:
    if cfg.has_scale_maps:
        init_scale_maps(d, d_b, cfg.seq_scale, b)
    d_in = d + d_b + TIME_EMB_DIM
    b.gaussian("head.in.w", (d_in, cfg.d_h))
    b.zeros("head.in.b", (cfg.d_h,))
    if cfg.arch == "mlp":
        for i in range(1, cfg.layers):
            b.gaussian(f"head.l{i}.w", (cfg.d_h, cfg.d_h))
            b.zeros(f"head.l{i}.b", (cfg.d_h,))
    else:
        for i in range(cfg.layers):
            pre = f"head.blk{i}"
            b.ones(f"{pre}.ln1.g", (cfg.d_h,))
            b.zeros(f"{pre}.ln1.b", (cfg.d_h,))
            for name in ("q", "k", "v", "o"):
                b.gaussian(f"{pre}.attn.{name}", (cfg.d_h, cfg.d_h))
            b.ones(f"{pre}.ln2.g", (cfg.d_h,))
            b.zeros(f"{pre}.ln2.b", (cfg.d_h,))
            b.gaussian(f"{pre}.fc1.w", (cfg.d_h, 2 * cfg.d_h))
            b.zeros(f"{pre}.fc1.b", (2 * cfg.d_h,))
            b.gaussian(f"{pre}.fc2.w", (2 * cfg.d_h, cfg.d_h))
            b.zeros(f"{pre}.fc2.b", (cfg.d_h,))
        b.ones("head.lnf.g", (cfg.d_h,))
        b.zeros("head.lnf.b", (cfg.d_h,))
    b.zeros("head.out.w", (cfg.d_h, d))
    b.zeros("head.out.b", (d,))


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> NetParams:
    b = ParamBuilder(rng, dtype)
    init_backbone(cfg.backbone, b)
    if cfg.kind == "dtm":
        init_head(cfg.head, cfg.backbone.d_in, cfg.backbone.d_b, b)
    else:
        b.zeros("fm.out.w", (cfg.backbone.d_b, cfg.backbone.d_in))
        b.zeros("fm.out.b", (cfg.backbone.d_in,))
    return b.build()


def identity_scale_maps(d: int, d_b: int, dtype=np.float64) -> NetParams:
    """Scaling maps for ``l = 1`` that leave tokens untouched."""
    return NetParams(
        np.concatenate([np.eye(d).ravel(), np.eye(d_b).ravel(), np.eye(d).ravel()]).astype(dtype),
        [("seq.in_y", (d, d)), ("seq.in_h", (d_b, d_b)), ("seq.out_y", (d, d))],
    )


# ---------------------------------------------------------------- forward


def _tensors(p) -> Mapping[str, Tensor]:
    return p.constants() if isinstance(p, NetParams) else p


def _dense(x, p: Mapping[str, Tensor], name: str) -> Tensor:
    out = ad.matmul(x, p[f"{name}.w"])
    bias = p.get(f"{name}.b")
    return out + bias if bias is not None else out


def _cond_index(cfg: BackboneConfig, cond, batch: int) -> np.ndarray | None:
    if cfg.cond_classes == 0:
        if cond is not None and np.any(np.asarray(cond) != NULL_CLASS):
            raise ValueError("backbone has no conditioning but a class id was given")
        return None
    if cond is None:
        idx = np.full(batch, NULL_CLASS)
    else:
        idx = np.broadcast_to(np.asarray(cond, dtype=np.int64), (batch,))
    if np.any(idx < NULL_CLASS) or np.any(idx >= cfg.cond_classes):
        raise ValueError(f"unknown class id in {np.unique(idx)}; valid ids are 0..{cfg.cond_classes - 1} and {NULL_CLASS}")
    return np.where(idx == NULL_CLASS, cfg.cond_classes, idx)


def backbone_forward(p, cfg: BackboneConfig, x_t: np.ndarray, t, cond=None) -> Tensor:
    """Latent ``h`` of shape ``(B, n, d_b)`` for states ``x_t`` at times ``t``."""
    p = _tensors(p)
    x_t = np.asarray(x_t)
    if x_t.ndim != 3 or x_t.shape[1:] != (cfg.n_tokens, cfg.d_in):
        raise ValueError(f"backbone expects (B, {cfg.n_tokens}, {cfg.d_in}), got {x_t.shape}")
    dtype = p["bb.in.w"].dtype
    batch, n, _ = x_t.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    temb = np.broadcast_to(time_embedding(t, dtype)[:, None, :], (batch, n, TIME_EMB_DIM))
    inp = np.concatenate([x_t.astype(dtype), temb], axis=-1)
    cond_idx = _cond_index(cfg, cond, batch)
    with ad.scope("backbone"):
        with ad.scope("in"):
            a = _dense(inp, p, "bb.in")
            if cfg.n_tokens > 1:
                a = a + p["bb.pos"]
            if cond_idx is not None:
                a = a + ad.take(p["bb.cond"], cond_idx).reshape(batch, 1, cfg.d_b)
            a = ad.silu(a)
        for i in range(cfg.layers):
            with ad.scope(f"l{i}"):
                z = _dense(a, p, f"bb.l{i}")
                if cfg.n_tokens > 1:
                    z = z + ad.matmul(ad.mean(a, axis=1, keepdims=True), p[f"bb.l{i}.mix"])
                a = a + ad.silu(z)
        with ad.scope("out"):
            return _dense(a, p, "bb.out")


def _expand_s(s, rows: int, n: int) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0:
        return np.full((rows, n), float(s))
    if s.shape == (rows,):
        return np.repeat(s[:, None], n, axis=1)
    if s.shape == (rows, n):
        return s
    raise ValueError(f"head time must be scalar, (R,) or (R, n); got {s.shape} for R={rows}, n={n}")


def _mlp_core(p, cfg: HeadConfig, inp) -> Tensor:
    with ad.scope("in"):
        a = ad.silu(_dense(inp, p, "head.in"))
    for i in range(1, cfg.layers):
        with ad.scope(f"l{i}"):
            a = ad.silu(_dense(a, p, f"head.l{i}"))
    with ad.scope("out"):
        return _dense(a, p, "head.out")


def _attention(p, pre: str, u: Tensor, d_h: int) -> Tensor:
    q = ad.matmul(u, p[f"{pre}.attn.q"])
    k = ad.matmul(u, p[f"{pre}.attn.k"])
    v = ad.matmul(u, p[f"{pre}.attn.v"])
    logits = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d_h))
    weights = ad.softmax(logits, axis=-1)
    return ad.matmul(ad.matmul(weights, v), p[f"{pre}.attn.o"])


def _transformer_core(p, cfg: HeadConfig, inp) -> Tensor:
    with ad.scope("in"):
        x = _dense(inp, p, "head.in")
    for i in range(cfg.layers):
        pre = f"head.blk{i}"
        with ad.scope(f"blk{i}.attn"):
            x = x + _attention(p, pre, ad.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"]), cfg.d_h)
        with ad.scope(f"blk{i}.mlp"):
            u = ad.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            x = x + _dense(ad.silu(_dense(u, p, f"{pre}.fc1")), p, f"{pre}.fc2")
    with ad.scope("out"):
        x = ad.layer_norm(x, p["head.lnf.g"], p["head.lnf.b"])
        return _dense(x, p, "head.out")


def head_forward(p, cfg: HeadConfig, y, h, s) -> Tensor:
    """Head prediction for ``y`` (R, n, d) given latents ``h`` (R, n, d_b) and head time ``s``.

    ``s`` is a scalar, one time per row ``(R,)``, or one time per token
    ``(R, n)`` (time-per-token, MLP heads only). With sequence scaling the head
    is wrapped as ``out_y(u(in_y y | in_h h))``.
    """
    p = _tensors(p)
    dtype = p["head.in.w"].dtype
    y = y if isinstance(y, Tensor) else ad.const(np.asarray(y, dtype=dtype))
    h = h if isinstance(h, Tensor) else ad.const(np.asarray(h, dtype=dtype))
    rows, n, d = y.shape
    d_b = h.shape[-1]
    s_arr = np.asarray(s, dtype=np.float64)
    if cfg.arch == "transformer" and s_arr.ndim == 2:
        raise ValueError("transformer heads share one head time across tokens; per-token s is not allowed")
    s_tok = _expand_s(s_arr, rows, n)
    l = cfg.seq_scale
    with ad.scope("head"):
        if cfg.has_scale_maps:
            with ad.scope("scale_in"):
                y = ad.matmul(y, p["seq.in_y"]).reshape(rows, n * l, d)
                h = ad.matmul(h, p["seq.in_h"]).reshape(rows, n * l, d_b)
            s_tok = np.repeat(s_tok, l, axis=1)
        if s_arr.ndim == 0:
            semb = np.broadcast_to(time_embedding(s_arr, dtype), s_tok.shape + (TIME_EMB_DIM,))
        else:
            semb = time_embedding(s_tok, dtype)
        inp = ad.concat([y, h, ad.const(semb)], axis=-1)
        core = _mlp_core if cfg.arch == "mlp" else _transformer_core
        out = core(p, cfg, inp)
        if cfg.has_scale_maps:
            with ad.scope("scale_out"):
                out = ad.matmul(out.reshape(rows, n, l * d), p["seq.out_y"])
    return out


def fm_forward(p, cfg: BackboneConfig, x_t, t, cond=None) -> Tensor:
    """FM baseline: backbone latent followed by a linear readout to ``d`` channels."""
    p = _tensors(p)
    h = backbone_forward(p, cfg, x_t, t, cond)
    with ad.scope("fm_out"):
        return _dense(h, p, "fm.out")
