"""Flat parameter vectors with a named layout, and the checkpoint file format.

Checkpoint layout: one line of UTF-8 JSON (the header, no embedded newlines),
a single ``\\n``, then the parameter vector as little-endian float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tmlab.nets.autodiff import Tensor

CHECKPOINT_FORMAT = "tmlab-checkpoint-v1"


@dataclass
class NetParams:
    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values)
        total = sum(int(np.prod(shape)) for _, shape in self.layout)
        if total != self.values.size or self.values.ndim != 1:
            raise ValueError(f"layout describes {total} values but vector has shape {self.values.shape}")
        self._offsets = {}
        offset = 0
        for name, shape in self.layout:
            if name in self._offsets:
                raise ValueError(f"duplicate parameter name {name!r}")
            size = int(np.prod(shape))
            self._offsets[name] = (offset, offset + size, tuple(shape))
            offset += size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def names(self) -> list[str]:
        return [name for name, _ in self.layout]

    def __contains__(self, name: str) -> bool:
        return name in self._offsets

    def __getitem__(self, name: str) -> np.ndarray:
        start, stop, shape = self._offsets[name]
        return self.values[start:stop].reshape(shape)

    def slice_of(self, name: str) -> slice:
        start, stop, _ = self._offsets[name]
        return slice(start, stop)

    def copy(self) -> NetParams:
        return NetParams(self.values.copy(), list(self.layout))

    def astype(self, dtype) -> NetParams:
        return NetParams(self.values.astype(dtype), list(self.layout))

    def with_values(self, values: np.ndarray) -> NetParams:
        return NetParams(np.asarray(values, dtype=self.values.dtype), list(self.layout))

    def leaves(self) -> dict[str, Tensor]:
        """Differentiable views of every parameter, keyed by name."""
        return {name: Tensor(self[name], requires_grad=True, name=name) for name in self.names()}

    def constants(self) -> dict[str, Tensor]:
        return {name: Tensor(self[name], name=name) for name in self.names()}

    def gather_grad(self, leaves: dict[str, Tensor]) -> np.ndarray:
        grad = np.zeros_like(self.values)
        for name, leaf in leaves.items():
            if leaf.grad is not None:
                grad[self.slice_of(name)] = leaf.grad.reshape(-1)
        return grad


class ParamBuilder:
    """Collects named parameter blocks in order, then freezes them into NetParams."""

    def __init__(self, rng: np.random.Generator, dtype=np.float64):
        self.rng = rng
        self.dtype = dtype
        self._blocks: list[tuple[str, np.ndarray]] = []

    def gaussian(self, name: str, shape: tuple[int, ...], fan_in: int | None = None) -> None:
        fan_in = fan_in if fan_in is not None else shape[0]
        self._blocks.append((name, self.rng.standard_normal(shape) / np.sqrt(fan_in)))

    def zeros(self, name: str, shape: tuple[int, ...]) -> None:
        self._blocks.append((name, np.zeros(shape)))

    def ones(self, name: str, shape: tuple[int, ...]) -> None:
        self._blocks.append((name, np.ones(shape)))

    def build(self) -> NetParams:
        layout = [(name, tuple(int(s) for s in block.shape)) for name, block in self._blocks]
        if not self._blocks:
            return NetParams(np.zeros(0, dtype=self.dtype), [])
        values = np.concatenate([block.reshape(-1) for _, block in self._blocks]).astype(self.dtype)
        return NetParams(values, layout)


def concat_params(*parts: NetParams) -> NetParams:
    layout = [entry for p in parts for entry in p.layout]
    values = [p.values for p in parts if p.size]
    dtype = parts[0].dtype if parts else np.float64
    return NetParams(np.concatenate(values).astype(dtype) if values else np.zeros(0, dtype), layout)


def save_checkpoint(path: str | Path, params: NetParams, header: dict) -> None:
    """Write the header (configs, seed, step) and the float32 payload."""
    meta = dict(header)
    meta["format"] = CHECKPOINT_FORMAT
    meta["layout"] = [[name, list(shape)] for name, shape in params.layout]
    meta["n_values"] = int(params.size)
    line = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    payload = params.values.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8") + b"\n")
        fh.write(payload)


def load_checkpoint(path: str | Path) -> tuple[NetParams, dict]:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    values = np.frombuffer(raw[newline + 1 :], dtype="<f4").astype(np.float32)
    if values.size != header["n_values"]:
        raise ValueError(f"{path}: payload has {values.size} values, header says {header['n_values']}")
    layout = [(name, tuple(shape)) for name, shape in header["layout"]]
    return NetParams(values, layout), header
