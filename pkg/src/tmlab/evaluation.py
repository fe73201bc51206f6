"""Toy datasets, sample-set distances and rank aggregation across metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from tmlab.oracle import GaussianMixtureTarget

DATASETS = ("gauss8", "two_moons", "checkerboard")


@dataclass
class Dataset:
    x: np.ndarray  # (N, 1, 2)
    labels: np.ndarray  # (N,)
    name: str = ""
    n_classes: int = 0

    def __len__(self) -> int:
        return self.x.shape[0]

    def __iter__(self):
        return iter(zip(self.x, self.labels.tolist()))


def gen_dataset(name: str, n: int, rng: np.random.Generator) -> Dataset:
    """Labelled 2-D point sets, each point stored as a one-token state (1, 2)."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    if name == "gauss8":
        x, labels = GaussianMixtureTarget.gauss8().sample(n, rng)
        return Dataset(x, labels, name, 8)
    if name == "two_moons":
        labels = rng.integers(0, 2, n)
        angle = np.pi * rng.random(n)
        upper = np.stack([np.cos(angle), np.sin(angle)], axis=-1)
        lower = np.stack([1.0 - np.cos(angle), 0.5 - np.sin(angle)], axis=-1)
        pts = np.where(labels[:, None] == 0, upper, lower) + 0.05 * rng.standard_normal((n, 2))
        # centre and scale to roughly unit variance
        pts = (pts - np.array([0.5, 0.25])) * 1.5
        return Dataset(pts[:, None, :], labels, name, 2)
    if name == "checkerboard":
        # 4x4 board on [-2, 2]^2; points live on the 8 "black" cells
        cell = rng.integers(0, 8, n)
        row = cell // 2
        col = 2 * (cell % 2) + (row % 2)
        pts = np.stack([col, row], axis=-1) + rng.random((n, 2)) - 2.0
        return Dataset(pts[:, None, :], cell, name, 8)
    raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    a = a.reshape(a.shape[0], -1)
    if a.shape[0] == 0:
        raise ValueError("sample sets must be non-empty")
    return a


def wasserstein_1d(u: np.ndarray, v: np.ndarray) -> float:
    """W1 between the empirical distributions of two 1-D samples of any sizes."""
    u, v = np.sort(u), np.sort(v)
    if u.size == v.size:
        return float(np.mean(np.abs(u - v)))
    allv = np.concatenate([u, v])
    allv.sort()
    deltas = np.diff(allv)
    cu = np.searchsorted(u, allv[:-1], side="right") / u.size
    cv = np.searchsorted(v, allv[:-1], side="right") / v.size
    return float(np.sum(np.abs(cu - cv) * deltas))


def random_directions(dim: int, n_proj: int, rng: np.random.Generator) -> np.ndarray:
    """Unit directions for slicing.

    In 2-D the angles are stratified over [0, pi) with a random offset in each
    stratum (unbiased, lower variance); in 1-D the directions are random signs;
    otherwise normalised Gaussians.
    """
    if dim == 1:
        return rng.choice([-1.0, 1.0], size=(n_proj, 1))
    if dim == 2:
        angles = (np.arange(n_proj) + rng.random(n_proj)) * np.pi / n_proj
        return np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    g = rng.standard_normal((n_proj, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _project(a: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    # elementwise accumulation rather than a BLAS product, so each projected
    # value depends only on its own row and reordering a set changes nothing
    out = a[:, :1] * dirs[:, 0]
    for k in range(1, a.shape[1]):
        out = out + a[:, k : k + 1] * dirs[:, k]
    return out


def sliced_wasserstein(a, b, n_proj: int, rng: np.random.Generator) -> float:
    """Mean over random unit directions of the 1-D W1 between projected samples."""
    a, b = _as_points(a), _as_points(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    dirs = random_directions(a.shape[1], n_proj, rng)
    pa, pb = _project(a, dirs), _project(b, dirs)
    if a.shape[0] == b.shape[0]:
        return float(np.mean(np.abs(np.sort(pa, axis=0) - np.sort(pb, axis=0))))
    return float(np.mean([wasserstein_1d(pa[:, j], pb[:, j]) for j in range(n_proj)]))


def _mean_pairwise(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    total = 0.0
    for i in range(0, a.shape[0], chunk):
        total += cdist(a[i : i + chunk], b).sum()
    return total / (a.shape[0] * b.shape[0])


def energy_distance(a, b) -> float:
    """``2 E|A - B| - E|A - A'| - E|B - B'|`` over all pairs (V-statistic)."""
    a, b = _as_points(a), _as_points(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    value = 2.0 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)
    return max(value, 0.0)


# ---------------------------------------------------------------- ranking


@dataclass
class MetricTable:
    models: list[str]
    metrics: list[tuple[str, bool]]  # (name, higher_is_better)
    scores: np.ndarray  # (models, metrics)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.models), len(self.metrics)):
            raise ValueError(f"scores shape {self.scores.shape} does not match {len(self.models)} models x {len(self.metrics)} metrics")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("metric table has missing or non-finite scores")
        if len(set(self.models)) != len(self.models):
            raise ValueError("model ids must be unique")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model_id"] + [f"metric:{name}:{'max' if hib else 'min'}" for name, hib in self.metrics])
            for model, row in zip(self.models, self.scores):
                w.writerow([model] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> MetricTable:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], [r for r in rows[1:] if r]
        if header[0] != "model_id":
            raise ValueError(f"{path}: first column must be model_id")
        metrics = []
        for col in header[1:]:
            parts = col.split(":")
            if len(parts) != 3 or parts[0] != "metric" or parts[2] not in ("max", "min"):
                raise ValueError(f"{path}: bad metric column {col!r}; expected metric:<name>:max|min")
            metrics.append((parts[1], parts[2] == "max"))
        return cls([r[0] for r in body], metrics, np.array([[float(v) for v in r[1:]] for r in body]))

    @classmethod
    def concat(cls, tables: list[MetricTable]) -> MetricTable:
        metrics = tables[0].metrics
        if any(t.metrics != metrics for t in tables):
            raise ValueError("tables have different metric columns")
        return cls([m for t in tables for m in t.models], metrics, np.vstack([t.scores for t in tables]))


def rank_aggregate(tbl: MetricTable) -> dict[str, float]:
    """Average per-metric rank divided by the number of models.

    On each metric the best model gets rank M and the worst rank 1; ties share
    the average of the ranks they cover.
    """
    m = len(tbl.models)
    oriented = np.where([hib for _, hib in tbl.metrics], tbl.scores, -tbl.scores)
    ranks = rankdata(oriented, method="average", axis=0)
    score = ranks.mean(axis=1) / m
    return dict(zip(tbl.models, score.tolist()))


def write_rank_csv(path: str | Path, scores: dict[str, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "rank_score"])
        for model, s in scores.items():
            w.writerow([model, repr(float(s))])
