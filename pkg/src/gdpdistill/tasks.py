"""Synthetic classification tasks: K Gaussian blobs in d dimensions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledSet
from .errors import DomainError


@dataclass
class MixtureSpec:
    dim: int = 16
    num_classes: int = 4
    per_class: int = 500
    test_per_class: int = 1000
    separation: float = 4.2  # pairwise distance between class means
    scale_spread: float = 0.0  # per-coordinate std drawn from exp(U[-spread, spread])
    seed: int = 2024

    def __post_init__(self):
        if self.dim < 1 or self.num_classes < 2 or self.per_class < 1 or self.test_per_class < 1:
            raise DomainError("mixture needs dim >= 1, at least two classes and non-empty splits")
        if self.separation <= 0:
            raise DomainError("separation must be positive")


@dataclass
class MixtureTask:
    spec: MixtureSpec
    means: np.ndarray  # (K, d)
    scales: np.ndarray  # (K, d) per-coordinate standard deviations
    train: LabeledSet
    test: LabeledSet
    validation: LabeledSet

    def bayes_predict(self, x: np.ndarray) -> np.ndarray:
        z = (x[:, None, :] - self.means[None]) / self.scales[None]
        loglik = -0.5 * (z**2).sum(axis=2) - np.log(self.scales).sum(axis=1)[None]
        return loglik.argmax(axis=1)

    def bayes_accuracy(self, n_per_class: int = 20000, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        sample = _draw(self.means, self.scales, n_per_class, rng)
        return float(np.mean(self.bayes_predict(sample.x) == sample.y))


def _simplex_means(k: int, d: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    # vertices of a regular simplex (all pairwise distances equal), randomly rotated into R^d
    if k - 1 > d:
        raise DomainError(f"cannot place {k} equidistant means in {d} dimensions")
    verts = np.eye(k) - 1.0 / k
    basis, _ = np.linalg.qr(verts.T @ np.eye(k))
    coords = verts @ basis[:, : k - 1]
    coords *= separation / np.linalg.norm(coords[0] - coords[1])
    rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return coords @ rot[: k - 1]


def _draw(means, scales, per_class, rng) -> LabeledSet:
    k, d = means.shape
    xs = [means[c] + scales[c] * rng.standard_normal((per_class, d)) for c in range(k)]
    ys = [np.full(per_class, c, dtype=np.int64) for c in range(k)]
    return LabeledSet(np.concatenate(xs), np.concatenate(ys), k)


def make_mixture(spec: MixtureSpec) -> MixtureTask:
    rng = np.random.default_rng(spec.seed)
    means = _simplex_means(spec.num_classes, spec.dim, spec.separation, rng)
    scales = np.exp(rng.uniform(-spec.scale_spread, spec.scale_spread, size=(spec.num_classes, spec.dim)))
    train = _draw(means, scales, spec.per_class, rng)
    test = _draw(means, scales, spec.test_per_class, rng)
    validation = _draw(means, scales, spec.test_per_class, rng)
    return MixtureTask(spec, means, scales, train, test, validation)
