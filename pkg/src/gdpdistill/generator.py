"""A small, auditable DP data generator and the k-means initialisation sampler.

The generator releases, for each class, the mean and the diagonal second moment of
the clipped private points through the Gaussian mechanism, then samples synthetic
points from the implied diagonal Gaussian. Everything downstream of the release is
post-processing and never touches the private set.

Neighbouring datasets replace one record; class counts are public. With points
clipped to norm R the class mean then moves by at most 2R/n_c. The second-moment
vector moves by at most R^2/n_c; the noise is calibrated to 2R^2/n_c, which is
conservative.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import gdp
from .data import LabeledSet, PrivateData, as_private
from .errors import DomainError, ParseError
from .nn import MLP, forward_features

VARIANCE_FLOOR = 1e-6
KMEANS_MAX_ITER = 50
MECHANISM = "moment_release"


def clip_norm_rows(x: np.ndarray, bound: float) -> np.ndarray:
    """Scale each row to L2 norm at most ``bound``."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x * np.minimum(1.0, bound / np.maximum(norms, 1e-300))


def mean_sensitivity(bound: float, n: int) -> float:
    return 2.0 * bound / n


def second_moment_sensitivity(bound: float, n: int) -> float:
    return 2.0 * bound * bound / n


@dataclass
class MechanismRecord:
    """One Gaussian release, as it appears in a privacy ledger."""

    name: str
    sigma: float  # noise multiplier relative to sensitivity
    sensitivity: float
    mu: float
    rule: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DpMoments:
    means: np.ndarray  # (K, d) noisy class means
    second_moments: np.ndarray  # (K, d) noisy E[x^2]
    variances: np.ndarray  # (K, d) derived, floored at VARIANCE_FLOOR
    counts: np.ndarray
    sigma_g: float
    bound: float
    clamped: np.ndarray  # (K, d) bool: variance was floored
    mu_g: float  # inf when sigma_g == 0, 0 when sigma_g == inf
    records: list[MechanismRecord] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_json(self) -> str:
        body = {
            "mu_g": self.mu_g if math.isfinite(self.mu_g) else "inf",
            "sigma_g": self.sigma_g,
            "bound": self.bound,
            "counts": self.counts.tolist(),
            "means": self.means.tolist(),
            "second_moments": self.second_moments.tolist(),
            "variances": self.variances.tolist(),
            "clamped": self.clamped.tolist(),
            "mechanisms": [{k: _enc(v) for k, v in r.to_dict().items()} for r in self.records],
        }
        return json.dumps(body, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DpMoments":
        try:
            body = json.loads(text)
            mu = body["mu_g"]
            return cls(
                means=np.array(body["means"], dtype=np.float64),
                second_moments=np.array(body["second_moments"], dtype=np.float64),
                variances=np.array(body["variances"], dtype=np.float64),
                counts=np.array(body["counts"], dtype=np.int64),
                sigma_g=float(body["sigma_g"]),
                bound=float(body["bound"]),
                clamped=np.array(body["clamped"], dtype=bool),
                mu_g=math.inf if mu == "inf" else float(mu),
                records=[MechanismRecord(**{k: _dec(v) for k, v in r.items()}) for r in body.get("mechanisms", [])],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed moments file: {exc}") from None


def _enc(v):
    return "inf" if isinstance(v, float) and math.isinf(v) else v


def _dec(v):
    return math.inf if v == "inf" else v


def release_moments(
    private: LabeledSet | PrivateData,
    sigma_g: float,
    bound: float,
    rng: np.random.Generator,
    mechanism: str = MECHANISM,
) -> DpMoments:
    """Per-class noisy mean and diagonal second moment of the clipped private points.

    Both releases use noise multiplier ``sigma_g``; per class they compose to
    sqrt(2)/sigma_g, and classes are disjoint so the total is the per-class maximum.
    Reads are charged to ``mechanism`` on the access log. ``sigma_g = inf`` (a zero
    generator budget) releases nothing: every class gets mean 0 and per-coordinate
    second moment bound^2 / d, the value for points spread evenly over the clip sphere.
    """
    if math.isnan(sigma_g) or sigma_g < 0:
        raise DomainError(f"sigma_g must be non-negative, got {sigma_g!r}")
    if bound <= 0:
        raise DomainError(f"clip bound must be positive, got {bound!r}")
    guard = as_private(private, [mechanism])
    K, d = guard.num_classes, guard.dim
    counts = guard.class_counts()
    if math.isinf(sigma_g):
        means = np.zeros((K, d))
        m2 = np.full((K, d), bound * bound / d)
        return DpMoments(means, m2, m2.copy(), counts, math.inf, float(bound), np.zeros((K, d), dtype=bool), 0.0)
    for c in range(K):
        if counts[c] == 0:
            raise DomainError(f"class {c} has no private points")
    class_rngs = rng.spawn(K)

    means = np.empty((K, d))
    m2 = np.empty((K, d))
    records: list[MechanismRecord] = []
    per_class_mu = []
    for c in range(K):
        xc = clip_norm_rows(guard.read_class(c, mechanism=mechanism), bound)
        n = len(xc)
        d_mean, d_m2 = mean_sensitivity(bound, n), second_moment_sensitivity(bound, n)
        z = class_rngs[c].standard_normal((2, d))
        means[c] = xc.mean(axis=0) + sigma_g * d_mean * z[0]
        m2[c] = (xc * xc).mean(axis=0) + sigma_g * d_m2 * z[1]
        if sigma_g > 0:
            mu_mean = gdp.gaussian_mechanism_mu(d_mean, sigma_g * d_mean).mu
            mu_m2 = gdp.gaussian_mechanism_mu(d_m2, sigma_g * d_m2).mu
            mu_c = gdp.compose([mu_mean, mu_m2]).mu
        else:
            mu_mean = mu_m2 = mu_c = math.inf
        records.append(MechanismRecord(f"{MECHANISM}/class{c}/mean", sigma_g, d_mean, mu_mean, "gaussian"))
        records.append(MechanismRecord(f"{MECHANISM}/class{c}/second_moment", sigma_g, d_m2, mu_m2, "gaussian"))
        per_class_mu.append(mu_c)

    if sigma_g > 0:
        mu_g = gdp.compose_parallel(per_class_mu).mu
    else:
        mu_g = math.inf
    raw_var = m2 - means**2
    clamped = raw_var < VARIANCE_FLOOR
    return DpMoments(
        means=means,
        second_moments=m2,
        variances=np.maximum(raw_var, VARIANCE_FLOOR),
        counts=counts,
        sigma_g=float(sigma_g),
        bound=float(bound),
        clamped=clamped,
        mu_g=mu_g,
        records=records,
    )


def sigma_for_moment_release(mu_g: float) -> float:
    """Noise multiplier that makes :func:`release_moments` spend exactly ``mu_g``."""
    if mu_g <= 0:
        raise DomainError(f"mu_g must be positive, got {mu_g!r}")
    return math.sqrt(2.0) / mu_g


def sample_synthetic(moments: DpMoments, count_per_class: int, rng: np.random.Generator) -> LabeledSet:
    """Draw ``count_per_class`` points per class from N(mean_c, diag(var_c)). Consumes no budget."""
    if count_per_class < 0:
        raise DomainError("count_per_class must be non-negative")
    K, d = moments.num_classes, moments.dim
    xs, ys = [], []
    for c in range(K):
        z = rng.standard_normal((count_per_class, d))
        xs.append(moments.means[c] + np.sqrt(moments.variances[c]) * z)
        ys.append(np.full(count_per_class, c, dtype=np.int64))
    return LabeledSet(np.concatenate(xs).reshape(-1, d), np.concatenate(ys), K)


def true_moments(data: LabeledSet, bound: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-class means and variances, optionally after clipping to ``bound``."""
    K = data.num_classes
    means, variances = np.empty((K, data.dim)), np.empty((K, data.dim))
    for c in range(K):
        xc = data.of_class(c)
        if bound is not None:
            xc = clip_norm_rows(xc, bound)
        means[c] = xc.mean(axis=0)
        variances[c] = xc.var(axis=0)
    return means, variances


def moment_distance(means_a, vars_a, means_b, vars_b) -> float:
    """Root-mean over classes of the squared 2-Wasserstein distance between diagonal Gaussians."""
    w2 = ((means_a - means_b) ** 2).sum(axis=1) + ((np.sqrt(vars_a) - np.sqrt(vars_b)) ** 2).sum(axis=1)
    return float(np.sqrt(w2.mean()))


# ---------------------------------------------------------------------------
# k-means initialisation


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            remaining = [i for i in range(n) if i not in set(chosen)]
            nxt = remaining[0]
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = KMEANS_MAX_ITER) -> np.ndarray:
    """Lloyd's algorithm from k-means++ seeds; returns the (k, dim) centroids."""
    centers = _kmeans_pp(points, k, rng)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(k):
            members = points[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


def nearest_distinct(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest not-yet-taken point for each centre, ties to the lowest index."""
    taken = np.zeros(len(points), dtype=bool)
    picks = []
    for c in centers:
        d2 = ((points - c) ** 2).sum(axis=1)
        d2[taken] = np.inf
        i = int(np.argmin(d2))  # argmin returns the first minimum
        taken[i] = True
        picks.append(i)
    return np.array(picks, dtype=np.int64)


def kmeans_sample(data: LabeledSet, ipc: int, extractor: MLP | None, rng: np.random.Generator) -> LabeledSet:
    """Per class, cluster extractor features into ``ipc`` groups and keep the point nearest each centroid."""
    if ipc < 1:
        raise DomainError("ipc must be positive")
    class_rngs = rng.spawn(data.num_classes)
    picks = []
    for c in range(data.num_classes):
        idx = data.class_indices(c)
        if len(idx) < ipc:
            raise DomainError(f"class {c} has {len(idx)} points, fewer than ipc={ipc}")
        x = data.x[idx]
        feats = forward_features(extractor, x) if extractor is not None else x
        centers = kmeans(feats, ipc, class_rngs[c])
        picks.append(idx[nearest_distinct(feats, centers)])
    return data.subset(np.concatenate(picks))
