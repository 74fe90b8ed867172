"""Gaussian differential privacy accounting.

Everything here is a pure function of its arguments. Budgets are carried as small
frozen dataclasses so that an invalid value (negative mu, delta outside [0, 1])
fails at construction rather than deep inside a conversion.

The subsampled-Gaussian formula :func:`subsampled_mu` is the limiting expression
of a central-limit argument as the number of iterations grows. It is applied at
finite ``T`` as is customary; for very small ``T`` it is an approximation, not a
certified bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np
from scipy import special

from .errors import ConvergenceError, DomainError, NoiseOverflowError

__all__ = [
    "GdpBudget",
    "DpBudget",
    "SubsamplingSpec",
    "TradeoffCurve",
    "normal_cdf",
    "log_normal_cdf",
    "normal_quantile",
    "gaussian_mechanism_mu",
    "compose",
    "compose_parallel",
    "gdp_to_dp",
    "dp_to_gdp",
    "dp_to_gdp_log",
    "gdp_log_delta",
    "subsampled_mu",
    "tradeoff_gmu",
    "SIGMA_OVERFLOW_THRESHOLD",
    "MU_SEARCH_BRACKET",
]

# exp(1/sigma^2) with 1/sigma^2 > 400 is far outside any useful noise level.
SIGMA_OVERFLOW_THRESHOLD = 0.05
MU_SEARCH_BRACKET = (1e-6, 1e3)


def _finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class GdpBudget:
    """A mu-GDP guarantee. ``mu == 0`` is a data-independent mechanism."""

    mu: float

    def __post_init__(self):
        mu = _finite("mu", self.mu)
        if mu < 0:
            raise DomainError(f"mu must be non-negative, got {mu!r}")
        object.__setattr__(self, "mu", mu)

    def __float__(self) -> float:
        return self.mu


@dataclass(frozen=True)
class DpBudget:
    """An (epsilon, delta) guarantee."""

    epsilon: float
    delta: float

    def __post_init__(self):
        eps = float(self.epsilon)
        delta = _finite("delta", self.delta)
        if math.isnan(eps) or eps < 0:
            raise DomainError(f"epsilon must be non-negative, got {eps!r}")
        if not 0.0 <= delta <= 1.0:
            raise DomainError(f"delta must lie in [0, 1], got {delta!r}")
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "delta", delta)


@dataclass(frozen=True)
class SubsamplingSpec:
    """Poisson sampling rate ``p``, iteration count ``T`` and noise multiplier ``sigma``."""

    p: float
    T: int
    sigma: float

    def __post_init__(self):
        p = _finite("p", self.p)
        sigma = _finite("sigma", self.sigma)
        if not 0.0 < p <= 1.0:
            raise DomainError(f"sampling probability p must lie in (0, 1], got {p!r}")
        if int(self.T) != self.T or self.T < 1:
            raise DomainError(f"iteration count T must be a positive integer, got {self.T!r}")
        if sigma <= 0:
            raise DomainError(f"noise multiplier sigma must be positive, got {sigma!r}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "sigma", sigma)


MuLike = Union[GdpBudget, float, int]


def _as_mu(value: MuLike) -> float:
    if isinstance(value, GdpBudget):
        return value.mu
    return GdpBudget(float(value)).mu


# ---------------------------------------------------------------------------
# Standard normal helpers


def normal_cdf(x: float) -> float:
    """Standard normal CDF, evaluated through erfc so both tails keep full relative accuracy."""
    x = _finite("x", x)
    return float(special.ndtr(x))


def log_normal_cdf(x: float) -> float:
    """log Phi(x); uses the asymptotic tail series for very negative x."""
    if math.isnan(x):
        raise DomainError("x must not be NaN")
    return float(special.log_ndtr(x))


def normal_quantile(q: float) -> float:
    """Inverse of :func:`normal_cdf`; returns +-inf at the endpoints."""
    q = float(q)
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"quantile level must lie in [0, 1], got {q!r}")
    return float(special.ndtri(q))


# ---------------------------------------------------------------------------
# Mechanisms and composition


def gaussian_mechanism_mu(sensitivity: float, sigma_noise: float) -> GdpBudget:
    """GDP parameter of adding N(0, sigma_noise^2) noise to a statistic with the given L2 sensitivity."""
    sensitivity = _finite("sensitivity", sensitivity)
    sigma_noise = _finite("sigma_noise", sigma_noise)
    if sensitivity <= 0:
        raise DomainError(f"sensitivity must be positive, got {sensitivity!r}")
    if sigma_noise <= 0:
        raise DomainError(f"noise standard deviation must be positive, got {sigma_noise!r}")
    return GdpBudget(sensitivity / sigma_noise)


def compose(budgets: Iterable[MuLike]) -> GdpBudget:
    """Sequential composition: sqrt(mu_1^2 + ... + mu_n^2)."""
    mus = [_as_mu(b) for b in budgets]
    if not mus:
        raise DomainError("cannot compose an empty list of mechanisms")
    return GdpBudget(math.hypot(*mus))


def compose_parallel(budgets: Iterable[MuLike]) -> GdpBudget:
    """Composition over mechanisms that touch disjoint shards: the worst shard wins.

    The caller is responsible for the disjointness claim.
    """
    mus = [_as_mu(b) for b in budgets]
    if not mus:
        raise DomainError("cannot compose an empty list of mechanisms")
    return GdpBudget(max(mus))


# ---------------------------------------------------------------------------
# GDP <-> (epsilon, delta)


def _log_delta(mu: float, eps: float) -> float:
    # delta = Phi(a) - e^eps Phi(b) = Phi(a) * (1 - exp(eps + log Phi(b) - log Phi(a)))
    a = -eps / mu + mu / 2.0
    b = -eps / mu - mu / 2.0
    log_pa = special.log_ndtr(a)
    log_ratio = eps + special.log_ndtr(b) - log_pa
    if log_ratio >= 0.0:
        # only reachable through rounding when delta is at the limit of resolution
        return -math.inf
    return float(log_pa + math.log(-math.expm1(log_ratio)))


def _delta(mu: float, eps: float) -> float:
    if mu == 0.0:
        return 0.0
    if math.isinf(eps):
        return 0.0
    return min(1.0, max(0.0, math.exp(_log_delta(mu, eps))))


def gdp_to_dp(mu: MuLike, epsilon: float) -> DpBudget:
    """The tightest delta at which a mu-GDP mechanism is (epsilon, delta)-DP."""
    mu_val = _as_mu(mu)
    eps = float(epsilon)
    if math.isnan(eps) or eps < 0:
        raise DomainError(f"epsilon must be non-negative, got {eps!r}")
    return DpBudget(eps, _delta(mu_val, eps))


def gdp_log_delta(mu: MuLike, epsilon: float) -> float:
    """log of the delta returned by :func:`gdp_to_dp`, without underflow; -inf when delta is 0."""
    mu_val = _as_mu(mu)
    eps = float(epsilon)
    if math.isnan(eps) or eps < 0:
        raise DomainError(f"epsilon must be non-negative, got {eps!r}")
    if mu_val == 0.0 or math.isinf(eps):
        return -math.inf
    return min(0.0, _log_delta(mu_val, eps))


def _solve_log_delta(eps: float, log_target: float) -> float:
    # bisection on log(delta), which is increasing in mu
    lo, hi = MU_SEARCH_BRACKET
    if _log_delta(hi, eps) < log_target:
        raise ConvergenceError(f"no mu <= {hi} reaches log(delta)={log_target!r} at epsilon={eps!r}")
    if _log_delta(lo, eps) >= log_target:
        return lo
    while hi - lo > 1e-9 * max(1.0, lo):
        mid = 0.5 * (lo + hi)
        if _log_delta(mid, eps) < log_target:
            lo = mid
        else:
            hi = mid
    mu = 0.5 * (lo + hi)

    # Newton polish; d(delta)/d(mu) = pdf(a), so d(log delta)/d(mu) = pdf(a) / delta
    for _ in range(2):
        ld = _log_delta(mu, eps)
        a = -eps / mu + mu / 2.0
        slope = math.exp(-0.5 * a * a - 0.5 * math.log(2 * math.pi) - ld)
        if not math.isfinite(slope) or slope <= 0.0:
            break
        candidate = mu - (ld - log_target) / slope
        if not lo * 0.5 < candidate < hi * 2.0:
            break
        if abs(_log_delta(candidate, eps) - log_target) <= abs(ld - log_target):
            mu = candidate
    return mu


def dp_to_gdp(target: DpBudget) -> GdpBudget:
    """Smallest mu whose (epsilon, delta) curve passes through ``target``.

    Bisection on log(delta) over :data:`MU_SEARCH_BRACKET`, then Newton polish using
    d(delta)/d(mu) = pdf(-eps/mu + mu/2). The result is rounded down, ulp by ulp,
    until its delta no longer exceeds the target.
    """
    eps, delta = target.epsilon, target.delta
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie strictly inside (0, 1), got {delta!r}")
    if math.isinf(eps):
        raise DomainError("epsilon must be finite to solve for mu")
    mu = _solve_log_delta(eps, math.log(delta))
    for _ in range(64):
        if math.exp(_log_delta(mu, eps)) <= delta:
            break
        mu = math.nextafter(mu, 0.0)
    return GdpBudget(mu)


def dp_to_gdp_log(epsilon: float, log_delta: float) -> GdpBudget:
    """:func:`dp_to_gdp` for a target given as log(delta), which may lie far below the float range."""
    eps, log_delta = float(epsilon), float(log_delta)
    if math.isnan(eps) or eps < 0 or math.isinf(eps):
        raise DomainError(f"epsilon must be finite and non-negative, got {eps!r}")
    if not (log_delta < 0.0 and math.isfinite(log_delta)):
        raise DomainError(f"log(delta) must be finite and negative, got {log_delta!r}")
    mu = _solve_log_delta(eps, log_delta)
    for _ in range(64):
        if _log_delta(mu, eps) <= log_delta:
            break
        mu = math.nextafter(mu, 0.0)
    return GdpBudget(mu)


# ---------------------------------------------------------------------------
# Subsampling and trade-off functions


def subsampled_mu(spec: SubsamplingSpec) -> GdpBudget:
    """mu = p * sqrt(T * (exp(1/sigma^2) - 1)) for Poisson-subsampled Gaussian iterations."""
    if spec.sigma < SIGMA_OVERFLOW_THRESHOLD:
        raise NoiseOverflowError(spec.sigma, SIGMA_OVERFLOW_THRESHOLD)
    return GdpBudget(spec.p * math.sqrt(spec.T * math.expm1(1.0 / spec.sigma**2)))


def tradeoff_gmu(mu: MuLike, x: float) -> float:
    """G_mu(x) = Phi(Phi^{-1}(1 - x) - mu): least type II error at type I error ``x``."""
    mu_val = _as_mu(mu)
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"type I error must lie in [0, 1], got {x!r}")
    if x == 0.0:
        return 1.0
    if x == 1.0:
        return 0.0
    # Phi^{-1}(1 - x) written as -Phi^{-1}(x) to keep precision for small x
    return float(special.ndtr(-special.ndtri(x) - mu_val))


@dataclass(frozen=True)
class TradeoffCurve:
    """The mu-GDP trade-off function as a callable."""

    mu: float

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_mu(self.mu))

    def __call__(self, x: float) -> float:
        return tradeoff_gmu(self.mu, x)
