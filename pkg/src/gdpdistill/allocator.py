"""Splitting a total (epsilon, delta) budget across generation, expert training and matching.

The generator and expert budgets are fixed first (either given explicitly or found by
a utility-targeted search over their noise multipliers); feature matching receives
whatever is left under sequential GDP composition.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Literal

from .errors import BracketError, DomainError, InfeasibleBudgetError
from .gdp import (
    DpBudget,
    GdpBudget,
    MuLike,
    SubsamplingSpec,
    _as_mu,
    compose,
    dp_to_gdp,
    gdp_to_dp,
    subsampled_mu,
)

__all__ = [
    "AllocationPlan",
    "UtilityProbe",
    "sigma_for_budget",
    "allocate",
    "search_noise_for_target",
    "budget_slack",
]


def sigma_for_budget(mu_f: MuLike, p: float, T: int) -> float:
    """Noise multiplier at which ``T`` Poisson-subsampled Gaussian steps spend exactly ``mu_f``.

    Inverts mu = p * sqrt(T * (exp(1/sigma^2) - 1)), i.e.
    sigma = ln(1 + mu^2 / (p^2 T)) ** -1/2.
    """
    mu = _as_mu(mu_f)
    if mu <= 0:
        raise InfeasibleBudgetError(
            f"feature-matching budget must be positive, got mu={mu!r}", ("mu_f",)
        )
    SubsamplingSpec(p, T, 1.0)  # validates p and T
    return 1.0 / math.sqrt(math.log1p(mu * mu / (p * p * T)))


@dataclass(frozen=True)
class AllocationPlan:
    total: DpBudget
    mu_total: GdpBudget
    mu_g: GdpBudget
    mu_e: GdpBudget
    mu_f: GdpBudget
    sigma_g: float
    sigma_e: float
    sigma_f: float
    spec_f: SubsamplingSpec
    spec_e: SubsamplingSpec | None = None

    @property
    def composed(self) -> GdpBudget:
        return compose([self.mu_g, self.mu_e, self.mu_f])

    def delta_spent(self) -> float:
        return gdp_to_dp(self.composed, self.total.epsilon).delta

    def to_dict(self) -> dict:
        out = asdict(self)
        out["delta_spent"] = self.delta_spent()
        out["delta_slack"] = self.total.delta - out["delta_spent"]
        return out


def budget_slack(plan: AllocationPlan) -> float:
    """delta_total minus the delta actually spent by the composed plan."""
    return plan.total.delta - plan.delta_spent()


def _sigma_from_gaussian_mu(mu: float) -> float:
    # a single unit-sensitivity Gaussian release; mu == 0 means nothing is released
    return math.inf if mu == 0 else 1.0 / mu


def allocate(
    total: DpBudget,
    mu_g: MuLike,
    mu_e: MuLike,
    p: float,
    T: int,
    *,
    p_e: float | None = None,
    T_e: int | None = None,
) -> AllocationPlan:
    """Give feature matching the remainder mu_f = sqrt(mu_total^2 - mu_g^2 - mu_e^2).

    ``p`` is the per-class Poisson rate B/n_class of the matching loop, ``T`` its
    iteration count. ``p_e``/``T_e`` describe the expert's DP-SGD loop; without them
    ``sigma_e`` is reported as that of a single Gaussian release.
    """
    mu_total = dp_to_gdp(total)
    g, e = _as_mu(mu_g), _as_mu(mu_e)
    remaining = mu_total.mu**2 - g * g - e * e
    if remaining <= 0:
        over = tuple(
            name for name, v in (("mu_g", g), ("mu_e", e)) if v > 0
        ) or ("mu_g", "mu_e")
        raise InfeasibleBudgetError(
            f"mu_g={g:.6g} and mu_e={e:.6g} use "
            f"{math.hypot(g, e):.6g} >= mu_total={mu_total.mu:.6g}; "
            f"overspent components: {', '.join(over)}",
            over,
        )
    mu_f = GdpBudget(math.sqrt(remaining))
    sigma_f = sigma_for_budget(mu_f, p, T)

    spec_e = None
    if p_e is not None and T_e is not None:
        if e > 0:
            sigma_e = sigma_for_budget(e, p_e, T_e)
            spec_e = SubsamplingSpec(p_e, T_e, sigma_e)
        else:
            sigma_e = math.inf
    else:
        sigma_e = _sigma_from_gaussian_mu(e)

    return AllocationPlan(
        total=total,
        mu_total=mu_total,
        mu_g=GdpBudget(g),
        mu_e=GdpBudget(e),
        mu_f=mu_f,
        sigma_g=_sigma_from_gaussian_mu(g),
        sigma_e=sigma_e,
        sigma_f=sigma_f,
        spec_f=SubsamplingSpec(p, T, sigma_f),
        spec_e=spec_e,
    )


@dataclass
class UtilityProbe:
    """A utility score as a function of a noise multiplier, and the score we want.

    ``evaluate`` is assumed monotone in sigma over the searched bracket. The search
    checks the endpoints and raises :class:`BracketError` if they do not straddle
    ``target``; interior non-monotonicity is not detected.
    """

    evaluate: Callable[[float], float]
    target: float
    direction: Literal["minimize", "maximize"] = "minimize"


def search_noise_for_target(
    probe: UtilityProbe, bracket: tuple[float, float], tol: float = 1e-6, max_iter: int = 200
) -> float:
    """Bisection for the sigma at which ``probe.evaluate(sigma)`` meets ``probe.target``."""
    lo, hi = float(bracket[0]), float(bracket[1])
    if not (0 < lo < hi and math.isfinite(hi)):
        raise DomainError(f"bracket must satisfy 0 < lo < hi < inf, got {bracket!r}")
    if tol <= 0:
        raise DomainError(f"tol must be positive, got {tol!r}")

    f_lo = probe.evaluate(lo) - probe.target
    f_hi = probe.evaluate(hi) - probe.target
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    if (f_lo > 0) == (f_hi > 0):
        raise BracketError(lo, hi, f_lo + probe.target, f_hi + probe.target, probe.target)

    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = probe.evaluate(mid) - probe.target
        if abs(f_mid) < tol or hi - lo < tol:
            return mid
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
