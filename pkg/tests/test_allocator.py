import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gdpdistill import gdp
from gdpdistill.allocator import (
    UtilityProbe,
    allocate,
    budget_slack,
    search_noise_for_target,
    sigma_for_budget,
)
from gdpdistill.errors import BracketError, DomainError, InfeasibleBudgetError
from gdpdistill.gdp import DpBudget, SubsamplingSpec

TEN = DpBudget(10, 1e-5)
TWENTY = DpBudget(20, 1e-5)


def bisect_sigma(mu, p, T):
    """Oracle: invert subsampled_mu numerically."""
    lo, hi = 0.05, 1e4
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if gdp.subsampled_mu(SubsamplingSpec(p, T, mid)).mu > mu:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def test_sigma_for_budget_examples():
    mu = gdp.subsampled_mu(SubsamplingSpec(0.1, 100, 2.0))
    assert sigma_for_budget(mu, 0.1, 100) == pytest.approx(2.0, abs=1e-9)
    assert sigma_for_budget(1.496, 0.0256, 2000) == pytest.approx(1.002, abs=1e-3)
    assert sigma_for_budget(1.496, 0.0256, 2000) == pytest.approx(bisect_sigma(1.496, 0.0256, 2000), rel=1e-9)
    assert sigma_for_budget(1.0, 1.0, 1) == pytest.approx(1 / math.sqrt(math.log(2)), rel=1e-14)


def test_sigma_for_budget_rejects_zero_budget():
    with pytest.raises(InfeasibleBudgetError):
        sigma_for_budget(0.0, 0.5, 10)


@given(st.floats(1e-4, 1), st.integers(1, 100_000), st.floats(0.05, 100))
def test_sigma_for_budget_inverts_subsampled_mu(p, T, sigma):
    mu = gdp.subsampled_mu(SubsamplingSpec(p, T, sigma))
    assert sigma_for_budget(mu, p, T) == pytest.approx(sigma, rel=1e-9)


def test_allocate_table_rows():
    plan = allocate(TEN, 0.27, 1.30, 0.0256, 2000)
    assert plan.mu_f.mu == pytest.approx(1.496, abs=2e-3)
    plan20 = allocate(TWENTY, 0.50, 2.31, 0.0256, 2000)
    assert plan20.mu_f.mu == pytest.approx(2.50, abs=0.02)


def test_allocate_infeasible_names_components():
    with pytest.raises(InfeasibleBudgetError) as info:
        allocate(TEN, 2.0, 2.0, 0.0256, 2000)
    assert set(info.value.components) == {"mu_g", "mu_e"}
    assert "mu_g" in str(info.value) and "mu_e" in str(info.value)
    with pytest.raises(InfeasibleBudgetError) as info:
        allocate(TEN, 0.0, 2.5, 0.0256, 2000)
    assert info.value.components == ("mu_e",)


def test_plan_invariants():
    plan = allocate(TEN, 0.27, 1.30, 0.0256, 2000, p_e=0.064, T_e=40)
    total2 = plan.mu_g.mu**2 + plan.mu_e.mu**2 + plan.mu_f.mu**2
    assert total2 == pytest.approx(plan.mu_total.mu**2, rel=1e-9)
    for s in (plan.sigma_g, plan.sigma_e, plan.sigma_f):
        assert 0 < s < math.inf
    assert plan.sigma_g == pytest.approx(1 / 0.27)
    assert gdp.subsampled_mu(plan.spec_e).mu == pytest.approx(1.30, rel=1e-9)
    assert gdp.subsampled_mu(plan.spec_f).mu == pytest.approx(plan.mu_f.mu, rel=1e-9)
    d = plan.to_dict()
    assert d["delta_spent"] <= TEN.delta
    assert d["delta_slack"] == pytest.approx(budget_slack(plan))


def test_zero_generator_budget_means_no_release():
    plan = allocate(TEN, 0.0, 1.0, 0.1, 100)
    assert plan.sigma_g == math.inf


@given(
    st.floats(1, 20), st.floats(0, 0.6), st.floats(0, 0.6), st.floats(0.001, 1), st.integers(1, 5000)
)
def test_budget_conservation(eps, fg, fe, p, T):
    total = DpBudget(eps, 1e-5)
    mu_total = gdp.dp_to_gdp(total).mu
    plan = allocate(total, fg * mu_total, fe * mu_total, p, T)
    assert plan.delta_spent() <= total.delta * (1 + 1e-9)


@given(st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0.01, 0.2))
def test_allocate_monotone(fg, fe, bump):
    mu_total = gdp.dp_to_gdp(TEN).mu
    g, e = fg * mu_total, fe * mu_total
    base = allocate(TEN, g, e, 0.05, 500)
    more_g = allocate(TEN, g + bump, e, 0.05, 500)
    more_e = allocate(TEN, g, e + bump, 0.05, 500)
    assert more_g.mu_f.mu < base.mu_f.mu and more_g.sigma_f > base.sigma_f
    assert more_e.mu_f.mu < base.mu_f.mu and more_e.sigma_f > base.sigma_f


# --- search ------------------------------------------------------------------


def test_search_inverse_probe():
    tol = 1e-8
    s = search_noise_for_target(UtilityProbe(lambda x: 1 / x, 2.0, "maximize"), (0.1, 10), tol)
    assert s == pytest.approx(0.5, abs=1e-6)


def test_search_square_probe():
    s = search_noise_for_target(UtilityProbe(lambda x: x * x, 9.0), (1, 5), 1e-9)
    assert s == pytest.approx(3.0, abs=1e-6)


def test_search_reports_both_endpoints_when_not_bracketed():
    with pytest.raises(BracketError) as info:
        search_noise_for_target(UtilityProbe(lambda x: x, 100.0), (1, 5))
    err = info.value
    assert (err.score_lo, err.score_hi, err.target) == (1, 5, 100.0)
    assert "score(1.0)=1" in str(err) and "score(5.0)=5" in str(err)


def test_search_rejects_bad_bracket():
    with pytest.raises(DomainError):
        search_noise_for_target(UtilityProbe(lambda x: x, 1.0), (2, 1))


def test_search_deterministic_with_noisy_seeded_probe():
    def probe(sigma):
        rng = np.random.default_rng(123)
        return float(np.mean(sigma * rng.standard_normal(1000) ** 2))

    a = search_noise_for_target(UtilityProbe(probe, 2.0), (0.1, 10), 1e-6)
    b = search_noise_for_target(UtilityProbe(probe, 2.0), (0.1, 10), 1e-6)
    assert a == b
