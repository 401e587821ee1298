import warnings

import numpy as np
import pytest
from scipy import stats

from distforge.density import QuantileGrid, fit_pdf
from distforge.moments import (
    KURT_COEF,
    SKEW_COEF,
    VAR_COEF,
    DegenerateDistributionError,
    adjust_moments,
    central_moments,
    integrate_moments,
    moments_from_quantiles,
    nct_moments,
    raw_moments,
    refit_adjustment,
    table_e1,
)
from distforge.taus import tau_grid

TAUS = tau_grid()


def riemann_moments(x, d, p_lower, x_min, p_upper, x_max, n=1_000_000):
    """Midpoint sum of the piecewise-linear density on ``n`` equal cells."""
    edges = np.linspace(x[0], x[-1], n + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    w = np.interp(mid, x, d) * (edges[1] - edges[0])
    mass = w.sum() + p_lower + p_upper
    return [(np.sum(w * mid**z) + p_lower * x_min**z + p_upper * x_max**z) / mass
            for z in range(1, 5)]


def random_density(rng):
    k = rng.integers(5, 60)
    x = np.sort(rng.uniform(-0.5, 0.8, k))
    d = rng.uniform(0.01, 3.0, k)
    pl, pu = rng.uniform(0, 0.01, 2)
    return x, d, pl, x[0], pu, x[-1]


# ---------------------------------------------------------------- integration


def test_uniform_density_exact():
    x = np.linspace(0.0, 1.0, 11)
    m0, mass, m1, m2, m3, m4 = raw_moments(x, np.ones_like(x), 0.0, 0.0, 0.0, 1.0)
    assert m0 == pytest.approx(1.0, abs=1e-15) and mass == pytest.approx(1.0, abs=1e-15)
    assert m1 == pytest.approx(0.5, abs=1e-15)
    assert m2 == pytest.approx(1 / 3, abs=1e-15)
    assert central_moments(m1, m2, m3, m4)[0] == pytest.approx(1 / 12, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_integration_matches_riemann_oracle(seed):
    args = random_density(np.random.default_rng(seed))
    ours = raw_moments(*args)[2:]
    np.testing.assert_allclose(ours, riemann_moments(*args), rtol=0, atol=1e-8)


def test_point_masses_enter_at_support_ends():
    x = np.array([0.0, 1.0])
    d = np.zeros(2)
    _, mass, m1, m2, _, _ = raw_moments(x, d, 0.25, -1.0, 0.75, 2.0)
    assert mass == 1.0 and m1 == pytest.approx(0.25 * -1 + 0.75 * 2)
    assert m2 == pytest.approx(0.25 + 0.75 * 4)


def test_zero_variance_is_degenerate():
    with pytest.raises(DegenerateDistributionError):
        central_moments(0.3, 0.09, 0.027, 0.0081)


# ---------------------------------------------------------------- pipeline


def test_normal_pipeline_matches_table():
    ms = moments_from_quantiles(stats.norm.ppf(TAUS) * 0.1)
    assert ms.variance / 0.01 == pytest.approx(0.998, abs=0.01)
    assert ms.kurtosis == pytest.approx(2.980, abs=0.01)
    assert abs(ms.mean) < 1e-6


def test_unit_scale_normal_is_truncated_at_minus_one():
    ms = moments_from_quantiles(stats.norm.ppf(TAUS))
    assert ms.variance < 0.9 and ms.skewness > 0


def test_t10_pipeline_matches_table():
    ms = moments_from_quantiles(stats.t(10).ppf(TAUS) * 0.1)
    assert ms.variance / 0.01 == pytest.approx(1.244, abs=0.02)
    assert ms.kurtosis == pytest.approx(3.852, abs=0.02)
    assert ms.variance_adj / 0.01 == pytest.approx(1.250, abs=0.01)
    assert ms.skewness_adj == pytest.approx(0.009, abs=0.005)
    assert ms.kurtosis_adj == pytest.approx(4.242, abs=0.02)


@pytest.mark.parametrize("a, b", [(2.0, 0.0), (0.05, 0.01), (0.3, -0.2)])
def test_affine_equivariance(a, b):
    q = stats.nct(6, 1).ppf(TAUS) * 0.1
    base = moments_from_quantiles(q)
    moved = moments_from_quantiles(a * q + b)
    assert moved.mean == pytest.approx(a * base.mean + b, rel=1e-6)
    assert moved.variance == pytest.approx(a * a * base.variance, rel=1e-6)
    assert moved.skewness == pytest.approx(base.skewness, rel=1e-6, abs=1e-9)
    assert moved.kurtosis == pytest.approx(base.kurtosis, rel=1e-6)


@pytest.mark.parametrize("dist", [stats.norm(), stats.t(5), stats.logistic()])
def test_symmetric_grid_has_no_skew(dist):
    q = dist.ppf(TAUS) * 0.1
    q = 0.5 * (q - q[::-1])        # force exact symmetry
    ms = moments_from_quantiles(q)
    assert abs(ms.skewness) < 1e-3 and abs(ms.mean) < 1e-6


def test_mass_before_normalization_recorded():
    ms = integrate_moments(fit_pdf(QuantileGrid(TAUS, stats.norm.ppf(TAUS) * 0.1)))
    assert abs(ms.mass - 1.0) < 1e-2 and ms.m0 < ms.mass


# ---------------------------------------------------------------- adjustment


def test_adjust_normal_point():
    assert adjust_moments(1.0, 0.0, 3.0) == pytest.approx((1.0023, 0.0, 3.0), abs=1e-12)


def test_adjust_unit_skew_point():
    assert adjust_moments(1.0, 1.0, 3.0) == pytest.approx((1.0002, 1.0211, 2.2605), abs=1e-12)


def test_adjust_t10_row():
    v, s, k = adjust_moments(1.244, -0.000, 3.852)
    assert (v, s, k) == pytest.approx((1.250, 0.009, 4.242), abs=2e-3)


def test_adjusted_kurtosis_floor():
    assert adjust_moments(1.0, 3.0, 1.5)[2] == 1.0


def test_adjust_vectorised():
    v, s, k = adjust_moments(np.array([1.0, 1.0]), np.array([0.0, 1.0]), np.array([3.0, 3.0]))
    np.testing.assert_allclose(v, [1.0023, 1.0002])


def test_nct_moments_match_scipy_away_from_zero_noncentrality():
    m, v, s, k = nct_moments(np.array([5.0, 8.0, 30.0]), 1.5)
    sm, sv, ss, sk = stats.nct.stats(np.array([5.0, 8.0, 30.0]), 1.5, moments="mvsk")
    np.testing.assert_allclose([m, v, s, k], [sm, sv, ss, sk + 3.0], rtol=1e-10)


def test_nct_moments_at_zero_noncentrality_equal_t():
    _, v, s, k = nct_moments(np.array([5.0, 10.0]), 0.0)
    np.testing.assert_allclose(v, [5 / 3, 1.25])
    np.testing.assert_allclose(k, [9.0, 4.0])
    assert np.all(s == 0.0)


@pytest.fixture(scope="module")
def refit():
    return refit_adjustment(10_000, seed=11)


@pytest.mark.slow
@pytest.mark.parametrize("which, target", [("variance", VAR_COEF), ("skewness", SKEW_COEF),
                                           ("kurtosis", KURT_COEF)])
def test_refit_coefficients_within_25_percent(refit, which, target):
    got = getattr(refit, which)
    np.testing.assert_array_equal(np.sign(got), np.sign(target))
    np.testing.assert_allclose(got, target, rtol=0.25)


@pytest.mark.slow
def test_refit_variance_intercept(refit):
    assert refit.variance[0] == pytest.approx(1.0023, abs=0.01)
    assert refit.n_used > 0.9 * refit.n_drawn


def test_low_noncentrality_subsample_keeps_skew_slope_on_excess_kurtosis_positive():
    fit = refit_adjustment(2000, seed=1, nc_range=(0.0, 0.5))
    assert fit.skewness[2] > 0


def test_zero_noncentrality_subsample_has_degenerate_skew_regression():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit = refit_adjustment(500, seed=2, nc_range=(0.0, 0.0), strict=False)
    # symmetric laws: naive skewness is zero to rounding, and every regression
    # carries a skewness column, so all three designs are singular
    for which in ("variance", "skewness", "kurtosis"):
        assert np.all(np.isnan(getattr(fit, which)))
        assert fit.condition[which] > 1e12


def test_degenerate_design_reports_condition_number():
    with pytest.raises(np.linalg.LinAlgError, match="condition number"):
        refit_adjustment(200, seed=0, df_choices=[10.0], nc_range=(0.0, 0.0))


# ---------------------------------------------------------------- table


def test_table_rows_follow_reference_patterns():
    t = table_e1().set_index("dist")
    normal = t.loc["Normal"]
    assert normal.v == pytest.approx(0.998, abs=0.02) and normal.k == pytest.approx(2.980, abs=0.05)
    nct = t[t.index.str.startswith("nct")]
    # naive moments understate, adjusted ones move back towards the truth
    assert np.all(nct.v < nct.v_t) and np.all(nct.k < nct.k_t)
    assert np.all(np.abs(nct.k_adj - nct.k_t) < np.abs(nct.k - nct.k_t))
    assert np.all(nct.s > 0) and np.all(np.diff(nct.s.to_numpy()) > 0)
