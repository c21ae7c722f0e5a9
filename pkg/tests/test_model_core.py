import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lhfi import model_core as mc
from lhfi.errors import InvalidArgumentError

from oracles import enumerate_outcomes, multinomial_pmf_bruteforce, random_tiny_instance, term_oracle

finite_nu = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


# --- links -----------------------------------------------------------------


def test_link_positive_examples():
    np.testing.assert_allclose(mc.link_inverse_positive([0, 0]), [1 / 3, 1 / 3], rtol=1e-15)
    np.testing.assert_allclose(mc.link_inverse_positive([math.log(2), 0]), [0.5, 0.25], rtol=1e-15)
    nu = np.array([1.3, -0.7])
    p = mc.link_inverse_positive(nu)
    np.testing.assert_allclose(np.log(p / (1 - p.sum())), nu, atol=1e-12)


def test_link_negative_examples():
    np.testing.assert_allclose(mc.link_inverse_negative([0, 0, 0]), [0.25] * 3, rtol=1e-15)
    l2 = math.log(2)
    np.testing.assert_allclose(mc.link_inverse_negative([l2, l2, l2]), [0.2] * 3, rtol=1e-14)
    nu = np.array([0.4, -1.1, 2.2])
    p = mc.link_inverse_negative(nu)
    np.testing.assert_allclose(np.log((1 - p.sum()) / p), nu, atol=1e-12)


@pytest.mark.parametrize("fn,size", [(mc.link_inverse_positive, 2), (mc.link_inverse_negative, 3)])
def test_link_rejects_non_finite(fn, size):
    bad = np.zeros(size)
    bad[0] = np.nan
    with pytest.raises(InvalidArgumentError):
        fn(bad)
    bad[0] = np.inf
    with pytest.raises(InvalidArgumentError):
        fn(bad)


@given(st.lists(finite_nu, min_size=2, max_size=2))
def test_positive_round_trip(nu):
    p, res = mc.link_inverse_positive(nu, residual=True)
    assert np.all(p > 0) and np.all(p < 1) and p.sum() < 1 and res > 0
    np.testing.assert_allclose(mc.link_positive(p, res), nu, atol=1e-10)


@given(st.lists(finite_nu, min_size=3, max_size=3))
def test_negative_round_trip(nu):
    p, res = mc.link_inverse_negative(nu, residual=True)
    assert np.all(p > 0) and np.all(p < 1) and p.sum() < 1 and res > 0
    np.testing.assert_allclose(mc.link_negative(p, res), nu, atol=1e-10)


@given(st.lists(st.floats(-8, 8), min_size=3, max_size=3))
def test_round_trip_with_derived_residual(nu):
    # away from saturation the residual can be recovered as 1 - sum(p)
    np.testing.assert_allclose(mc.link_positive(mc.link_inverse_positive(nu[:2])), nu[:2], atol=1e-10)
    np.testing.assert_allclose(mc.link_negative(mc.link_inverse_negative(nu)), nu, atol=1e-10)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.01, 5))
def test_health_direction(h, b, step):
    beta = np.array([b, -b, b, 0.5 * b, -b])
    lo = mc.linear_predictors(np.array([h]), 0.3, beta)[0]
    hi = mc.linear_predictors(np.array([h + step]), 0.3, beta)[0]
    p_lo, r_lo = mc.link_inverse_positive(lo[:2], residual=True)
    p_hi, r_hi = mc.link_inverse_positive(hi[:2], residual=True)
    # odds against the residual category rise for "+" metrics, fall for "-" metrics
    assert np.all(np.log(p_hi) - math.log(r_hi) > np.log(p_lo) - math.log(r_lo))
    n_lo, q_lo = mc.link_inverse_negative(lo[2:], residual=True)
    n_hi, q_hi = mc.link_inverse_negative(hi[2:], residual=True)
    assert np.all(np.log(n_hi) - math.log(q_hi) < np.log(n_lo) - math.log(q_lo))


def test_link_clamp_keeps_residual_positive():
    p = mc.link_inverse_positive([1e4, 0.0])
    assert 1 - p.sum() >= 0
    assert np.all(np.isfinite(p))


# --- linear predictor and regression mean ------------------------------------


def test_linear_predictor_examples():
    assert mc.linear_predictor(0, 0, 0) == 0
    assert mc.linear_predictor(1.5, 2.09, -0.3) == pytest.approx(3.29, abs=1e-12)
    assert mc.linear_predictor(2, 2.10, 0) == pytest.approx(4.10, abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        mc.linear_predictor(float("nan"), 0, 0)


def test_linear_predictors_theta_only_on_negative_group():
    nu = mc.linear_predictors(np.array([1.0]), 2.0, np.zeros(5))[0]
    np.testing.assert_array_equal(nu, [1, 1, 3, 3, 3])


def test_latent_health_mean_examples():
    assert mc.latent_health_mean(0, [], []) == 0
    assert mc.latent_health_mean(-1.56, [0.39, 0.77], [0, 0]) == -1.56
    assert mc.latent_health_mean(1, [2, -3], [0.5, 0.5]) == pytest.approx(0.5)
    with pytest.raises(InvalidArgumentError):
        mc.latent_health_mean(0, [1, 2], [1])


# --- multinomial likelihood -------------------------------------------------------


def test_multinomial_examples():
    assert mc.multinomial_loglik([0, 0], 0, [0.3, 0.3]) == 0.0
    assert mc.multinomial_loglik([1, 1], 2, [0.5, 0.25]) == pytest.approx(math.log(0.25), abs=1e-12)
    # hand value: 4!/(2!0!1!1!) * 0.3^2 * 0.2^0 * 0.1 * 0.4
    oracle = math.log(multinomial_pmf_bruteforce([2, 0, 1, 1], [0.3, 0.2, 0.1, 0.4]))
    assert oracle == pytest.approx(math.log(12 * 0.09 * 0.1 * 0.4), abs=1e-13)
    assert mc.multinomial_loglik([2, 0, 1], 4, [0.3, 0.2, 0.1]) == pytest.approx(oracle, abs=1e-12)


def test_multinomial_errors():
    with pytest.raises(InvalidArgumentError):
        mc.multinomial_loglik([3, 2], 4, [0.2, 0.2])
    with pytest.raises(InvalidArgumentError):
        mc.multinomial_loglik([1, 0], 4, [0.0, 0.2])
    with pytest.raises(InvalidArgumentError):
        mc.multinomial_loglik([1, 0], 4, [0.6, 0.5])


@pytest.mark.parametrize("n", range(7))
@pytest.mark.parametrize("probs", [(0.3, 0.2), (0.1, 0.2, 0.3), (0.05, 0.9)])
def test_multinomial_normalises(n, probs):
    k = len(probs) + 1
    total = sum(
        math.exp(mc.multinomial_loglik(out[:-1], n, probs)) for out in enumerate_outcomes(n, k)
    )
    assert total == pytest.approx(1.0, abs=1e-9)


def test_site_loglik_matches_per_replicate_sum():
    rng = np.random.default_rng(1)
    data, state, _ = random_tiny_instance(rng, mc.DIAGONAL, mc.SINGLE)
    nu = mc.linear_predictors(state.H, state.theta_minus, state.beta)
    expected = 0.0
    for o in data.observations:
        i = data.site_ids.index(o.site_id)
        expected += mc.multinomial_loglik(o.counts[:2], o.cardinality, mc.link_inverse_positive(nu[i, :2]))
        expected += mc.multinomial_loglik(o.counts[2:], o.cardinality, mc.link_inverse_negative(nu[i, 2:]))
    assert data.site_loglik(nu).sum() == pytest.approx(expected, abs=1e-10)


# --- priors -------------------------------------------------------------------


def _zero_state(spec, n_sites=2, sigma_beta2=1.0):
    return mc.ParameterState(
        H=np.zeros(n_sites),
        alpha0=0.0,
        alpha=np.zeros(len(spec.coefficient_names)),
        theta_minus=0.0,
        beta=np.zeros(5),
        sigma_H2=1.0,
        Sigma=sigma_beta2 * np.eye(5),
        sigma_beta2=sigma_beta2,
    )


def test_log_prior_closed_form():
    spec = mc.ModelSpec(covariates=("dd", "salinity"))
    state = _zero_state(spec)
    n_normal = 2 + 2  # alpha0, theta_-, two coefficients
    expected = n_normal * (-0.5 * math.log(200 * math.pi)) + 2 * (-1.0)
    assert mc.log_prior(state, spec) == pytest.approx(expected, abs=1e-12)


def test_offset_breaking_positive_definiteness_is_rejected():
    spec = mc.ModelSpec(covariance=mc.CovarianceSpec(mc.OFFSET))
    state = _zero_state(spec)
    state.sigma_beta2 = None
    state.varsigma = -0.5
    state.Sigma = mc.assemble_offset_sigma(np.eye(2), np.eye(3), -0.5)
    assert not mc.is_positive_definite(state.Sigma)
    assert mc.log_prior(state, spec) == -math.inf


def test_rho_uniform_density():
    assert mc.rho_log_prior(0.5) == pytest.approx(math.log(0.5))
    assert mc.rho_log_prior(1.0) == -math.inf


def test_correlated_prior_at_zero_rho_matches_independent():
    ind = mc.ModelSpec(covariates=("salinity",), level=mc.TWO_LEVEL)
    cor = mc.ModelSpec(covariates=("salinity",), level=mc.TWO_LEVEL, prior_correlation=mc.CORRELATED)
    rng = np.random.default_rng(5)
    for _ in range(20):
        alpha = rng.normal(scale=3, size=2)
        assert mc.coefficient_log_prior(alpha, cor, 0.0) == mc.coefficient_log_prior(alpha, ind, None)
    state = _zero_state(ind)
    state.alpha = rng.normal(size=2)
    state.sigma_delta2 = 0.7
    state.rho = 0.0
    # the whole prior differs only by the Unif(-1, 1) density of rho
    assert mc.log_prior(state, cor) - mc.log_prior(state, ind) == pytest.approx(math.log(0.5), abs=1e-12)


def test_correlated_prior_is_bivariate_normal():
    from scipy import stats

    spec = mc.ModelSpec(covariates=("salinity", "dd"), prior_correlation=mc.CORRELATED)
    a = np.array([1.3, -4.0])
    rho = -0.8
    ref = stats.multivariate_normal.logpdf(a, [0, 0], 100 * np.array([[1, rho], [rho, 1]]))
    assert mc.coefficient_log_prior(a, spec, rho) == pytest.approx(ref, abs=1e-12)


def test_log_prior_missing_field_raises():
    spec = mc.ModelSpec(covariates=("salinity",), level=mc.TWO_LEVEL)
    state = _zero_state(spec)
    with pytest.raises(InvalidArgumentError):
        mc.log_prior(state, spec)  # sigma_delta2 missing
    with pytest.raises(InvalidArgumentError):
        mc.log_prior(_zero_state(mc.ModelSpec()), spec)  # alpha length


def test_inv_wishart_matches_scipy():
    from scipy import stats

    rng = np.random.default_rng(3)
    for d in (2, 3, 5):
        A = rng.normal(size=(d, d))
        X = A @ A.T + np.eye(d)
        S = np.eye(d) * 1.7
        ref = stats.invwishart.logpdf(X, df=d + 2, scale=S)
        assert mc.inv_wishart_logpdf(X, d + 2, S) == pytest.approx(ref, abs=1e-10)


# --- joint posterior -------------------------------------------------------------


@pytest.mark.parametrize("variant", mc.COVARIANCE_VARIANTS)
@pytest.mark.parametrize("level", [mc.SINGLE, mc.TWO_LEVEL])
def test_joint_matches_term_oracle(variant, level):
    rng = np.random.default_rng(zlib.crc32(f"{variant}-{level}".encode()))
    for _ in range(5):
        data, state, spec = random_tiny_instance(rng, variant, level)
        got = mc.joint_log_posterior(state, data, spec)
        ref = term_oracle(state, data.observations, data.covariates, spec, data.site_ids)
        assert got == pytest.approx(ref, abs=1e-10)


def test_joint_correlated_matches_term_oracle():
    rng = np.random.default_rng(11)
    for level in (mc.SINGLE, mc.TWO_LEVEL):
        data, state, spec = random_tiny_instance(rng, mc.DIAGONAL, level, correlated=True)
        ref = term_oracle(state, data.observations, data.covariates, spec, data.site_ids)
        assert mc.joint_log_posterior(state, data, spec) == pytest.approx(ref, abs=1e-10)


def test_joint_two_sites_fixed_state():
    obs = [
        mc.SiteObservation(1, 1, (1, 0, 1, 0, 1), 3),
        mc.SiteObservation(2, 1, (0, 2, 0, 1, 1), 3),
    ]
    data = mc.LHFIData(obs, {"dd": [-0.5, 0.5]})
    spec = mc.ModelSpec(covariates=("dd",))
    state = mc.ParameterState(
        H=[0.2, -0.4], alpha0=0.1, alpha=[0.7], theta_minus=1.1,
        beta=[0.1, -0.2, 0.3, 0.0, -0.1], sigma_H2=0.8, Sigma=0.9 * np.eye(5), sigma_beta2=0.9,
    )
    ref = term_oracle(state, obs, data.covariates, spec, data.site_ids)
    assert mc.joint_log_posterior(state, data, spec) == pytest.approx(ref, abs=1e-10)


def test_joint_support_and_filtering():
    rng = np.random.default_rng(2)
    data, state, spec = random_tiny_instance(rng, mc.DIAGONAL, mc.SINGLE)
    base = mc.joint_log_posterior(state, data, spec)
    bad = state.copy()
    bad.sigma_H2 = 0.0
    assert mc.joint_log_posterior(bad, data, spec) == -math.inf
    bad.sigma_H2 = -1.0
    assert mc.joint_log_posterior(bad, data, spec) == -math.inf
    extra = state.copy()
    extra.varsigma = 2.0
    extra.rho = 0.4
    extra.sigma_delta2 = 3.0
    assert mc.joint_log_posterior(extra, data, spec) == base
    extra.varsigma, extra.rho, extra.sigma_delta2 = 4.0, 0.8, 6.0
    assert mc.joint_log_posterior(extra, data, spec) == base


# --- two-level helpers ---------------------------------------------------------


def test_collapse_two_level():
    assert mc.collapse_two_level({"salinity": 0.0}, 5.0)["dd"] == 0.0
    assert mc.collapse_two_level({"salinity": 0.39, "log_sc": 2.0}, 0.77) == pytest.approx(
        {"dd": 0.3003, "log_sc": 2.0}
    )
    assert mc.collapse_two_level({"salinity": 1.0}, 1.0)["dd"] == 1.0
    with pytest.raises(InvalidArgumentError):
        mc.collapse_two_level({"log_sc": 1.0}, 0.5)


def test_variance_ratio_examples():
    assert mc.variance_ratio(0.5, 0.0, 2.0) == 1.0
    assert mc.variance_ratio(0.5, 1.0, 0.5) == 0.5
    r = mc.variance_ratio(0.67**2, 0.39, 0.70**2)
    assert r == pytest.approx(0.4489 / (0.4489 + 0.39**2 * 0.49), abs=1e-12)
    assert r == pytest.approx(0.8577, abs=2e-4)
    with pytest.raises(InvalidArgumentError):
        mc.variance_ratio(0.0, 1.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        mc.variance_ratio(1.0, 1.0, -1.0)


@given(st.floats(1e-6, 1e3), st.floats(-50, 50), st.floats(1e-6, 1e3))
def test_variance_ratio_range(s_h, a, s_d):
    r = mc.variance_ratio(s_h, a, s_d)
    assert 0 < r <= 1
    if a == 0:
        assert r == 1


def test_model_spec_validation():
    with pytest.raises(InvalidArgumentError):
        mc.ModelSpec(covariates=("dd",), level=mc.TWO_LEVEL)
    with pytest.raises(InvalidArgumentError):
        mc.ModelSpec(covariates=("salinity", "dd"), level=mc.TWO_LEVEL)
    with pytest.raises(InvalidArgumentError):
        mc.ModelSpec(covariates=("salinity",), prior_correlation=mc.CORRELATED)
    spec = mc.ModelSpec(covariates=("salinity", "log_sc"), level=mc.TWO_LEVEL, prior_correlation=mc.CORRELATED)
    assert spec.coefficient_names == ("salinity", "log_sc", "dd")
    assert spec.correlated_pair == (0, 2)


def test_grouping_and_observation_invariants():
    with pytest.raises(InvalidArgumentError):
        mc.MetricGrouping((1, 2, 3), (4, 5))
    with pytest.raises(InvalidArgumentError):
        mc.SiteObservation(1, 1, (3, 2, 0, 0, 0), 4)
    with pytest.raises(InvalidArgumentError):
        mc.SiteObservation(1, 1, (0, 0, 2, 2, 1), 4)
    with pytest.raises(InvalidArgumentError):
        mc.SiteObservation(1, 1, (0, -1, 0, 0, 0), 4)
    # groups overlap, so each is checked separately against the cardinality
    mc.SiteObservation(1, 1, (2, 2, 1, 1, 2), 4)
