import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from proxi2s.data import Dataset
from proxi2s.datagen import MATCHED_SETTINGS, SS_DEFAULT, generate_logit_dataset
from proxi2s.errors import BootstrapError, DataError, SingularJacobianError
from proxi2s.inference import (
    bootstrap, build_system, jacobian, jacobian_analytic, jacobian_numeric, sandwich,
    stacked_score, theta_from_fit,
)
from proxi2s.proximal import ModelSpec, fit_two_stage

SS_SPEC = ModelSpec("logit", "logit", first_stage_terms=["a", "z", "a:z"])


def spec_for(setting):
    return ModelSpec(setting.y_link, setting.w_link, first_stage_terms=setting.first_stage_terms,
                     interactions=setting.interactions, restrict_symmetry=setting.restrict_symmetry)


def fitted(key, n=600, seed=0):
    setting = MATCHED_SETTINGS[key]
    d = setting.generate(n, seed=seed).dataset.observed()
    spec = spec_for(setting)
    system = build_system(d, spec)
    return d, spec, system, theta_from_fit(fit_two_stage(d, spec))


# -- scores -----------------------------------------------------------------------------
@pytest.mark.parametrize("key", sorted(MATCHED_SETTINGS))
def test_score_vanishes_at_the_estimate(key):
    _, _, system, theta = fitted(key)
    assert np.max(np.abs(stacked_score(system, theta))) <= 1e-6
    # the fast path lands on the same solution
    np.testing.assert_allclose(system.estimate(), theta, atol=1e-8)


def test_linear_score_is_centred_at_true_reduced_parameters():
    setting = MATCHED_SETTINGS["1"]
    p = setting.dgp
    d = setting.generate(100_000, seed=5).dataset.observed()
    system = build_system(d, spec_for(setting))
    c0, ca, cz, _ = p.m_coefs
    alpha = [p.alpha0 + p.alpha_u * c0, p.alpha_u * ca, p.alpha_u * cz]
    beta = [p.beta0 - p.beta_u * p.alpha0 / p.alpha_u, p.beta_a, p.beta_u / p.alpha_u]
    score = stacked_score(system, np.array(alpha + beta))
    assert np.max(np.abs(score)) <= 0.02


def test_single_row_score_by_hand():
    d = Dataset(y=[1.0], a=[0.5], w=[1.0], z=[-1.0])
    system = build_system(d, ModelSpec("logit", "logit"))
    alpha = np.array([0.1, 0.2, 0.3, 0.4])
    beta = np.array([-0.2, 0.5, 0.7, 0.3])
    psi = system.psi(np.concatenate([alpha, beta]))[0]
    x1 = np.array([1.0, 0.5, -1.0, 1.0])
    s = 0.1 + 0.2 * 0.5 + 0.3 * -1.0 + 0.4  # y set to 1 in the control variable
    x2 = np.array([1.0, 0.5, s, 1.0])
    expected = np.concatenate([x1 * (1 - expit(x1 @ alpha)), x2 * (1 - expit(x2 @ beta))])
    np.testing.assert_allclose(psi, expected, atol=1e-14)
    assert system.param_names == ["first:(intercept)", "first:a", "first:z", "first:y",
                                  "second:(intercept)", "second:a", "second:s", "second:w"]


# -- Jacobian -----------------------------------------------------------------------------
@pytest.mark.parametrize("key", ["1", "2", "3", "3r", "6", "7", "8", "9", "10", "11", "12", "13",
                                 "14", "15"])
def test_analytic_jacobian_matches_differences(key):
    for seed in range(20):
        _, _, system, theta = fitted(key, n=300, seed=seed)
        A = jacobian_analytic(system, theta)
        N = jacobian_numeric(system, theta)
        scale = max(1.0, np.max(np.abs(A)))
        assert np.max(np.abs(A - N)) / scale <= 1e-5
        # the first-stage score does not depend on beta
        np.testing.assert_array_equal(A[:system.p1, system.p1:], 0.0)


def test_identity_jacobian_blocks_are_cross_products():
    _, _, system, theta = fitted("1")
    n = system.n
    for t in (theta, theta + np.random.default_rng(1).normal(size=theta.shape)):
        A = jacobian_analytic(system, t)
        alpha, _ = system.split(t)
        X2 = system.design2(system.control(alpha))
        np.testing.assert_allclose(A[:system.p1, :system.p1], -system.D1.T @ system.D1 / n,
                                   atol=1e-12)
        np.testing.assert_allclose(A[system.p1:, system.p1:], -X2.T @ X2 / n, atol=1e-12)


def test_numeric_jacobian_is_stable_under_step_halving():
    _, _, system, theta = fitted("3")
    J1 = jacobian_numeric(system, theta, rel_step=1e-5)
    J2 = jacobian_numeric(system, theta, rel_step=5e-6)
    assert np.max(np.abs(J1 - J2)) <= 1e-6 * max(1.0, np.max(np.abs(J1)))


def test_multinomial_falls_back_to_numeric_jacobian():
    _, _, system, theta = fitted("P4")
    np.testing.assert_array_equal(jacobian(system, theta), jacobian_numeric(system, theta))


# -- sandwich -------------------------------------------------------------------------------
@pytest.mark.parametrize("key", ["1", "3", "10", "P4"])
def test_sandwich_is_a_covariance(key):
    _, _, system, theta = fitted(key)
    res = sandwich(system, theta)
    np.testing.assert_allclose(res.V_n, res.V_n.T, atol=0)
    assert np.linalg.eigvalsh(res.V_n).min() >= -1e-10 * np.abs(res.V_n).max()
    assert np.linalg.eigvalsh(res.B_n).min() >= -1e-10 * np.abs(res.B_n).max()
    j = system.a_indices[0]
    np.testing.assert_allclose(res.sigma_a ** 2, res.V_n[j, j])
    lo, hi = res.ci
    np.testing.assert_allclose((hi - lo) / 2, 1.959963984540054 * res.se_a)


@given(st.floats(0.5, 0.99))
@settings(max_examples=10, deadline=None)
def test_wald_interval_widens_with_level(level):
    _, _, system, theta = fitted("1", n=200)
    narrow = sandwich(system, theta, level=level * 0.5)
    wide = sandwich(system, theta, level=level)
    assert wide.ci[0] <= narrow.ci[0] and narrow.ci[1] <= wide.ci[1]


def test_sandwich_agrees_with_textbook_2sls():
    setting = MATCHED_SETTINGS["1"]
    d = setting.generate(10_000, seed=3).dataset.observed()
    spec = spec_for(setting)
    res = sandwich(build_system(d, spec), theta_from_fit(fit_two_stage(d, spec)))
    n = d.n
    Zm = np.column_stack([np.ones(n), d.a, d.z[:, 0]])
    X = np.column_stack([np.ones(n), d.a, d.w])
    Xhat = Zm @ np.linalg.lstsq(Zm, X, rcond=None)[0]
    beta = np.linalg.solve(Xhat.T @ Xhat, Xhat.T @ d.y)
    resid = d.y - X @ beta
    sigma2 = resid @ resid / (n - 3)
    se = np.sqrt(sigma2 * np.linalg.inv(Xhat.T @ Xhat)[1, 1])
    assert abs(res.beta_a - beta[1]) <= 1e-8
    assert abs(res.se_a / se - 1) <= 0.10


def test_sandwich_agrees_with_bootstrap_on_logit_data():
    d = generate_logit_dataset(1500, SS_DEFAULT, seed=11).dataset.observed()
    system = build_system(d, SS_SPEC)
    res = sandwich(system, system.estimate())
    boot = bootstrap(d, SS_SPEC, B=400, seed=12, system=system)
    assert abs(res.se_a / boot.se - 1) <= 0.15


def test_uninformative_proxy_gives_singular_jacobian():
    _, _, system, theta = fitted("1")
    theta = theta.copy()
    theta[system.first_names.index("z")] = 0.0
    with pytest.raises(SingularJacobianError) as err:
        sandwich(system, theta)
    assert err.value.condition_number > 1e12


def test_bad_level():
    _, _, system, theta = fitted("1", n=100)
    with pytest.raises(DataError):
        sandwich(system, theta, level=1.0)


# -- bootstrap -------------------------------------------------------------------------------
def test_bootstrap_percentiles_and_determinism():
    d, spec, system, _ = fitted("1", n=300)
    first = bootstrap(d, spec, B=200, seed=4)
    again = bootstrap(d, spec, B=200, seed=4)
    np.testing.assert_array_equal(first.estimates, again.estimates)
    assert first.failures == 0 and first.estimates.shape == (200,)
    lo, hi = np.quantile(first.estimates, [0.025, 0.975])
    assert first.ci == (lo, hi)
    assert first.se == pytest.approx(np.std(first.estimates, ddof=1))
    other = bootstrap(d, spec, B=200, seed=5)
    assert not np.array_equal(first.estimates, other.estimates)


def test_bootstrap_resamples_match_full_refits():
    d, spec, _, _ = fitted("3", n=300)
    res = bootstrap(d, spec, B=5, seed=8)
    rng = np.random.default_rng(8)
    for k in range(5):
        rows = rng.integers(0, d.n, size=d.n)
        refit = fit_two_stage(d.take(rows), spec)
        assert res.estimates[k] == pytest.approx(refit.beta_a, abs=1e-8)


def test_bootstrap_needs_two_replicates():
    d, spec, _, _ = fitted("1", n=50)
    with pytest.raises(DataError):
        bootstrap(d, spec, B=1, seed=0)


def test_bootstrap_gives_up_on_unstable_data(demo):
    with pytest.raises(BootstrapError, match="bootstrap replicates failed"):
        bootstrap(demo, ModelSpec("logit", "logit"), B=50, seed=0)
