import math

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

from msmic import (
    ConfigError,
    DataError,
    NonConvergenceError,
    OutcomeConditionalFamily,
    OutcomeMarginalFamily,
    PropensityFamily,
    SampleRecord,
    TargetPopulation,
    TreatmentFrame,
    dr_moment,
    fit_outcome_conditional,
    fit_propensity,
    fit_unweighted,
    solve_dr,
    solve_ipw,
)
from msmic.errors import RankDeficiencyError
from msmic.estimate import dr_terms, gaussian_conditional_mle, newton_solve
from msmic.sim import ac2_dgp, aic_dgp, generate

from conftest import assert_fd, central_diff, random_frame

WHOLE = TargetPopulation([1, 1])


def _frame_from_z(rng, z, e1, y_of):
    """Two-arm frame with arm-1 probability ``e1(z)`` and outcomes ``y_of(z, arm)``."""
    arm = (rng.random(z.shape[0]) >= e1(z)).astype(int)
    y = y_of(z, arm)
    n = z.shape[0]
    return TreatmentFrame(y, np.eye(2)[arm], np.ones((n, 1)), z[:, None])


def _within_3se(est, truth, info, n):
    se = np.sqrt(np.diag(np.linalg.inv(info)) / n)
    assert np.all(np.abs(est - truth) <= 3 * se), (est, truth, se)


def _sandwich_se(data, theta, w, family):
    xa = data.x_obs
    _, d1, d2 = family.terms(data.y, xa @ theta)
    a = (xa * (-w * d2)[:, None]).T @ xa / data.N
    s = (w * d1)[:, None] * xa
    b = s.T @ s / data.N
    ai = np.linalg.inv(a)
    return np.sqrt(np.diag(ai @ b @ ai) / data.N)


# --------------------------------------------------------------------------- #
# Propensity
# --------------------------------------------------------------------------- #


def test_propensity_intercept_only_is_the_arm_share():
    t = np.eye(2)[np.r_[np.zeros(30, int), np.ones(70, int)]]
    data = TreatmentFrame(np.zeros(100), t, np.ones((100, 1)), np.zeros((100, 0)))
    fit = fit_propensity(data)
    assert expit(fit.params[0]) == pytest.approx(0.30, abs=1e-7)
    assert fit.converged and fit.grad_norm <= 1e-8


def test_propensity_consistency(rng):
    n = 100_000
    z = rng.standard_normal(n)
    data = _frame_from_z(rng, z, lambda z: expit(0.3 + 0.5 * z), lambda z, a: np.zeros(z.size))
    fit = fit_propensity(data)
    _within_3se(fit.params, [0.3, 0.5], fit.information, n)


def test_propensity_three_arms_null(rng):
    n = 100_000
    arm = rng.integers(0, 3, n)
    z = rng.standard_normal((n, 1))
    data = TreatmentFrame(np.zeros(n), np.eye(3)[arm], np.ones((n, 1)), z)
    fit = fit_propensity(data)
    _within_3se(fit.params, np.zeros(4), fit.information, n)


def test_propensity_score_residual_reevaluated(rng):
    data = random_frame(rng, N=300, H=3, dim_z=2)
    fam = PropensityFamily(H=3, dim_z=2)
    fit = fit_propensity(data, fam)
    _, score, _ = fam.observed_loglik(data.t, data.z, fit.params)
    assert np.max(np.abs(score.mean(axis=0))) <= 1e-8


def test_propensity_separation_names_the_arm():
    z = np.r_[np.linspace(-2, -0.1, 20), np.linspace(0.1, 2, 20)]
    arm = (z > 0).astype(int)
    data = TreatmentFrame(np.zeros(40), np.eye(2)[arm], np.ones((40, 1)), z[:, None])
    with pytest.raises(NonConvergenceError, match="arm 1"):
        fit_propensity(data)


def test_propensity_needs_every_arm():
    t = np.eye(3)[[0, 1, 0, 1]]
    data = TreatmentFrame(np.zeros(4), t, np.ones((4, 1)), np.zeros((4, 1)))
    with pytest.raises(DataError, match="arm 3"):
        fit_propensity(data)


# --------------------------------------------------------------------------- #
# Outcome-conditional model
# --------------------------------------------------------------------------- #


def test_constant_outcome_closed_form_and_degenerate_variance(rng):
    n = 50
    z = rng.standard_normal((n, 1))
    t = np.eye(2)[np.arange(n) % 2]
    data = TreatmentFrame(np.full(n, 2.0), t, np.ones((n, 1)), z)
    fam = OutcomeConditionalFamily("gaussian", H=2, dim_z=1)
    beta = gaussian_conditional_mle(data, fam)
    np.testing.assert_allclose(beta[:4], [2, 0, 2, 0], atol=1e-12)
    with pytest.raises(DataError, match="variance is zero"):
        fit_outcome_conditional(data, fam)


def test_conditional_gaussian_consistency(rng):
    n = 100_000
    z = rng.standard_normal(n)
    data = _frame_from_z(rng, z, lambda z: np.full(z.size, 0.5),
                         lambda z, a: 1 + 0.8 * z + rng.standard_normal(z.size))
    fit = fit_outcome_conditional(data)
    _within_3se(fit.params, [1, 0.8, 1, 0.8, 0.0], fit.information, n)


def test_conditional_bernoulli_consistency(rng):
    n = 100_000
    z = rng.standard_normal(n)
    data = _frame_from_z(rng, z, lambda z: expit(0.2 * z),
                         lambda z, a: (rng.random(z.size) < expit(-0.2 + z)).astype(float))
    fam = OutcomeConditionalFamily("bernoulli", H=2, dim_z=1)
    fit = fit_outcome_conditional(data, fam)
    _within_3se(fit.params, [-0.2, 1, -0.2, 1], fit.information, n)


@pytest.mark.parametrize("kind", ["gaussian", "bernoulli"])
def test_conditional_score_residual_reevaluated(rng, kind):
    data = random_frame(rng, N=400, H=2, dim_z=1, outcome=kind)
    fam = OutcomeConditionalFamily(kind, H=2, dim_z=1)
    fit = fit_outcome_conditional(data, fam)
    _, score, _ = fam.observed_loglik(data, fit.params)
    assert np.max(np.abs(score.mean(axis=0))) <= 1e-8


def test_zero_conditional_family_has_no_parameters(rng):
    data = random_frame(rng, N=20)
    fit = fit_outcome_conditional(data, OutcomeConditionalFamily("zero", H=2, dim_z=1))
    assert fit.params.size == 0 and fit.converged


# --------------------------------------------------------------------------- #
# IPW
# --------------------------------------------------------------------------- #


def test_single_arm_ipw_is_the_plain_fit():
    data = generate(aic_dgp(), 500, 3)
    fam = OutcomeMarginalFamily("gaussian", 2)
    ipw = solve_ipw(data, np.zeros(0), TargetPopulation([1]), fam)
    mle = fit_unweighted(data, fam)
    np.testing.assert_allclose(ipw.params, mle.params, atol=1e-10, rtol=0)
    ols, *_ = np.linalg.lstsq(data.x_obs, data.y, rcond=None)
    np.testing.assert_allclose(mle.params, ols, atol=1e-10)


def _naive_limit(dgp):
    """Arm means of y when weighting is ignored: theta_h + 0.8 E[z | arm h]."""
    e1 = lambda z: expit(0.3 + 0.8 * z)  # noqa: E731
    p1 = integrate.quad(lambda z: stats.norm.pdf(z) * e1(z), -12, 12)[0]
    m1 = integrate.quad(lambda z: z * stats.norm.pdf(z) * e1(z), -12, 12)[0] / p1
    m2 = -m1 * p1 / (1 - p1)
    means = dgp.arm_coef[:, 0] + 0.8 * np.array([m1, m2])
    return np.array([means[0], means[1] - means[0]])


def test_ipw_consistency_and_naive_bias():
    dgp = ac2_dgp()
    data = generate(dgp, 100_000, 11)
    fam = OutcomeMarginalFamily("gaussian", 2)
    fit = solve_ipw(data, dgp.alpha_flat, WHOLE, fam)
    w = dgp.propensity.weights(data.z, dgp.alpha_flat, WHOLE)[np.arange(data.N), data.arm]
    se = _sandwich_se(data, fit.params, w, fam)
    truth = dgp.true_theta()
    assert np.all(np.abs(fit.params - truth) <= 3 * se)

    naive = fit_unweighted(data, fam).params
    limit = _naive_limit(dgp)
    se_naive = _sandwich_se(data, naive, np.ones(data.N), fam)
    assert np.all(np.abs(naive - limit) <= 3 * se_naive)
    assert abs(limit[1] - truth[1]) > 20 * se_naive[1]


def test_ipw_residual_reevaluated(rng):
    data = random_frame(rng, N=300, H=3, dim_x=3, dim_z=2)
    fam = OutcomeMarginalFamily("gaussian", 3)
    prop = PropensityFamily(H=3, dim_z=2)
    alpha = fit_propensity(data, prop).params
    d = TargetPopulation([1, 0.5, 0])
    fit = solve_ipw(data, alpha, d, fam, prop)
    w = prop.weights(data.z, alpha, d)[np.arange(data.N), data.arm]
    _, d1, _ = fam.terms(data.y, data.x_obs @ fit.params)
    assert np.max(np.abs((w * d1) @ data.x_obs / data.N)) <= 1e-8


def test_ipw_bernoulli_converges(rng):
    data = random_frame(rng, N=400, outcome="bernoulli")
    fam = OutcomeMarginalFamily("bernoulli", 2)
    fit = solve_ipw(data, [0.1, -0.2], WHOLE, fam)
    assert fit.converged and fit.grad_norm <= 1e-8


def test_rank_deficiency_reports_null_direction(rng):
    data = random_frame(rng, N=50, dim_x=2)
    dup = TreatmentFrame(data.y, data.t, data.x[:, :, [1, 1]], data.z)
    with pytest.raises(RankDeficiencyError) as info:
        solve_ipw(dup, [0.0, 0.0], WHOLE, OutcomeMarginalFamily("gaussian", 2))
    v = info.value.null_direction
    np.testing.assert_allclose(np.abs(v), [math.sqrt(0.5)] * 2, atol=1e-8)
    assert v[0] * v[1] < 0


def test_newton_iteration_cap():
    def fun(x):
        return np.array([math.atan(x[0] - 100.0)]), np.array([[1 / (1 + (x[0] - 100) ** 2)]])

    with pytest.raises(NonConvergenceError) as info:
        newton_solve(fun, [99.0], max_iter=1)
    assert info.value.result is not None and not info.value.result.converged


def test_family_dimension_checked(rng):
    data = random_frame(rng, N=20, dim_x=2)
    with pytest.raises(ConfigError):
        solve_ipw(data, [0, 0], WHOLE, OutcomeMarginalFamily("gaussian", 3))


# --------------------------------------------------------------------------- #
# Doubly robust
# --------------------------------------------------------------------------- #


def test_dr_with_zero_kernel_equals_ipw(rng):
    dgp = ac2_dgp()
    data = generate(dgp, 2000, 5)
    fam = OutcomeMarginalFamily("gaussian", 2)
    alpha = fit_propensity(data).params
    ipw = solve_ipw(data, alpha, WHOLE, fam)
    dr = solve_dr(data, alpha, np.zeros(0), WHOLE, fam,
                  conditional=OutcomeConditionalFamily("zero", H=2, dim_z=1))
    np.testing.assert_allclose(dr.params, ipw.params, atol=1e-10, rtol=0)


def _dr_setup(rng, kind="gaussian", H=2):
    data = random_frame(rng, N=60, H=H, dim_x=2, dim_z=1, outcome=kind)
    fam = OutcomeMarginalFamily(kind, 2)
    prop = PropensityFamily(H=H, dim_z=1)
    cond = OutcomeConditionalFamily(kind, H=H, dim_z=1)
    theta = 0.4 * rng.standard_normal(2)
    alpha = 0.5 * rng.standard_normal(prop.q)
    beta = 0.5 * rng.standard_normal(cond.r)
    return data, fam, prop, cond, theta, alpha, beta


def test_dr_moment_zero_kernel_example(rng):
    rec = SampleRecord(0.7, np.array([1.0, 0.0]), np.array([[1.0, 0.4], [1.0, -1.0]]),
                       np.array([0.3]))
    theta, alpha = np.array([0.2, 0.5]), np.array([0.1, 0.9])
    fam = OutcomeMarginalFamily("gaussian", 2)
    m = dr_moment(rec, theta, alpha, np.zeros(0), WHOLE, family=fam,
                  conditional=OutcomeConditionalFamily("zero", H=2, dim_z=1))
    w1 = 1 / expit(0.1 + 0.9 * 0.3)
    np.testing.assert_allclose(m, w1 * (0.7 - rec.x[0] @ theta) * rec.x[0], rtol=1e-14)


@pytest.mark.parametrize("kind,H,d", [("gaussian", 2, [1, 1]), ("gaussian", 3, [1, 0, 2]),
                                      ("bernoulli", 2, [0, 1])])
def test_dr_moment_nuisance_jacobians(rng, kind, H, d):
    data, fam, prop, cond, theta, alpha, beta = _dr_setup(rng, kind, H)
    tp = TargetPopulation(d)
    for i in rng.choice(data.N, 10, replace=False):
        rec = data.record(int(i))

        def m(a=alpha, b=beta):
            return dr_moment(rec, theta, a, b, tp, family=fam, propensity=prop, conditional=cond)

        da = dr_moment(rec, theta, alpha, beta, tp, "dalpha", fam, prop, cond)
        db = dr_moment(rec, theta, alpha, beta, tp, "dbeta", fam, prop, cond)
        assert_fd(da, central_diff(lambda a: m(a=a), alpha))
        assert_fd(db, central_diff(lambda b: m(b=b), beta))


def test_dr_theta_jacobian(rng):
    data, fam, prop, cond, theta, alpha, beta = _dr_setup(rng)

    def mean_m(th):
        return dr_terms(data, th, alpha, beta, WHOLE, fam, prop, cond, False).m.mean(axis=0)

    jac = dr_terms(data, theta, alpha, beta, WHOLE, fam, prop, cond, False).d_theta
    assert_fd(jac, central_diff(mean_m, theta))


def test_dr_residual_reevaluated():
    dgp = ac2_dgp()
    data = generate(dgp, 3000, 9)
    fam = OutcomeMarginalFamily("gaussian", 2)
    alpha = fit_propensity(data).params
    beta = fit_outcome_conditional(data).params
    fit = solve_dr(data, alpha, beta, WHOLE, fam)
    m = dr_terms(data, fit.params, alpha, beta, WHOLE, fam, PropensityFamily(H=2, dim_z=1),
                 OutcomeConditionalFamily("gaussian", H=2, dim_z=1), False).m
    assert fit.converged
    assert np.max(np.abs(m.mean(axis=0))) <= 1e-8


def test_dr_rejects_incompatible_kernel(rng):
    data = random_frame(rng, N=20)
    with pytest.raises(ConfigError):
        solve_dr(data, [0, 0], np.zeros(4), WHOLE, OutcomeMarginalFamily("gaussian", 2),
                 conditional=OutcomeConditionalFamily("bernoulli", H=2, dim_z=1))


@pytest.mark.slow
@pytest.mark.parametrize("estimator", ["IPW-unknown", "DR-leg-A", "DR-leg-B"])
def test_error_shrinks_with_sample_size(estimator):
    from msmic.pipeline import FitRecipe, fit_model

    switches = {"DR-leg-A": {"propensity_drops_z": True},
                "DR-leg-B": {"conditional_drops_z": True}}.get(estimator, {})
    dgp = ac2_dgp(**switches)
    recipe = dgp.nuisance_recipe(FitRecipe("DR" if estimator.startswith("DR") else estimator))
    truth = dgp.true_theta()
    medians = []
    for n in (1_000, 10_000, 100_000):
        errs = [np.max(np.abs(fit_model(generate(dgp, n, [n, r]), recipe).theta - truth))
                for r in range(9)]
        medians.append(np.median(errs))
    assert medians[0] > medians[1] > medians[2]
