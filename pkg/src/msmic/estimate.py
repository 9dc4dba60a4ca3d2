"""Estimating-equation solvers: propensity MLE, outcome-conditional MLE, IPW and DR.

All equations are solved in their sample-mean form (divided by N) with a
damped Newton iteration; see :func:`newton_solve`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, NonConvergenceError, RankDeficiencyError
from .model import (
    OutcomeConditionalFamily,
    OutcomeMarginalFamily,
    PropensityFamily,
    TargetPopulation,
    TreatmentFrame,
)

TOL = 1e-8
MAX_ITER = 100


@dataclass(frozen=True)
class FitResult:
    """Solution of an estimating equation.

    ``information`` is minus the Jacobian of the mean estimating equation at
    the solution (the observed information for likelihood fits).
    """

    params: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    information: np.ndarray


def _solve_step(jac, rhs, label):
    if jac.size == 0:
        return np.zeros(0)
    u, s, vt = np.linalg.svd(jac)
    if not np.all(np.isfinite(s)) or s[-1] <= s[0] * 1e-13:
        raise RankDeficiencyError(
            f"{label}: singular Jacobian; null direction {np.round(vt[-1], 6).tolist()}",
            null_direction=vt[-1],
        )
    return vt.T @ ((u.T @ rhs) / s)


def newton_solve(
    fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0,
    *,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
    bound: float | None = None,
    label: str = "estimating equation",
) -> FitResult:
    """Solve ``g(x) = 0`` where ``fun(x)`` returns ``(g, dg/dx)``.

    Full Newton steps are halved until the Euclidean norm of ``g`` decreases.
    Convergence is declared on the sup-norm of ``g``. ``bound`` caps the
    sup-norm of the iterate (divergence guard).
    """
    x = np.array(x0, dtype=float)
    g, jac = fun(x)
    for it in range(max_iter + 1):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= tol:
            return FitResult(x, True, it, gnorm, -jac)
        if it == max_iter:
            break
        step = _solve_step(jac, -g, label)
        f0 = float(g @ g)
        lam = 1.0
        for _ in range(60):
            x_new = x + lam * step
            g_new, jac_new = fun(x_new)
            if np.all(np.isfinite(g_new)) and float(g_new @ g_new) < f0:
                break
            lam *= 0.5
        else:
            raise NonConvergenceError(
                f"{label}: line search stalled at |g| = {gnorm:.3e}",
                FitResult(x, False, it, gnorm, -jac),
            )
        x, g, jac = x_new, g_new, jac_new
        if bound is not None and np.max(np.abs(x)) > bound:
            raise NonConvergenceError(
                f"{label}: parameters diverged (|param| > {bound})",
                FitResult(x, False, it + 1, float(np.max(np.abs(g))), -jac),
            )
    raise NonConvergenceError(
        f"{label}: no convergence in {max_iter} iterations (|g| = {gnorm:.3e})",
        FitResult(x, False, max_iter, gnorm, -jac),
    )


def _require_arms(data: TreatmentFrame, what: str):
    counts = data.arm_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DataError(f"{what}: arm {int(empty[0]) + 1} has no records")


def fit_propensity(
    data: TreatmentFrame,
    family: PropensityFamily | None = None,
    *,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
    bound: float = 30.0,
) -> FitResult:
    """Multinomial-logistic MLE of the assignment model."""
    if family is None:
        family = PropensityFamily(H=data.H, dim_z=data.dim_z)
    if family.H != data.H:
        raise ConfigError(f"propensity model has {family.H} arms, data {data.H}")
    _require_arms(data, "fit_propensity")

    def fun(alpha):
        _, score, hess = family.observed_loglik(data.t, data.z, alpha)
        return score.mean(axis=0), hess

    try:
        return newton_solve(fun, np.zeros(family.q), tol=tol, max_iter=max_iter, bound=bound,
                            label="propensity MLE")
    except NonConvergenceError as exc:
        last = exc.result.params.reshape(family.H - 1, family.k)
        arm = int(np.argmax(np.abs(last).max(axis=1))) + 1
        raise NonConvergenceError(
            f"{exc} (likely separation of arm {arm} from the reference arm)", exc.result
        ) from None


def fit_outcome_conditional(
    data: TreatmentFrame,
    family: OutcomeConditionalFamily | None = None,
    *,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
    bound: float = 50.0,
) -> FitResult:
    """MLE of the per-arm outcome law given confounders."""
    if family is None:
        family = OutcomeConditionalFamily("gaussian", H=data.H, dim_z=data.dim_z)
    if family.H != data.H:
        raise ConfigError(f"conditional model has {family.H} arms, data {data.H}")
    if family.kind == "zero":
        return FitResult(np.zeros(0), True, 0, 0.0, np.zeros((0, 0)))
    _require_arms(data, "fit_outcome_conditional")
    beta0 = np.zeros(family.r)
    if family.kind == "gaussian":
        # the MLE is closed form; Newton only polishes and supplies the information
        beta0 = gaussian_conditional_mle(data, family)
        if not np.isfinite(beta0[-1]):
            raise DataError(
                "outcome-conditional fit: residual variance is zero (outcomes are exactly "
                "linear in the confounders within every arm)"
            )

    def fun(beta):
        _, score, hess = family.observed_loglik(data, beta)
        return score.mean(axis=0), hess

    return newton_solve(fun, beta0, tol=tol, max_iter=max_iter, bound=bound,
                        label="outcome-conditional MLE")


def gaussian_conditional_mle(data: TreatmentFrame, family: OutcomeConditionalFamily):
    """Per-arm least squares and the pooled residual variance, as ``(coef..., log v)``."""
    zt = family.design(data.z)
    beta = np.zeros(family.r)
    rss = 0.0
    for h in range(family.H):
        m = data.arm == h
        coef, *_ = np.linalg.lstsq(zt[m], data.y[m], rcond=None)
        beta[h * family.k : (h + 1) * family.k] = coef
        rss += float(np.sum((data.y[m] - zt[m] @ coef) ** 2))
    v = rss / data.N
    # residuals at rounding level mean an exact fit
    floor = 1e-24 * (1.0 + float(np.mean(data.y**2)))
    beta[-1] = np.log(v) if v > floor else -np.inf
    return beta


def _theta_check(data: TreatmentFrame, family: OutcomeMarginalFamily):
    if family.p != data.dim_x:
        raise ConfigError(f"family has p={family.p} but data has dim_x={data.dim_x}")
    family.check_outcome(data.y)


def _weighted_equation(data, family, weights):
    xa = data.x_obs

    def fun(theta):
        _, d1, d2 = family.terms(data.y, xa @ theta)
        g = (weights * d1) @ xa / data.N
        jac = (xa * (weights * d2)[:, None]).T @ xa / data.N
        return g, jac

    return fun


def fit_unweighted(
    data: TreatmentFrame,
    family: OutcomeMarginalFamily,
    *,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> FitResult:
    """Naive fit of the marginal model on observed arms (no confounding adjustment)."""
    _theta_check(data, family)
    start = np.zeros(family.p)
    if family.loss.kind != "loglik":
        start = fit_unweighted(data, OutcomeMarginalFamily(family.kind, family.p,
                                                           variance=family.variance),
                               tol=tol, max_iter=max_iter).params
    return newton_solve(_weighted_equation(data, family, np.ones(data.N)), start, tol=tol,
                        max_iter=max_iter, label="unweighted fit")


def solve_ipw(
    data: TreatmentFrame,
    alpha,
    d: TargetPopulation,
    family: OutcomeMarginalFamily,
    propensity: PropensityFamily | None = None,
    *,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> FitResult:
    """Inverse-probability-weighted estimator of theta for target population ``d``."""
    _theta_check(data, family)
    if propensity is None:
        propensity = PropensityFamily(H=data.H, dim_z=data.dim_z)
    w = propensity.weights(data.z, alpha, d)
    wa = w[np.arange(data.N), data.arm]
    start = fit_unweighted(data, family, tol=tol, max_iter=max_iter).params
    return newton_solve(_weighted_equation(data, family, wa), start, tol=tol,
                        max_iter=max_iter, label="IPW equation")


@dataclass(frozen=True)
class DRTerms:
    """Per-record doubly robust moment and its parameter derivatives.

    ``m`` is (N, p); ``d_theta`` is the mean Jacobian (p, p); ``d_alpha``
    (N, p, q) and ``d_beta`` (N, p, r) are per record.
    """

    m: np.ndarray
    d_theta: np.ndarray
    d_alpha: np.ndarray | None
    d_beta: np.ndarray | None


def dr_terms(
    data: TreatmentFrame,
    theta,
    alpha,
    beta,
    d: TargetPopulation,
    family: OutcomeMarginalFamily,
    propensity: PropensityFamily,
    conditional: OutcomeConditionalFamily,
    nuisance_derivs: bool = True,
) -> DRTerms:
    theta = np.asarray(theta, dtype=float)
    n, idx, a = data.N, np.arange(data.N), data.arm
    eta = np.einsum("nhj,j->nh", data.x, theta)
    xa = data.x_obs
    _, d1, d2 = family.terms(data.y, eta[idx, a])
    if nuisance_derivs:
        w, dw = propensity.weights(data.z, alpha, d, with_grad=True)
    else:
        w, dw = propensity.weights(data.z, alpha, d), None
    wa = w[idx, a]
    ker = conditional.kernel(family, eta, data.z, beta)
    coef = d.d[a][:, None] - data.t * w  # (N, H)
    m = (wa * d1)[:, None] * xa + np.einsum("nh,nh,nhj->nj", coef, ker.eta, data.x)
    d_theta = (
        (xa * (wa * d2)[:, None]).T @ xa
        + np.einsum("nh,nhj,nhk->jk", coef * ker.eta_eta, data.x, data.x)
    ) / n
    d_alpha = d_beta = None
    if nuisance_derivs:
        resid = (d1 - ker.eta[idx, a])[:, None] * xa
        d_alpha = resid[:, :, None] * dw[idx, a][:, None, :]
        d_beta = np.einsum("nh,nhj,nhr->njr", coef, data.x, ker.eta_beta)
    return DRTerms(m, d_theta, d_alpha, d_beta)


def solve_dr(
    data: TreatmentFrame,
    alpha,
    beta,
    d: TargetPopulation,
    family: OutcomeMarginalFamily,
    propensity: PropensityFamily | None = None,
    conditional: OutcomeConditionalFamily | None = None,
    *,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> FitResult:
    """Doubly robust estimator: IPW equation plus the outcome-model augmentation."""
    _theta_check(data, family)
    if propensity is None:
        propensity = PropensityFamily(H=data.H, dim_z=data.dim_z)
    if conditional is None:
        conditional = OutcomeConditionalFamily(family.kind, H=data.H, dim_z=data.dim_z)
    conditional.check_pairing(family)

    def fun(theta):
        terms = dr_terms(data, theta, alpha, beta, d, family, propensity, conditional,
                         nuisance_derivs=False)
        return terms.m.mean(axis=0), terms.d_theta

    start = fit_unweighted(data, family, tol=tol, max_iter=max_iter).params
    return newton_solve(fun, start, tol=tol, max_iter=max_iter, label="DR equation")


def dr_moment(
    record,
    theta,
    alpha,
    beta,
    d: TargetPopulation,
    mode: str = "value",
    family: OutcomeMarginalFamily | None = None,
    propensity: PropensityFamily | None = None,
    conditional: OutcomeConditionalFamily | None = None,
):
    """DR moment m(u; theta, alpha, beta) for one record.

    ``mode``: ``value`` (p,), ``dalpha`` (p, q) or ``dbeta`` (p, r).
    """
    frame = TreatmentFrame.from_records([record])
    theta = np.asarray(theta, dtype=float)
    if family is None:
        family = OutcomeMarginalFamily("gaussian", p=theta.size)
    if propensity is None:
        propensity = PropensityFamily(H=frame.H, dim_z=frame.dim_z)
    if conditional is None:
        conditional = OutcomeConditionalFamily(family.kind, H=frame.H, dim_z=frame.dim_z)
    terms = dr_terms(frame, theta, alpha, beta, d, family, propensity, conditional)
    if mode == "value":
        return terms.m[0]
    if mode == "dalpha":
        return terms.d_alpha[0]
    if mode == "dbeta":
        return terms.d_beta[0]
    raise ConfigError(f"unknown mode {mode!r}")
