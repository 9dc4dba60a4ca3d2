"""Covariate-balancing propensity and the direct contrast estimator.

For a contrast ``c`` the pseudo-outcome ``Y_i = sum_h t_ih c_h y_i / e_h(z_i)``
has conditional mean ``x_i' theta`` with ``theta = sum_h c_h theta^(h)``
once the propensity balances ``(1, z)`` and ``tau`` is linear in ``z``. The
contrast is then the least-squares fit of ``Y`` on the shared regressors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .criteria import CriterionReport, checked_inverse, condition_number
from .errors import ConfigError, DataError, NonConvergenceError
from .estimate import MAX_ITER, TOL, FitResult, _require_arms, newton_solve
from .model import ContrastSpec, PropensityFamily, TreatmentFrame

PENALTY_FORMS = ("plugin", "sandwich", "sandwich-fitted")


@dataclass(frozen=True)
class CBFit:
    """Balancing fit and the contrast estimate.

    ``lam`` is (q,) and ``info`` is (q, k): the plug-ins of the influence of
    the balancing step on the pseudo-outcome residuals.
    """

    alpha: np.ndarray
    lam: np.ndarray
    info: np.ndarray
    theta: np.ndarray
    alpha_fit: FitResult


def _check(data: TreatmentFrame, c: ContrastSpec, propensity: PropensityFamily | None):
    if c.H != data.H:
        raise ConfigError(f"contrast has {c.H} arms but data has {data.H}")
    if data.H != 2:
        raise ConfigError("covariate balancing is implemented for two arms")
    if propensity is None:
        propensity = PropensityFamily(H=2, dim_z=data.dim_z)
    if propensity.H != 2:
        raise ConfigError("balancing propensity model must have two arms")
    return propensity


def balancing_moment(data: TreatmentFrame, alpha, c: ContrastSpec,
                     propensity: PropensityFamily | None = None, with_jac=False):
    """Mean of ``sum_h t_h c_h (1, z) / e_h`` and optionally its alpha-Jacobian."""
    propensity = _check(data, c, propensity)
    zt = propensity.design(data.z)
    idx, a = np.arange(data.N), data.arm
    e = propensity.probs(data.z, alpha)
    ratio = c.c[a] / e[idx, a]
    g = zt.T @ ratio / data.N
    if not with_jac:
        return g
    dlog = propensity.dlog(data.z, alpha, e)[idx, a]
    jac = -(zt * ratio[:, None]).T @ dlog / data.N
    return g, jac


def solve_cb_alpha(
    data: TreatmentFrame,
    c: ContrastSpec,
    propensity: PropensityFamily | None = None,
    *,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
    bound: float = 30.0,
) -> FitResult:
    """Propensity parameters that balance ``(1, z)`` between arms under contrast ``c``."""
    propensity = _check(data, c, propensity)
    _require_arms(data, "solve_cb_alpha")

    def fun(alpha):
        return balancing_moment(data, alpha, c, propensity, with_jac=True)

    try:
        return newton_solve(fun, np.zeros(propensity.q), tol=tol, max_iter=max_iter,
                            bound=bound, label="balancing equation")
    except NonConvergenceError as exc:
        raise NonConvergenceError(f"{exc}; balancing may be infeasible for these data",
                                  exc.result) from None


def pseudo_outcome(data: TreatmentFrame, alpha, c: ContrastSpec,
                   propensity: PropensityFamily | None = None) -> np.ndarray:
    propensity = _check(data, c, propensity)
    idx, a = np.arange(data.N), data.arm
    e = propensity.probs(data.z, alpha)
    return c.c[a] * data.y / e[idx, a]


def _shared_x(data: TreatmentFrame) -> np.ndarray:
    if not data.has_shared_x():
        raise DataError("the contrast estimator needs regressors shared across arms")
    return data.x[:, 0, :]


def cb_estimate(data: TreatmentFrame, alpha, c: ContrastSpec,
                propensity: PropensityFamily | None = None) -> np.ndarray:
    """Least-squares regression of the weighted pseudo-outcome on the shared regressors."""
    x = _shared_x(data)
    gram = x.T @ x
    return checked_inverse(gram, "sum x x^T") @ (x.T @ pseudo_outcome(data, alpha, c, propensity))


def fit_cb(data: TreatmentFrame, c: ContrastSpec,
           propensity: PropensityFamily | None = None, **solver) -> CBFit:
    """Balancing step, contrast estimate and the lambda / I plug-ins."""
    propensity = _check(data, c, propensity)
    res = solve_cb_alpha(data, c, propensity, **solver)
    theta = cb_estimate(data, res.params, c, propensity)
    lam, info = _lambda_info(data, theta, res.params, c, propensity)
    return CBFit(res.params, lam, info, theta, res)


def _lambda_info(data, theta, alpha, c, propensity):
    idx, a = np.arange(data.N), data.arm
    x = _shared_x(data)
    e = propensity.probs(data.z, alpha)
    dlog = propensity.dlog(data.z, alpha, e)[idx, a]
    ratio = c.c[a] / e[idx, a]
    resid = data.y - x @ theta
    lam = (ratio * resid) @ dlog / data.N
    info = (dlog * ratio[:, None]).T @ propensity.design(data.z) / data.N
    return lam, info


def cb_criterion(
    data: TreatmentFrame,
    theta,
    alpha,
    c: ContrastSpec,
    propensity: PropensityFamily | None = None,
    *,
    form: str = "plugin",
) -> CriterionReport:
    """Squared-error criterion for the contrast estimator.

    ``form="plugin"`` uses the residual ``y - x'theta`` for the noise in both
    slots and the scalar ``lam I^-1 (1, z)`` correction. ``form="sandwich"``
    is the first-order optimism computed from the pseudo-outcome residuals
    and the exact linearization of the balancing step, for squared errors
    weighted by the limit propensity (the convention of every other
    criterion). ``form="sandwich-fitted"`` adds the term that appears when
    both squared errors use the fitted balancing weights instead.
    """
    propensity = _check(data, c, propensity)
    theta = np.asarray(theta, dtype=float)
    x = _shared_x(data)
    n, idx, a = data.N, np.arange(data.N), data.arm
    zt = propensity.design(data.z)
    e = propensity.probs(data.z, alpha)
    ea = e[idx, a]
    dlog = propensity.dlog(data.z, alpha, e)[idx, a]
    pseudo = c.c[a] * data.y / ea
    psi = pseudo - x @ theta
    fit = float(psi @ psi)
    gram_inv = checked_inverse(x.T @ x / n, "mean x x^T")
    ratio = c.c[a] / ea
    info = (dlog * ratio[:, None]).T @ zt / n  # (q, k)
    info_inv = checked_inverse(info, "I_hat")
    if form == "plugin":
        resid = data.y - x @ theta
        lam = (ratio * resid) @ dlog / n
        corr = zt @ (info_inv.T @ lam)
        kern = ratio**2 * resid * (resid - corr)
        penalty = 2.0 * np.trace(gram_inv @ ((x * kern[:, None]).T @ x / n))
    elif form in ("sandwich", "sandwich-fitted"):
        # theta_hat - theta ~ mean(xx')^-1 mean(phi), phi = x psi - G J^-1 m
        m = zt * ratio[:, None]  # balancing moment per record (N, k)
        jac = -info.T  # d mean(m) / d alpha, (k, q)
        dpseudo = -pseudo[:, None] * dlog  # (N, q)
        g_bar = x.T @ dpseudo / n  # (p, q)
        jac_inv = checked_inverse(jac, "balancing Jacobian")
        phi = x * psi[:, None] - m @ (g_bar @ jac_inv).T
        penalty = 2.0 * np.trace(gram_inv @ ((phi * psi[:, None]).T @ x / n))
        if form == "sandwich-fitted":
            # in-sample squared error at alpha-hat also reacts to the balancing step
            u = dpseudo * psi[:, None]
            u -= u.mean(axis=0)
            penalty += 2.0 * np.trace(jac_inv.T @ (u.T @ m / n))
    else:
        raise ConfigError(f"unknown CB penalty form {form!r}; choose from {PENALTY_FORMS}")
    return CriterionReport(
        "CB-IC",
        fit,
        float(penalty),
        None,
        {"p": x.shape[1], "min_propensity": float(e.min()),
         "cond_A": condition_number(x.T @ x / n)},
    )
