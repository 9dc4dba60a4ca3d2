"""Penalty matrices and information criteria for weighted marginal structural models.

Population expectations over potential outcomes are replaced by sample
averages over observed arms, reweighted by t / e so each average targets the
same quantity given ``E[t^(h) | z] = e^(h)(z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SingularMatrixError
from .estimate import dr_terms
from .model import (
    OutcomeConditionalFamily,
    OutcomeMarginalFamily,
    PropensityFamily,
    TargetPopulation,
    TreatmentFrame,
)

MAX_CONDITION = 1e10

KINDS = ("QICW", "IPWIC1", "IPWIC2", "DRIC", "CB-IC", "OBS-WEIGHT-IC")


def checked_inverse(mat, name="matrix"):
    """Inverse through the SVD; refuses matrices with condition number > 1e10."""
    mat = np.asarray(mat, dtype=float)
    if mat.size == 0:
        return mat.copy()
    u, s, vt = np.linalg.svd(mat)
    cond = np.inf if s[-1] == 0 else s[0] / s[-1]
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularMatrixError(name, cond)
    return (vt.T / s) @ u.T


def condition_number(mat) -> float:
    s = np.linalg.svd(mat, compute_uv=False)
    return float(np.inf if s[-1] == 0 else s[0] / s[-1])


@dataclass(frozen=True)
class PenaltyMatrices:
    A_hat: np.ndarray
    B_hat: np.ndarray
    I1_hat: np.ndarray | None = None
    I2_hat: np.ndarray | None = None
    Lam1_hat: np.ndarray | None = None
    Lam2_hat: np.ndarray | None = None
    C1_hat: np.ndarray | None = None
    C2_hat: np.ndarray | None = None
    D1_hat: np.ndarray | None = None
    D2_hat: float | None = None
    D3_hat: float | None = None


@dataclass(frozen=True)
class CriterionReport:
    kind: str
    fit_term: float
    penalty: float
    matrices: PenaltyMatrices | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown criterion kind {self.kind!r}")

    @property
    def value(self) -> float:
        return self.fit_term + self.penalty


@dataclass(frozen=True)
class _Observed:
    """Quantities at each record's assigned arm."""

    e: np.ndarray  # (N, H) propensities
    w: np.ndarray  # (N,)
    dw: np.ndarray | None  # (N, q)
    dlog: np.ndarray | None  # (N, q)
    loss: np.ndarray  # (N,)
    d2: np.ndarray  # (N,)
    score: np.ndarray  # (N, p)


def _observed(data, theta, alpha, d, family, propensity, grads):
    if family.p != data.dim_x:
        raise ConfigError(f"family has p={family.p} but data has dim_x={data.dim_x}")
    idx, a = np.arange(data.N), data.arm
    xa = data.x_obs
    loss, d1, d2 = family.terms(data.y, xa @ np.asarray(theta, dtype=float))
    e = propensity.probs(data.z, alpha)
    if grads:
        w, dw = propensity.weights(data.z, alpha, d, with_grad=True)
        dlog = propensity.dlog(data.z, alpha, e)[idx, a]
        dw = dw[idx, a]
    else:
        w, dw, dlog = propensity.weights(data.z, alpha, d), None, None
    return _Observed(e, w[idx, a], dw, dlog, loss, d2, d1[:, None] * xa)


def _defaults(data, family, propensity):
    if propensity is None:
        propensity = PropensityFamily(H=data.H, dim_z=data.dim_z)
    if propensity.H != data.H:
        raise ConfigError(f"propensity model has {propensity.H} arms but data has {data.H}")
    return propensity


def _a_b(data, obs):
    n = data.N
    xa = data.x_obs
    a_hat = (xa * (obs.w * -obs.d2)[:, None]).T @ xa / n
    a_hat = 0.5 * (a_hat + a_hat.T)
    b_hat = (obs.score * (obs.w**2)[:, None]).T @ obs.score / n
    return a_hat, b_hat


def _information(scores, hessian, information):
    if information == "opg":
        return scores.T @ scores / scores.shape[0]
    if information == "hessian":
        return -hessian
    raise ConfigError(f"unknown information form {information!r}")


def penalty_matrices_ipw(
    data: TreatmentFrame,
    theta,
    alpha,
    d: TargetPopulation,
    alpha_known: bool,
    family: OutcomeMarginalFamily,
    propensity: PropensityFamily | None = None,
    information: str = "opg",
) -> PenaltyMatrices:
    """A, B and, for an estimated propensity, I1, Lambda1, Lambda2."""
    propensity = _defaults(data, family, propensity)
    obs = _observed(data, theta, alpha, d, family, propensity, grads=not alpha_known)
    a_hat, b_hat = _a_b(data, obs)
    if alpha_known:
        return PenaltyMatrices(a_hat, b_hat)
    n = data.N
    _, _, hess = propensity.observed_loglik(data.t, data.z, alpha)
    i1 = _information(obs.dlog, hess, information)
    lam1 = -obs.dw.T @ obs.score / n
    lam2 = (obs.score * obs.w[:, None]).T @ obs.dlog / n
    return PenaltyMatrices(a_hat, b_hat, I1_hat=i1, Lam1_hat=lam1, Lam2_hat=lam2)


def _diagnostics(obs, a_hat, p):
    return {
        "p": p,
        "min_propensity": float(obs.e.min()),
        "cond_A": condition_number(a_hat),
    }


def weighted_fit_term(data, theta, weights, family) -> float:
    loss, _, _ = family.terms(data.y, data.x_obs @ np.asarray(theta, dtype=float))
    return float(-2.0 * np.sum(weights * loss))


def ipwic(
    data: TreatmentFrame,
    theta,
    alpha,
    d: TargetPopulation,
    alpha_known: bool,
    family: OutcomeMarginalFamily,
    propensity: PropensityFamily | None = None,
    *,
    form: str = "derived",
    information: str = "opg",
) -> CriterionReport:
    """IPWIC1 (known propensity) or IPWIC2 (estimated propensity).

    With an estimated propensity the penalty is
    ``2 tr{A^-1 (B - Lam2 I1^-1 Lam1)}``. ``form="literal"`` instead subtracts
    ``tr(Lam2 I1^-1 Lam1)`` without the ``A^-1`` factor; that variant is not
    invariant to rescaling theta and is kept only for comparison.
    """
    mats = penalty_matrices_ipw(data, theta, alpha, d, alpha_known, family, propensity,
                                information)
    propensity = _defaults(data, family, propensity)
    obs = _observed(data, theta, alpha, d, family, propensity, grads=False)
    a_inv = checked_inverse(mats.A_hat, "A_hat")
    penalty = np.trace(a_inv @ mats.B_hat)
    if not alpha_known:
        correction = mats.Lam2_hat @ checked_inverse(mats.I1_hat, "I1_hat") @ mats.Lam1_hat
        if form == "derived":
            correction = a_inv @ correction
        elif form != "literal":
            raise ConfigError(f"unknown IPWIC2 form {form!r}")
        penalty -= np.trace(correction)
    fit = weighted_fit_term(data, theta, obs.w, family)
    return CriterionReport(
        "IPWIC1" if alpha_known else "IPWIC2",
        fit,
        float(2.0 * penalty),
        mats,
        _diagnostics(obs, mats.A_hat, family.p),
    )


def qicw(
    data: TreatmentFrame,
    theta,
    alpha,
    d: TargetPopulation,
    family: OutcomeMarginalFamily,
    propensity: PropensityFamily | None = None,
) -> CriterionReport:
    """Weighted fit term plus twice the parameter count."""
    propensity = _defaults(data, family, propensity)
    obs = _observed(data, theta, alpha, d, family, propensity, grads=False)
    a_hat, _ = _a_b(data, obs)
    fit = weighted_fit_term(data, theta, obs.w, family)
    return CriterionReport("QICW", fit, 2.0 * family.p, None,
                           _diagnostics(obs, a_hat, family.p))


def observed_weight_variant(
    data: TreatmentFrame,
    theta,
    alpha,
    d: TargetPopulation,
    family: OutcomeMarginalFamily,
    propensity: PropensityFamily | None = None,
) -> CriterionReport:
    """Criterion whose risk weights arm h by sum_k d_k e_k(z) instead of w^(h).

    The estimator stays IPW; only the criterion weight changes, so B loses its
    1 / e^(h) factor. For d = 1 the criterion weight is 1 and, at a correctly
    specified model, the penalty tends to 2p.
    """
    propensity = _defaults(data, family, propensity)
    obs = _observed(data, theta, alpha, d, family, propensity, grads=False)
    s = obs.e @ d.d
    a_hat, _ = _a_b(data, obs)
    b_obs = (obs.score * (obs.w * s)[:, None]).T @ obs.score / data.N
    penalty = 2.0 * np.trace(checked_inverse(a_hat, "A_hat") @ b_obs)
    fit = weighted_fit_term(data, theta, s, family)
    return CriterionReport("OBS-WEIGHT-IC", fit, float(penalty), PenaltyMatrices(a_hat, b_obs),
                           _diagnostics(obs, a_hat, family.p))


def penalty_matrices_dr(
    data: TreatmentFrame,
    theta,
    alpha,
    beta,
    d: TargetPopulation,
    family: OutcomeMarginalFamily,
    propensity: PropensityFamily | None = None,
    conditional: OutcomeConditionalFamily | None = None,
    information: str = "opg",
) -> PenaltyMatrices:
    """A, B, I1, I2, C1, C2 and the D1-D3 corrections of the DR criterion."""
    propensity = _defaults(data, family, propensity)
    if conditional is None:
        conditional = OutcomeConditionalFamily(family.kind, H=data.H, dim_z=data.dim_z)
    n, idx, a = data.N, np.arange(data.N), data.arm
    obs = _observed(data, theta, alpha, d, family, propensity, grads=True)
    a_hat, b_hat = _a_b(data, obs)
    a_inv = checked_inverse(a_hat, "A_hat")

    _, _, hess_a = propensity.observed_loglik(data.t, data.z, alpha)
    i1 = _information(obs.dlog, hess_a, information)
    _, beta_scores, hess_b = conditional.observed_loglik(data, beta)
    i2 = _information(beta_scores, hess_b, information) if conditional.r else np.zeros((0, 0))

    terms = dr_terms(data, theta, alpha, beta, d, family, propensity, conditional)
    c1 = a_inv @ terms.d_alpha.mean(axis=0) @ checked_inverse(i1, "I1_hat")
    c2 = a_inv @ terms.d_beta.mean(axis=0) @ checked_inverse(i2, "I2_hat")

    eta = np.einsum("nhj,j->nh", data.x, np.asarray(theta, dtype=float))
    ker = conditional.kernel(family, eta, data.z, beta)
    grad_g = ker.eta[:, :, None] * data.x  # (N, H, p)
    w = obs.w
    first = (d.d[a] * w)[:, None] * grad_g.sum(axis=1)
    second = (w**2)[:, None] * grad_g[idx, a]
    d1 = (first - second).T @ obs.score / n
    d2 = float(np.trace(c1 @ ((obs.dlog * w[:, None]).T @ obs.score / n)))
    d3 = float(np.trace(c2 @ ((beta_scores * w[:, None]).T @ obs.score / n)))
    return PenaltyMatrices(a_hat, b_hat, I1_hat=i1, I2_hat=i2, C1_hat=c1, C2_hat=c2,
                           D1_hat=d1, D2_hat=d2, D3_hat=d3)


def dric(
    data: TreatmentFrame,
    theta,
    alpha,
    beta,
    d: TargetPopulation,
    family: OutcomeMarginalFamily,
    propensity: PropensityFamily | None = None,
    conditional: OutcomeConditionalFamily | None = None,
    *,
    fit_weight: str = "target",
    information: str = "opg",
) -> CriterionReport:
    """Doubly robust information criterion.

    ``fit_weight="target"`` weights the fit term by w^(h) like every other
    criterion here; ``"inverse_propensity"`` uses 1 / e^(h), which coincides
    with it only for d = 1.
    """
    mats = penalty_matrices_dr(data, theta, alpha, beta, d, family, propensity, conditional,
                               information)
    propensity = _defaults(data, family, propensity)
    obs = _observed(data, theta, alpha, d, family, propensity, grads=False)
    if fit_weight == "target":
        weights = obs.w
    elif fit_weight == "inverse_propensity":
        weights = 1.0 / obs.e[np.arange(data.N), data.arm]
    else:
        raise ConfigError(f"unknown fit_weight {fit_weight!r}")
    a_inv = checked_inverse(mats.A_hat, "A_hat")
    penalty = 2.0 * (np.trace(a_inv @ (mats.B_hat + mats.D1_hat)) + mats.D2_hat + mats.D3_hat)
    fit = weighted_fit_term(data, theta, weights, family)
    return CriterionReport("DRIC", fit, float(penalty), mats,
                           _diagnostics(obs, mats.A_hat, family.p))
