"""Statistical families, target-population weights and pointwise kernels.

Every family here is single-index: the marginal outcome model depends on
``theta`` only through the linear predictor ``eta = x @ theta``, so losses are
stored as scalar functions of ``(y, eta)`` and their ``eta``-derivatives.
Parameter gradients follow by the chain rule (``score = d1 * x``,
``hessian = d2 * x x^T``).

Array conventions used throughout the package::

    y  (N,)          observed outcome of the assigned arm
    t  (N, H)        one-hot assignment
    x  (N, H, dim_x) regressors for every arm (potential-outcome design)
    z  (N, dim_z)    confounders
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConfigError, DataError

LOG_2PI = math.log(2.0 * math.pi)


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------- #
# Data containers
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SampleRecord:
    """One observational unit: outcome, assignment, per-arm regressors, confounders."""

    y: float
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray

    @property
    def arm(self) -> int:
        return int(np.argmax(self.t))


@dataclass(frozen=True, eq=False)
class TreatmentFrame:
    """N i.i.d. records stored column-wise.

    Only the assigned arm's potential outcome is held in ``y``. ``x`` keeps the
    regressors of every arm because the doubly robust augmentation evaluates
    the outcome model at unassigned arms too.
    """

    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    regressor_names: tuple[str, ...] | None = None
    confounder_names: tuple[str, ...] | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        t = np.asarray(self.t, dtype=float)
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if y.ndim != 1:
            raise DataError("y must be one-dimensional")
        n = y.shape[0]
        if t.ndim != 2 or t.shape[0] != n:
            raise DataError(f"t must have shape (N, H); got {t.shape}")
        h = t.shape[1]
        if z.ndim == 1:
            z = z.reshape(n, -1) if n else z.reshape(0, 0)
        if z.ndim != 2 or z.shape[0] != n:
            raise DataError(f"z must have shape (N, dim_z); got {z.shape}")
        if x.ndim == 2 and x.shape[0] == n:
            # shared layout: same regressors for every arm
            x = np.repeat(x[:, None, :], h, axis=1)
        if x.ndim != 3 or x.shape[:2] != (n, h):
            raise DataError(f"x must have shape (N, H, dim_x); got {x.shape}")
        if not np.isin(t, (0.0, 1.0)).all() or not np.all(t.sum(axis=1) == 1.0):
            bad = int(np.flatnonzero(~(np.isin(t, (0.0, 1.0)).all(axis=1) & (t.sum(axis=1) == 1.0)))[0])
            raise DataError(f"record {bad}: assignment is not one-hot: {t[bad]}")
        for name, a in (("y", y), ("x", x), ("z", z)):
            if not np.all(np.isfinite(a)):
                raise DataError(f"{name} contains non-finite values")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "arm", _frozen(np.argmax(t, axis=1), dtype=int))
        if self.regressor_names is not None and len(self.regressor_names) != x.shape[2]:
            raise DataError("regressor_names length differs from dim_x")
        if self.confounder_names is not None and len(self.confounder_names) != z.shape[1]:
            raise DataError("confounder_names length differs from dim_z")

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def H(self) -> int:
        return self.t.shape[1]

    @property
    def dim_x(self) -> int:
        return self.x.shape[2]

    @property
    def dim_z(self) -> int:
        return self.z.shape[1]

    @property
    def x_obs(self) -> np.ndarray:
        """Regressors of the assigned arm, shape (N, dim_x)."""
        return self.x[np.arange(self.N), self.arm]

    def arm_counts(self) -> np.ndarray:
        return self.t.sum(axis=0).astype(int)

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(float(self.y[i]), self.t[i], self.x[i], self.z[i])

    @property
    def records(self) -> Iterator[SampleRecord]:
        return (self.record(i) for i in range(self.N))

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord], **names) -> "TreatmentFrame":
        records = list(records)
        if not records:
            raise DataError("no records")
        shapes = {(len(r.t), np.shape(r.x), np.shape(r.z)) for r in records}
        if len(shapes) != 1:
            raise DataError("records disagree on H, dim_x or dim_z")
        return cls(
            y=[r.y for r in records],
            t=np.stack([r.t for r in records]),
            x=np.stack([np.atleast_2d(r.x) for r in records]),
            z=np.stack([np.atleast_1d(r.z) for r in records]),
            **names,
        )

    def select_x(self, columns: Sequence[int]) -> "TreatmentFrame":
        """Frame restricted to a subset of regressor columns (a candidate structure)."""
        columns = list(columns)
        names = None
        if self.regressor_names is not None:
            names = tuple(self.regressor_names[c] for c in columns)
        return TreatmentFrame(
            self.y, self.t, self.x[:, :, columns], self.z, names, self.confounder_names
        )

    def has_shared_x(self) -> bool:
        return bool(np.all(self.x == self.x[:, :1, :]))

    def __eq__(self, other):
        if not isinstance(other, TreatmentFrame):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("y", "t", "x", "z")
        )


@dataclass(frozen=True, eq=False)
class TargetPopulation:
    """Arm multipliers ``d``: arm k's subpopulation counts d[k] times.

    ``d = (1, 1)`` targets the whole population, ``(1, 0)`` the treated and
    ``(0, 1)`` the untreated.
    """

    d: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if d.ndim != 1 or not np.all(np.isfinite(d)):
            raise ConfigError("d must be a finite vector")
        if np.any(d < 0) or not np.any(d > 0):
            raise ConfigError(f"d must be nonnegative with a positive entry; got {d}")
        object.__setattr__(self, "d", _frozen(d))

    @property
    def H(self) -> int:
        return self.d.shape[0]

    @classmethod
    def whole(cls, H: int) -> "TargetPopulation":
        return cls(np.ones(H))

    @classmethod
    def arm_only(cls, H: int, arm: int) -> "TargetPopulation":
        d = np.zeros(H)
        d[arm] = 1.0
        return cls(d)

    def __eq__(self, other):
        return isinstance(other, TargetPopulation) and np.array_equal(self.d, other.d)


@dataclass(frozen=True, eq=False)
class ContrastSpec:
    """Contrast coefficients over arms; must sum to zero."""

    c: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if c.ndim != 1 or c.size < 2:
            raise ConfigError("contrast needs at least two arms")
        if c.sum() != 0.0:
            raise ConfigError(f"contrast must sum to zero; got sum {c.sum()!r}")
        if not np.any(c != 0):
            raise ConfigError("contrast must be nonzero")
        object.__setattr__(self, "c", _frozen(c))

    @property
    def H(self) -> int:
        return self.c.shape[0]


# --------------------------------------------------------------------------- #
# Loss kernels
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LossKernel:
    """Which loss replaces the log-density.

    ``loglik`` is the log-density itself. ``density_power`` is the
    Basu-type robust loss

        (f(y)^gamma - 1) / gamma - (int f^(1+gamma) - 1) / (1 + gamma),

    normalised so that it tends to ``log f`` as gamma -> 0 and its score is
    unbiased under the model.
    """

    kind: str = "loglik"
    gamma: float = 0.5

    def __post_init__(self):
        if self.kind not in ("loglik", "density_power"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.kind == "density_power" and not self.gamma > 0:
            raise ConfigError("density_power loss needs gamma > 0")


LOGLIK = LossKernel("loglik")


def _gaussian_loglik(y, eta, s2):
    r = y - eta
    return -0.5 * r * r / s2 - 0.5 * (LOG_2PI + math.log(s2)), r / s2, np.full_like(r, -1.0 / s2)


def _gaussian_density_power(y, eta, s2, g):
    r = y - eta
    c = (2.0 * math.pi * s2) ** (-0.5 * g)
    k = (c / math.sqrt(1.0 + g) - 1.0) / (1.0 + g)
    e = c * np.exp(-0.5 * g * r * r / s2)
    return (e - 1.0) / g - k, e * r / s2, e / s2 * (g * r * r / s2 - 1.0)


def _bernoulli_loglik(y, eta):
    p = expit(eta)
    value = y * log_expit(eta) + (1.0 - y) * log_expit(-eta)
    return value, y - p, -p * (1.0 - p)


def _bernoulli_density_power(y, eta, g):
    p, q = expit(eta), expit(-eta)
    pg, qg = p**g, q**g
    f_g = np.where(y == 1.0, pg, qg)
    value = (f_g - 1.0) / g - (p * pg + q * qg - 1.0) / (1.0 + g)
    pq = p * q
    d1 = y * pg * q - (1.0 - y) * qg * p - pq * (pg - qg)
    d2 = (
        y * pg * q * (g * q - p)
        - (1.0 - y) * qg * p * (q - g * p)
        - pq * ((q - p) * (pg - qg) + g * (pg * q + qg * p))
    )
    return value, d1, d2


@dataclass(frozen=True)
class OutcomeMarginalFamily:
    """Marginal structural model f(y | x; theta) with a pluggable loss.

    ``variance`` is the known residual variance of the gaussian family (theta
    holds mean coefficients only).
    """

    kind: str = "gaussian"
    p: int = 1
    loss: LossKernel = LOGLIK
    variance: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli"):
            raise ConfigError(f"unknown outcome family {self.kind!r}")
        if self.p < 1:
            raise ConfigError("theta dimension p must be positive")
        if not self.variance > 0:
            raise ConfigError("variance must be positive")

    def with_p(self, p: int) -> "OutcomeMarginalFamily":
        return OutcomeMarginalFamily(self.kind, p, self.loss, self.variance)

    def check_outcome(self, y):
        if self.kind == "bernoulli":
            y = np.asarray(y)
            if not np.isin(y, (0.0, 1.0)).all():
                raise DataError("bernoulli-logit family needs outcomes in {0, 1}")

    def terms(self, y, eta):
        """Loss value and its first two eta-derivatives, elementwise."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            if self.loss.kind == "loglik":
                return _gaussian_loglik(y, eta, self.variance)
            return _gaussian_density_power(y, eta, self.variance, self.loss.gamma)
        if self.loss.kind == "loglik":
            return _bernoulli_loglik(y, eta)
        return _bernoulli_density_power(y, eta, self.loss.gamma)


def loss_eval(family: OutcomeMarginalFamily, y, x, theta, mode="value"):
    """Loss at a single record: ``value`` (scalar), ``score`` (p,) or ``hessian`` (p, p)."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (family.p,) or x.shape != (family.p,):
        raise ConfigError(f"expected x and theta of length {family.p}")
    family.check_outcome(y)
    value, d1, d2 = family.terms(y, x @ theta)
    if mode == "value":
        return float(value)
    if mode == "score":
        return float(d1) * x
    if mode == "hessian":
        return float(d2) * np.outer(x, x)
    raise ConfigError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------- #
# Propensity model
# --------------------------------------------------------------------------- #


def _design(z, columns):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    if columns is not None:
        z = z[:, list(columns)]
    return np.hstack([np.ones((z.shape[0], 1)), z])


@dataclass(frozen=True)
class PropensityFamily:
    """Multinomial logistic propensity with reference arm H (the last arm).

    alpha is stored flat, row-major over an (H-1, k) matrix where
    ``k = 1 + len(z_columns)``; the intercept is always included.
    ``floor`` > 0 clips propensities used in weights and warns.
    """

    H: int = 2
    dim_z: int = 1
    z_columns: tuple[int, ...] | None = None
    floor: float = 0.0

    def __post_init__(self):
        if self.H < 1:
            raise ConfigError("H must be positive")
        if self.z_columns is not None:
            cols = tuple(int(c) for c in self.z_columns)
            if any(c < 0 or c >= self.dim_z for c in cols):
                raise ConfigError(f"propensity z_columns {cols} out of range")
            object.__setattr__(self, "z_columns", cols)
        if not 0.0 <= self.floor < 1.0 / self.H:
            raise ConfigError("propensity floor must lie in [0, 1/H)")

    @property
    def k(self) -> int:
        return 1 + (self.dim_z if self.z_columns is None else len(self.z_columns))

    @property
    def q(self) -> int:
        return (self.H - 1) * self.k

    def design(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[None, :]
        if z.shape[1] != self.dim_z:
            raise ConfigError(f"expected {self.dim_z} confounders, got {z.shape[1]}")
        return _design(z, self.z_columns)

    def _coef(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        if alpha.size != self.q:
            raise ConfigError(f"alpha must have {self.q} entries, got {alpha.size}")
        return alpha.reshape(self.H - 1, self.k)

    def probs(self, z, alpha) -> np.ndarray:
        """Propensities e^(h)(z; alpha), shape (N, H)."""
        zt = self.design(z)
        lin = np.zeros((zt.shape[0], self.H))
        lin[:, :-1] = zt @ self._coef(alpha).T
        lin -= lin.max(axis=1, keepdims=True)
        e = np.exp(lin)
        return e / e.sum(axis=1, keepdims=True)

    def dlog(self, z, alpha, e=None) -> np.ndarray:
        """d log e^(h) / d alpha, shape (N, H, q)."""
        zt = self.design(z)
        if e is None:
            e = self.probs(z, alpha)
        n, hh = e.shape
        ind = np.eye(hh)[None, :, : hh - 1] - e[:, None, : hh - 1]  # (N, H, H-1)
        return (ind[:, :, :, None] * zt[:, None, None, :]).reshape(n, hh, self.q)

    def dprobs(self, z, alpha, e=None) -> np.ndarray:
        """d e^(h) / d alpha, shape (N, H, q)."""
        if e is None:
            e = self.probs(z, alpha)
        return e[:, :, None] * self.dlog(z, alpha, e)

    def observed_loglik(self, t, z, alpha):
        """Mean log-likelihood, mean score and mean Hessian of the assignment model."""
        zt = self.design(z)
        e = self.probs(z, alpha)
        n = zt.shape[0]
        ll = float(np.mean(np.log(np.sum(t * e, axis=1))))
        resid = t[:, :-1] - e[:, :-1]
        score = (resid[:, :, None] * zt[:, None, :]).reshape(n, self.q)
        ee = e[:, :-1]
        cov = ee[:, :, None] * (np.eye(self.H - 1)[None] - ee[:, None, :])  # (N, H-1, H-1)
        hess = -np.einsum("njl,na,nb->jalb", cov, zt, zt).reshape(self.q, self.q) / n
        return ll, score, hess

    def weights(self, z, alpha, d: TargetPopulation, with_grad=False):
        """Target weights w^(h) = sum_k d_k e_k / e_h and optionally d w / d alpha."""
        if d.H != self.H:
            raise ConfigError(f"target population has {d.H} arms, propensity model {self.H}")
        e = self.probs(z, alpha)
        clipped = None
        if self.floor > 0:
            clipped = e < self.floor
            if clipped.any():
                warnings.warn(
                    f"propensity floor {self.floor} applied to "
                    f"{int(clipped.any(axis=1).sum())} records",
                    RuntimeWarning,
                    stacklevel=2,
                )
                e = np.maximum(e, self.floor)
        s = e @ d.d
        w = s[:, None] / e
        if not with_grad:
            return w
        dlog = self.dlog(z, alpha, self.probs(z, alpha))
        if clipped is not None:
            dlog = np.where(clipped[:, :, None], 0.0, dlog)
        de = e[:, :, None] * dlog
        ds = np.einsum("k,nkq->nq", d.d, de)
        dw = w[:, :, None] * (ds[:, None, :] / s[:, None, None] - dlog)
        return w, dw


def propensity_eval(z, alpha) -> np.ndarray:
    """Propensity vector for one confounder vector.

    ``alpha`` is an (H-1, dim_z+1) matrix (intercept first); the last arm is
    the reference.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    if alpha.shape[1] != z.size + 1:
        raise ConfigError(
            f"alpha has {alpha.shape[1]} columns but z has {z.size} entries (+1 intercept)"
        )
    fam = PropensityFamily(H=alpha.shape[0] + 1, dim_z=z.size)
    return fam.probs(z, alpha.ravel())[0]


def target_weight(z, alpha, d: TargetPopulation) -> np.ndarray:
    """Weight vector w^(h)(z; alpha) for one confounder vector."""
    e = propensity_eval(z, alpha)
    if d.H != e.size:
        raise ConfigError(f"target population has {d.H} arms, propensity has {e.size}")
    return (e @ d.d) / e


# --------------------------------------------------------------------------- #
# Outcome model conditional on confounders
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ConditionalKernel:
    """Expected loss under p^(h)(y | z; beta) and its derivatives.

    Arrays are (N, H) except ``eta_beta`` which is (N, H, r).
    """

    value: np.ndarray
    eta: np.ndarray
    eta_eta: np.ndarray
    eta_beta: np.ndarray


@dataclass(frozen=True)
class OutcomeConditionalFamily:
    """Per-arm outcome law given confounders.

    * ``gaussian``: y^(h) | z ~ N(z~ @ beta_h, v) with a common variance; beta
      is ``(beta_1, ..., beta_H, log v)``.
    * ``bernoulli``: y^(h) | z ~ Bernoulli(expit(z~ @ beta_h)).
    * ``zero``: the degenerate kernel g = 0 (r = 0); turns DR into IPW.

    ``quadrature=True`` evaluates gaussian expectations by Gauss-Hermite
    quadrature instead of the closed forms.
    """

    kind: str = "gaussian"
    H: int = 2
    dim_z: int = 1
    z_columns: tuple[int, ...] | None = None
    quadrature: bool = False
    quadrature_nodes: int = 60
    _nodes: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli", "zero"):
            raise ConfigError(f"unknown conditional family {self.kind!r}")
        if self.z_columns is not None:
            cols = tuple(int(c) for c in self.z_columns)
            if any(c < 0 or c >= self.dim_z for c in cols):
                raise ConfigError(f"conditional z_columns {cols} out of range")
            object.__setattr__(self, "z_columns", cols)
        if self.quadrature and self.kind != "gaussian":
            raise ConfigError("quadrature fallback is only available for 1-D gaussian outcomes")
        if self.quadrature:
            u, wq = np.polynomial.hermite_e.hermegauss(self.quadrature_nodes)
            object.__setattr__(self, "_nodes", (u, wq / wq.sum()))

    @property
    def k(self) -> int:
        return 1 + (self.dim_z if self.z_columns is None else len(self.z_columns))

    @property
    def r(self) -> int:
        if self.kind == "zero":
            return 0
        return self.H * self.k + (1 if self.kind == "gaussian" else 0)

    def design(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[None, :]
        if z.shape[1] != self.dim_z:
            raise ConfigError(f"expected {self.dim_z} confounders, got {z.shape[1]}")
        return _design(z, self.z_columns)

    def _split(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.size != self.r:
            raise ConfigError(f"beta must have {self.r} entries, got {beta.size}")
        coef = beta[: self.H * self.k].reshape(self.H, self.k)
        logv = float(beta[-1]) if self.kind == "gaussian" else None
        return coef, logv

    def linear(self, z, beta):
        coef, _ = self._split(beta)
        return self.design(z) @ coef.T

    def check_pairing(self, family: OutcomeMarginalFamily):
        if self.kind == "zero":
            return
        if family.kind != self.kind:
            raise ConfigError(
                f"no closed-form expectation of a {family.kind} loss under a {self.kind} "
                "conditional law"
            )

    # -- fitting ------------------------------------------------------------ #

    def observed_loglik(self, data: TreatmentFrame, beta):
        """Per-record score (N, r), mean log-likelihood and mean Hessian for observed arms."""
        n, a = data.N, data.arm
        r = self.r
        if self.kind == "zero":
            return 0.0, np.zeros((n, 0)), np.zeros((0, 0))
        zt = self.design(data.z)
        coef, logv = self._split(beta)
        lin = np.einsum("nk,nk->n", zt, coef[a])
        score = np.zeros((n, r))
        cols = a[:, None] * self.k + np.arange(self.k)[None, :]
        rows = np.arange(n)[:, None]
        hess = np.zeros((r, r))
        if self.kind == "gaussian":
            v = math.exp(logv)
            res = data.y - lin
            ll = -0.5 * (LOG_2PI + logv) - 0.5 * res * res / v
            score[rows, cols] = (res / v)[:, None] * zt
            score[:, -1] = 0.5 * (res * res / v - 1.0)
            for h in range(self.H):
                m = a == h
                blk = slice(h * self.k, (h + 1) * self.k)
                hess[blk, blk] = -zt[m].T @ zt[m] / v
                hess[blk, -1] = hess[-1, blk] = -(res[m] / v) @ zt[m]
            hess[-1, -1] = -0.5 * np.sum(res * res) / v
        else:
            data_family = OutcomeMarginalFamily("bernoulli")
            data_family.check_outcome(data.y)
            ll, d1, d2 = _bernoulli_loglik(data.y, lin)
            score[rows, cols] = d1[:, None] * zt
            for h in range(self.H):
                m = a == h
                blk = slice(h * self.k, (h + 1) * self.k)
                hess[blk, blk] = (d2[m][:, None] * zt[m]).T @ zt[m]
        return float(np.mean(ll)), score, hess / n

    # -- expectation kernel ------------------------------------------------- #

    def kernel(self, family: OutcomeMarginalFamily, eta, z, beta) -> ConditionalKernel:
        """g^(h) (or eta^(h) for robust losses) and its derivatives.

        ``eta`` is the marginal linear predictor of every arm, shape (N, H).
        """
        self.check_pairing(family)
        eta = np.asarray(eta, dtype=float)
        n = eta.shape[0]
        r = self.r
        if self.kind == "zero":
            zero = np.zeros_like(eta)
            return ConditionalKernel(zero, zero, zero, np.zeros((n, self.H, 0)))
        zt = self.design(z)
        coef, logv = self._split(beta)
        lin = zt @ coef.T  # (N, H)
        eta_beta = np.zeros((n, self.H, r))
        idx = np.arange(self.H)
        if self.kind == "bernoulli":
            mu = expit(lin)
            v1, a1, b1 = family.terms(1.0, eta)
            v0, a0, b0 = family.terms(0.0, eta)
            value = mu * v1 + (1 - mu) * v0
            g_eta = mu * a1 + (1 - mu) * a0
            g_ee = mu * b1 + (1 - mu) * b0
            dmu = (a1 - a0) * mu * (1 - mu)
            for h in idx:
                eta_beta[:, h, h * self.k : (h + 1) * self.k] = dmu[:, h, None] * zt
            return ConditionalKernel(value, g_eta, g_ee, eta_beta)

        v = math.exp(logv)
        if self.quadrature:
            value, g_eta, g_ee, g_em, g_ev = self._gauss_hermite(family, eta, lin, v)
        elif family.loss.kind == "loglik":
            s2 = family.variance
            delta = lin - eta
            value = -0.5 * (delta * delta + v) / s2 - 0.5 * (LOG_2PI + math.log(s2))
            g_eta = delta / s2
            g_ee = np.full_like(eta, -1.0 / s2)
            g_em = np.full_like(eta, 1.0 / s2)
            g_ev = np.zeros_like(eta)
        else:
            value, g_eta, g_ee, g_em, g_ev = _gaussian_dp_expectation(
                eta, lin, v, family.variance, family.loss.gamma
            )
        for h in idx:
            eta_beta[:, h, h * self.k : (h + 1) * self.k] = g_em[:, h, None] * zt
        eta_beta[:, :, -1] = g_ev * v
        return ConditionalKernel(value, g_eta, g_ee, eta_beta)

    def _gauss_hermite(self, family, eta, m, v):
        u, wq = self._nodes
        sd = math.sqrt(v)
        y = m[..., None] + sd * u
        val, d1, d2 = family.terms(y, eta[..., None])
        dm = (y - m[..., None]) / v
        dv = ((y - m[..., None]) ** 2 - v) / (2 * v * v)
        return val @ wq, d1 @ wq, d2 @ wq, (d1 * dm) @ wq, (d1 * dv) @ wq


def _gaussian_dp_expectation(eta, m, v, s2, g):
    """Closed-form E[zeta] for the gaussian density-power loss under N(m, v).

    Uses E exp(-a (y - eta)^2) = s^(-1/2) exp(-a delta^2 / s), s = 1 + 2 a v.
    Returns value and derivatives wrt eta, (eta, eta), (eta, m), (eta, v).
    """
    a = 0.5 * g / s2
    c = (2.0 * math.pi * s2) ** (-0.5 * g)
    k = (c / math.sqrt(1.0 + g) - 1.0) / (1.0 + g)
    s = 1.0 + 2.0 * a * v
    delta = m - eta
    e = c / math.sqrt(s) * np.exp(-a * delta * delta / s)
    value = (e - 1.0) / g - k
    g_eta = e * delta / (s2 * s)
    q = 2.0 * a * delta * delta / s
    g_ee = e / (s2 * s) * (q - 1.0)
    g_em = e / (s2 * s) * (1.0 - q)
    g_ev = g_eta * (2.0 * a * a * delta * delta / (s * s) - 3.0 * a / s)
    return value, g_eta, g_ee, g_em, g_ev


def conditional_loss_expectation(
    h: int,
    x,
    z,
    theta,
    beta,
    mode: str = "value",
    family: OutcomeMarginalFamily | None = None,
    conditional: OutcomeConditionalFamily | None = None,
):
    """g^(h)(x, z; theta, beta) at one point.

    ``mode`` selects ``value`` (scalar), ``grad_theta`` (p,), ``hess_theta``
    (p, p) or ``cross_theta_beta`` (p, r).
    """
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if family is None:
        family = OutcomeMarginalFamily("gaussian", p=theta.size)
    if conditional is None:
        # arm count from the length of beta
        extra = 1 if family.kind == "gaussian" else 0
        H = max((np.size(beta) - extra) // (z.size + 1), 1)
        conditional = OutcomeConditionalFamily(family.kind, H=H, dim_z=z.size)
    if not 0 <= h < conditional.H:
        raise ConfigError(f"arm {h} out of range for H={conditional.H}")
    eta = np.zeros((1, conditional.H))
    eta[0, h] = x @ theta
    ker = conditional.kernel(family, eta, z[None, :], beta)
    if mode == "value":
        return float(ker.value[0, h])
    if mode == "grad_theta":
        return ker.eta[0, h] * x
    if mode == "hess_theta":
        return ker.eta_eta[0, h] * np.outer(x, x)
    if mode == "cross_theta_beta":
        return np.outer(x, ker.eta_beta[0, h])
    raise ConfigError(f"unknown mode {mode!r}")
