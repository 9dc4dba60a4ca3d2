"""Data-generating processes and brute-force Monte Carlo oracles.

Every experiment is a pure function of ``(dgp, seed)``. Replication ``r``
draws from ``SeedSequence(seed, spawn_key=(r,))``, whose two children feed the
fitting frame and the independent copy frame, so replications can run in any
order or in parallel and still give identical results.

The optimism oracle compares the in-sample fit term with the same term on a
fresh copy frame, both evaluated at the fitted theta and with the limit
weights. Subtracting the same quantity at a fixed reference theta on both
frames leaves the expectation unchanged and removes most of the noise.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import cb as cbmod
from .errors import ConfigError, ExperimentError, MsmicError
from .estimate import fit_propensity
from .model import PropensityFamily, TreatmentFrame
from .pipeline import PRIMARY_CRITERION, FitRecipe, fit_model

REF_KEY = 2**31  # spawn key of the large reference frame (never a replication index)
MAX_FAILURE_RATE = 0.05
POSITIVITY_FLOOR = 0.01


def _matrix(a, ndim=2):
    a = np.array(a, dtype=float)
    while a.ndim < ndim:
        a = a[None] if a.ndim else a.reshape(1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DGPSpec:
    """Confounded multi-arm data-generating process.

    z ~ N(0, I) are confounders and v ~ N(0, I) extra regressors that affect
    the outcome but not assignment. Assignment is multinomial logistic in z
    with coefficients ``alpha0`` (rows: non-reference arms, columns: (1, z)).
    Arm h's potential outcome has linear predictor
    ``arm_coef[h] @ (1, v) + confounding[h] @ z``; gaussian outcomes add
    N(0, noise_sd^2) noise, bernoulli outcomes pass it through the logistic.

    ``layout="full"`` gives every arm the regressors
    ``(1, arm dummies 2..H, v, dummy x v interactions)`` so that the marginal
    structural model is saturated in arm and v. ``layout="shared"`` gives all
    arms ``(1, v)``, the covariate-balancing setting.

    ``propensity_drops_z`` / ``conditional_drops_z`` make the fitted nuisance
    models omit z (misspecification switches).
    """

    alpha0: np.ndarray
    arm_coef: np.ndarray
    confounding: np.ndarray
    outcome: str = "gaussian"
    noise_sd: float = 1.0
    layout: str = "full"
    propensity_drops_z: bool = False
    conditional_drops_z: bool = False
    positivity_check: bool = True

    def __post_init__(self):
        arm_coef = _matrix(self.arm_coef)
        confounding = _matrix(self.confounding)
        H = arm_coef.shape[0]
        alpha0 = np.array(self.alpha0, dtype=float).reshape(H - 1, -1) if H > 1 else (
            np.zeros((0, 1 + confounding.shape[1])))
        alpha0.setflags(write=False)
        if confounding.shape[0] != H:
            raise ConfigError("confounding needs one row per arm")
        if alpha0.shape[1] != 1 + confounding.shape[1]:
            raise ConfigError("alpha0 needs 1 + dim_z columns")
        if self.outcome not in ("gaussian", "bernoulli"):
            raise ConfigError(f"unknown outcome kind {self.outcome!r}")
        if self.layout not in ("full", "shared"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if not self.noise_sd > 0:
            raise ConfigError("noise_sd must be positive")
        for name, val in (("alpha0", alpha0), ("arm_coef", arm_coef),
                          ("confounding", confounding)):
            object.__setattr__(self, name, val)
        if self.positivity_check:
            low = self.min_propensity()
            if low < POSITIVITY_FLOOR:
                raise ConfigError(
                    f"positivity violated: min propensity {low:.4f} < {POSITIVITY_FLOOR}"
                )

    @property
    def H(self) -> int:
        return self.arm_coef.shape[0]

    @property
    def dim_z(self) -> int:
        return self.confounding.shape[1]

    @property
    def dim_v(self) -> int:
        return self.arm_coef.shape[1] - 1

    @property
    def dim_x(self) -> int:
        return self.H * (1 + self.dim_v) if self.layout == "full" else 1 + self.dim_v

    @property
    def propensity(self) -> PropensityFamily:
        return PropensityFamily(H=self.H, dim_z=self.dim_z)

    @property
    def alpha_flat(self) -> np.ndarray:
        return self.alpha0.ravel()

    def regressor_names(self) -> tuple[str, ...]:
        v = [f"v{j + 1}" for j in range(self.dim_v)]
        if self.layout == "shared":
            return ("1", *v)
        arms = [f"arm{h + 1}" for h in range(1, self.H)]
        inter = [f"{a}:{b}" for a in arms for b in v]
        return ("1", *arms, *v, *inter)

    def min_propensity(self, n: int = 1_000_000, seed: int = 0) -> float:
        z = np.random.default_rng(seed).standard_normal((n, self.dim_z))
        return float(self.propensity.probs(z, self.alpha_flat).min())

    def _x(self, v):
        n = v.shape[0]
        base = np.hstack([np.ones((n, 1)), v])
        if self.layout == "shared":
            return np.repeat(base[:, None, :], self.H, axis=1)
        x = np.zeros((n, self.H, self.dim_x))
        dv = self.dim_v
        for h in range(self.H):
            dummies = np.zeros((n, self.H - 1))
            if h > 0:
                dummies[:, h - 1] = 1.0
            inter = (dummies[:, :, None] * v[:, None, :]).reshape(n, -1)
            x[:, h] = np.hstack([np.ones((n, 1)), dummies, v, inter])
        assert x.shape[2] == 1 + (self.H - 1) + dv + (self.H - 1) * dv
        return x

    def true_theta(self) -> np.ndarray:
        """Marginal coefficients of the ``full`` layout (gaussian outcomes)."""
        if self.outcome != "gaussian" or self.layout != "full":
            raise ConfigError("closed-form theta exists only for gaussian outcomes, full layout")
        base = self.arm_coef[0]
        diffs = self.arm_coef[1:] - base
        return np.concatenate([[base[0]], diffs[:, 0], base[1:], diffs[:, 1:].ravel()])

    def true_contrast(self, c) -> np.ndarray:
        """Contrast of per-arm (1, v) coefficients; the CB target."""
        c = np.asarray(getattr(c, "c", c), dtype=float)
        return c @ self.arm_coef

    def marginal_variance(self) -> np.ndarray:
        """Per-arm variance of y^(h) given v (gaussian outcomes)."""
        return np.sum(self.confounding**2, axis=1) + self.noise_sd**2

    def nuisance_recipe(self, recipe: FitRecipe) -> FitRecipe:
        """Apply the misspecification switches to a fit recipe."""
        changes = {}
        if self.propensity_drops_z:
            changes["propensity_z"] = ()
        if self.conditional_drops_z:
            changes["conditional_z"] = ()
        return replace(recipe, **changes) if changes else recipe


def generate(dgp: DGPSpec, N: int, seed) -> TreatmentFrame:
    """Draw ``N`` records; ``seed`` is an int, a SeedSequence or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal((N, dgp.dim_z))
    v = rng.standard_normal((N, dgp.dim_v))
    e = dgp.propensity.probs(z, dgp.alpha_flat)
    u = rng.random(N)
    arm = np.minimum((u[:, None] > np.cumsum(e, axis=1)).sum(axis=1), dgp.H - 1)
    vt = np.hstack([np.ones((N, 1)), v])
    lin = vt @ dgp.arm_coef.T + z @ dgp.confounding.T  # (N, H)
    lin_a = lin[np.arange(N), arm]
    if dgp.outcome == "gaussian":
        y = lin_a + dgp.noise_sd * rng.standard_normal(N)
    else:
        y = (rng.random(N) < expit(lin_a)).astype(float)
    t = np.eye(dgp.H)[arm]
    names = dgp.regressor_names()
    return TreatmentFrame(y, t, dgp._x(v), z, names,
                          tuple(f"z{j + 1}" for j in range(dgp.dim_z)))


def replication_seeds(seed: int, rep: int):
    """(fit frame, copy frame) seed sequences of one replication."""
    return np.random.SeedSequence(seed, spawn_key=(rep,)).spawn(2)


# --------------------------------------------------------------------------- #
# Limits and fit terms
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Limits:
    """Probability limits used by the oracles: weight parameters and reference theta."""

    alpha: np.ndarray
    theta: np.ndarray
    propensity: PropensityFamily


def limits(dgp: DGPSpec, recipe: FitRecipe, seed: int, n_ref: int = 400_000) -> Limits:
    """Limit weight parameters and a reference theta from one large frame.

    Known-propensity recipes use the true alpha. Otherwise the limit is the
    large-sample solution of the recipe's own propensity equation, which is
    the pseudo-true value when that model omits confounders.
    """
    recipe = dgp.nuisance_recipe(recipe) if recipe.estimator != "IPW-known" else recipe
    big = generate(dgp, n_ref, np.random.SeedSequence(seed, spawn_key=(REF_KEY,)))
    sub = recipe.select(big)
    if recipe.estimator == "IPW-known":
        prop = dgp.propensity
        alpha = dgp.alpha_flat
    else:
        prop = recipe.propensity_family(sub)
        if recipe.estimator == "CB":
            alpha = cbmod.solve_cb_alpha(sub, recipe.contrast, prop).params
        else:
            alpha = fit_propensity(sub, prop).params
    fm = fit_model(big, recipe, alpha_known=dgp.alpha_flat)
    return Limits(np.asarray(alpha), fm.theta, prop)


def fit_term(data: TreatmentFrame, theta, weights, family) -> float:
    """``-2 sum_i w_i zeta(y_i | x_i; theta)`` over the observed arms."""
    loss, _, _ = family.terms(data.y, data.x_obs @ np.asarray(theta, dtype=float))
    return -2.0 * math.fsum(weights * loss)


def _limit_weights(data, recipe, lim: Limits):
    w = lim.propensity.weights(data.z, lim.alpha, recipe.target(data.H))
    return w[np.arange(data.N), data.arm]


def _sse(data, theta, alpha, recipe, prop):
    psi = cbmod.pseudo_outcome(data, alpha, recipe.contrast, prop) - data.x[:, 0, :] @ theta
    return math.fsum(psi * psi)


# --------------------------------------------------------------------------- #
# Replications
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Replication:
    rep: int
    ok: bool
    optimism: float = math.nan
    risk: float = math.nan
    penalties: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    error: str = ""


def _one_replication(dgp, recipe, lim, N, copy_factor, seed, rep, cb_weights) -> Replication:
    s_fit, s_copy = replication_seeds(seed, rep)
    data = generate(dgp, N, s_fit)
    copy = generate(dgp, copy_factor * N, s_copy)
    scale = 1.0 / copy_factor
    try:
        fm = fit_model(data, recipe, alpha_known=dgp.alpha_flat)
        reports = fm.criteria()
    except MsmicError as exc:
        return Replication(rep, False, error=f"{type(exc).__name__}: {exc}")
    sub, sub_copy = fm.data, recipe.select(copy)
    if recipe.estimator == "CB":
        prop = fm.propensity
        a_eval = lim.alpha if cb_weights == "limit" else fm.alpha
        in_diff = (_sse(sub, fm.theta, a_eval, recipe, prop)
                   - _sse(sub, lim.theta, lim.alpha, recipe, prop))
        copy_fit = _sse(sub_copy, fm.theta, a_eval, recipe, prop)
        cp_diff = copy_fit - _sse(sub_copy, lim.theta, lim.alpha, recipe, prop)
    else:
        fam = fm.family
        w_in = _limit_weights(sub, recipe, lim)
        w_cp = _limit_weights(sub_copy, recipe, lim)
        in_diff = fit_term(sub, fm.theta, w_in, fam) - fit_term(sub, lim.theta, w_in, fam)
        copy_fit = fit_term(sub_copy, fm.theta, w_cp, fam)
        cp_diff = copy_fit - fit_term(sub_copy, lim.theta, w_cp, fam)
    extras = {}
    dric = reports.get("DRIC")
    if dric is not None:
        extras = {"D2": dric.matrices.D2_hat, "D3": dric.matrices.D3_hat}
    extras["theta"] = np.asarray(fm.theta)
    return Replication(
        rep,
        True,
        optimism=scale * cp_diff - in_diff,
        risk=scale * copy_fit,
        penalties={k: r.penalty for k, r in reports.items()},
        extras=extras,
    )


def run_replications(dgp, recipe, N, M, seed, *, copy_factor=10, n_ref=400_000,
                     n_jobs=1, lim: Limits | None = None,
                     cb_weights: str = "limit") -> list[Replication]:
    """Run ``M`` replications; raises ExperimentError above 5% failures.

    ``cb_weights`` chooses the balancing weights inside the squared-error fit
    terms of the CB oracle: ``"limit"`` (alpha*, the convention used for every
    other criterion) or ``"fitted"`` (the replication's own alpha-hat).
    """
    if cb_weights not in ("limit", "fitted"):
        raise ConfigError(f"cb_weights must be 'limit' or 'fitted', got {cb_weights!r}")
    if N < 2 or M < 2:
        raise ConfigError("need N >= 2 and M >= 2")
    if recipe.estimator != "IPW-known":
        recipe = dgp.nuisance_recipe(recipe)
    if lim is None:
        lim = limits(dgp, recipe, seed, n_ref)

    def task(rep):
        return _one_replication(dgp, recipe, lim, N, copy_factor, seed, rep, cb_weights)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            reps = list(pool.map(task, range(M)))
    else:
        reps = [task(r) for r in range(M)]
    failures = sum(not r.ok for r in reps)
    if failures > MAX_FAILURE_RATE * M:
        first = next(r.error for r in reps if not r.ok)
        raise ExperimentError(f"{failures} of {M} replications failed (first: {first})")
    return reps


def _mean_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    n = values.size
    mean = math.fsum(values) / n
    var = math.fsum((values - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass(frozen=True)
class RiskEstimate:
    mean: float
    se: float
    M: int
    N: int
    failures: int = 0


@dataclass(frozen=True)
class BiasMatchReport:
    """Analytic penalty against the brute-force optimism ``E[F_copy - F_in]``.

    ``bias`` is reported with the penalty's sign: the expected amount by
    which the in-sample fit term undershoots the risk.
    """

    criterion: str
    penalty: float
    penalty_se: float
    bias: float
    bias_se: float
    M: int
    N: int
    seed: int
    failures: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def z_score(self) -> float:
        return (self.penalty - self.bias) / math.hypot(self.bias_se, self.penalty_se)

    @property
    def relative_error(self) -> float:
        return (self.penalty - self.bias) / abs(self.bias)

    def row(self) -> dict:
        return {
            "criterion": self.criterion, "penalty": self.penalty,
            "penalty_se": self.penalty_se, "mc_bias": self.bias, "mc_bias_se": self.bias_se,
            "z_score": self.z_score, "relative_error": self.relative_error,
            "M": self.M, "N": self.N, "failures": self.failures, "seed": self.seed,
        }


def mc_risk(dgp: DGPSpec, recipe: FitRecipe, N: int, M: int, seed: int,
            **kwargs) -> RiskEstimate:
    """Brute-force risk: the copy-frame fit term at the fitted theta, mean and SE."""
    reps = run_replications(dgp, recipe, N, M, seed, **kwargs)
    good = [r.risk for r in reps if r.ok]
    mean, se = _mean_se(good)
    return RiskEstimate(mean, se, len(good), N, M - len(good))


def summarize(reps: Sequence[Replication], criterion: str, N: int, seed: int) -> BiasMatchReport:
    good = [r for r in reps if r.ok]
    bias, bias_se = _mean_se([r.optimism for r in good])
    pen, pen_se = _mean_se([r.penalties[criterion] for r in good])
    extras = {}
    for key in ("D2", "D3"):
        if key in good[0].extras:
            extras[key] = _mean_se([r.extras[key] for r in good])
    for kind in good[0].penalties:
        extras[f"penalty:{kind}"] = _mean_se([r.penalties[kind] for r in good])
    return BiasMatchReport(criterion, pen, pen_se, bias, bias_se, len(good), N, seed,
                           len(reps) - len(good), extras)


def mc_bias(dgp: DGPSpec, recipe: FitRecipe, N: int, M: int, seed: int,
            criterion: str | None = None, **kwargs) -> BiasMatchReport:
    """Pair the mean analytic penalty with the Monte Carlo optimism."""
    criterion = criterion or PRIMARY_CRITERION[recipe.estimator]
    if criterion not in recipe.criteria:
        raise ConfigError(f"criterion {criterion} not computed by recipe {recipe.criteria}")
    reps = run_replications(dgp, recipe, N, M, seed, **kwargs)
    return summarize(reps, criterion, N, seed)


# --------------------------------------------------------------------------- #
# Selection
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SelectionTable:
    """How often each candidate minimises each criterion."""

    candidates: tuple[str, ...]
    kinds: tuple[str, ...]
    counts: np.ndarray  # (len(kinds), len(candidates))
    M: int
    failures: int
    seed: int

    def frequency(self, kind: str, candidate: str) -> float:
        return float(self.counts[self.kinds.index(kind), self.candidates.index(candidate)]
                     / self.M)

    def rows(self) -> list[dict]:
        return [
            {"criterion": k, "candidate": c, "count": int(self.counts[i, j]),
             "frequency": float(self.counts[i, j] / self.M), "M": self.M, "seed": self.seed}
            for i, k in enumerate(self.kinds)
            for j, c in enumerate(self.candidates)
        ]


def _label(names, columns):
    return "+".join(names[c] for c in columns)


def selection_experiment(dgp: DGPSpec, recipe: FitRecipe, candidates: Sequence[Sequence[int]],
                         kinds: Sequence[str] | None, N: int, M: int, seed: int,
                         n_jobs: int = 1) -> SelectionTable:
    """Fit every candidate column set on the same frames and tally argmins."""
    kinds = tuple(kinds or recipe.criteria)
    if recipe.estimator != "IPW-known":
        recipe = dgp.nuisance_recipe(recipe)
    recipe = replace(recipe, criteria=kinds)
    names = dgp.regressor_names()
    labels = tuple(_label(names, c) for c in candidates)

    def task(rep):
        data = generate(dgp, N, replication_seeds(seed, rep)[0])
        values = np.empty((len(kinds), len(candidates)))
        try:
            for j, cols in enumerate(candidates):
                reports = fit_model(data, recipe.with_columns(cols),
                                    alpha_known=dgp.alpha_flat).criteria()
                values[:, j] = [reports[k].value for k in kinds]
        except MsmicError:
            return None
        return np.argmin(values, axis=1)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            picks = list(pool.map(task, range(M)))
    else:
        picks = [task(r) for r in range(M)]
    failures = sum(p is None for p in picks)
    if failures > MAX_FAILURE_RATE * M:
        raise ExperimentError(f"{failures} of {M} selection replications failed")
    counts = np.zeros((len(kinds), len(candidates)), dtype=int)
    for p in picks:
        if p is not None:
            counts[np.arange(len(kinds)), p] += 1
    return SelectionTable(labels, kinds, counts, M - failures, failures, seed)


# --------------------------------------------------------------------------- #
# Output
# --------------------------------------------------------------------------- #


def replication_rows(reps: Sequence[Replication]) -> list[dict]:
    rows = []
    for r in reps:
        row = {"rep": r.rep, "ok": r.ok, "optimism": r.optimism, "risk": r.risk}
        row.update({f"penalty:{k}": v for k, v in r.penalties.items()})
        row.update({k: v for k, v in r.extras.items() if np.ndim(v) == 0})
        row["error"] = r.error
        rows.append(row)
    return rows


def write_rows(path, rows: Sequence[dict]):
    """Write dict rows to a CSV file, with the union of keys as header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = []
    for row in rows:
        header.extend(k for k in row if k not in header)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


# Desk-scale processes used by the acceptance checks and scripts.


def ac2_dgp(theta=(0.5, 1.5), **switches) -> DGPSpec:
    """Two arms, logit e1 = 0.3 + 0.8 z, y^(h) = theta_h + 0.8 z + N(0, 1)."""
    return DGPSpec(alpha0=[[0.3, 0.8]], arm_coef=[[theta[0]], [theta[1]]],
                   confounding=[[0.8], [0.8]], **switches)


def ac2_dgp_with_v(theta=(0.5, 1.5), **switches) -> DGPSpec:
    """AC-2 process plus one outcome-irrelevant regressor v (a spurious candidate column)."""
    return DGPSpec(alpha0=[[0.3, 0.8]], arm_coef=[[theta[0], 0.0], [theta[1], 0.0]],
                   confounding=[[0.8], [0.8]], **switches)


def aic_dgp(coef=(1.0, 0.5)) -> DGPSpec:
    """One arm, no confounding: the classical AIC setting."""
    coef = np.atleast_1d(np.asarray(coef, dtype=float))
    return DGPSpec(alpha0=np.zeros((0, 2)), arm_coef=[coef], confounding=[[0.0]])


def cb_dgp(theta1=(1.0, 0.5), theta2=(0.0, 0.0), tau=0.7, alpha=(0.2, 0.6)) -> DGPSpec:
    """Shared regressors (1, v), tau(z) = tau * z in both arms, logistic assignment."""
    return DGPSpec(alpha0=[list(alpha)], arm_coef=[list(theta1), list(theta2)],
                   confounding=[[tau], [tau]], layout="shared")
