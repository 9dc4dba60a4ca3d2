"""One candidate model: fit the nuisance models and theta, then evaluate criteria."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import cb as cbmod
from . import criteria as crit
from .errors import ConfigError
from .estimate import (
    MAX_ITER,
    TOL,
    FitResult,
    fit_outcome_conditional,
    fit_propensity,
    solve_dr,
    solve_ipw,
)
from .model import (
    ContrastSpec,
    OutcomeConditionalFamily,
    OutcomeMarginalFamily,
    PropensityFamily,
    TargetPopulation,
    TreatmentFrame,
)

ESTIMATORS = ("IPW-known", "IPW-unknown", "DR", "CB")

DEFAULT_CRITERIA = {
    "IPW-known": ("QICW", "IPWIC1", "OBS-WEIGHT-IC"),
    "IPW-unknown": ("QICW", "IPWIC2", "OBS-WEIGHT-IC"),
    "DR": ("QICW", "DRIC"),
    "CB": ("CB-IC",),
}

PRIMARY_CRITERION = {"IPW-known": "IPWIC1", "IPW-unknown": "IPWIC2", "DR": "DRIC", "CB": "CB-IC"}

ALLOWED_CRITERIA = {
    "IPW-known": {"QICW", "IPWIC1", "OBS-WEIGHT-IC"},
    "IPW-unknown": {"QICW", "IPWIC2", "OBS-WEIGHT-IC"},
    "DR": {"QICW", "DRIC"},
    "CB": {"CB-IC"},
}


@dataclass(frozen=True)
class FitRecipe:
    """How to fit one candidate marginal structure.

    ``columns`` selects regressor columns (``None`` keeps all). The family's
    ``p`` is reset to the number of selected columns. ``propensity_z`` and
    ``conditional_z`` select confounder columns for the nuisance models
    (``None`` uses all, ``()`` fits intercepts only).
    """

    estimator: str = "IPW-unknown"
    family: OutcomeMarginalFamily = field(default_factory=OutcomeMarginalFamily)
    columns: tuple[int, ...] | None = None
    d: TargetPopulation | None = None
    propensity_z: tuple[int, ...] | None = None
    conditional_z: tuple[int, ...] | None = None
    contrast: ContrastSpec | None = None
    criteria: tuple[str, ...] | None = None
    ipwic_form: str = "derived"
    cb_form: str = "plugin"
    dric_fit_weight: str = "target"
    information: str = "opg"
    quadrature: bool = False
    propensity_floor: float = 0.0
    tol: float = TOL
    max_iter: int = MAX_ITER

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(int(c) for c in self.columns))
        kinds = self.criteria or DEFAULT_CRITERIA[self.estimator]
        bad = set(kinds) - ALLOWED_CRITERIA[self.estimator]
        if bad:
            raise ConfigError(f"criteria {sorted(bad)} do not apply to {self.estimator}")
        object.__setattr__(self, "criteria", tuple(kinds))
        if self.estimator == "CB" and self.contrast is None:
            raise ConfigError("the CB estimator needs a contrast")

    def target(self, H: int) -> TargetPopulation:
        d = self.d if self.d is not None else TargetPopulation.whole(H)
        if d.H != H:
            raise ConfigError(f"target population has {d.H} arms but data has {H}")
        return d

    def propensity_family(self, data: TreatmentFrame) -> PropensityFamily:
        return PropensityFamily(H=data.H, dim_z=data.dim_z, z_columns=self.propensity_z,
                                floor=self.propensity_floor)

    def conditional_family(self, data: TreatmentFrame) -> OutcomeConditionalFamily:
        return OutcomeConditionalFamily(self.family.kind, H=data.H, dim_z=data.dim_z,
                                        z_columns=self.conditional_z,
                                        quadrature=self.quadrature)

    def select(self, data: TreatmentFrame) -> TreatmentFrame:
        return data if self.columns is None else data.select_x(self.columns)

    def with_columns(self, columns) -> "FitRecipe":
        return replace(self, columns=tuple(columns))


@dataclass(frozen=True)
class FittedModel:
    """A fitted candidate; ``data`` is already restricted to the candidate columns."""

    recipe: FitRecipe
    data: TreatmentFrame
    family: OutcomeMarginalFamily
    theta: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray | None
    propensity: PropensityFamily
    conditional: OutcomeConditionalFamily | None
    theta_fit: FitResult | None = None
    cb_fit: cbmod.CBFit | None = None

    @property
    def d(self) -> TargetPopulation:
        return self.recipe.target(self.data.H)

    def criterion(self, kind: str) -> crit.CriterionReport:
        r, data, fam = self.recipe, self.data, self.family
        if kind == "QICW":
            return crit.qicw(data, self.theta, self.alpha, self.d, fam, self.propensity)
        if kind in ("IPWIC1", "IPWIC2"):
            return crit.ipwic(data, self.theta, self.alpha, self.d, kind == "IPWIC1", fam,
                              self.propensity, form=r.ipwic_form, information=r.information)
        if kind == "OBS-WEIGHT-IC":
            return crit.observed_weight_variant(data, self.theta, self.alpha, self.d, fam,
                                                self.propensity)
        if kind == "DRIC":
            return crit.dric(data, self.theta, self.alpha, self.beta, self.d, fam,
                             self.propensity, self.conditional, fit_weight=r.dric_fit_weight,
                             information=r.information)
        if kind == "CB-IC":
            return cbmod.cb_criterion(data, self.theta, self.alpha, r.contrast,
                                      self.propensity, form=r.cb_form)
        raise ConfigError(f"unknown criterion {kind!r}")

    def criteria(self) -> dict[str, crit.CriterionReport]:
        return {kind: self.criterion(kind) for kind in self.recipe.criteria}


def fit_model(data: TreatmentFrame, recipe: FitRecipe, alpha_known=None) -> FittedModel:
    """Fit ``recipe`` on ``data``; ``alpha_known`` is required for IPW-known."""
    sub = recipe.select(data)
    family = recipe.family.with_p(sub.dim_x)
    propensity = recipe.propensity_family(sub)
    d = recipe.target(sub.H)
    solver = {"tol": recipe.tol, "max_iter": recipe.max_iter}
    if recipe.estimator == "CB":
        fit = cbmod.fit_cb(sub, recipe.contrast, propensity, **solver)
        return FittedModel(recipe, sub, family, fit.theta, fit.alpha, None, propensity, None,
                           None, fit)
    if recipe.estimator == "IPW-known":
        if alpha_known is None:
            raise ConfigError("IPW-known needs the true propensity parameters")
        alpha = np.asarray(alpha_known, dtype=float).ravel()
    else:
        alpha = fit_propensity(sub, propensity, **solver).params
    if recipe.estimator == "DR":
        conditional = recipe.conditional_family(sub)
        beta = fit_outcome_conditional(sub, conditional, **solver).params
        res = solve_dr(sub, alpha, beta, d, family, propensity, conditional, **solver)
        return FittedModel(recipe, sub, family, res.params, alpha, beta, propensity,
                           conditional, res)
    res = solve_ipw(sub, alpha, d, family, propensity, **solver)
    return FittedModel(recipe, sub, family, res.params, alpha, None, propensity, None, res)
