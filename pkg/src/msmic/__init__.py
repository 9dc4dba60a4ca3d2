"""Information criteria for marginal structural models under IPW and doubly robust fits."""

from .cb import CBFit, cb_criterion, cb_estimate, fit_cb, solve_cb_alpha
from .criteria import (
    CriterionReport,
    PenaltyMatrices,
    dric,
    ipwic,
    observed_weight_variant,
    penalty_matrices_dr,
    penalty_matrices_ipw,
    qicw,
)
from .errors import (
    ConfigError,
    DataError,
    ExperimentError,
    IngestionError,
    MsmicError,
    NonConvergenceError,
    RankDeficiencyError,
    SingularMatrixError,
)
from .estimate import (
    FitResult,
    dr_moment,
    fit_outcome_conditional,
    fit_propensity,
    fit_unweighted,
    solve_dr,
    solve_ipw,
)
from .model import (
    ContrastSpec,
    LossKernel,
    OutcomeConditionalFamily,
    OutcomeMarginalFamily,
    PropensityFamily,
    SampleRecord,
    TargetPopulation,
    TreatmentFrame,
    conditional_loss_expectation,
    loss_eval,
    propensity_eval,
    target_weight,
)
from .pipeline import FitRecipe, FittedModel, fit_model
from .sim import DGPSpec, generate, mc_bias, mc_risk, selection_experiment

__version__ = "0.1.0"
