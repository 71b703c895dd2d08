"""Two-phase sampling designs and estimators for ordinal outcomes under the proportional-odds model."""

from .acml import InclusionProbabilityMap, ac_term, fit_acml
from .designs import (
    SamplingPlan,
    SelectionResult,
    apply_selection,
    draw_sample,
    quartile_stratifier,
    sample_csods,
    sample_ods,
    sample_rds,
    sample_srs,
)
from .imputation import ExposureModel, ImputationConfig, fit_exposure_ipw, imputation_weights, rubin_pool, run_mi
from .kernels import BACKEND
from .ordinal import Cohort, FitResult, NewtonConfig, PoParams, cell_probabilities, fit_ml, log_likelihood, score
from .residuals import FittedDistribution, fit_working_model, psr, psr_all
from .smle import SieveConfig, SieveState, bspline_basis, em_fit, fit_smle, profile_covariance

__version__ = "0.1.0"
