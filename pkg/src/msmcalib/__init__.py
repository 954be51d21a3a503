"""Calibrated inverse probability of treatment and censoring weights for
marginal structural models on longitudinal data."""

from ._backend import get_backend, set_backend
from .calibrate import CalibrationSolution, apply, imbalance, solve, tilt
from .dataset import LongitudinalDataset, load_long, write_long
from .design import DesignSpec, build_design, parse_formula
from .errors import (
    BootstrapFailureError,
    ConvergenceError,
    DataError,
    DegenerateVarianceError,
    FormulaError,
    InfeasibleCalibrationError,
    MsmCalibError,
    NumericalError,
    PositivityWarning,
    RankDeficiencyError,
    SeparationWarning,
)
from .glm import fit_hetnormal, fit_logistic
from .msm import MsmEstimate, MsmSpec, bootstrap, fit_msm
from .pipeline import PipelineConfig, run_pipeline
from .restrictions import RestrictionSystem, RowIndex, assemble_joint
from .simulate import ScenarioConfig, generate_cohort, misspecify_transform, run_study
from .weights import WeightMatrix, censoring_weights, combine_and_scale, treatment_weights

__version__ = "0.1.0"
