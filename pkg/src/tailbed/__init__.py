"""Likelihood-weighted Bayesian experimental design for discovering and
quantifying rare events in stochastic black-box systems."""

__version__ = "0.1.0"

from .acquisition import (  # noqa: F401
    AcquisitionField,
    Batch,
    acq_us,
    acq_uslw,
    batch_select,
    danger_score,
    mc_optimize,
)
from .dno import DnoConfig, DnoEnsemble, dno_member_predict, dno_predict, dno_train  # noqa: F401
from .errors import NotInPoolError, NumericalFailure, TrainingFailure  # noqa: F401
from .gp import GpModel, gp_fit, gp_posterior  # noqa: F401
from .stats import (  # noqa: F401
    Bounds,
    ObservationSet,
    PdfEstimate,
    RandomFieldBasis,
    StandardNormalPrior,
    kl_expand,
    lhs_sample,
    log_pdf_error,
    prior_density,
    synthesize_field,
    synthesize_fields,
    weighted_kde,
)
from .systems import (  # noqa: F401
    MmtConfig,
    SirConfig,
    TabulatedSystem,
    mmt_qoi,
    mmt_step,
    sir_qoi,
    tabulated_qoi,
)
