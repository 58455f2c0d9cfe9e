"""Robust Bayesian Mendelian randomization from GWAS summary statistics."""

from .baselines import BaselineResult, IVWRegressor, MREggerRegressor, ivw, mr_egger
from .exceptions import (
    ConfigurationError,
    DegenerateError,
    DomainError,
    EmptyInputError,
    EmptySelectionError,
    NumericalError,
    RBMRError,
)
from .ingest import HarmonizedDataset, SnpRecord, SummaryTable, harmonize, load_summary_stats, select_instruments
from .ld import BlockLdMatrix, GenotypeBlock, ShrunkLDEstimator, assemble_block_diagonal, estimate_block_ld, ld_prune
from .model import HyperParams, LatentState, ModelParams, complete_data_loglik, gamma_logpdf, generalized_t_logpdf, marginal_loglik
from .vbem import FitOptions, FitResult, RBMREstimator, VariationalState, e_step, elbo, fit, fit_with_inference, lrt_standard_error, m_step, reduction_step

__version__ = "0.1.0"
