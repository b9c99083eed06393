"""Spatially varying coefficient maps for volumetric imaging data.

Voxel-wise least squares initialization, covariance decomposition of the
smoothed subject effects, multiscale adaptive refinement of the coefficient
maps, and Wald-type voxel/cluster inference, plus a phantom simulator and a
command-line pipeline with a compact binary volume format.
"""

from .grid import Grid3, Mask, Ball, NeighborTable, ball_neighbors, connected_components, neighbor_table
from .design import DesignMatrix, SingularDesignError, coeff_selector, fit_design, load_covariates
from .leastsq import CoefficientField, SubjectStack, ls_fit, plug_in_sigma_y, raw_variance, residuals
from .fpca import (
    EigenModel,
    GcvError,
    GcvResult,
    NoiseModel,
    build_noise_model,
    default_gcv_grid,
    eigendecompose,
    estimate_sigma_eps,
    fpc_scores,
    gcv_select,
    local_linear_weights,
    smooth_residuals,
)
from .mass import MassState, ScaleSchedule, chi2_survival, chi2_upper_quantile, run_mass
from .infer import Cluster, Hypothesis, WaldMap, detect_clusters, mass_covariance, predict_subject, wald_test
from .baselines import gks_pipeline, lce_smooth
from .simulate import PhantomSpec, StudyRequest, StudyResult, build_truth, generate, run_study, run_table1, run_table2
from .volio import VolumeFormatError, load_subject_stack, read_mask, read_volume, write_mask, write_volume
from .config import ConfigError, RunConfig, load_config
from .pipeline import PipelineResult, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Grid3", "Mask", "Ball", "NeighborTable", "ball_neighbors",
    "connected_components", "neighbor_table",
    "DesignMatrix", "SingularDesignError", "coeff_selector", "fit_design",
    "load_covariates",
    "CoefficientField", "SubjectStack", "ls_fit", "plug_in_sigma_y",
    "raw_variance", "residuals",
    "EigenModel", "GcvError", "GcvResult", "NoiseModel", "build_noise_model",
    "default_gcv_grid", "eigendecompose", "estimate_sigma_eps", "fpc_scores",
    "gcv_select", "local_linear_weights", "smooth_residuals",
    "MassState", "ScaleSchedule", "chi2_survival", "chi2_upper_quantile", "run_mass",
    "Cluster", "Hypothesis", "WaldMap", "detect_clusters", "mass_covariance",
    "predict_subject", "wald_test",
    "gks_pipeline", "lce_smooth",
    "PhantomSpec", "StudyRequest", "StudyResult", "build_truth", "generate",
    "run_study", "run_table1", "run_table2",
    "VolumeFormatError", "load_subject_stack", "read_mask", "read_volume",
    "write_mask", "write_volume",
    "ConfigError", "RunConfig", "load_config",
    "PipelineResult", "run_pipeline",
]
