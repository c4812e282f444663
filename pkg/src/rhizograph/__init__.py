"""Multivariate GLMM analysis of minirhizotron root observations."""

__version__ = "0.1.0"

from .data_model import Dataset, WindowRecord, load_dataset, write_dataset
from .derived import intensity, noodle_length, scatter_probability
from .ggm import LatentMatrix, compare_edges, edge_test, fit_precision, sample_covariance, search_bic
from .glmm import FittedMarginal, MarginalSpec, fit_marginal, marginal_loglik, predict_latent
from .latent_graph import LABELS, LatentGraph, export_dag, induced_separation, separates
from .simulator import SimulationConfig, structured_sigma, simulate

__all__ = [
    "LABELS",
    "Dataset",
    "FittedMarginal",
    "LatentGraph",
    "LatentMatrix",
    "MarginalSpec",
    "SimulationConfig",
    "WindowRecord",
    "compare_edges",
    "edge_test",
    "export_dag",
    "fit_marginal",
    "fit_precision",
    "induced_separation",
    "intensity",
    "load_dataset",
    "marginal_loglik",
    "noodle_length",
    "structured_sigma",
    "predict_latent",
    "sample_covariance",
    "scatter_probability",
    "search_bic",
    "separates",
    "simulate",
    "write_dataset",
]
