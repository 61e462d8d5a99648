"""New intent discovery with LLM relation labels and a triplet-trained adapter."""

from lanid.cluster import ClusterAssignment, kmeans, predict
from lanid.config import PRESETS, RunConfig, config_from_dict, load_config, validate_config
from lanid.metrics import ari, hungarian_acc, nmi, score_report
from lanid.oracle import OracleConfig, OracleManager, PromptTemplate, parse_response
from lanid.runner import run_baseline, run_experiment, run_pipeline
from lanid.sampler import SamplerConfig, dbscan, sample_density_pairs, sample_knn_pairs
from lanid.trainer import Adapter, TrainConfig, Triplet, run_loop, triplet_loss

__version__ = "0.1.0"

__all__ = [
    "Adapter",
    "ClusterAssignment",
    "OracleConfig",
    "OracleManager",
    "PRESETS",
    "PromptTemplate",
    "RunConfig",
    "SamplerConfig",
    "TrainConfig",
    "Triplet",
    "ari",
    "config_from_dict",
    "dbscan",
    "hungarian_acc",
    "kmeans",
    "load_config",
    "nmi",
    "parse_response",
    "predict",
    "run_baseline",
    "run_experiment",
    "run_loop",
    "run_pipeline",
    "sample_density_pairs",
    "sample_knn_pairs",
    "score_report",
    "triplet_loss",
    "validate_config",
]
