"""Core Credibility Propagation (CCP) for pseudo-label refinement on small tabular data."""

from .core import angular_similarity, clip_credibility, credibility_adjust, strength
from .engine import RunConfig, run_ccp, run_full_pipeline
from .losses import soft_contrastive_loss, soft_cross_entropy
from .propagation import BatchContractError, propagate_batch
from .scenarios import DatasetContractError, ScenarioSpec, make_scenario
from .subsampling import DegenerateDistributionError, choose_subsample

__all__ = [
    "BatchContractError",
    "DatasetContractError",
    "DegenerateDistributionError",
    "RunConfig",
    "ScenarioSpec",
    "angular_similarity",
    "choose_subsample",
    "clip_credibility",
    "credibility_adjust",
    "make_scenario",
    "propagate_batch",
    "run_ccp",
    "run_full_pipeline",
    "soft_contrastive_loss",
    "soft_cross_entropy",
    "strength",
]
