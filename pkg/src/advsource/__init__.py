"""Source-image transferability experiments on small classifier ensembles."""

from .attacks import AttackConfig, AttackRecord, run_attack
from .experiments import CampaignPlan, run_campaign
from .metrics import D_p, d_p, transfer_count, transfer_matrix
from .model_zoo import ClassifierHandle, Ensemble, ImageTensor, load_ensemble, load_images
from .noise import NoiseConfig, fragile_split, run_noise
from .store import RecordStore
from .suitability import SuitabilityScore, q_ratio, score_images, wasserstein

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackRecord",
    "CampaignPlan",
    "ClassifierHandle",
    "D_p",
    "Ensemble",
    "ImageTensor",
    "NoiseConfig",
    "RecordStore",
    "SuitabilityScore",
    "d_p",
    "fragile_split",
    "load_ensemble",
    "load_images",
    "q_ratio",
    "run_attack",
    "run_campaign",
    "run_noise",
    "score_images",
    "transfer_count",
    "transfer_matrix",
    "wasserstein",
]
