"""Desk-scale simulator of decentralized collaborative learning for
next-POI recommendation: on-device sequence models, server-side embedding
pretraining, privacy-aware neighbor identification, perturbed weight
exchange with affinity-weighted aggregation, and leave-one-out evaluation.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig
from .data import CheckIn, Dataset, Poi, PoiCatalog, SynthConfig, Trajectory
from .numerics import GradStore, ParamStore
from .privacy import PrivacyBudget

__all__ = [
    "CheckIn", "Dataset", "ExperimentConfig", "GradStore", "ParamStore",
    "Poi", "PoiCatalog", "PrivacyBudget", "SynthConfig", "Trajectory",
]
