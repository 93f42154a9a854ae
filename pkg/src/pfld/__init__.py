"""Fair classifiers trained by Lagrangian dual ascent, with an optional
differentially private variant that protects the sensitive attribute."""

from .data import TabularDataset, load_csv, synthesize_biased
from .fairness import FairnessNotion
from .lagrangian import TrainerConfig, train_fld
from .privacy import PrivacyConfig, train_pfld

__all__ = [
    "FairnessNotion",
    "PrivacyConfig",
    "TabularDataset",
    "TrainerConfig",
    "load_csv",
    "synthesize_biased",
    "train_fld",
    "train_pfld",
]
__version__ = "0.1.0"
