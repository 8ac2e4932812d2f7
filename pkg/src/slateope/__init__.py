"""Off-policy evaluation for slate bandits with latent importance weights."""
from .core import (
    EnumerationError,
    FactoredPolicy,
    LoggedDataset,
    SlateSpace,
    SupportError,
    TabularEnv,
    ValueEstimate,
    enumerate_slates,
    sample_slate,
    slate_prob,
    substream,
    true_value,
)
from .estimators import ESTIMATORS

__version__ = "0.1.0"
