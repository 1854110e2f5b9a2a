"""Bayesian neural networks trained with an IBP-bounded robust likelihood,
and IBP certification of their posterior predictions."""

from .errors import (
    ConfigError, DimensionError, FormatError, NonFiniteLossError, NumericError, RobustBNNError,
    UsageError,
)
from .network import LayerSpec, NetworkArchitecture, forward, predict_ensemble, standard_nll
from .data import Dataset, load_idx_dataset, load_idx_images, load_idx_labels, make_toy_dataset
from .interval import IntervalTensor, ibp_forward, ibp_softmax_lower, input_ball
from .likelihood import EpsilonDistribution, RampSchedule, robust_nll_ibp, robust_nll_pgd
from .attacks import AttackConfig, empirical_robust_accuracy, pgd_attack
from .certification import certified_robust_accuracy, certify_point, max_certified_radius
from .uncertainty import likelihood_ratio, predictive_entropy
from .config import RunConfig, load_config, parse_config

__version__ = "0.1.0"
