"""Lipschitz-certified networks built from convex potential layers."""

from .errors import CertilipError
from .layers import CPLayer, DimOp, LinearLayer, Network, SkewLayer, build_network
from .robustness import CertificationReport, certify, empirical_lipschitz, pgd_attack
from .training import TrainConfig, train

__version__ = "0.1.0"
__all__ = ["CertilipError", "CPLayer", "DimOp", "LinearLayer", "Network", "SkewLayer", "build_network",
           "CertificationReport", "certify", "empirical_lipschitz", "pgd_attack", "TrainConfig", "train"]
