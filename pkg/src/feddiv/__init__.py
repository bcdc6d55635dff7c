"""Federated feature diversification with test-time statistic adaptation.

A desk-scale, float64, fully deterministic simulation of federated domain
generalization: clients train on distinct synthetic domains, the server
aggregates, and inference on an unseen domain can interpolate between
instance and global normalization statistics.
"""

from .tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
