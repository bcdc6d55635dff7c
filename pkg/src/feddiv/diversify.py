"""Feature diversification: mixed-statistics forwards and the local loss.

Local training combines three terms: plain cross-entropy on the batch-stat
forward, cross-entropy on a statistics-diversified forward, and a feature
consistency penalty between the two forwards' pooled features. The blend
vectors are redrawn per iteration, one per BN layer, one weight per channel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import EPS, BNMode, SmallConvNet
from .tensor import Tensor


@dataclass
class SamplingDistribution:
    """Distribution for channel interpolation weights: uniform(a,b) or fixed(c)."""

    kind: str  # "uniform" | "fixed"
    low: float = 0.0
    high: float = 1.0
    value: float = 0.5

    def __post_init__(self):
        if self.kind not in ("uniform", "fixed"):
            raise ConfigError(f"unknown sampling distribution kind: {self.kind!r}")
        if self.kind == "uniform" and self.high < self.low:
            raise ConfigError(f"uniform bounds reversed: ({self.low}, {self.high})")

    def draw(self, size: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(size, self.value)
        return rng.uniform(self.low, self.high, size=size)


@dataclass
class MixContext:
    """Per-BN-layer channel interpolation vectors for one iteration."""

    u_vectors: list[np.ndarray] = field(default_factory=list)


@dataclass
class LossWeights:
    lambda1: float
    lambda2: float

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ConfigError(f"lambda1 must be in [0,1], got {self.lambda1}")
        if self.lambda2 < 0.0:
            raise ConfigError(f"lambda2 must be >= 0, got {self.lambda2}")


def sample_mix_context(net: SmallConvNet, distribution: SamplingDistribution,
                       rng: np.random.Generator) -> MixContext:
    """Draw a fresh interpolation vector per BN layer."""
    return MixContext([distribution.draw(bn.channels, rng) for bn in net.bn_layers()])


def mix_statistics(mu_inst: np.ndarray, sigma_inst: np.ndarray, mu_g: np.ndarray,
                   sigma_g: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel-wise blend of instance and global statistics.

    mu = u*mu_inst + (1-u)*mu_g, same for sigma. Blends standard
    deviations, not variances. A non-positive blended sigma (possible when
    u extrapolates outside [0,1]) is clamped to eps with a warning.
    """
    mu_inst, sigma_inst = np.asarray(mu_inst), np.asarray(sigma_inst)
    mu_g, sigma_g, u = np.asarray(mu_g), np.asarray(sigma_g), np.asarray(u)
    if not (mu_inst.shape[-1] == sigma_inst.shape[-1] == mu_g.shape[-1]
            == sigma_g.shape[-1] == u.shape[-1]):
        raise ConfigError("mix_statistics: channel counts disagree")
    mu = u * mu_inst + (1.0 - u) * mu_g
    sigma = u * sigma_inst + (1.0 - u) * sigma_g
    if np.any(sigma <= 0):
        warnings.warn("mixed std reached <= 0 under extrapolation; clamping to eps")
        sigma = np.maximum(sigma, EPS)
    return mu, sigma


def diversified_forward(net: SmallConvNet, x: Tensor, ctx: MixContext) -> tuple[Tensor, Tensor]:
    """Forward pass where every BN layer uses per-sample mixed statistics."""
    return net.forward(x, BNMode.MIXED_DIVERSIFY, ctx)


def local_loss(net: SmallConvNet, batch: Tensor, labels: np.ndarray, ctx: MixContext,
               weights: LossWeights, stop_gradient_features: bool = False):
    """Total local objective and its components.

    total = (1 - lambda1)*ce + lambda1*ce_diversified + lambda2*feature_mse.
    Gradients flow through both forward branches; ``stop_gradient_features``
    detaches the diversified features inside the consistency term only.
    """
    features, logits = net.forward(batch, BNMode.TRAIN_BATCH)
    ce = T.softmax_cross_entropy(logits, labels)

    f_div, logits_div = diversified_forward(net, batch, ctx)
    cacl = T.softmax_cross_entropy(logits_div, labels)
    f_div_for_mse = f_div.detach() if stop_gradient_features else f_div
    cafl = T.mse(features, f_div_for_mse)

    total = T.add(
        T.add(T.mul(Tensor(1.0 - weights.lambda1), ce), T.mul(Tensor(weights.lambda1), cacl)),
        T.mul(Tensor(weights.lambda2), cafl),
    )
    components = {"ce": float(ce.data), "cacl": float(cacl.data), "cafl": float(cafl.data)}
    return total, components
