"""Network building blocks: dual-statistics batch norm, conv blocks, classifier.

Every BN layer keeps two statistic sets: the client's own running buffers
and server-injected global buffers. Four normalization routes exist:

* ``TRAIN_BATCH``   - mini-batch statistics, updates running buffers.
* ``EVAL_GLOBAL``   - global buffers, pure function.
* ``MIXED_DIVERSIFY`` - per-sample instance stats blended channel-wise with
  global stats by an externally supplied vector (no buffer mutation).
* ``INTERPOLATED_ADAPTER`` - per-sample scalar blend of instance and global
  stats, weight supplied per sample (no buffer mutation).
"""

from __future__ import annotations

import enum
import warnings

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, UninitializedStatisticsError
from .tensor import Tensor

EPS = 1e-5
BN_MOMENTUM = 0.1


class BNMode(enum.Enum):
    TRAIN_BATCH = "train_batch"
    EVAL_GLOBAL = "eval_global"
    MIXED_DIVERSIFY = "mixed_diversify"
    INTERPOLATED_ADAPTER = "interpolated_adapter"


def instance_stats(x: np.ndarray, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample per-channel mean and std over spatial positions.

    Plain-array variant used outside autodiff (adapter inputs, oracles).
    """
    if x.ndim != 4:
        raise InputError(f"instance_stats: need NCHW input, got shape {x.shape}")
    if x.shape[2] * x.shape[3] < 2:
        raise InputError("instance_stats: spatial size must be >= 2, std undefined for 1 pixel")
    mu = x.mean(axis=(2, 3))
    var = x.var(axis=(2, 3))
    return mu, np.sqrt(var + eps)


def instance_stats_t(x: Tensor, eps: float = EPS) -> tuple[Tensor, Tensor]:
    """Differentiable instance statistics, shapes N x C x 1 x 1."""
    if x.shape[2] * x.shape[3] < 2:
        raise InputError("instance_stats: spatial size must be >= 2, std undefined for 1 pixel")
    mu = T.tmean(x, axis=(2, 3), keepdims=True)
    sigma = T.instance_std(x, eps)
    return mu, sigma


class DualBNLayer:
    """Batch normalization with separate local running and global buffers."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = EPS):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.local_mean = np.zeros(channels)
        self.local_var = np.ones(channels)
        self.global_mean = np.zeros(channels)
        self.global_var = np.ones(channels)
        self.global_initialized = False

    def set_global_stats(self, mean: np.ndarray, var: np.ndarray):
        if np.any(np.asarray(var) < 0):
            raise InputError("global variance must be non-negative")
        self.global_mean = np.array(mean, dtype=np.float64)
        self.global_var = np.array(var, dtype=np.float64)
        self.global_initialized = True

    def _require_global(self):
        if not self.global_initialized:
            raise UninitializedStatisticsError(
                "global BN statistics were never set on this layer"
            )

    def forward_train(self, x: Tensor) -> Tensor:
        """Normalize with mini-batch stats and update running buffers."""
        n, c, h, w = x.shape
        count = n * h * w
        if count < 2:
            raise InputError("bn_forward_train: need at least 2 values per channel")
        out = T.batch_norm_train(x, self.gamma, self.beta, self.eps)

        m = self.momentum
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * (count / (count - 1))
        self.local_mean = (1 - m) * self.local_mean + m * mu
        self.local_var = (1 - m) * self.local_var + m * unbiased
        return out

    def forward_eval_global(self, x: Tensor) -> Tensor:
        """Pure normalization by the injected global statistics."""
        self._require_global()
        c = self.channels
        mu = self.global_mean.reshape(1, c, 1, 1)
        sigma = np.sqrt(self.global_var + self.eps).reshape(1, c, 1, 1)
        return T.normalize_affine(x, Tensor(mu), Tensor(sigma), self.gamma, self.beta)

    def forward_mixed(self, x: Tensor, u: np.ndarray) -> Tensor:
        """Normalize each sample with channel-wise mixed statistics.

        ``u`` blends per-sample instance stats (weight u) against global
        stats (weight 1-u), independently per channel. Buffers untouched.
        """
        self._require_global()
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.channels,):
            raise ConfigError(f"mix vector shape {u.shape} != ({self.channels},)")
        mu_i, sigma_i = instance_stats_t(x, self.eps)
        c = self.channels
        ur = Tensor(u.reshape(1, c, 1, 1))
        one_minus = Tensor((1.0 - u).reshape(1, c, 1, 1))
        mu_g = Tensor(self.global_mean.reshape(1, c, 1, 1))
        sigma_g = Tensor(np.sqrt(self.global_var + self.eps).reshape(1, c, 1, 1))
        mu_mix = T.add(T.mul(ur, mu_i), T.mul(one_minus, mu_g))
        sigma_mix = T.add(T.mul(ur, sigma_i), T.mul(one_minus, sigma_g))
        if np.any(sigma_mix.data <= 0):
            warnings.warn("mixed std reached <= 0 under extrapolation; clamping to eps")
            sigma_mix = T.clamp(sigma_mix, self.eps, np.inf)
        return T.normalize_affine(x, mu_mix, sigma_mix, self.gamma, self.beta)

    def forward_interpolated(self, x: Tensor, alpha: Tensor) -> Tensor:
        """Normalize sample i by alpha_i * instance + (1-alpha_i) * global.

        ``alpha`` has shape (N, 1) or (N,), one scalar per sample shared
        across channels; it may carry gradients (adapter training).
        """
        self._require_global()
        n = x.shape[0]
        alpha4 = T.reshape(alpha, (n, 1, 1, 1))
        one_minus = T.sub(Tensor(1.0), alpha4)
        mu_i, sigma_i = instance_stats_t(x, self.eps)
        c = self.channels
        mu_g = Tensor(self.global_mean.reshape(1, c, 1, 1))
        sigma_g = Tensor(np.sqrt(self.global_var + self.eps).reshape(1, c, 1, 1))
        mu_star = T.add(T.mul(alpha4, mu_i), T.mul(one_minus, mu_g))
        sigma_star = T.add(T.mul(alpha4, sigma_i), T.mul(one_minus, sigma_g))
        return T.normalize_affine(x, mu_star, sigma_star, self.gamma, self.beta)


class Conv2dLayer:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, pad: int,
                 rng: np.random.Generator):
        fan_in = in_ch * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel)),
                             requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, pad=self.pad)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / in_dim)
        self.weight = Tensor(rng.normal(0.0, std, size=(in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class SmallConvNet:
    """conv -> DualBN -> relu blocks, global average pool, linear classifier.

    Stride-2 convolutions halve the spatial size per block so the default
    three blocks take a 16x16 input down to 2x2 before pooling.
    """

    def __init__(self, in_channels: int = 3, widths: tuple[int, ...] = (16, 32, 64),
                 num_classes: int = 5, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.blocks: list[tuple[Conv2dLayer, DualBNLayer]] = []
        prev = in_channels
        for w in widths:
            conv = Conv2dLayer(prev, w, kernel=3, stride=2, pad=1, rng=rng)
            self.blocks.append((conv, DualBNLayer(w)))
            prev = w
        self.classifier = Linear(prev, num_classes, rng)

    def bn_layers(self) -> list[DualBNLayer]:
        """BN layers in stable network order (adapters index by this)."""
        return [bn for _, bn in self.blocks]

    def feature_params(self) -> dict[str, Tensor]:
        """Theta: conv weights plus BN affine parameters."""
        params = {}
        for i, (conv, bn) in enumerate(self.blocks):
            params[f"block{i}.conv.w"] = conv.weight
            params[f"block{i}.bn.gamma"] = bn.gamma
            params[f"block{i}.bn.beta"] = bn.beta
        return params

    def classifier_params(self) -> dict[str, Tensor]:
        """Phi: classifier weight and bias."""
        return {"classifier.w": self.classifier.weight, "classifier.b": self.classifier.bias}

    def parameters(self) -> dict[str, Tensor]:
        return {**self.feature_params(), **self.classifier_params()}

    def bn_stats(self) -> dict[str, np.ndarray]:
        stats = {}
        for i, (_, bn) in enumerate(self.blocks):
            stats[f"block{i}.bn.local_mean"] = bn.local_mean
            stats[f"block{i}.bn.local_var"] = bn.local_var
        return stats

    def set_local_stats(self, stats: dict[str, np.ndarray]):
        for i, (_, bn) in enumerate(self.blocks):
            bn.local_mean = np.array(stats[f"block{i}.bn.local_mean"], dtype=np.float64)
            bn.local_var = np.array(stats[f"block{i}.bn.local_var"], dtype=np.float64)

    def set_global_stats(self, stats_per_layer: list[tuple[np.ndarray, np.ndarray]]):
        bns = self.bn_layers()
        if len(stats_per_layer) != len(bns):
            raise ConfigError(
                f"expected stats for {len(bns)} BN layers, got {len(stats_per_layer)}"
            )
        for bn, (mean, var) in zip(bns, stats_per_layer):
            bn.set_global_stats(mean, var)

    def forward(self, x: Tensor, mode: BNMode, mode_context=None) -> tuple[Tensor, Tensor]:
        """Run all layers; returns (pooled features, logits).

        ``mode_context`` supplies whatever the BN mode needs: the per-layer
        mix vectors for MIXED_DIVERSIFY, or a callable
        ``alpha_for(layer_index, x) -> Tensor`` for INTERPOLATED_ADAPTER.
        """
        h = x
        for i, (conv, bn) in enumerate(self.blocks):
            h = conv(h)
            if mode is BNMode.TRAIN_BATCH:
                h = bn.forward_train(h)
            elif mode is BNMode.EVAL_GLOBAL:
                h = bn.forward_eval_global(h)
            elif mode is BNMode.MIXED_DIVERSIFY:
                if mode_context is None:
                    raise ConfigError("MIXED_DIVERSIFY needs a MixContext")
                h = bn.forward_mixed(h, mode_context.u_vectors[i])
            elif mode is BNMode.INTERPOLATED_ADAPTER:
                if mode_context is None:
                    raise ConfigError("INTERPOLATED_ADAPTER needs an alpha provider")
                alpha = mode_context(i, h)
                h = bn.forward_interpolated(h, alpha)
            else:  # pragma: no cover - enum is exhaustive
                raise ConfigError(f"unknown BN mode {mode}")
            h = T.relu(h)
        features = T.global_avg_pool(h)
        logits = self.classifier(features)
        return features, logits
