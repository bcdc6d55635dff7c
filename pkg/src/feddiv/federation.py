"""Federated protocol engine: local training, aggregation, model selection.

Clients train locally and upload their best-validation snapshot; the server
weighted-averages the strategy's share of the arrays, synthesizes global BN
statistics from the uploaded running buffers, and keeps the round whose mean
participant validation accuracy is highest.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import adapter as adapter_mod
from . import tensor as T
from .adapter import InstanceAdapter, adapter_parameters, make_adapters
from .diversify import LossWeights, SamplingDistribution, local_loss, sample_mix_context
from .errors import FeddivError, InputError, ProtocolError
from .layers import BNMode, SmallConvNet
from .tensor import Tensor

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedprox", "fedbn", "silobn")


# -- parameter bundles -----------------------------------------------------

def is_bn_stat(key: str) -> bool:
    return ".bn.local_" in key


def is_bn_affine(key: str) -> bool:
    return key.endswith(".bn.gamma") or key.endswith(".bn.beta")


def is_adapter_key(key: str) -> bool:
    return key.startswith("adapter.")


def aggregated_keys(keys, strategy: str) -> list[str]:
    """Which arrays the server averages; the rest stay client-local.

    fedavg/fedprox average everything including BN running statistics;
    silobn keeps BN statistics local; fedbn keeps BN statistics and BN
    affine parameters local. Adapter parameters always aggregate.
    """
    if strategy not in STRATEGIES:
        raise ProtocolError(f"unknown strategy {strategy!r}")
    out = []
    for k in keys:
        if is_adapter_key(k):
            out.append(k)
        elif strategy == "silobn" and is_bn_stat(k):
            continue
        elif strategy == "fedbn" and (is_bn_stat(k) or is_bn_affine(k)):
            continue
        else:
            out.append(k)
    return out


def extract_bundle(net: SmallConvNet, adapters: list[InstanceAdapter] | None) -> dict:
    """Snapshot every array (parameters, BN stats, adapter weights) by name."""
    bundle = {name: p.data.copy() for name, p in net.parameters().items()}
    bundle.update({name: a.copy() for name, a in net.bn_stats().items()})
    if adapters:
        bundle.update({name: p.data.copy() for name, p in adapter_parameters(adapters).items()})
    return bundle


def load_bundle(net: SmallConvNet, adapters: list[InstanceAdapter] | None, bundle: dict,
                keys=None):
    """Write bundle arrays into the live objects; ``keys`` restricts which."""
    params = dict(net.parameters())
    if adapters:
        params.update(adapter_parameters(adapters))
    stats = {}
    for k in bundle if keys is None else keys:
        if k in params:
            if params[k].data.shape != bundle[k].shape:
                raise ProtocolError(f"shape mismatch for {k}: "
                                    f"{params[k].data.shape} vs {bundle[k].shape}")
            params[k].data = bundle[k].copy()
        elif is_bn_stat(k):
            stats[k] = bundle[k]
        else:
            raise ProtocolError(f"bundle key {k!r} does not exist in the model")
    if stats:
        full = dict(net.bn_stats())
        full.update(stats)
        net.set_local_stats(full)


def aggregate(bundles: list[dict], n_list: list[int], strategy: str) -> dict:
    """Dataset-size-weighted average of the strategy's aggregated arrays."""
    if not bundles:
        raise ProtocolError("aggregate: empty participant set")
    if len(bundles) != len(n_list):
        raise ProtocolError("aggregate: bundles and sizes disagree in length")
    keys = aggregated_keys(bundles[0].keys(), strategy)
    for b in bundles[1:]:
        if set(b.keys()) != set(bundles[0].keys()):
            raise ProtocolError("aggregate: clients disagree on array names")
    n_total = float(sum(n_list))
    weights = [n / n_total for n in n_list]
    out = {}
    for k in keys:
        shape = bundles[0][k].shape
        acc = np.zeros(shape)
        for w, b in zip(weights, bundles):
            if b[k].shape != shape:
                raise ProtocolError(f"aggregate: shape mismatch for {k}")
            acc += w * b[k]
        out[k] = acc
    return out


def synthesize_global_stats(bn_stats_list: list[list[tuple[np.ndarray, np.ndarray]]],
                            n_list: list[int],
                            method: str = "total_variance"
                            ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pool per-client BN statistics into global (mean, variance) per layer.

    ``total_variance`` pools second moments (law of total variance);
    ``mean`` simply weight-averages the variances (ablation alternative).
    """
    if not bn_stats_list:
        raise ProtocolError("synthesize_global_stats: empty participant set")
    n_layers = len(bn_stats_list[0])
    if any(len(s) != n_layers for s in bn_stats_list):
        raise ProtocolError("synthesize_global_stats: layer sets disagree")
    n_total = float(sum(n_list))
    weights = [n / n_total for n in n_list]
    out = []
    for layer in range(n_layers):
        mu_g = sum(w * s[layer][0] for w, s in zip(weights, bn_stats_list))
        if method == "total_variance":
            second = sum(w * (s[layer][1] + s[layer][0] ** 2)
                         for w, s in zip(weights, bn_stats_list))
            var_g = second - mu_g ** 2
        elif method == "mean":
            var_g = sum(w * s[layer][1] for w, s in zip(weights, bn_stats_list))
        else:
            raise ProtocolError(f"unknown stat aggregation method {method!r}")
        if np.any(var_g < 0):
            log.warning("negative synthesized variance clamped to 0 (layer %d)", layer)
            var_g = np.maximum(var_g, 0.0)
        out.append((mu_g, var_g))
    return out


def bundle_layer_stats(bundle: dict, n_layers: int) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(bundle[f"block{i}.bn.local_mean"], bundle[f"block{i}.bn.local_var"])
            for i in range(n_layers)]


# -- optimizer -------------------------------------------------------------

class SGD:
    """Plain SGD with classical momentum over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.momentum * self.velocity[k] + p.grad
            self.velocity[k] = v
            p.data = p.data - self.lr * v


# -- configuration and state -----------------------------------------------

@dataclass
class RoundPlan:
    rounds: int = 40
    iterations: int = 200
    val_every: int = 20
    participants_per_round: int | None = None  # None = all clients

    def __post_init__(self):
        if self.rounds < 0 or self.iterations < 0 or self.val_every < 1:
            raise InputError("round plan counts must be positive")


@dataclass
class TrainConfig:
    strategy: str = "fedavg"
    lr: float = 0.01
    momentum: float = 0.5
    batch_size: int = 64
    diversify: bool = False
    distribution: SamplingDistribution = field(
        default_factory=lambda: SamplingDistribution("uniform", 0.0, 1.0))
    loss_weights: LossWeights = field(default_factory=lambda: LossWeights(0.1, 4.0))
    adapter: bool = False
    adapter_hidden_dim: int = 32
    adapter_warmup_rounds: int = 0
    adapter_lr: float = 0.005
    prox_mu: float = 0.1
    stop_gradient_features: bool = False
    stat_aggregation: str = "total_variance"
    parallel_clients: bool = False


class ClientState:
    """One simulated client: its data, model, and private RNG stream."""

    def __init__(self, client_id: int, train_data, val_data, net: SmallConvNet,
                 adapters: list[InstanceAdapter] | None, seed: int):
        self.client_id = client_id
        self.train_data = train_data
        self.val_data = val_data
        self.net = net
        self.adapters = adapters
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, client_id]))
        # Separate stream for adapter training so that enabling the adapter
        # leaves the main net's batch order and mixing draws untouched.
        self.adapter_rng = np.random.default_rng(
            np.random.SeedSequence([seed, client_id, 7331]))
        self.n_samples = len(train_data.labels)
        self._order = np.arange(self.n_samples)
        self._cursor = self.n_samples  # force initial shuffle

    def next_batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic shuffled batching, wrapping across epochs."""
        idx = []
        while len(idx) < batch_size:
            if self._cursor >= self.n_samples:
                self._order = self.rng.permutation(self.n_samples)
                self._cursor = 0
            take = min(batch_size - len(idx), self.n_samples - self._cursor)
            idx.extend(self._order[self._cursor : self._cursor + take])
            self._cursor += take
        idx = np.asarray(idx)
        return self.train_data.images[idx], self.train_data.labels[idx]


class ServerState:
    """Global bundle, synthesized statistics, round ledger, best snapshot."""

    def __init__(self, bundle: dict, n_layers: int, strategy: str, seed: int):
        self.bundle = bundle
        self.strategy = strategy
        self.round = 0
        self.n_layers = n_layers
        self.global_stats = [(np.zeros_like(bundle[f"block{i}.bn.local_mean"]),
                              np.ones_like(bundle[f"block{i}.bn.local_var"]))
                             for i in range(n_layers)]
        self.ledger: list[dict] = []
        self.best_round = -1
        self.best_score = -np.inf
        self.best_bundle: dict | None = None
        self.best_stats = None
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 9137]))


# -- local training ----------------------------------------------------------

def _prox_penalty(params: dict[str, Tensor], reference: dict[str, np.ndarray],
                  mu: float) -> Tensor:
    total = Tensor(0.0)
    for k, p in params.items():
        diff = T.sub(p, Tensor(reference[k]))
        total = T.add(total, T.tsum(T.mul(diff, diff)))
    return T.mul(Tensor(mu / 2.0), total)


def local_update(client: ClientState, server_bundle: dict, global_stats, plan: RoundPlan,
                 cfg: TrainConfig, round_idx: int = 0) -> tuple[dict, dict]:
    """One round of local training; returns (best snapshot, metrics)."""
    keys = aggregated_keys(server_bundle.keys(), cfg.strategy)
    load_bundle(client.net, client.adapters, server_bundle, keys)
    if round_idx == 0:
        # No server-synthesized statistics exist before the first
        # aggregation; seed the global buffers from one local forward so
        # statistic mixing starts from a sane reference instead of (0, 1).
        warm = Tensor(client.train_data.images[: min(64, len(client.train_data.labels))])
        with T.no_grad():
            h = warm
            for conv, bn in client.net.blocks:
                h = conv(h)
                mu = h.data.mean(axis=(0, 2, 3))
                var = h.data.var(axis=(0, 2, 3))
                bn.set_global_stats(mu, var)
                h = T.relu(bn.forward_eval_global(h))
    else:
        client.net.set_global_stats([(m.copy(), v.copy()) for m, v in global_stats])

    main_params = client.net.parameters()
    prox_ref = ({k: p.data.copy() for k, p in main_params.items()}
                if cfg.strategy == "fedprox" else None)
    optimizer = SGD(main_params, lr=cfg.lr, momentum=cfg.momentum)
    adapter_opt = None
    if cfg.adapter and client.adapters is not None:
        # The adapter head sits behind the normalization statistics, where
        # gradients are far larger than in the main net; a hot momentum-SGD
        # step there diverges, so the adapter gets its own gentle optimizer.
        adapter_opt = SGD(adapter_parameters(client.adapters),
                          lr=cfg.adapter_lr, momentum=0.0)

    best_val = -np.inf
    best_bundle = extract_bundle(client.net, client.adapters)
    loss_sums = {"ce": 0.0, "cacl": 0.0, "cafl": 0.0, "total": 0.0}
    adapter_training = cfg.adapter and round_idx >= cfg.adapter_warmup_rounds

    for it in range(plan.iterations):
        images, labels = client.next_batch(cfg.batch_size)
        batch = Tensor(images)

        if cfg.diversify:
            ctx = sample_mix_context(client.net, cfg.distribution, client.rng)
            total, comps = local_loss(client.net, batch, labels, ctx, cfg.loss_weights,
                                      cfg.stop_gradient_features)
        else:
            _, logits = client.net.forward(batch, BNMode.TRAIN_BATCH)
            total = T.softmax_cross_entropy(logits, labels)
            comps = {"ce": float(total.data), "cacl": 0.0, "cafl": 0.0}

        if cfg.strategy == "fedprox" and cfg.prox_mu > 0:
            total = T.add(total, _prox_penalty(main_params, prox_ref, cfg.prox_mu))

        if not np.isfinite(total.data):
            raise FeddivError(
                f"client {client.client_id}: non-finite loss at iteration {it}, aborting round"
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        loss_sums["ce"] += comps["ce"]
        loss_sums["cacl"] += comps["cacl"]
        loss_sums["cafl"] += comps["cafl"]
        loss_sums["total"] += float(total.data)

        if adapter_training and adapter_opt is not None:
            adapter_mod.adapter_train_step(client.net, client.adapters, batch, labels,
                                           adapter_opt, client.adapter_rng)

        if (it + 1) % plan.val_every == 0 or it == plan.iterations - 1:
            acc = evaluate_net(client.net, client.adapters, client.val_data, "eval_global",
                               cfg.batch_size)
            if acc > best_val:
                best_val = acc
                best_bundle = extract_bundle(client.net, client.adapters)

    iters = max(plan.iterations, 1)
    metrics = {k: v / iters for k, v in loss_sums.items()}
    metrics["best_val"] = best_val if np.isfinite(best_val) else 0.0
    return best_bundle, metrics


# -- evaluation --------------------------------------------------------------

def evaluate_net(net: SmallConvNet, adapters, dataset, inference_mode: str,
                 batch_size: int = 64, fixed_value: float = 0.5,
                 rng: np.random.Generator | None = None) -> float:
    """Fraction of correct argmax predictions under the given inference mode."""
    n = len(dataset.labels)
    if n == 0:
        raise InputError("evaluate: empty dataset")
    correct = 0
    with T.no_grad():
        for start in range(0, n, batch_size):
            x = Tensor(dataset.images[start : start + batch_size])
            if inference_mode == "eval_global":
                _, logits = net.forward(x, BNMode.EVAL_GLOBAL)
            elif inference_mode == "adaptive":
                logits = adapter_mod.adaptive_inference(net, adapters, x)
            elif inference_mode == "fixed_alpha":
                logits = adapter_mod.baseline_alpha_inference(net, x, "fixed", fixed_value)
            elif inference_mode == "random_alpha":
                logits = adapter_mod.baseline_alpha_inference(net, x, "random", rng=rng)
            else:
                raise InputError(f"unknown inference mode {inference_mode!r}")
            pred = logits.data.argmax(axis=1)
            correct += int((pred == dataset.labels[start : start + batch_size]).sum())
    return correct / n


# -- federation loop ----------------------------------------------------------

def make_client(client_id: int, train_data, val_data, seed: int, model_cfg: dict,
                with_adapters: bool, adapter_hidden: int = 32) -> ClientState:
    net = SmallConvNet(seed=seed, **model_cfg)
    adapters = make_adapters(net, adapter_hidden, seed=seed) if with_adapters else None
    return ClientState(client_id, train_data, val_data, net, adapters, seed)


def run_federation(clients: list[ClientState], server: ServerState, plan: RoundPlan,
                   cfg: TrainConfig, eval_net: SmallConvNet,
                   eval_adapters=None) -> tuple[dict, list, list[dict]]:
    """Run the full protocol; returns (best bundle, best stats, ledger rows)."""
    if not clients:
        raise ProtocolError("run_federation: need at least one client")
    ledger: list[dict] = []

    for rnd in range(plan.rounds):
        server.round = rnd
        if plan.participants_per_round is None or plan.participants_per_round >= len(clients):
            participants = list(clients)
        else:
            picks = server.rng.choice(len(clients), size=plan.participants_per_round,
                                      replace=False)
            participants = [clients[i] for i in sorted(picks)]

        def _one(client):
            return local_update(client, server.bundle, server.global_stats, plan, cfg, rnd)

        if cfg.parallel_clients and len(participants) > 1:
            with ThreadPoolExecutor(max_workers=len(participants)) as pool:
                results = list(pool.map(_one, participants))
        else:
            results = [_one(c) for c in participants]

        # canonical order: by client id
        order = np.argsort([c.client_id for c in participants])
        uploads = [results[i][0] for i in order]
        metrics = [results[i][1] for i in order]
        ordered_clients = [participants[i] for i in order]
        n_list = [c.n_samples for c in ordered_clients]

        agg = aggregate(uploads, n_list, cfg.strategy)
        server.bundle.update(agg)
        server.global_stats = synthesize_global_stats(
            [bundle_layer_stats(b, server.n_layers) for b in uploads], n_list,
            cfg.stat_aggregation)

        load_bundle(eval_net, eval_adapters, server.bundle)
        eval_net.set_global_stats([(m.copy(), v.copy()) for m, v in server.global_stats])
        accs = []
        for c, m in zip(ordered_clients, metrics):
            acc = evaluate_net(eval_net, eval_adapters, c.val_data, "eval_global",
                               cfg.batch_size)
            accs.append(acc)
            ledger.append({"round": rnd, "client_id": c.client_id, "split": "server_val",
                           "accuracy": acc, "ce": m["ce"], "cacl": m["cacl"],
                           "cafl": m["cafl"], "total": m["total"]})
        mean_acc = float(np.mean(accs))
        log.info("round %d: mean participant validation accuracy %.4f", rnd, mean_acc)
        if mean_acc > server.best_score:
            server.best_score = mean_acc
            server.best_round = rnd
            server.best_bundle = {k: v.copy() for k, v in server.bundle.items()}
            server.best_stats = [(m.copy(), v.copy()) for m, v in server.global_stats]
        server.ledger.append({"round": rnd, "mean_val_accuracy": mean_acc})

    if server.best_bundle is None:  # zero rounds: fall back to the initial model
        server.best_bundle = {k: v.copy() for k, v in server.bundle.items()}
        server.best_stats = [(m.copy(), v.copy()) for m, v in server.global_stats]
        server.best_round = -1
    return server.best_bundle, server.best_stats, ledger
