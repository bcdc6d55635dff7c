"""Experiment runner: build benchmark, run federation, evaluate, report."""

from __future__ import annotations

import csv
import json
import logging
import os
import time

import numpy as np

from . import checkpoint as ckpt
from .adapter import make_adapters
from .config import benchmark_hash, config_hash
from .diversify import LossWeights, SamplingDistribution
from .domains import (DEFAULT_DOMAIN_SPECS, DomainSpec, PartitionSpec, build_benchmark)
from .errors import ConfigError
from .federation import (ClientState, RoundPlan, ServerState, TrainConfig, evaluate_net,
                         extract_bundle, load_bundle, run_federation)
from .layers import SmallConvNet

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
INFERENCE_MODES = ("eval_global", "adaptive", "fixed_alpha", "random_alpha")


def default_domain_specs(n_domains: int) -> list[DomainSpec]:
    """First four domains are hand-tuned; extras are generated procedurally."""
    specs = [DomainSpec(s.domain_id, s.gain, s.bias, s.texture_freq, s.texture_amp, s.seed,
                        s.gain_jitter, s.bias_jitter)
             for s in DEFAULT_DOMAIN_SPECS[:n_domains]]
    rng = np.random.default_rng(2024)
    for d in range(len(specs), n_domains):
        gain = tuple(rng.uniform(0.5, 1.6, size=3))
        bias = tuple(rng.uniform(-0.15, 0.25, size=3))
        specs.append(DomainSpec(d, gain, bias, texture_freq=float(rng.uniform(1, 5)),
                                texture_amp=float(rng.uniform(0.05, 0.15))))
    return specs


def _train_config(cfg: dict) -> TrainConfig:
    f, d, a, l = cfg["federation"], cfg["diversify"], cfg["adapter"], cfg["loss"]
    dist = SamplingDistribution(d["distribution"], d["low"], d["high"], d["value"])
    return TrainConfig(
        strategy=f["strategy"], lr=f["lr"], momentum=f["momentum"],
        batch_size=f["batch_size"], diversify=d["enabled"], distribution=dist,
        loss_weights=LossWeights(l["lambda1"], l["lambda2"]),
        adapter=a["enabled"], adapter_hidden_dim=a["hidden_dim"],
        adapter_warmup_rounds=a["warmup_rounds"], adapter_lr=a["lr"],
        prox_mu=f["prox_mu"],
        stop_gradient_features=d["stop_gradient_features"],
        stat_aggregation=f["stat_aggregation"], parallel_clients=f["parallel_clients"],
    )


def run_seed(cfg: dict, seed: int) -> dict:
    """One full federated run for a single seed; returns metrics and artifacts."""
    b, m = cfg["benchmark"], cfg["model"]
    specs = default_domain_specs(b["domains"])
    partition_spec = PartitionSpec(b["partition"], b["dirichlet_alpha"],
                                   b["clients_per_domain"])
    bench = build_benchmark(specs, b["held_out_domain"], b["samples_per_client"],
                            b["classes"], b["image_size"], seed=seed,
                            val_fraction=b["val_fraction"],
                            clients_per_domain=b["clients_per_domain"],
                            partition_spec=partition_spec,
                            test_samples=b["test_samples"])

    model_cfg = {"in_channels": m["in_channels"], "widths": tuple(m["widths"]),
                 "num_classes": b["classes"]}
    tcfg = _train_config(cfg)
    hidden = cfg["adapter"]["hidden_dim"]

    template = SmallConvNet(seed=seed, **model_cfg)
    template_adapters = make_adapters(template, hidden, seed=seed)
    server = ServerState(extract_bundle(template, template_adapters),
                         n_layers=len(m["widths"]), strategy=tcfg.strategy, seed=seed)

    clients = []
    for i, entry in enumerate(bench.train_clients):
        net = SmallConvNet(seed=seed, **model_cfg)
        adapters = make_adapters(net, hidden, seed=seed)
        clients.append(ClientState(i, entry["train"], entry["val"], net, adapters, seed))

    plan = RoundPlan(cfg["federation"]["rounds"], cfg["federation"]["iterations"],
                     cfg["federation"]["val_every"],
                     cfg["federation"]["participants_per_round"])
    best_bundle, best_stats, ledger = run_federation(clients, server, plan, tcfg,
                                                     template, template_adapters)

    load_bundle(template, template_adapters, best_bundle)
    template.set_global_stats([(mu.copy(), var.copy()) for mu, var in best_stats])
    accuracies = {}
    for mode in INFERENCE_MODES:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 555]))
        accuracies[mode] = evaluate_net(template, template_adapters, bench.test_set, mode,
                                        tcfg.batch_size,
                                        fixed_value=cfg["adapter"]["fixed_value"], rng=rng)
    return {
        "seed": seed,
        "accuracies": accuracies,
        "best_round": server.best_round,
        "best_val_score": float(server.best_score),
        "ledger": ledger,
        "bundle": best_bundle,
        "global_stats": best_stats,
    }


def _write_ledger(rows: list[dict], path: str):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "client_id", "split", "accuracy", "L_CE", "L_CACL",
                         "L_CAFL", "L_total"])
        for r in rows:
            writer.writerow([r["round"], r["client_id"], r["split"],
                             f"{r['accuracy']:.6f}", f"{r['ce']:.8f}", f"{r['cacl']:.8f}",
                             f"{r['cafl']:.8f}", f"{r['total']:.8f}"])


def run_experiment(cfg: dict, out_dir: str | None = None) -> dict:
    """Run all seeds, write report.json / ledgers / checkpoints, return report."""
    out_dir = out_dir or cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)

    start = time.time()
    per_seed = {}
    for seed in cfg["seeds"]:
        log.info("running seed %d", seed)
        result = run_seed(cfg, seed)
        per_seed[str(seed)] = {
            "accuracies": result["accuracies"],
            "best_round": result["best_round"],
            "best_val_score": result["best_val_score"],
        }
        _write_ledger(result["ledger"], os.path.join(out_dir, f"ledger_seed{seed}.csv"))
        stats_flat = {}
        for i, (mu, var) in enumerate(result["global_stats"]):
            stats_flat[f"block{i}.bn.global_mean"] = mu
            stats_flat[f"block{i}.bn.global_var"] = var
        ckpt.save_checkpoint({**result["bundle"], **stats_flat},
                             os.path.join(out_dir, "checkpoints", f"best_seed{seed}.json"),
                             extra={"seed": seed, "config_hash": config_hash(cfg)})

    summary = {}
    for mode in INFERENCE_MODES:
        vals = [per_seed[str(s)]["accuracies"][mode] for s in cfg["seeds"]]
        summary[mode] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_hash": config_hash(cfg),
        "benchmark_hash": benchmark_hash(cfg),
        "config": cfg,
        "seeds": cfg["seeds"],
        "per_seed": per_seed,
        "summary": summary,
        "wallclock_sec": round(time.time() - start, 3),
    }
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report


def format_cell(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ({100 * std:.2f})"


def compare_reports(report_paths: list[str]) -> str:
    """Side-by-side accuracy table; refuses reports from different benchmarks."""
    reports = []
    for path in report_paths:
        with open(path) as f:
            reports.append((path, json.load(f)))
    base_hash = reports[0][1]["benchmark_hash"]
    for path, rep in reports[1:]:
        if rep["benchmark_hash"] != base_hash:
            raise ConfigError(
                f"cannot compare: {path} was produced on a different benchmark "
                f"({rep['benchmark_hash']} != {base_hash})"
            )

    header = ["report"] + list(INFERENCE_MODES) + ["delta_eval_global"]
    rows = [header]
    base_mean = reports[0][1]["summary"]["eval_global"]["mean"]
    for path, rep in reports:
        cells = [os.path.basename(os.path.dirname(path)) or path]
        for mode in INFERENCE_MODES:
            s = rep["summary"][mode]
            cells.append(format_cell(s["mean"], s["std"]))
        delta = rep["summary"]["eval_global"]["mean"] - base_mean
        cells.append(f"{100 * delta:+.2f}")
        rows.append(cells)

    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)
