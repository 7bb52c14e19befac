"""End-to-end orchestration: baseline, two-step search, final report, landscape."""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .alloc import (QuantPolicy, budget_from_avg_bits, budget_from_compression,
                    compression_stats, size_mb, sort_channels, uniform_policy)
from .config import RunConfig, dump_config
from .data import Dataset, load_dataset
from .ddpg import run_search
from .errors import BudgetInfeasible, ConfigError, CWHawqError
from .hessian import ProbeConfig, TraceReport, estimate_traces
from .nn.model import Batch, forward_loss
from .nn.train import evaluate, train_epoch
from .nn.zoo import build_model
from .quantize import SAWBCoefficients, apply_policy, calibration_samples, sawb_calibrate
from .rng import substream

log = logging.getLogger(__name__)

CALIB_SAMPLES = 256
LANDSCAPE_SAMPLES = 256


def _seed(cfg, *names):
    """Integer seed for APIs that take one, derived from the run seed."""
    return int(substream(cfg.seed, *names).integers(2 ** 31))


def _dump(path, text):
    Path(path).write_text(text)
    return path


def _json(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# -- data and baseline -------------------------------------------------------

def prepare_data(cfg):
    if cfg.dataset == "mnist":
        return load_dataset("mnist", mnist_dir=cfg.mnist_dir)
    return load_dataset("synthetic", seed=_seed(cfg, "data"), classes=cfg.classes,
                        n=cfg.samples, dim=cfg.dim)


def dataset_info(data):
    return {"name": data.name, "train": len(data.train_x), "eval": len(data.eval_x),
            "classes": data.num_classes}


def checkpoint_extra(cfg, data, top1, stage):
    """Metadata stored with every checkpoint so later stages can rebuild the data."""
    return {"config": cfg.to_dict(), "dataset": dataset_info(data), "top1": top1, "stage": stage}


def config_from_extra(extra):
    doc = dict(extra.get("config") or {})
    if not doc:
        raise ConfigError("checkpoint carries no run configuration; pass --config")
    doc["bits"] = tuple(doc.get("bits", RunConfig.bits))
    return RunConfig(**doc)


def cosine_lr(base, epoch, epochs):
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / epochs))


def train_baseline(cfg, data):
    """Train the configured model from scratch. Returns (model, eval top-1)."""
    model = build_model(cfg.model, data.input_shape, data.num_classes, seed=_seed(cfg, "init"))
    top1 = None
    for ep in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, ep, cfg.epochs)
        model, top1 = train_epoch(model, data, lr, _seed(cfg, "baseline", ep),
                                  cfg.batch_size, cfg.momentum)
        log.info("baseline epoch %d lr %.4f top-1 %.4f", ep, lr, top1)
    if top1 is None:
        top1 = evaluate(model, data.eval_x, data.eval_y)
    return model, top1


def finetune(model, data, cfg, epochs, tag):
    lr = cfg.lr * cfg.finetune_lr_scale
    top1 = evaluate(model, data.eval_x, data.eval_y)
    for ep in range(epochs):
        model, top1 = train_epoch(model, data, lr, _seed(cfg, "finetune", tag, ep),
                                  cfg.batch_size, cfg.momentum)
    return model, top1


# -- quantization helpers ----------------------------------------------------

def calibrate_sawb(cfg):
    samples = calibration_samples(seed=_seed(cfg, "sawb"))
    return sawb_calibrate(samples, {"seed": cfg.seed, "families": ["gaussian", "laplace", "uniform"],
                                    "samples": len(samples)})


def calib_inputs(cfg, data):
    n = len(data.train_x)
    idx = np.sort(substream(cfg.seed, "pact-calib").permutation(n)[:min(CALIB_SAMPLES, n)])
    return data.train_x[idx]


def quantize_model(model, policy, coeffs, inputs):
    return apply_policy(model, policy, coeffs=coeffs, calib_inputs=inputs)


def reward_fn(model, reward_data, cfg, coeffs, inputs, tag):
    """Top-1 on the reward split after one fine-tuning epoch of the quantized model."""
    lr = cfg.lr * cfg.finetune_lr_scale
    seed = _seed(cfg, "reward", tag)

    def reward(policy):
        q = quantize_model(model, policy, coeffs, inputs)
        _, top1 = train_epoch(q, reward_data, lr, seed, cfg.batch_size, cfg.momentum)
        return top1

    return reward


def phase_budget(cfg, target, sorted_list):
    if target == "weights":
        return budget_from_compression(sorted_list.total, cfg.budget_wcomp)
    return budget_from_avg_bits(sorted_list.total, cfg.budget_abits)


def check_budget(policy):
    if not policy.within_budget():
        raise BudgetInfeasible(
            f"{policy.target} policy uses {policy.size_bits} bits, budget {policy.budget_bits}")


def probe_config(cfg):
    return ProbeConfig(m=cfg.probe_m, N=cfg.probe_n, seed=_seed(cfg, "probes"),
                       batch_size=cfg.probe_batch)


def search_phase(model, data, cfg, target, coeffs, inputs, report=None):
    """Trace, sort and search one target. Returns (trace report, SearchResult)."""
    if report is None:
        report = estimate_traces(model, data, target, "channel", probe_config(cfg))
    sorted_list = sort_channels(report)
    budget = phase_budget(cfg, target, sorted_list)
    reward_data = data.subset(cfg.reward_train, cfg.reward_eval, seed=_seed(cfg, "reward-split"))
    result = run_search(sorted_list, budget, reward_fn(model, reward_data, cfg, coeffs, inputs, target),
                        episodes=cfg.episodes, seed=_seed(cfg, "agent", target), target=target)
    check_budget(result.best_policy)
    return report, result


def uniform_bits(cfg, target):
    """Largest uniform bit width that fits the budget (floor of the budget's average bits)."""
    avg = 32.0 / cfg.budget_wcomp if target == "weights" else cfg.budget_abits
    return int(math.floor(avg + 1e-9))


def run_uniform(baseline, data, cfg, coeffs, inputs, a_report, w_report):
    """Same two-step protocol with a uniform policy at the budget's floor bits."""
    a_bits, w_bits = uniform_bits(cfg, "activations"), uniform_bits(cfg, "weights")
    a_pol = uniform_policy(sort_channels(a_report), a_bits, "activations")
    m, _ = finetune(quantize_model(baseline, a_pol, coeffs, inputs), data, cfg,
                    cfg.finetune_epochs, "uniform-a")
    w_pol = uniform_policy(sort_channels(w_report), w_bits, "weights")
    m, top1 = finetune(quantize_model(m, w_pol, coeffs, inputs), data, cfg,
                       cfg.finetune_epochs, "uniform-w")
    return {"a_bits": a_bits, "w_bits": w_bits, "top1": top1}


# -- the two-step run ---------------------------------------------------------

@dataclass
class RunPaths:
    root: Path

    def __getattr__(self, name):
        files = {
            "config": "config.ini", "baseline": "baseline.nnq", "sawb": "sawb.json",
            "trace_a": "trace_activations.json", "trace_w": "trace_weights.json",
            "policy_a": "policy_activations.json", "policy_w": "policy_weights.json",
            "log_a": "search_activations.jsonl", "log_w": "search_weights.jsonl",
            "phase1": "phase1.nnq", "final": "final.nnq", "report": "report.json",
            "landscape": "landscape.json",
        }
        if name not in files:
            raise AttributeError(name)
        return self.root / files[name]


def policy_summary(policy):
    stats = compression_stats(policy)
    return {
        "avg_bits": stats["avg_bits"],
        "compression": stats["compression"],
        "size_bits": stats["size_bits"],
        "budget_bits": policy.budget_bits,
        "ratios": [float(r) for r in policy.ratios],
        "per_bit_elements": {str(b): n for b, n in policy.per_bit_counts().items()},
        "per_layer_avg_bits": {str(l): v for l, v in policy.per_layer_avg_bits().items()},
    }


def build_report(cfg, data, baseline_top1, a_policy, a_top1, w_policy, w_top1, uniform=None):
    w_avg = w_policy.avg_bits
    report = {
        "config": cfg.to_dict(),
        "dataset": dataset_info(data),
        "baseline_top1": baseline_top1,
        "phase1": {"policy": "policy_activations.json", "top1": a_top1, **policy_summary(a_policy)},
        "phase2": {"policy": "policy_weights.json", "top1": w_top1, **policy_summary(w_policy)},
        "avg_w_bits": w_avg,
        "avg_a_bits": a_policy.avg_bits,
        "w_comp": 32.0 / w_avg,
        "size_mb": size_mb(w_policy.size_bits),
        "final_top1": w_top1,
        "top1_drop": baseline_top1 - w_top1,
        "qbn": {
            "weights": {str(l): v for l, v in w_policy.per_layer_avg_bits().items()},
            "activations": {str(l): v for l, v in a_policy.per_layer_avg_bits().items()},
        },
    }
    if uniform is not None:
        report["uniform"] = uniform
    return report


def run_two_step(cfg, baseline=None, data=None, landscape=True):
    """Run the full protocol into ``cfg.output_dir`` and return the report dict."""
    cfg.validate()
    paths = RunPaths(Path(cfg.output_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    _dump(paths.config, dump_config(cfg))
    data = data or prepare_data(cfg)

    if baseline is None:
        baseline, base_top1 = train_baseline(cfg, data)
    else:
        base_top1 = evaluate(baseline, data.eval_x, data.eval_y)
    checkpoint.save(baseline, paths.baseline, checkpoint_extra(cfg, data, base_top1, "baseline"))

    coeffs = calibrate_sawb(cfg)
    _dump(paths.sawb, coeffs.to_json())
    inputs = calib_inputs(cfg, data)

    # phase 1: activations
    a_report, a_res = search_phase(baseline, data, cfg, "activations", coeffs, inputs)
    _dump(paths.trace_a, a_report.to_json())
    _dump(paths.policy_a, a_res.best_policy.to_json())
    _dump(paths.log_a, a_res.log_jsonl())
    phase1, a_top1 = finetune(quantize_model(baseline, a_res.best_policy, coeffs, inputs),
                              data, cfg, cfg.finetune_epochs, "phase1")
    checkpoint.save(phase1, paths.phase1, checkpoint_extra(cfg, data, a_top1, "phase1"))

    # phase 2: weights, traced on the fine-tuned phase-1 model
    w_report, w_res = search_phase(phase1, data, cfg, "weights", coeffs, inputs)
    _dump(paths.trace_w, w_report.to_json())
    _dump(paths.policy_w, w_res.best_policy.to_json())
    _dump(paths.log_w, w_res.log_jsonl())
    final, w_top1 = finetune(quantize_model(phase1, w_res.best_policy, coeffs, inputs),
                             data, cfg, cfg.finetune_epochs, "phase2")
    checkpoint.save(final, paths.final, checkpoint_extra(cfg, data, w_top1, "final"))

    uniform = None
    if cfg.compare_uniform:
        uniform = run_uniform(baseline, data, cfg, coeffs, inputs, a_report, w_report)
    report = build_report(cfg, data, base_top1, a_res.best_policy, a_top1,
                          w_res.best_policy, w_top1, uniform)
    _dump(paths.report, _json(report))

    if landscape:
        scapes = {sel: loss_landscape(phase1, data, w_report, sel, radius=1.0, steps=11,
                                      seed=_seed(cfg, "landscape"))
                  for sel in ("min", "max")}
        _dump(paths.landscape, _json(scapes))
    return report


def load_report(run_dir):
    """Read a run's report and re-validate the referenced policies against their budgets."""
    root = Path(run_dir)
    path = root / "report.json"
    if not path.is_file():
        raise CWHawqError(f"missing report {path}")
    report = json.loads(path.read_text())
    for phase in ("phase1", "phase2"):
        ppath = root / report[phase]["policy"]
        if not ppath.is_file():
            raise CWHawqError(f"report references missing policy {ppath}")
        check_budget(QuantPolicy.from_json(ppath.read_text()))
    return report


# -- loss landscape -----------------------------------------------------------

def select_channel(report, selector):
    """(layer, channel) of the min- or max-average-trace channel, or an explicit pair."""
    entries = [e for e in report.entries if e.channel is not None]
    if not entries:
        raise CWHawqError("trace report has no channel entries")
    if selector == "min":
        e = min(entries, key=lambda e: (e.average, e.layer, e.channel))
    elif selector == "max":
        e = max(entries, key=lambda e: (e.average, -e.layer, -e.channel))
    else:
        layer, channel = selector
        found = [e for e in entries if e.layer == layer and e.channel == channel]
        if not found:
            raise CWHawqError(f"channel ({layer}, {channel}) not in trace report")
        e = found[0]
    return e.layer, e.channel


def loss_landscape(model, data, report, selector, radius=1.0, steps=11, seed=0):
    """Loss over a 2-D grid of perturbations of one channel's weights.

    The two directions are random, orthonormal and supported on the selected
    channel only; grid coordinates run from -radius to radius.
    """
    if report.target != "weights":
        raise CWHawqError("landscape needs a weight trace report")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    layer, channel = select_channel(report, selector)
    W = model.params[layer]["weight"]
    if not 0 <= channel < W.shape[0]:
        raise CWHawqError(f"channel {channel} outside layer {layer}")
    n = int(np.prod(W.shape[1:]))
    if n < 2:
        raise CWHawqError("channel has fewer than two weights")
    rng = substream(seed, "landscape", layer, channel)
    q, _ = np.linalg.qr(rng.standard_normal((n, 2)))
    d1, d2 = q[:, 0].reshape(W.shape[1:]), q[:, 1].reshape(W.shape[1:])

    idx = np.sort(substream(seed, "landscape-batch").permutation(len(data.eval_x))
                  [:min(LANDSCAPE_SAMPLES, len(data.eval_x))])
    batch = Batch(data.eval_x[idx], data.eval_y[idx])
    base_loss, _ = forward_loss(model, batch)
    coords = np.linspace(-radius, radius, steps) if steps > 1 else np.zeros(1)
    grid = []
    probe = model.copy()
    for x in coords:
        for y in coords:
            probe.params[layer]["weight"][channel] = W[channel] + x * d1 + y * d2
            probe.touch()
            loss, _ = forward_loss(probe, batch)
            grid.append([float(x), float(y), float(loss)])
    losses = np.array([g[2] for g in grid])
    return {
        "selector": selector if isinstance(selector, str) else list(selector),
        "layer": layer, "channel": channel,
        "average_trace": next(e.average for e in report.entries
                              if e.layer == layer and e.channel == channel),
        "radius": radius, "steps": steps,
        "base_loss": float(base_loss),
        "mean_increase": float(np.mean(losses - base_loss)),
        "grid": grid,
    }
