"""Hutchinson estimates of per-layer and per-channel Hessian traces.

Weights: for a layer (or one output channel of it) the estimate is the mean
of z^T H z over Rademacher probes z supported on that layer (channel). All
channels of a layer share the same probe z and differ only by their mask.

Activations: same estimator on the Hessian of the batch loss with respect to
the post-ReLU activation values, with a fresh data batch for every probe.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn.model import Batch, forward_loss, hvp
from .rng import rademacher, substream

# upper bound on K * batch * activation-size elements held by one batched HVP
_MAX_R_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class ProbeConfig:
    m: int = 100          # probes per weight estimate
    N: int = 50           # probes (and fresh batches) per activation estimate
    seed: int = 0
    batch_size: int = 64
    distribution: str = "rademacher"

    def __post_init__(self):
        if self.m < 1 or self.N < 1:
            raise ValueError("probe counts m and N must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.distribution != "rademacher":
            raise ValueError("only Rademacher probes are supported")


@dataclass(frozen=True)
class ChannelMask:
    layer: int
    channel: int
    indices: np.ndarray   # flat indices inside the layer's tensor


@dataclass
class TraceEntry:
    layer: int
    channel: int | None
    raw: float
    count: int
    average: float


@dataclass
class TraceReport:
    target: str
    granularity: str
    entries: list
    config: dict = field(default_factory=dict)

    def to_json(self):
        doc = {
            "target": self.target,
            "granularity": self.granularity,
            "seed": self.config.get("seed"),
            "m": self.config.get("m"),
            "N": self.config.get("N"),
            "batch_size": self.config.get("batch_size"),
            "distribution": self.config.get("distribution", "rademacher"),
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        config = {k: doc.get(k) for k in ("seed", "m", "N", "batch_size", "distribution")}
        entries = [TraceEntry(**e) for e in doc["entries"]]
        return cls(doc["target"], doc["granularity"], entries, config)

    def layer_totals(self):
        """layer id -> (raw trace summed over channels, element count)."""
        out = {}
        for e in self.entries:
            raw, cnt = out.get(e.layer, (0.0, 0))
            out[e.layer] = (raw + e.raw, cnt + e.count)
        return out


def channel_masks(model, target):
    """Masks partitioning each weight tensor (or per-sample activation) by channel."""
    masks = []
    if target == "weights":
        for i in model.weight_layers():
            w = model.params[i]["weight"]
            per = int(np.prod(w.shape[1:]))
            for j in range(w.shape[0]):
                masks.append(ChannelMask(i, j, np.arange(j * per, (j + 1) * per)))
    elif target == "activations":
        for i in model.activation_layers():
            shape = model.out_shape(i)
            size = int(np.prod(shape))
            C = model.act_channels(i)
            per = size // C
            for j in range(C):
                masks.append(ChannelMask(i, j, np.arange(j * per, (j + 1) * per)))
    else:
        raise ValueError(f"unknown target {target!r}")
    return masks


def hutchinson_values(matvec, size, groups, probes, probe_rng, chunk=64, z_repeat=1):
    """Per-probe quadratic forms (m, len(groups)).

    ``matvec`` maps a (K, size) stack to the (K, size) Hessian products.
    ``groups`` holds index arrays; row i, column j is (M_j z_i)^T H (M_j z_i)
    with z_i drawn from ``probe_rng(i)``. ``z_repeat`` tiles each group's
    indices that many times with stride ``size // z_repeat`` (used to apply a
    per-sample mask across a batch).
    """
    vals = np.empty((probes, len(groups)))
    stride = size // z_repeat
    full_groups = [
        (g[None, :] + stride * np.arange(z_repeat)[:, None]).ravel() for g in groups
    ]
    for i in range(probes):
        z = rademacher(probe_rng(i), size)
        for s in range(0, len(full_groups), chunk):
            block = full_groups[s:s + chunk]
            V = np.zeros((len(block), size))
            for k, idx in enumerate(block):
                V[k, idx] = z[idx]
            HV = matvec(V)
            for k, idx in enumerate(block):
                vals[i, s + k] = np.dot(z[idx], HV[k, idx])
    return vals


def _chunk_for(model, batch_size):
    biggest = max(int(np.prod(model.out_shape(i))) for i in range(len(model.layers)))
    return max(1, min(64, _MAX_R_ELEMENTS // (batch_size * biggest)))


def _weight_batch(data, cfg):
    n = len(data.train_x)
    idx = np.sort(substream(cfg.seed, "weight-batch").permutation(n)[:min(cfg.batch_size, n)])
    return Batch(data.train_x[idx], data.train_y[idx])


def _act_batch(data, cfg, i):
    n = len(data.train_x)
    rng = substream(cfg.seed, "act-batch", i)
    idx = np.sort(rng.choice(n, size=min(cfg.batch_size, n), replace=False))
    return Batch(data.train_x[idx], data.train_y[idx])


def _groups(model, target, layer, granularity):
    masks = [mk for mk in channel_masks(model, target) if mk.layer == layer]
    if granularity == "channel":
        return [mk.indices for mk in masks], [mk.channel for mk in masks]
    if granularity == "layer":
        return [np.concatenate([mk.indices for mk in masks])], [None]
    raise ValueError(f"unknown granularity {granularity!r}")


def _weight_values(model, data, layer, granularity, cfg, probes):
    batch = _weight_batch(data, cfg)
    _, cache = forward_loss(model, batch)
    sl = model.weight_slice(layer)
    n = sl.stop - sl.start
    P = model.num_params

    def matvec(V):
        full = np.zeros((V.shape[0], P))
        full[:, sl] = V
        return hvp(model, batch, full, "weights", cache=cache, lowest=layer)[:, sl]

    groups, channels = _groups(model, "weights", layer, granularity)
    vals = hutchinson_values(matvec, n, groups, probes,
                             lambda i: substream(cfg.seed, "w-probe", layer, i),
                             chunk=_chunk_for(model, len(batch)))
    return vals, channels, [len(g) for g in groups]


def _activation_values(model, data, layers, granularity, cfg, probes):
    """Per-layer probe values; one fresh batch per probe shared by all layers."""
    per_layer = {l: [] for l in layers}
    meta = {}
    for i in range(probes):
        batch = _act_batch(data, cfg, i)
        B = len(batch)
        _, cache = forward_loss(model, batch)
        chunk = _chunk_for(model, B)
        for l in layers:
            size = B * int(np.prod(model.out_shape(l)))
            groups, channels = _groups(model, "activations", l, granularity)
            meta[l] = (channels, [len(g) for g in groups])

            def matvec(V, l=l):
                return hvp(model, batch, V, "activations", layer=l, cache=cache)

            v = hutchinson_values(matvec, size, groups, 1,
                                  lambda _k, l=l, i=i: substream(cfg.seed, "a-probe", l, i),
                                  chunk=chunk, z_repeat=B)
            per_layer[l].append(v[0])
    return {l: (np.array(per_layer[l]), *meta[l]) for l in layers}


def _check(model, data, target):
    if len(data.train_x) == 0:
        raise ValueError("dataset is empty")
    if not model.weight_layers():
        raise ValueError("model has no weight-bearing layers")
    if target == "activations" and not model.activation_layers():
        raise ValueError("model has no activation (ReLU) layers")
    if target not in ("weights", "activations"):
        raise ValueError(f"unknown target {target!r}")


def estimate_traces(model, data, target="weights", granularity="channel", cfg=None):
    """Hutchinson trace estimates for every weight layer or activation site."""
    cfg = cfg or ProbeConfig()
    _check(model, data, target)
    entries = []
    if target == "weights":
        for layer in model.weight_layers():
            vals, channels, counts = _weight_values(model, data, layer, granularity, cfg, cfg.m)
            entries += _entries(layer, vals, channels, counts)
    else:
        layers = model.activation_layers()
        for layer, (vals, channels, counts) in _activation_values(
                model, data, layers, granularity, cfg, cfg.N).items():
            entries += _entries(layer, vals, channels, counts)
    return TraceReport(target, granularity, entries, asdict(cfg))


def _entries(layer, vals, channels, counts):
    raw = vals.sum(axis=0) / vals.shape[0]
    return [TraceEntry(layer, ch, float(r), int(c), float(r / c))
            for ch, r, c in zip(channels, raw, counts)]


def trace_convergence(model, data, target, layer, cfg, checkpoints, granularity="layer"):
    """Running estimates of one layer's trace after each probe-count checkpoint.

    Returns a list with one array (one value per channel, or a single value at
    layer granularity) per checkpoint. The probe stream is shared, so the last
    entry equals ``estimate_traces`` with ``m`` (or ``N``) set to the last
    checkpoint.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    if any(b <= a for a, b in zip(checkpoints, checkpoints[1:])) or checkpoints[0] < 1:
        raise ValueError("checkpoints must be positive and strictly ascending")
    _check(model, data, target)
    last = checkpoints[-1]
    if target == "weights":
        vals, _, _ = _weight_values(model, data, layer, granularity, cfg, last)
    else:
        vals = _activation_values(model, data, [layer], granularity, cfg, last)[layer][0]
    return [vals[:c].sum(axis=0) / c for c in checkpoints]
