"""Simulated (fake) quantizers and per-channel policy application.

All quantizers keep float64 carriers. Rounding is half away from zero.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .rng import substream

log = logging.getLogger(__name__)

BITS = tuple(range(2, 9))


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# -- weights -----------------------------------------------------------------

def uniform_step(bits, alpha):
    return 2.0 * alpha / (2 ** bits - 2)


def quantize_weights_uniform(w, bits, alpha):
    """Symmetric grid of 2**bits - 1 levels on [-alpha, alpha]."""
    if bits not in range(3, 9):
        raise ValueError(f"uniform weight quantizer needs bits in 3..8, got {bits}")
    if not alpha > 0:
        raise ValueError(f"clip alpha must be > 0, got {alpha}")
    step = uniform_step(bits, alpha)
    return round_half_away(np.clip(w, -alpha, alpha) / step) * step


def sawb2_grid(w, alpha):
    """Four levels {-a, -a/3, a/3, a}; zero is not a level, it maps to +a/3."""
    if not alpha > 0:
        raise ValueError(f"clip alpha must be > 0, got {alpha}")
    step = 2.0 * alpha / 3.0
    mag = np.abs(np.clip(w, -alpha, alpha)) / step
    level = np.where(mag >= 1.0, 1.5, 0.5)
    sign = np.where(w >= 0, 1.0, -1.0)
    return sign * level * step


@dataclass(frozen=True)
class SAWBCoefficients:
    """alpha* = c1 * sqrt(E[w^2]) + c2 * E[|w|]."""

    c1: float
    c2: float
    provenance: dict = field(default_factory=dict, compare=False)

    def alpha(self, w):
        w = np.asarray(w)
        return self.c1 * np.sqrt(np.mean(w * w)) + self.c2 * np.mean(np.abs(w))

    def to_json(self):
        return json.dumps({"c1": self.c1, "c2": self.c2, "provenance": self.provenance},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["c1"], d["c2"], d.get("provenance", {}))


def quantize_weights_sawb2(w, coeffs):
    """2-bit SAWB quantization. Returns (quantized, used_fallback)."""
    alpha = coeffs.alpha(w)
    fallback = not alpha > 0
    if fallback:
        alpha = float(np.max(np.abs(w)))
        log.warning("SAWB clip %.3g <= 0, falling back to max|w|", coeffs.alpha(w))
        if alpha == 0:
            return np.zeros_like(w), True
    return sawb2_grid(w, alpha), fallback


def sawb2_mse(w, alpha):
    return float(np.mean((w - sawb2_grid(w, alpha)) ** 2))


def optimal_sawb2_alpha(w, grid=400):
    """Grid search (relative to RMS) for the MSE-optimal 4-level clip, then a bounded refine."""
    rms = float(np.sqrt(np.mean(w * w)))
    fr = np.linspace(0.05, 4.0, grid)
    errs = np.array([sawb2_mse(w, f * rms) for f in fr])
    k = int(np.argmin(errs))
    lo, hi = fr[max(k - 1, 0)] * rms, fr[min(k + 1, grid - 1)] * rms
    res = minimize_scalar(lambda a: sawb2_mse(w, a), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10 * rms})
    best = res.x if res.fun <= errs[k] else fr[k] * rms
    return float(best)


def calibration_samples(seed=0, per_family=40, sizes=(72, 144, 576, 784, 2048)):
    """Weight-like tensors from Gaussian, Laplace and uniform families."""
    rng = substream(seed, "sawb-calibration")
    out = []
    for i in range(per_family):
        for family in ("gaussian", "laplace", "uniform"):
            n = sizes[i % len(sizes)]
            scale = float(np.exp(rng.uniform(np.log(1e-3), np.log(1.0))))
            if family == "gaussian":
                w = rng.normal(0.0, scale, n)
            elif family == "laplace":
                w = rng.laplace(0.0, scale, n)
            else:
                w = rng.uniform(-scale, scale, n)
            out.append((family, w))
    return out


def sawb_calibrate(samples, provenance=None):
    """Least-squares fit of (c1, c2) to grid-searched optimal clips.

    ``samples`` is a list of (family name, tensor). Zero-variance tensors are
    rejected before fitting.
    """
    kept = [(f, np.asarray(w, dtype=np.float64).ravel()) for f, w in samples]
    rejected = sum(1 for _, w in kept if np.ptp(w) == 0)
    kept = [(f, w) for f, w in kept if np.ptp(w) > 0]
    if len(kept) < 2:
        raise ValueError("need at least two non-degenerate samples to fit two coefficients")
    X = np.array([[np.sqrt(np.mean(w * w)), np.mean(np.abs(w))] for _, w in kept])
    y = np.array([optimal_sawb2_alpha(w) for _, w in kept])
    # regress alpha/rms on (1, E|w|/rms): scale-free, so every sample weighs the same
    rms = X[:, :1]
    (c1, c2), *_ = np.linalg.lstsq(X / rms, y / rms[:, 0], rcond=None)
    families = sorted({f for f, _ in kept})
    prov = {"families": families, "samples": len(kept), "rejected": rejected,
            "method": "grid search of MSE-optimal 4-level clip, least squares"}
    prov.update(provenance or {})
    return SAWBCoefficients(float(c1), float(c2), prov)


@dataclass
class WeightQuantizer:
    """Per-output-channel weight quantizer used inside a model's forward pass.

    Bits 3..8 use the symmetric uniform grid clipped at the channel's max |w|;
    bits 2 use SAWB. The straight-through mask passes gradients where the
    float weight lies inside its clip range.
    """

    bits: np.ndarray
    coeffs: SAWBCoefficients | None = None

    def alphas(self, W):
        flat = W.reshape(W.shape[0], -1)
        alpha = np.abs(flat).max(axis=1)
        two = self.bits == 2
        if np.any(two):
            if self.coeffs is None:
                raise ValueError("2-bit channels need SAWB coefficients")
            for c in np.flatnonzero(two):
                a = self.coeffs.alpha(flat[c])
                if a > 0:
                    alpha[c] = a
        return alpha

    def apply(self, W):
        flat = W.reshape(W.shape[0], -1)
        alpha = self.alphas(W)
        out = np.zeros_like(flat)
        live = alpha > 0
        a = alpha[:, None]
        two = (self.bits == 2) & live
        uni = (self.bits != 2) & live
        if np.any(uni):
            bits = self.bits[uni][:, None].astype(np.float64)
            step = 2.0 * a[uni] / (2.0 ** bits - 2.0)
            out[uni] = round_half_away(np.clip(flat[uni], -a[uni], a[uni]) / step) * step
        for c in np.flatnonzero(two):
            out[c] = sawb2_grid(flat[c], alpha[c])
        mask = np.abs(flat) <= np.where(live, alpha, np.inf)[:, None]
        return out.reshape(W.shape), mask.reshape(W.shape).astype(np.float64)


# -- activations -------------------------------------------------------------

def pact_quantize(a, alpha, bits):
    """PACT: clip to [0, alpha], then 2**bits uniform levels on [0, alpha].

    Returns (y, dy/da, dy/dalpha) with the straight-through convention.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if bits not in BITS:
        raise ValueError(f"bits must be in 2..8, got {bits}")
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < -1e-12):
        raise ValueError("PACT expects non-negative (post-ReLU) activations")
    step = alpha / (2 ** bits - 1)
    y = np.floor(np.clip(a, 0.0, alpha) / step + 0.5) * step
    d_a = ((a > 0) & (a < alpha)).astype(np.float64)
    d_alpha = (a >= alpha).astype(np.float64)
    return y, d_a, d_alpha


def calibrate_pact_alpha(acts, channel_axis, percentile=99.9, floor=1e-3):
    """Per-channel clip initialisation from an activation percentile."""
    if channel_axis is None:
        return np.array([max(float(np.percentile(acts, percentile)), floor)])
    moved = np.moveaxis(acts, channel_axis, 0).reshape(acts.shape[channel_axis], -1)
    return np.maximum(np.percentile(moved, percentile, axis=1), floor)


# -- policy application ------------------------------------------------------

def apply_policy(model, policy, coeffs=None, calib_inputs=None):
    """Return a copy of ``model`` with ``policy`` installed as fake quantizers.

    Weight policies attach a WeightQuantizer to each weight layer. Activation
    policies set per-channel bits on each ReLU and initialise PACT clips from
    ``calib_inputs``. The other target is left as it is.
    """
    if not model.weight_layers():
        raise ValueError("model has no weight-bearing layers")
    q = model.copy()
    if policy.target == "weights":
        expected = [(l, c) for l in model.weight_layers() for c in range(model.weight_channels(l))]
    else:
        expected = [(l, c) for l in model.activation_layers() for c in range(model.act_channels(l))]
    missing = [k for k in expected if k not in policy.assignment]
    if missing:
        raise ValueError(f"policy does not assign bits to channels {missing[:20]}"
                         + (" ..." if len(missing) > 20 else ""))
    layers = sorted({l for l, _ in expected})
    bits = {l: np.array([policy.assignment[k] for k in expected if k[0] == l]) for l in layers}
    if policy.target == "weights":
        if any(np.any(b == 2) for b in bits.values()) and coeffs is None:
            raise ValueError("2-bit weight channels need SAWB coefficients")
        for l in layers:
            q.weight_quant[l] = WeightQuantizer(bits[l].astype(np.int64), coeffs)
    else:
        if calib_inputs is None:
            raise ValueError("activation policies need calibration inputs for PACT clips")
        tape = model.forward_tape(calib_inputs)
        for l in layers:
            acts = tape.acts[l + 1]
            axis = 1 if acts.ndim == 4 else None
            if l in model.act_bits:
                alpha = model.params[l]["alpha"].copy()
            else:
                alpha = calibrate_pact_alpha(acts, axis)
            q.params[l] = dict(q.params.get(l, {}), alpha=alpha)
            q.act_bits[l] = bits[l].astype(np.int64)
    q.touch()
    return q
