"""SVG figures with CSV twins for a finished run directory."""

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .alloc import QuantPolicy, sort_channels  # noqa: E402
from .errors import CWHawqError  # noqa: E402
from .hessian import TraceReport  # noqa: E402

REQUIRED = (
    "trace_weights.json", "trace_activations.json",
    "policy_weights.json", "policy_activations.json",
)

matplotlib.rcParams["svg.hashsalt"] = "cwhawq"
matplotlib.rcParams["svg.fonttype"] = "none"


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    Path(path).write_text(buf.getvalue())


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def sorted_trace_rows(report):
    s = sort_channels(report)
    return [(rank, e.layer, e.channel, e.average, e.count) for rank, e in enumerate(s.entries)]


def plot_sorted_trace(report, out_dir):
    rows = sorted_trace_rows(report)
    stem = Path(out_dir) / f"sorted_trace_{report.target}"
    _write_csv(stem.with_suffix(".csv"), ["rank", "layer", "channel", "average_trace", "count"], rows)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r[0] for r in rows], [r[3] for r in rows], lw=1.2)
    vals = np.abs([r[3] for r in rows])
    pos = vals[vals > 0]
    ax.set_yscale("symlog", linthresh=float(pos.min()) if pos.size else 1e-12)
    ax.set_xlabel("channel rank")
    ax.set_ylabel("average Hessian trace")
    ax.set_title(f"sorted channel traces ({report.target})")
    fig.tight_layout()
    _save(fig, stem.with_suffix(".svg"))
    return stem


def qbn_rows(policy):
    return [(layer, avg) for layer, avg in policy.per_layer_avg_bits().items()]


def plot_qbn(policy, out_dir):
    rows = qbn_rows(policy)
    stem = Path(out_dir) / f"qbn_{policy.target}"
    _write_csv(stem.with_suffix(".csv"), ["layer", "avg_bits"], rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([str(r[0]) for r in rows], [r[1] for r in rows])
    ax.set_ylim(0, 8.5)
    ax.set_xlabel("layer index")
    ax.set_ylabel("average bits")
    ax.set_title(f"per-layer average QBN ({policy.target})")
    fig.tight_layout()
    _save(fig, stem.with_suffix(".svg"))
    return stem


def plot_landscape(scape, out_dir):
    stem = Path(out_dir) / f"landscape_{scape['selector']}"
    _write_csv(stem.with_suffix(".csv"), ["x", "y", "loss"], scape["grid"])
    n = scape["steps"]
    g = np.array(scape["grid"])
    X, Y, Z = (g[:, i].reshape(n, n) for i in range(3))
    fig, ax = plt.subplots(figsize=(4.5, 4))
    if n > 1 and np.ptp(Z) > 0:
        cs = ax.contourf(X, Y, Z, levels=12)
        fig.colorbar(cs, ax=ax, label="loss")
    else:
        ax.scatter(X.ravel(), Y.ravel(), c=Z.ravel())
    ax.set_title(f"{scape['selector']}-trace channel (layer {scape['layer']}, ch {scape['channel']})")
    fig.tight_layout()
    _save(fig, stem.with_suffix(".svg"))
    return stem


def emit_plots(run_dir):
    """Write every figure for ``run_dir`` into ``run_dir/plots``. Returns the file list."""
    root = Path(run_dir)
    missing = [f for f in REQUIRED if not (root / f).is_file()]
    if missing:
        raise CWHawqError(f"missing run artifacts in {root}: {', '.join(missing)}")
    out = root / "plots"
    out.mkdir(exist_ok=True)
    stems = []
    for target in ("weights", "activations"):
        stems.append(plot_sorted_trace(
            TraceReport.from_json((root / f"trace_{target}.json").read_text()), out))
        stems.append(plot_qbn(QuantPolicy.from_json((root / f"policy_{target}.json").read_text()), out))
    scape_path = root / "landscape.json"
    if scape_path.is_file():
        for scape in json.loads(scape_path.read_text()).values():
            stems.append(plot_landscape(scape, out))
    return sorted(p for s in stems for p in (s.with_suffix(".svg"), s.with_suffix(".csv")))
