"""CSV writers and figure rendering for evaluation outputs.

Every report is written as delimited text first (the machine-readable
contract, bit-reproducible for a fixed config and seed) with a rendered
figure alongside.  Figures use the Agg backend so runs work headless.
"""

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .detect import DEFAULT_FPS_GRID


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_froc_csv(path, curve):
    _write_rows(path, ["threshold", "fps_per_volume", "sensitivity"],
                zip(curve.thresholds.tolist(), curve.fps_per_volume.tolist(),
                    curve.sensitivity.tolist()))


def write_calibration_csv(path, table):
    _write_rows(path, ["bin_low", "bin_high", "count", "accuracy"],
                [(b.low, b.high, b.count, b.accuracy) for b in table.bins])


def write_detections_csv(path, rows):
    """rows: (volume_id, z_mm, y_mm, x_mm, score, 'TP'|'FP')."""
    _write_rows(path, ["volume_id", "z_mm", "y_mm", "x_mm", "score", "label"], rows)


def write_trace_csv(path, trace):
    _write_rows(path, ["epoch", "loss", "fit", "kl"],
                [(r["epoch"], r["loss"], r["fit"], r["kl"]) for r in trace])


def write_comparison_csv(path, rows, fps_grid=DEFAULT_FPS_GRID):
    """rows: (arm_name, [sensitivity per fps grid point])."""
    header = ["arm"] + [f"sens_at_{g:g}_fps" for g in fps_grid]
    _write_rows(path, header, [(name, *sens) for name, sens in rows])


def render_froc_figure(path, curves, fps_max=3.0, title="FROC"):
    """curves: {label: FrocCurve}; x axis clipped to the reporting range."""
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for label, curve in curves.items():
        ax.plot(curve.fps_per_volume, curve.sensitivity, marker="", lw=1.6, label=label)
    ax.set_xlim(0, fps_max)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positives / volume")
    ax.set_ylabel("lesion sensitivity")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_calibration_figure(path, tables, title="Uncertainty calibration"):
    """tables: {label: CalibrationTable}; bars of accuracy per uncertainty bin."""
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    n = max(len(tables), 1)
    width = 0.08 / n
    for i, (label, table) in enumerate(tables.items()):
        centers = [(b.low + b.high) / 2 + (i - (n - 1) / 2) * width for b in table.bins]
        accs = [b.accuracy if not b.empty else 0.0 for b in table.bins]
        ax.bar(centers, accs, width=width, label=label, alpha=0.85)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("uncertainty bin")
    ax.set_ylabel("classification accuracy")
    ax.set_title(title)
    ax.grid(alpha=0.3, axis="y")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_trace_figure(path, trace, title="Training loss"):
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    epochs = [r["epoch"] for r in trace]
    ax.plot(epochs, [r["loss"] for r in trace], lw=1.6, label="total")
    ax.plot(epochs, [r["fit"] for r in trace], lw=1.0, ls="--", label="fit")
    ax.plot(epochs, [r["kl"] for r in trace], lw=1.0, ls=":", label="kl")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss / volume")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
