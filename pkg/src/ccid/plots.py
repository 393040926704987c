"""Report figures: training-loss curves and per-protocol trace panels.

Figures are written as SVG with a fixed hash salt and no date metadata, so
re-rendering identical inputs produces identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "ccid"

import matplotlib.pyplot as plt

from .protocols import ProtocolLabel
from .simulate import FeatureRecord
from .traces import discover_traces, read_records
from .training import read_metrics

# Fig-1 panel order: throughput row then RTT row, one column per protocol
PANEL_ORDER = (ProtocolLabel.BBR, ProtocolLabel.CUBIC, ProtocolLabel.RENO, ProtocolLabel.VEGAS)


class PlotError(ValueError):
    pass


def _savefig(fig, out_path: str | Path) -> None:
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def loss_figure(metrics):
    epochs = [m.epoch for m in metrics]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(epochs, [m.train_loss for m in metrics], label="training loss", color="tab:blue")
    ax.plot(epochs, [m.val_loss for m in metrics], label="validation loss", color="tab:orange")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy loss (log scale)")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    return fig


def plot_loss(metrics_path: str | Path, out_path: str | Path) -> Path:
    """Train/validation loss vs epoch on a logarithmic y-axis."""
    metrics = read_metrics(metrics_path)  # raises before any file is written
    _savefig(loss_figure(metrics), out_path)
    return Path(out_path)


def _exemplar_records(trace_dir: str | Path) -> dict[ProtocolLabel, list[FeatureRecord]]:
    found: dict[ProtocolLabel, list[FeatureRecord]] = {}
    for label, path in discover_traces(trace_dir):
        if label not in found:
            found[label] = read_records(path)
    missing = [l.value for l in PANEL_ORDER if l not in found]
    if missing:
        raise PlotError(f"{trace_dir}: no traces for protocols: {', '.join(missing)}")
    return found


def trace_figure(records: dict[ProtocolLabel, list[FeatureRecord]]):
    fig, axes = plt.subplots(2, 4, figsize=(13.0, 5.5), sharex="col")
    for col, label in enumerate(PANEL_ORDER):
        recs = records[label]
        times = [r.time_s for r in recs]
        ax_size = axes[0][col]
        ax_size.plot(times, [r.size_bytes for r in recs], color="tab:blue", lw=0.9)
        ax_size.set_title(f"Size - {label.value.upper()}", fontsize=10)
        ax_rtt = axes[1][col]
        ax_rtt.plot(times, [r.rtt_ms for r in recs], color="tab:red", lw=0.9)
        ax_rtt.set_title(f"RTT - {label.value.upper()}", fontsize=10)
        ax_rtt.set_xlabel("time (s)")
    axes[0][0].set_ylabel("bytes per interval")
    axes[1][0].set_ylabel("RTT (ms)")
    fig.tight_layout()
    return fig


def plot_traces(trace_dir: str | Path, out_path: str | Path) -> Path:
    """Eight panels: per-interval size and RTT for one flow of each protocol."""
    records = _exemplar_records(trace_dir)
    _savefig(trace_figure(records), out_path)
    return Path(out_path)
