"""Optional figures for run/sweep outputs. Uses the non-interactive Agg backend."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def _figure(width=6.0):
    fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss(rows, path, bans=(), title=None) -> Path:
    """Loss gap per step (log scale) with a tick for every ban."""
    fig, ax = _figure()
    steps = [r["step"] for r in rows]
    gaps = [max(float(r["loss_gap"]), 1e-16) for r in rows]
    ax.semilogy(steps, gaps, lw=1.2, color="tab:blue", label="f(x) - f*")
    for i, b in enumerate(bans):
        ax.axvline(b["step"], color="tab:red", lw=0.6, alpha=0.5, label="ban" if i == 0 else None)
    ax.set_xlabel("step")
    ax.set_ylabel("loss gap")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def plot_bands(band_rows, path, title=None) -> Path:
    """Mean with min..max band across repetitions."""
    fig, ax = _figure()
    steps = [r["step"] for r in band_rows]
    ax.fill_between(steps, [max(r["loss_gap_min"], 1e-16) for r in band_rows],
                    [max(r["loss_gap_max"], 1e-16) for r in band_rows], alpha=0.25, color="tab:blue")
    ax.plot(steps, [max(r["loss_gap_mean"], 1e-16) for r in band_rows], lw=1.2, color="tab:blue")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss gap (mean, range)")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_sweep(curves: dict, path, title=None) -> Path:
    """One loss curve per sweep point; ``curves`` maps label -> rows."""
    fig, ax = _figure(7.0)
    for label, rows in curves.items():
        ax.semilogy([r["step"] for r in rows], [max(float(r["loss_gap"]), 1e-16) for r in rows], lw=1.0,
                    label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss gap")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_traffic(rows, path) -> Path:
    fig, ax = _figure()
    steps = [r["step"] for r in rows]
    ax.plot(steps, [r["bytes_broadcast"] for r in rows], label="broadcast")
    ax.plot(steps, [r["bytes_p2p"] for r in rows], label="point-to-point")
    ax.set_xlabel("step")
    ax.set_ylabel("bytes per step")
    ax.legend(fontsize=8)
    return _save(fig, path)
