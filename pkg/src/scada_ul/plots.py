"""Static figure writers for run artifacts (Agg backend, files only)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_trace(trace_path: str | Path, out_path: str | Path) -> Path:
    """Unlearning and adversarial loss per step from a JSON-lines trace."""
    steps, mu, adv = [], [], []
    with Path(trace_path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            if "loss_mu" in rec and "loss_adv" in rec:
                steps.append(rec["step"])
                mu.append(rec["loss_mu"])
                adv.append(rec["loss_adv"])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, mu, label="unlearning loss", lw=1.0)
    ax.plot(steps, adv, label="adversarial loss", lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_fnr_fpr(report, out_path: str | Path) -> Path:
    """Forget-FNR and retain-FPR across confidence thresholds."""
    ks = sorted(report.fnr_curve)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(ks, [report.fnr_curve[k] for k in ks])
    axes[0].set_xlabel("threshold")
    axes[0].set_ylabel("forget FNR")
    axes[1].plot(ks, [report.fpr_curve[k] for k in ks])
    axes[1].set_xlabel("threshold")
    axes[1].set_ylabel("retain FPR")
    axes[2].plot([report.fpr_curve[k] for k in ks], [report.fnr_curve[k] for k in ks])
    axes[2].set_xlabel("retain FPR")
    axes[2].set_ylabel("forget FNR")
    for ax in axes:
        ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_ece_bars(before: dict[str, float], after: dict[str, float], out_path: str | Path) -> Path:
    """Retain/forget calibration error before vs after unlearning."""
    labels = ["retain", "forget"]
    x = range(len(labels))
    width = 0.35
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([i - width / 2 for i in x], [before[k] for k in labels], width, label="before")
    ax.bar([i + width / 2 for i in x], [after[k] for k in labels], width, label="after")
    ax.set_xticks(list(x), labels)
    ax.set_ylabel("ECE")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
