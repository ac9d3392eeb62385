"""Matplotlib renderings saved next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_loss(rows, path):
    """rows: [step, total, out_1..out_N] per training step."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        steps = [r[0] for r in rows]
        ax.plot(steps, [r[1] for r in rows], label="total", lw=1.5)
        for i in range(len(rows[0]) - 2):
            ax.plot(steps, [r[2 + i] for r in rows],
                    label=f"out {i + 1}", lw=0.8, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if rows:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_roc(curves, path):
    """curves: {stem: (fpr, tpr)}."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for stem, (fpr, tpr) in curves.items():
        ax.plot(fpr, tpr, lw=1.0, label=stem)
    ax.plot([0, 1], [0, 1], "k--", lw=0.6)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if len(curves) <= 12:
        ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_connectivity(curves, path):
    """curves: {stem: (thetas, values)}."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for stem, (thetas, values) in curves.items():
        ax.plot(thetas, values, lw=1.0, label=stem)
    ax.set_xlabel("threshold (0-255)")
    ax.set_ylabel("connectivity")
    ax.set_ylim(-0.02, 1.02)
    if len(curves) <= 12:
        ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
