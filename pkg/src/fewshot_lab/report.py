"""Render training-curve figures next to the metrics CSV.

Called automatically at the end of ``train`` and on demand by the
``report`` CLI subcommand. Figures are PNG files written alongside the
delimited metrics output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _series(rows, split):
    picked = [r for r in rows if r.split == split]
    return ([r.step for r in picked], [r.loss for r in picked],
            [r.accuracy for r in picked], [r.ci95 for r in picked])


def render_metrics_figures(metrics_path, out_dir=None):
    """Write loss and accuracy curves for a metrics CSV; returns the paths."""
    from .harness import read_metrics

    metrics_path = Path(metrics_path)
    out_dir = Path(out_dir) if out_dir is not None else metrics_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_metrics(metrics_path)
    if not rows:
        return []

    paths = []
    colors = {"train": "tab:blue", "test": "tab:orange"}

    fig, ax = plt.subplots(figsize=(6, 4))
    for split in ("train", "test"):
        steps, losses, _, _ = _series(rows, split)
        if steps:
            ax.plot(steps, losses, marker="o", markersize=3,
                    color=colors[split], label=split)
    ax.set_xlabel("step")
    ax.set_ylabel("episode loss")
    ax.set_title("loss")
    ax.legend()
    fig.tight_layout()
    loss_path = out_dir / "loss_curve.png"
    fig.savefig(loss_path, dpi=120)
    plt.close(fig)
    paths.append(str(loss_path))

    fig, ax = plt.subplots(figsize=(6, 4))
    for split in ("train", "test"):
        steps, _, accs, cis = _series(rows, split)
        if not steps:
            continue
        ax.plot(steps, accs, marker="o", markersize=3,
                color=colors[split], label=split)
        if split == "test":
            lo = [a - c for a, c in zip(accs, cis)]
            hi = [a + c for a, c in zip(accs, cis)]
            ax.fill_between(steps, lo, hi, color=colors[split], alpha=0.2,
                            linewidth=0)
    ax.set_xlabel("step")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("episode accuracy (test band: 95% CI)")
    ax.legend()
    fig.tight_layout()
    acc_path = out_dir / "accuracy_curve.png"
    fig.savefig(acc_path, dpi=120)
    plt.close(fig)
    paths.append(str(acc_path))
    return paths
