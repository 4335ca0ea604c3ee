"""Matplotlib figure rendering for the CLI report paths.

Figures are written next to the CSV/JSON outputs they illustrate. PNG
metadata is pinned so identical runs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": "morphlabel"}

_ARM_COLORS = {"plain": "tab:blue", "ds": "tab:orange", "ma": "tab:red"}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def save_training_curves(log, path) -> None:
    """Train/val total loss and validation DSC for one run."""
    epochs_t = [r.epoch for r in log.rows if r.split == "train"]
    train_tot = [r.breakdown.total for r in log.rows if r.split == "train"]
    epochs_v = [r.epoch for r in log.rows if r.split == "val"]
    val_tot = [r.breakdown.total for r in log.rows if r.split == "val"]
    val_dsc = [r.dsc for r in log.rows if r.split == "val"]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(epochs_t, train_tot, label="train", color="tab:blue")
    ax1.plot(epochs_v, val_tot, label="val", color="tab:red")
    if log.convergence_epoch and val_tot:
        ax1.plot(
            log.convergence_epoch,
            val_tot[log.convergence_epoch - 1],
            marker="*",
            markersize=12,
            color="black",
            linestyle="none",
            label=f"convergence @ {log.convergence_epoch}",
        )
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("total loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs_v, val_dsc, color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val DSC (%)")
    fig.tight_layout()
    _save(fig, path)


def save_convergence_comparison(curves, path) -> None:
    """Validation-loss convergence across arms/seeds.

    ``curves``: list of dicts with keys arm, seed, epochs, val_total,
    convergence_epoch.
    """
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for c in curves:
        color = _ARM_COLORS.get(c["arm"], "gray")
        ax.plot(c["epochs"], c["val_total"], color=color, alpha=0.65,
                label=f"{c['arm']} (seed {c['seed']})")
        ce = c["convergence_epoch"]
        if 1 <= ce <= len(c["epochs"]):
            ax.plot(c["epochs"][ce - 1], c["val_total"][ce - 1], marker="*",
                    markersize=11, color=color, linestyle="none")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation loss")
    ax.set_title("convergence (★ marks detected convergence epoch)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def save_ablation_summary(rows, path) -> None:
    """Bar chart of DSC and HD per arm; rows from the comparison table."""
    arms = [r["arm"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.4))
    for ax, key, label in ((ax1, "dsc", "DSC (%)"), (ax2, "hd", "HD (px)")):
        means = [r[f"{key}_mean"] for r in rows]
        stds = [r[f"{key}_std"] for r in rows]
        colors = [_ARM_COLORS.get(a, "gray") for a in arms]
        ax.bar(arms, means, yerr=stds, color=colors, capsize=4)
        ax.set_ylabel(label)
    fig.tight_layout()
    _save(fig, path)


def save_volume_metrics(volume_ids, dsc_values, hd_values, path) -> None:
    """Per-volume DSC / HD bars for one evaluation run."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 4.6), sharex=True)
    xs = range(len(volume_ids))
    ax1.bar(xs, dsc_values, color="tab:green")
    ax1.set_ylabel("DSC (%)")
    ax2.bar(xs, hd_values, color="tab:purple")
    ax2.set_ylabel("HD (px)")
    ax2.set_xticks(list(xs), [str(v) for v in volume_ids])
    ax2.set_xlabel("volume")
    fig.tight_layout()
    _save(fig, path)
