"""PNG figures for the sweep curve and the training history."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")  # file output only
import matplotlib.pyplot as plt  # noqa: E402

# PNG metadata carries the matplotlib version by default; drop it so reruns are byte-identical.
_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def plot_curve(rows: Sequence[dict], path, exit_costs: Sequence[float] | None = None,
               title: str = "accuracy vs FLOPs") -> None:
    """Accuracy against mean FLOPs per image, for the eval and calibration splits."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    x = [r["mean_flops"] for r in rows]
    ax.plot(x, [100 * r["accuracy"] for r in rows], "o-", label="eval")
    ax.plot([r["cal_mean_flops"] for r in rows], [100 * r["cal_accuracy"] for r in rows],
            "s--", alpha=0.7, label="calibration")
    for c in exit_costs or ():
        ax.axvline(c, color="0.8", lw=0.8, zorder=0)
    ax.set_xlabel("mean FLOPs / image")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_history(history: Sequence[dict], path) -> None:
    """Training loss and per-exit eval accuracy by epoch."""
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax_loss.plot(epochs, [r["loss"] for r in history], "k-")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    for key in [k for k in history[0] if k.startswith("acc_exit")]:
        ax_acc.plot(epochs, [100 * r[key] for r in history], label=f"exit {key[8:]}")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("eval accuracy (%)")
    ax_acc.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
