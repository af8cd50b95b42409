"""SVG figures for training logs and mode-count sweeps (no display needed)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps the SVG output byte-stable across runs
_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path) -> None:
    plt.rcParams["svg.hashsalt"] = "modeseq"
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def plot_extrapolation(rows: list[dict], path) -> None:
    """MR and minFDE against the number of decoded modes K'."""
    ks = [r["K"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ks, [r["MR"] for r in rows], "o-", color="tab:red", label="MR")
    ax.set_xlabel("decoded modes K'")
    ax.set_ylabel("miss rate", color="tab:red")
    ax.set_xticks(ks)
    twin = ax.twinx()
    twin.plot(ks, [r["minFDE"] for r in rows], "s--", color="tab:blue", label="minFDE")
    twin.set_ylabel("minFDE (m)", color="tab:blue")
    ax.set_title("mode extrapolation")
    _save(fig, path)


def plot_training(history: list[dict], path) -> None:
    """Loss curves, plus MR / mAP when evaluation rows are present."""
    epochs = [r["epoch"] for r in history]
    evals = [r for r in history if "MR" in r]
    fig, axes = plt.subplots(1, 2 if evals else 1, figsize=(9 if evals else 5, 3.5), squeeze=False)
    ax = axes[0, 0]
    for key in ("train_loss", "reg_loss", "conf_loss"):
        ax.plot(epochs, [r[key] for r in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    if evals:
        ax = axes[0, 1]
        ep = [r["epoch"] for r in evals]
        for key in ("MR", "mAP", "soft_mAP"):
            ax.plot(ep, [r[key] for r in evals], "o-", label=key)
        ax.set_xlabel("epoch")
        ax.set_ylim(0, 1)
        ax.legend()
    _save(fig, path)
