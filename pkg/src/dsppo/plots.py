"""Learning-curve rendering for completed or in-progress runs.

Reads the delimited episodic output of a run directory and renders the
matching figure next to it: per-episode mean cluster rate, a 10-episode
moving average, and vertical markers on episodes that saw a handover.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

MOVING_AVERAGE_WINDOW = 10


def read_episodic_csv(path: str) -> dict:
    episodes, means, stds, handovers = [], [], [], []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            episodes.append(int(row["episode"]))
            means.append(float(row["mean_rate_mbps"]))
            stds.append(float(row["std_rate_mbps"]))
            handovers.append(int(row["handover_count"]))
    return {
        "episode": np.array(episodes, dtype=int),
        "mean": np.array(means),
        "std": np.array(stds),
        "handovers": np.array(handovers, dtype=int),
    }


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average with a growing window at the start."""
    out = np.empty_like(x, dtype=float)
    csum = np.cumsum(np.insert(x, 0, 0.0))
    for i in range(len(x)):
        lo = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def render_learning_curve(run_dir: str, out_path: str | None = None) -> str:
    """Render <run_dir>/figures/learning_curve.png from episodic_rate.csv."""
    data = read_episodic_csv(os.path.join(run_dir, "episodic_rate.csv"))
    if out_path is None:
        fig_dir = os.path.join(run_dir, "figures")
        os.makedirs(fig_dir, exist_ok=True)
        out_path = os.path.join(fig_dir, "learning_curve.png")

    fig, ax = plt.subplots(figsize=(8, 4.5))
    if len(data["episode"]):
        ep = data["episode"]
        ax.fill_between(
            ep, data["mean"] - data["std"], data["mean"] + data["std"],
            alpha=0.2, color="tab:blue", label="per-episode std",
        )
        ax.plot(ep, data["mean"], color="tab:blue", lw=1.0, label="episodic mean rate")
        ax.plot(
            ep, moving_average(data["mean"], MOVING_AVERAGE_WINDOW),
            color="tab:red", lw=1.8, label=f"{MOVING_AVERAGE_WINDOW}-episode average",
        )
        ho = ep[data["handovers"] > 0]
        for i, x in enumerate(ho):
            ax.axvline(x, color="gray", alpha=0.35, lw=0.8,
                       label="handover" if i == 0 else None)
    ax.set_xlabel("Episode")
    ax.set_ylabel("Average episodic sum-rate (Mbps)")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    tmp = out_path + ".tmp.png"
    fig.savefig(tmp, dpi=140)
    plt.close(fig)
    os.replace(tmp, out_path)
    return out_path


def render_comparison(curves: dict[str, str], out_path: str) -> str:
    """Overlay the moving-average curves of several runs (label -> run dir)."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for label, run_dir in curves.items():
        data = read_episodic_csv(os.path.join(run_dir, "episodic_rate.csv"))
        if len(data["episode"]) == 0:
            continue
        ax.plot(
            data["episode"], moving_average(data["mean"], MOVING_AVERAGE_WINDOW),
            lw=1.6, label=label,
        )
    ax.set_xlabel("Episode")
    ax.set_ylabel("Average episodic sum-rate (Mbps)")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    tmp = out_path + ".tmp.png"
    fig.savefig(tmp, dpi=140)
    plt.close(fig)
    os.replace(tmp, out_path)
    return out_path
