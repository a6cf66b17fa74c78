"""Figure rendering for the CLI report paths.

Everything draws through the Agg backend into PNG files next to the CSV
outputs; nothing here opens a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curves(loss_history: np.ndarray, path) -> None:
    loss_history = np.atleast_2d(np.asarray(loss_history, dtype=float))
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = np.arange(loss_history.shape[0])
    for n in range(loss_history.shape[1]):
        ax.plot(epochs, loss_history[:, n], label=f"step {n}")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("batch-mean squared distance")
    ax.set_title("distillation loss per step")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_reward_curve(history: np.ndarray, path) -> None:
    history = np.asarray(history, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(history[:, 0], history[:, 1], color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean reward", color="tab:blue")
    twin = ax.twinx()
    twin.plot(history[:, 0], history[:, 2], color="tab:orange", alpha=0.7)
    twin.set_ylabel("KL to base policy", color="tab:orange")
    ax.set_title("policy optimization")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_compare_figure(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    solvers = []
    for row in rows:
        if row["solver"] not in solvers:
            solvers.append(row["solver"])
    for solver in solvers:
        pts = [(r["para_nfe"], r["error"]) for r in rows
               if r["solver"] == solver]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=solver)
    ax.set_yscale("log")
    ax.set_xlabel("sequential evaluation rounds")
    ax.set_ylabel("mean endpoint error")
    ax.set_title("solver comparison")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_bench_figure(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ks = [str(r["k"]) for r in rows]
    means = [r["mean_ms"] for r in rows]
    errs = [r["ci95_ms"] if r["ci95_ms"] is not None else 0.0 for r in rows]
    ax.bar(ks, means, yerr=errs, capsize=4, color="tab:blue", alpha=0.8)
    ax.set_xlabel("branches per step")
    ax.set_ylabel("latency per sampling run (ms)")
    ax.set_title("branch-parallel latency")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_pca_curve(curve: np.ndarray, path) -> None:
    curve = np.asarray(curve, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, curve.size + 1), curve, marker="o")
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("residual components")
    ax.set_ylabel("cumulative explained variance")
    ax.set_title("trajectory residual geometry")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_samples_figure(samples: np.ndarray, path, means=None) -> None:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    fig, ax = plt.subplots(figsize=(5, 5))
    if samples.shape[1] == 1:
        ax.hist(samples[:, 0], bins=40, color="tab:blue", alpha=0.8)
        ax.set_xlabel("x")
    else:
        ax.scatter(samples[:, 0], samples[:, 1], s=6, alpha=0.5)
        if means is not None:
            means = np.atleast_2d(np.asarray(means, dtype=float))
            ax.scatter(means[:, 0], means[:, 1], marker="x", s=80,
                       color="tab:red")
        ax.set_xlabel("x0")
        ax.set_ylabel("x1")
        ax.set_aspect("equal")
    ax.set_title("generated samples")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
