"""CSV tables and matplotlib figures for training logs and plan comparisons."""
from __future__ import annotations

import csv
import json
import os
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

KIND_COLORS = {"real": "#1f77b4", "cached": "#7f7f7f", "imagined": "#ff7f0e"}


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path: str | os.PathLike, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def plot_training(records: Sequence[dict], path: str | os.PathLike) -> None:
    """Terminal reward per episode, coloured by how it was obtained, with best-so-far."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for kind, color in KIND_COLORS.items():
            pts = [(r["episode"], r["reward"]) for r in records if r["kind"] == kind]
            if pts:
                xs, ys = zip(*pts)
                ax.scatter(xs, ys, s=6, color=color, label=kind, alpha=0.7, linewidths=0)
        ep = [r["episode"] for r in records]
        ax.step(ep, [r["best"] for r in records], where="post", color="k", lw=1.2, label="best")
        ax.axhline(1.0, color="k", lw=0.6, ls=":")
        ax.set_xlabel("episode")
        ax.set_ylabel("speedup over default interleaving")
        ax.legend(loc="lower right", ncol=4)
        fig.savefig(path)
        plt.close(fig)


def plot_action_counts(records: Sequence[dict], path: str | os.PathLike) -> None:
    """Cumulative real, cached and imagined terminal actions."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [r["episode"] for r in records]
        for kind, color in KIND_COLORS.items():
            ax.plot(ep, [r[kind] for r in records], color=color, label=kind)
        ax.set_xlabel("episode")
        ax.set_ylabel("terminal actions (cumulative)")
        ax.legend(loc="upper left")
        fig.savefig(path)
        plt.close(fig)


def plot_comparison(rows: Sequence[dict], path: str | os.PathLike) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        labels = [r["label"] for r in rows]
        ax.bar(labels, [r["seconds"] * 1e3 for r in rows], color=["#7f7f7f", "#1f77b4"][:len(rows)])
        for i, r in enumerate(rows):
            ax.annotate(f"{r['speedup']:.3f}x", (i, r["seconds"] * 1e3), ha="center", va="bottom")
        ax.set_ylabel("all-modes MTTKRP time (ms)")
        fig.savefig(path)
        plt.close(fig)


def training_report(records: Sequence[dict], outdir: str | os.PathLike) -> list[str]:
    """Write ``training.csv`` plus reward and action-count figures; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = [os.path.join(outdir, n) for n in ("training.csv", "rewards.png", "actions.png")]
    write_csv(paths[0], records, ["episode", "epsilon", "lr", "kind", "reward", "best",
                                  "real", "cached", "imagined", "phase", "plan", "best_plan"])
    plot_training(records, paths[1])
    plot_action_counts(records, paths[2])
    return paths


def comparison_report(rows: Iterable[dict], outdir: str | os.PathLike) -> list[str]:
    rows = list(rows)
    os.makedirs(outdir, exist_ok=True)
    paths = [os.path.join(outdir, "comparison.csv"), os.path.join(outdir, "comparison.png")]
    write_csv(paths[0], rows, ["tensor", "label", "plan", "seconds", "speedup", "storage_bytes"])
    plot_comparison(rows, paths[1])
    return paths
