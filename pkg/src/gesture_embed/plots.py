"""Static SVG figures for experiment reports.

Output is byte-stable for identical inputs: the SVG date stamp is dropped and
matplotlib's id hash salt is fixed.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "gesture-embed"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def accuracy_by_round(curves: Mapping[str, Mapping[int, float]], path: str | Path, chance: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, curve in curves.items():
        rounds = sorted(curve)
        ax.plot(rounds, [curve[r] for r in rounds], marker="o", label=name)
    if chance is not None:
        ax.axhline(chance, color="grey", linestyle=":", label="chance")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def accuracy_by_sigma(rows: Sequence[tuple[float, float, float]], path: str | Path) -> Path:
    """``rows`` are (sigma, mean, sd)."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = [f"{s:g}" for s, _, _ in rows]
    ax.errorbar(range(len(rows)), [m for _, m, _ in rows], yerr=[sd for _, _, sd in rows], marker="o", capsize=3)
    ax.set_xticks(range(len(rows)), labels)
    ax.set_xlabel("jitter sigma (px)")
    ax.set_ylabel("accuracy")
    fig.tight_layout()
    return _save(fig, path)


def correlation_bars(values: Mapping[str, float], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = list(values)
    ax.bar(range(len(names)), [values[n] for n in names])
    ax.set_xticks(range(len(names)), names, rotation=20)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("Spearman rho")
    fig.tight_layout()
    return _save(fig, path)


def monitor_curve(history: Sequence[Mapping], path: str | Path) -> Path:
    pts = [(h["epoch"], h["monitor_rho"]) for h in history if "monitor_rho" in h]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([e for e, _ in pts], [r for _, r in pts], marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("form-similarity rho")
    fig.tight_layout()
    return _save(fig, path)
