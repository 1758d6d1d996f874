"""Minimal figure rendering from logged data (Agg backend, no UI)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no software/date chunks so reruns produce identical bytes
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_convergence(curves: dict[str, list[float]], path, init_fitness: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in sorted(curves.items()):
        ax.plot(range(len(ys)), ys, marker=".", label=label)
    if init_fitness is not None:
        ax.axhline(init_fitness, color="grey", ls="--", lw=0.8, label="importance init")
    ax.set_xlabel("generation")
    ax.set_ylabel("best perplexity")
    ax.legend()
    return _save(fig, Path(path))


def plot_sensitivity(data: dict, path) -> Path:
    """data: {"ratios": [...], "attn": [...], "mlp": [...]} perplexities."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("attn", "mlp"):
        if key in data:
            ax.plot(data["ratios"], data[key], marker="o", label=f"prune {key} only")
    ax.set_xlabel("inheriting ratio")
    ax.set_ylabel("perplexity")
    ax.invert_xaxis()
    ax.legend()
    return _save(fig, Path(path))


def plot_reform_samples(data: dict, path) -> Path:
    """data: {"samples": [...], "objective": [...], "perplexity": [...]}."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(data["samples"], data["objective"], marker="o", label="held-out objective")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("calibration samples")
    ax.set_ylabel("layer reconstruction error")
    if data.get("perplexity"):
        ax2 = ax.twinx()
        ax2.plot(data["samples"], data["perplexity"], marker="s", color="C1", label="perplexity")
        ax2.set_ylabel("perplexity")
    ax.legend(loc="upper right")
    return _save(fig, Path(path))


def plot_steps_rho(data: dict, path) -> Path:
    """data: {"rho": {str(rho): trace}} with one objective value per iteration."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rho, trace in sorted(data["rho"].items(), key=lambda kv: float(kv[0])):
        ax.plot(range(1, len(trace) + 1), trace, label=f"rho={rho}")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.legend()
    return _save(fig, Path(path))
