"""Static figure rendering for report and evaluate runs.

All functions write a PNG next to the delimited outputs and return the
path; nothing is ever shown interactively.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .assumption import AgreementSummary
from .latent_scaling import LooCvResult, ScalingLawFit
from .pairwise import TauPoint

_DPI = 150


def plot_scaling_law(path: str | Path, scores: Sequence[float],
                     sizes: Sequence[float], labels: Sequence[str],
                     fit: ScalingLawFit,
                     extra_scores: Mapping[str, float] | None = None) -> Path:
    """Reference scores vs known sizes on a log axis, with the fitted curve."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 5))
    ax.scatter(scores, sizes, color="tab:blue", zorder=3, label="references")
    lo = min(scores)
    hi = max(scores)
    if extra_scores:
        lo = min(lo, *extra_scores.values())
        hi = max(hi, *extra_scores.values())
    grid = np.linspace(lo - 0.05 * (hi - lo + 1e-9), hi + 0.05 * (hi - lo + 1e-9), 200)
    ax.plot(grid, [fit.predict_size(z) for z in grid], color="tab:orange",
            label=f"fit (in-sample R$^2$={fit.r_squared:.3f})")
    if extra_scores:
        for model_id, z in sorted(extra_scores.items()):
            ax.axvline(z, color="gray", alpha=0.25, linewidth=0.8)
            ax.annotate(model_id, (z, fit.predict_size(z)), fontsize=6,
                        rotation=90, va="bottom", ha="right", alpha=0.7)
    ax.set_yscale("log")
    ax.set_xlabel("capability score")
    ax.set_ylabel("parameters (billions)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def plot_tau_sweep(path: str | Path, points: Sequence[TauPoint]) -> Path:
    path = Path(path)
    taus = [p.tau for p in points]
    fig, ax = plt.subplots(figsize=(7, 5))
    ax.plot(taus, [p.precision for p in points], marker="o", label="precision")
    ax.plot(taus, [p.recall for p in points], marker="s", label="recall")
    ax.plot(taus, [p.accuracy for p in points], marker="^", label="accuracy")
    ax.set_xlabel("size-margin threshold")
    ax.set_ylabel("metric")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def plot_loocv(path: str | Path, cv: LooCvResult) -> Path:
    """Held-out predictions vs truth with the factor-of-two band."""
    path = Path(path)
    true = np.array([f.true_size for f in cv.folds])
    pred = np.array([f.predicted_size for f in cv.folds])
    fig, ax = plt.subplots(figsize=(6, 6))
    lo, hi = 0.5 * true.min(), 2.5 * true.max()
    grid = np.linspace(lo, hi, 2)
    ax.plot(grid, grid, color="black", linewidth=0.8)
    ax.fill_between(grid, 0.5 * grid, 2.0 * grid, color="tab:green", alpha=0.15,
                    label="factor-of-two band")
    ax.scatter(true, pred, color="tab:blue", zorder=3)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("true size (billions)")
    ax.set_ylabel("held-out predicted size (billions)")
    ax.set_title(f"leave-one-out R$^2$={cv.cv_r_squared:.3f}")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def plot_agreement(path: str | Path, agreement: AgreementSummary) -> Path:
    path = Path(path)
    rhos = [rho for _, _, rho in agreement.pair_rhos]
    fig, ax = plt.subplots(figsize=(7, 5))
    ax.hist(rhos, bins=20, color="tab:blue", alpha=0.8)
    ax.axvline(agreement.bar, color="tab:red", linestyle="--",
               label=f"bar {agreement.bar:g} "
                     f"({100 * agreement.frac_above_bar:.0f}% above)")
    ax.set_xlabel("pairwise rank correlation")
    ax.set_ylabel("model pairs")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def plot_bounds(path: str | Path, rows) -> Path:
    """Best lower bound per target, split by which route produced it."""
    path = Path(path)
    rows = sorted(rows, key=lambda r: r.best_lb)
    names = [r.model_id for r in rows]
    values = [r.best_lb for r in rows]
    colors = ["tab:orange" if r.source == "Abs" else "tab:blue" for r in rows]
    fig, ax = plt.subplots(figsize=(7, max(3, 0.35 * len(rows) + 1)))
    ax.barh(names, values, color=colors)
    ax.set_xlabel("best lower bound (billions)")
    handles = [plt.Rectangle((0, 0), 1, 1, color="tab:orange"),
               plt.Rectangle((0, 0), 1, 1, color="tab:blue")]
    ax.legend(handles, ["absolute route", "relative route"], fontsize=8)
    ax.grid(alpha=0.3, axis="x")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
