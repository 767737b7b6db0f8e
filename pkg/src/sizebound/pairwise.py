"""Blocked sign-permutation test for "model f outperforms model g".

Each source text is one block; its score is the mean over prefix lengths
of the raw-accuracy difference f - g. Under the null of exchangeable
per-text differences, flipping block signs is distribution-preserving, so
the one-sided p-value is the share of sign assignments whose flipped sum
reaches the observed total. A target's relative lower bound is the largest
known reference size it beats significantly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AnalysisError, CompatibilityError
from .profiles import AccuracyProfile

EXACT_BLOCK_LIMIT = 20
DEFAULT_RESAMPLES = 100_000
DEFAULT_ALPHA = 0.05


@dataclass(frozen=True)
class BlockScores:
    """Per-text mean raw-accuracy differences between two models."""

    model_f: str
    model_g: str
    text_ids: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        if self.scores.shape != (len(self.text_ids),):
            raise CompatibilityError("block scores shape mismatch with text_ids")


def block_scores(profile_f: AccuracyProfile, profile_g: AccuracyProfile) -> BlockScores:
    """Raw-channel accuracy gaps averaged over lengths, one score per text."""
    if not profile_f.compatible_with(profile_g):
        raise CompatibilityError(
            f"profiles {profile_f.model_id} and {profile_g.model_id} have different layouts"
        )
    diff = profile_f.raw_matrix() - profile_g.raw_matrix()
    return BlockScores(
        model_f=profile_f.model_id,
        model_g=profile_g.model_id,
        text_ids=profile_f.text_ids,
        scores=diff.mean(axis=1),
    )


@dataclass(frozen=True)
class PairwiseResult:
    model_f: str
    model_g: str
    statistic: float
    p_value: float
    n_blocks: int
    method: str          # "exact" or "monte-carlo"
    alpha: float
    resamples: int | None = None

    @property
    def significant(self) -> bool:
        return self.p_value <= self.alpha


def _exact_p_value(scores: np.ndarray) -> float:
    """Enumerate all 2^K sign assignments; counts ties as exceedances."""
    k = len(scores)
    observed = float(scores.sum())
    assignments = np.arange(2 ** k, dtype=np.uint64)
    # bit j of each assignment selects the sign of block j
    bits = (assignments[:, None] >> np.arange(k, dtype=np.uint64)) & 1
    signs = bits.astype(np.float64) * 2.0 - 1.0
    sums = signs @ scores
    atol = 1e-12 * max(1.0, float(np.abs(scores).sum()))
    return float(np.count_nonzero(sums >= observed - atol)) / 2 ** k


def _monte_carlo_p_value(scores: np.ndarray, resamples: int, seed: int) -> float:
    """Random sign flips with the add-one estimator (never returns 0)."""
    observed = float(scores.sum())
    rng = np.random.Generator(np.random.Philox(key=seed))
    atol = 1e-12 * max(1.0, float(np.abs(scores).sum()))
    count = 0
    chunk = 20_000
    done = 0
    while done < resamples:
        n = min(chunk, resamples - done)
        signs = rng.integers(0, 2, size=(n, len(scores))).astype(np.float64) * 2.0 - 1.0
        sums = signs @ scores
        count += int(np.count_nonzero(sums >= observed - atol))
        done += n
    return (1 + count) / (resamples + 1)


def sign_permutation_test(blocks: BlockScores, alpha: float = DEFAULT_ALPHA,
                          exact_threshold: int = EXACT_BLOCK_LIMIT,
                          resamples: int = DEFAULT_RESAMPLES,
                          seed: int = 0) -> PairwiseResult:
    """One-sided test of H1: f beats g, via block sign flips.

    Exact enumeration when the block count is at most exact_threshold,
    otherwise Monte Carlo with a counter-based generator so results are
    reproducible for a given seed regardless of call order.
    """
    k = len(blocks.text_ids)
    if k == 0:
        raise AnalysisError("sign permutation test needs at least one block")
    if not 0 < alpha < 1:
        raise AnalysisError(f"alpha must be in (0, 1), got {alpha}")
    scores = np.asarray(blocks.scores, dtype=float)
    if k <= exact_threshold:
        p = _exact_p_value(scores)
        method, used = "exact", None
    else:
        if resamples < 1:
            raise AnalysisError(f"resamples must be >= 1, got {resamples}")
        p = _monte_carlo_p_value(scores, resamples, seed)
        method, used = "monte-carlo", resamples
    return PairwiseResult(
        model_f=blocks.model_f,
        model_g=blocks.model_g,
        statistic=float(scores.sum()),
        p_value=p,
        n_blocks=k,
        method=method,
        alpha=alpha,
        resamples=used,
    )


def relative_lower_bound(target: AccuracyProfile,
                         references: Sequence[tuple[AccuracyProfile, float]],
                         alpha: float = DEFAULT_ALPHA,
                         exact_threshold: int = EXACT_BLOCK_LIMIT,
                         resamples: int = DEFAULT_RESAMPLES,
                         seed: int = 0,
                         ) -> tuple[float | None, list[PairwiseResult]]:
    """Largest reference size the target significantly outperforms.

    References are scanned in descending size order; the first rejection
    wins. Returns (None, results) when no reference is beaten.
    """
    if not references:
        raise AnalysisError("relative bound needs at least one reference profile")
    ordered = sorted(references, key=lambda pair: pair[1], reverse=True)
    results: list[PairwiseResult] = []
    bound: float | None = None
    for ref_profile, ref_size in ordered:
        result = sign_permutation_test(
            block_scores(target, ref_profile),
            alpha=alpha, exact_threshold=exact_threshold,
            resamples=resamples, seed=seed,
        )
        results.append(result)
        if bound is None and result.significant:
            bound = ref_size
    return bound, results


# ---------------------------------------------------------------------------
# Decision-quality sweep
# ---------------------------------------------------------------------------

DEFAULT_TAU_GRID = (0.01, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35,
                    0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70)


@dataclass(frozen=True)
class TauPoint:
    tau: float
    n_pairs: int
    n_positive: int
    n_predicted: int
    true_positive: int
    false_positive: int
    false_negative: int
    precision: float
    recall: float
    accuracy: float


def tau_sweep_evaluation(profiles: Sequence[AccuracyProfile],
                         true_sizes: Sequence[float],
                         taus: Sequence[float] = DEFAULT_TAU_GRID,
                         alpha: float = DEFAULT_ALPHA,
                         exact_threshold: int = EXACT_BLOCK_LIMIT,
                         resamples: int = DEFAULT_RESAMPLES,
                         seed: int = 0) -> list[TauPoint]:
    """Score the test's verdicts against known sizes over a margin grid.

    For each ordered pair (f, g) of distinct models the prediction is
    "significant", the truth at margin tau is size_f > (1 + tau) * size_g.
    Precision (or recall) defaults to 1.0 when there are no predicted
    (or actual) positives.
    """
    if len(profiles) != len(true_sizes):
        raise AnalysisError("profiles and true_sizes must have equal length")
    if len(profiles) < 2:
        raise AnalysisError("tau sweep needs at least 2 models")
    n = len(profiles)
    predictions: dict[tuple[int, int], bool] = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            result = sign_permutation_test(
                block_scores(profiles[i], profiles[j]),
                alpha=alpha, exact_threshold=exact_threshold,
                resamples=resamples, seed=seed,
            )
            predictions[(i, j)] = result.significant
    points = []
    for tau in taus:
        tp = fp = fn = tn = 0
        for (i, j), predicted in predictions.items():
            actual = true_sizes[i] > (1.0 + tau) * true_sizes[j]
            if predicted and actual:
                tp += 1
            elif predicted and not actual:
                fp += 1
            elif not predicted and actual:
                fn += 1
            else:
                tn += 1
        n_pred = tp + fp
        n_pos = tp + fn
        total = tp + fp + fn + tn
        points.append(TauPoint(
            tau=tau,
            n_pairs=total,
            n_positive=n_pos,
            n_predicted=n_pred,
            true_positive=tp,
            false_positive=fp,
            false_negative=fn,
            precision=tp / n_pred if n_pred else 1.0,
            recall=tp / n_pos if n_pos else 1.0,
            accuracy=(tp + tn) / total,
        ))
    return points


def write_pairwise_csv(path: str | Path, results: Sequence[PairwiseResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_f", "model_g", "statistic", "p_value", "method", "decision"])
        for r in results:
            writer.writerow([r.model_f, r.model_g, f"{r.statistic:.6f}",
                             f"{r.p_value:.6g}", r.method,
                             "significant" if r.significant else "not-significant"])


def write_tau_sweep_csv(path: str | Path, points: Sequence[TauPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "n_pairs", "n_positive", "n_predicted",
                         "true_positive", "false_positive", "false_negative",
                         "precision", "recall", "accuracy"])
        for p in points:
            writer.writerow([f"{p.tau:g}", p.n_pairs, p.n_positive, p.n_predicted,
                             p.true_positive, p.false_positive, p.false_negative,
                             f"{p.precision:.6f}", f"{p.recall:.6f}", f"{p.accuracy:.6f}"])
