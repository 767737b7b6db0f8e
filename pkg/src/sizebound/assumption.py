"""Checks for the monotone-capability assumption behind the estimators.

If stronger models are uniformly better at recalling the same texts, then
per-text difficulty rankings should agree across models (high Spearman
correlation), and texts known to be widely popular should rank easier than
obscure ones (one-sided Mann-Whitney).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import AnalysisError, UndefinedCorrelationError

AGREEMENT_BAR = 0.80


# ---------------------------------------------------------------------------
# Ranks and rank correlation
# ---------------------------------------------------------------------------

def rank_texts(accuracies: Mapping[str, float]) -> dict[str, float]:
    """Fractional ranks, rank 1 for the highest accuracy; ties share the
    average of the positions they span."""
    if not accuracies:
        raise AnalysisError("cannot rank an empty accuracy map")
    ordered = sorted(accuracies.items(), key=lambda kv: (-kv[1], kv[0]))
    ranks: dict[str, float] = {}
    i = 0
    while i < len(ordered):
        j = i
        while j + 1 < len(ordered) and ordered[j + 1][1] == ordered[i][1]:
            j += 1
        avg = (i + 1 + j + 1) / 2.0
        for k in range(i, j + 1):
            ranks[ordered[k][0]] = avg
        i = j + 1
    return ranks


def spearman_rho(a: Mapping[str, float], b: Mapping[str, float]) -> float:
    """Spearman correlation: Pearson correlation of the fractional ranks.

    Raises UndefinedCorrelationError when either side ranks everything
    equal (zero rank variance).
    """
    if set(a) != set(b):
        raise AnalysisError("rank correlation needs identical key sets")
    if len(a) < 2:
        raise AnalysisError("rank correlation needs at least 2 items")
    keys = sorted(a)
    ra = np.array([rank_texts(a)[k] for k in keys])
    rb = np.array([rank_texts(b)[k] for k in keys])
    da = ra - ra.mean()
    db = rb - rb.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        raise UndefinedCorrelationError(
            "rank correlation undefined: one ranking has zero variance"
        )
    return float(da @ db) / denom


@dataclass(frozen=True)
class AgreementSummary:
    model_ids: tuple[str, ...]
    pair_rhos: tuple[tuple[str, str, float], ...]
    mean_rho: float
    min_rho: float
    frac_above_bar: float
    bar: float = AGREEMENT_BAR


def agreement_matrix(per_model_accuracy: Mapping[str, Mapping[str, float]],
                     bar: float = AGREEMENT_BAR) -> AgreementSummary:
    """Spearman rho over every unordered model pair's per-text accuracies."""
    model_ids = tuple(sorted(per_model_accuracy))
    if len(model_ids) < 2:
        raise AnalysisError("agreement needs at least 2 models")
    pair_rhos = []
    for f, g in itertools.combinations(model_ids, 2):
        rho = spearman_rho(per_model_accuracy[f], per_model_accuracy[g])
        pair_rhos.append((f, g, rho))
    values = [rho for _, _, rho in pair_rhos]
    return AgreementSummary(
        model_ids=model_ids,
        pair_rhos=tuple(pair_rhos),
        mean_rho=float(np.mean(values)),
        min_rho=float(min(values)),
        frac_above_bar=sum(v > bar for v in values) / len(values),
        bar=bar,
    )


# ---------------------------------------------------------------------------
# Mann-Whitney popularity check
# ---------------------------------------------------------------------------

EXACT_MW_LIMIT = 12


def _u_statistic(a: Sequence[float], b: Sequence[float]) -> float:
    """U = #{pairs with a > b} + half the tied pairs."""
    u = 0.0
    for x in a:
        for y in b:
            if x > y:
                u += 1.0
            elif x == y:
                u += 0.5
    return u


@dataclass(frozen=True)
class MannWhitneyResult:
    u_statistic: float
    p_value: float
    n_a: int
    n_b: int
    method: str  # "exact" or "normal"


def mann_whitney_one_sided(a: Sequence[float], b: Sequence[float],
                           exact_limit: int = EXACT_MW_LIMIT) -> MannWhitneyResult:
    """One-sided test of H1: values in `a` are stochastically larger.

    Exact when the pooled sample is small enough to enumerate label
    assignments, otherwise a normal approximation with tie-corrected
    variance and a 0.5 continuity correction.
    """
    if not a or not b:
        raise AnalysisError("both samples must be non-empty")
    n_a, n_b = len(a), len(b)
    u_obs = _u_statistic(a, b)
    if n_a + n_b <= exact_limit:
        pooled = list(a) + list(b)
        total = 0
        hits = 0
        for idx in itertools.combinations(range(len(pooled)), n_a):
            chosen = set(idx)
            grp_a = [pooled[i] for i in chosen]
            grp_b = [pooled[i] for i in range(len(pooled)) if i not in chosen]
            total += 1
            if _u_statistic(grp_a, grp_b) >= u_obs - 1e-12:
                hits += 1
        return MannWhitneyResult(u_obs, hits / total, n_a, n_b, "exact")
    n = n_a + n_b
    mean_u = n_a * n_b / 2.0
    pooled = sorted(list(a) + list(b))
    tie_term = 0.0
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and pooled[j + 1] == pooled[i]:
            j += 1
        t = j - i + 1
        tie_term += t ** 3 - t
        i = j + 1
    var_u = (n_a * n_b / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if var_u <= 0.0:
        return MannWhitneyResult(u_obs, 1.0, n_a, n_b, "normal")
    z = (u_obs - mean_u - 0.5) / math.sqrt(var_u)
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return MannWhitneyResult(u_obs, p, n_a, n_b, "normal")


# ---------------------------------------------------------------------------
# Combined report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AssumptionReport:
    agreement: AgreementSummary
    popularity: MannWhitneyResult | None

    def to_dict(self) -> dict:
        out: dict = {
            "agreement": {
                "model_ids": list(self.agreement.model_ids),
                "mean_rho": self.agreement.mean_rho,
                "min_rho": self.agreement.min_rho,
                "frac_above_bar": self.agreement.frac_above_bar,
                "bar": self.agreement.bar,
                "pairs": [
                    {"model_f": f, "model_g": g, "rho": rho}
                    for f, g, rho in self.agreement.pair_rhos
                ],
            },
        }
        if self.popularity is not None:
            out["popularity"] = {
                "u_statistic": self.popularity.u_statistic,
                "p_value": self.popularity.p_value,
                "n_popular": self.popularity.n_a,
                "n_obscure": self.popularity.n_b,
                "method": self.popularity.method,
            }
        return out

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def check_assumptions(per_model_accuracy: Mapping[str, Mapping[str, float]],
                      popular_ids: Sequence[str] = (),
                      obscure_ids: Sequence[str] = (),
                      bar: float = AGREEMENT_BAR) -> AssumptionReport:
    """Agreement summary plus, when both id lists are given, a popularity test
    on mean-over-models per-text accuracy."""
    agreement = agreement_matrix(per_model_accuracy, bar=bar)
    popularity = None
    if popular_ids and obscure_ids:
        text_means: dict[str, float] = {}
        for text_id in set(popular_ids) | set(obscure_ids):
            vals = []
            for per_text in per_model_accuracy.values():
                if text_id not in per_text:
                    raise AnalysisError(f"text {text_id!r} missing from a model's accuracies")
                vals.append(per_text[text_id])
            text_means[text_id] = float(np.mean(vals))
        popularity = mann_whitney_one_sided(
            [text_means[t] for t in popular_ids],
            [text_means[t] for t in obscure_ids],
        )
    return AssumptionReport(agreement=agreement, popularity=popularity)
