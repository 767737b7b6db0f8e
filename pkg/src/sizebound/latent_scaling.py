"""Latent capability axis and the size scaling law.

Reference profiles are centered (no variance scaling), their first
principal component is taken as a one-dimensional capability axis, and
known parameter counts are regressed on axis scores with an exponential
law size(z) = base_size * exp(growth_rate * z). Halving a predicted size
gives the conservative absolute lower bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateDataError, FitError, StorageError

PCA_TOL = 1e-10
PCA_MAX_ITER = 10_000
SAFETY_FACTOR = 0.5


# ---------------------------------------------------------------------------
# Principal axis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrincipalAxis:
    """First principal component of the centered reference matrix."""

    direction: np.ndarray     # unit vector, length D
    center: np.ndarray        # column means, length D
    explained_variance: float

    def project(self, vector: np.ndarray) -> float:
        """Score of one profile vector on the axis."""
        v = np.asarray(vector, dtype=float)
        if v.shape != self.center.shape:
            raise FitError(
                f"cannot project vector of shape {v.shape} on axis of "
                f"dimension {self.center.shape[0]}"
            )
        return float((v - self.center) @ self.direction)

    def project_rows(self, matrix: np.ndarray) -> np.ndarray:
        m = np.asarray(matrix, dtype=float)
        return (m - self.center) @ self.direction


def first_component(matrix: np.ndarray, tol: float = PCA_TOL,
                    max_iter: int = PCA_MAX_ITER,
                    orient: bool = True) -> PrincipalAxis:
    """Power iteration for the top eigenvector of the covariance X_c^T X_c.

    Starts from the all-ones direction and multiplies by the covariance via
    two thin matrix products per step, so no D x D matrix is formed. Falls
    back to a dense SVD if the iteration has not converged after max_iter
    steps (possible when the top two eigenvalues nearly coincide).

    With orient=True the axis sign is fixed so that scores correlate
    positively with profile row means, making "larger score = stronger
    model" hold for accuracy data.
    """
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateDataError("need a 2-D matrix with at least 2 rows")
    center = x.mean(axis=0)
    xc = x - center
    if not np.any(np.abs(xc) > 0):
        raise DegenerateDataError("all reference profiles are identical")
    d = x.shape[1]
    v = np.ones(d) / math.sqrt(d)
    converged = False
    for _ in range(max_iter):
        w = xc.T @ (xc @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector fell in the null space; nudge it deterministically
            v = np.zeros(d)
            v[int(np.argmax(np.abs(xc).sum(axis=0)))] = 1.0
            continue
        w /= norm
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            v = w
            converged = True
            break
        v = w
    if not converged:
        _, s, vt = np.linalg.svd(xc, full_matrices=False)
        v = vt[0]
    scores = xc @ v
    explained = float(scores @ scores / max(1, x.shape[0] - 1))
    if orient:
        row_means = x.mean(axis=1)
        rm = row_means - row_means.mean()
        if float(rm @ scores) < 0:
            v = -v
    return PrincipalAxis(direction=v, center=center, explained_variance=explained)


# ---------------------------------------------------------------------------
# Exponential scaling law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingLawFit:
    """size(z) = base_size * exp(growth_rate * z), fit by OLS on ln(size)."""

    base_size: float
    growth_rate: float
    r_squared: float
    reference_ids: tuple[str, ...]

    def predict_size(self, score: float) -> float:
        return self.base_size * math.exp(self.growth_rate * score)


def _ols_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope and intercept of y on x."""
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise FitError("all axis scores are identical; slope is undefined")
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    return slope, ym - slope * xm


def fit_scaling_law(scores: Sequence[float], sizes: Sequence[float],
                    reference_ids: Sequence[str]) -> ScalingLawFit:
    """Regress ln(size) on axis score over the reference models.

    r_squared is computed on the log scale. A fit through fewer than 3
    points, or with non-positive sizes, is refused.
    """
    z = np.asarray(scores, dtype=float)
    sizes_arr = np.asarray(sizes, dtype=float)
    if z.shape != sizes_arr.shape or len(z) != len(reference_ids):
        raise FitError("scores, sizes and reference_ids must have equal length")
    if len(z) < 3:
        raise FitError(f"need at least 3 reference models to fit, got {len(z)}")
    if np.any(sizes_arr <= 0):
        raise FitError("all reference sizes must be > 0")
    log_sizes = np.log(sizes_arr)
    slope, intercept = _ols_line(z, log_sizes)
    residuals = log_sizes - (slope * z + intercept)
    ss_res = float(residuals @ residuals)
    ss_tot = float(((log_sizes - log_sizes.mean()) ** 2).sum())
    # With zero total variance the flat fit is exact; report 1 by convention.
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return ScalingLawFit(
        base_size=math.exp(intercept),
        growth_rate=slope,
        r_squared=r2,
        reference_ids=tuple(reference_ids),
    )


def score_new_model(axis: PrincipalAxis, fit: ScalingLawFit,
                    profile_vector: np.ndarray) -> tuple[float, float]:
    """(axis score, predicted size) for a model outside the reference set."""
    z = axis.project(profile_vector)
    return z, fit.predict_size(z)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LooFold:
    model_id: str
    true_size: float
    predicted_size: float

    @property
    def ratio_error(self) -> float:
        """max(pred/true, true/pred); 1.0 is perfect, 2.0 is a factor of two."""
        r = self.predicted_size / self.true_size
        return max(r, 1.0 / r)


@dataclass(frozen=True)
class LooCvResult:
    folds: tuple[LooFold, ...]
    cv_r_squared: float
    max_ratio_error: float
    within_factor_2: float


def loo_cv(matrix: np.ndarray, sizes: Sequence[float],
           reference_ids: Sequence[str], tol: float = PCA_TOL,
           max_iter: int = PCA_MAX_ITER) -> LooCvResult:
    """Leave-one-out validation of the full pipeline.

    Each fold recomputes the axis and the law without the held-out model,
    then predicts its size. cv_r_squared is computed on ln(size) against
    the mean of all true log sizes.
    """
    x = np.asarray(matrix, dtype=float)
    sizes_arr = np.asarray(sizes, dtype=float)
    n = x.shape[0]
    if n < 4:
        raise FitError(f"leave-one-out needs at least 4 reference models, got {n}")
    folds = []
    for i in range(n):
        keep = np.arange(n) != i
        axis = first_component(x[keep], tol=tol, max_iter=max_iter)
        fit = fit_scaling_law(
            axis.project_rows(x[keep]),
            sizes_arr[keep],
            [reference_ids[j] for j in range(n) if keep[j]],
        )
        _, pred = score_new_model(axis, fit, x[i])
        folds.append(LooFold(model_id=reference_ids[i], true_size=float(sizes_arr[i]),
                             predicted_size=pred))
    log_true = np.log(sizes_arr)
    log_pred = np.log([f.predicted_size for f in folds])
    ss_res = float(((log_true - log_pred) ** 2).sum())
    ss_tot = float(((log_true - log_true.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise FitError("cross-validation undefined: all reference sizes equal")
    ratios = [f.ratio_error for f in folds]
    return LooCvResult(
        folds=tuple(folds),
        cv_r_squared=1.0 - ss_res / ss_tot,
        max_ratio_error=max(ratios),
        within_factor_2=sum(r <= 2.0 for r in ratios) / n,
    )


# ---------------------------------------------------------------------------
# Absolute lower bound
# ---------------------------------------------------------------------------

def round_half_up(x: float) -> int:
    """Round to the nearest integer with .5 going up (not banker's rounding)."""
    return math.floor(x + 0.5)


def absolute_lower_bound(predicted_size: float,
                         safety_factor: float = SAFETY_FACTOR) -> int:
    """Halve the predicted size, then round half-up to integer billions."""
    if predicted_size <= 0:
        raise FitError(f"predicted size must be > 0, got {predicted_size}")
    return round_half_up(safety_factor * predicted_size)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitArtifact:
    """Axis plus law, everything needed to score new profiles later."""

    axis: PrincipalAxis
    fit: ScalingLawFit

    def to_dict(self) -> dict:
        return {
            "axis": {
                "direction": [float(v) for v in self.axis.direction],
                "center": [float(v) for v in self.axis.center],
                "explained_variance": self.axis.explained_variance,
            },
            "law": {
                "A": self.fit.base_size,
                "B": self.fit.growth_rate,
                "r_squared": self.fit.r_squared,
                "reference_ids": list(self.fit.reference_ids),
            },
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, obj: dict) -> "FitArtifact":
        try:
            axis = PrincipalAxis(
                direction=np.asarray(obj["axis"]["direction"], dtype=float),
                center=np.asarray(obj["axis"]["center"], dtype=float),
                explained_variance=float(obj["axis"]["explained_variance"]),
            )
            law = ScalingLawFit(
                base_size=float(obj["law"]["A"]),
                growth_rate=float(obj["law"]["B"]),
                r_squared=float(obj["law"]["r_squared"]),
                reference_ids=tuple(obj["law"]["reference_ids"]),
            )
        except KeyError as exc:
            raise StorageError(f"fit artifact is missing field {exc}") from exc
        return cls(axis=axis, fit=law)

    @classmethod
    def load_json(cls, path: str | Path) -> "FitArtifact":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"cannot read fit artifact {path}: {exc}") from exc
        return cls.from_dict(obj)
