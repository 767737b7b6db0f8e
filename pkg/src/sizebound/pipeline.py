"""End-to-end orchestration: measure, fit, bound, evaluate, report.

Every stage is deterministic given (config, seed, cache): measurement
order is fixed, analysis is seeded, and report files are written with
explicit float formats so byte-identical reruns are testable.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .assumption import AssumptionReport, check_assumptions
from .config import MIN_REFERENCES_FOR_FIT, RunConfig, validate_config
from .corpus import (
    SamplingPlan,
    TextDocument,
    TextKind,
    default_manifest_path,
    read_corpus,
    sample_prefixes,
    validate_against_plan,
)
from .errors import (
    AnalysisError,
    AssemblyError,
    MeasurementError,
    ReplayMissError,
    SizeboundError,
)
from .latent_scaling import (
    FitArtifact,
    LooCvResult,
    PrincipalAxis,
    ScalingLawFit,
    absolute_lower_bound,
    first_component,
    fit_scaling_law,
    loo_cv,
    round_half_up,
    score_new_model,
)
from .model_client import (
    DEFAULT_TEMPLATES,
    ModelClient,
    ModelSpec,
    PromptTemplate,
    render_prompt,
    simulated_verdict,
)
from .pairwise import (
    TauPoint,
    relative_lower_bound,
    tau_sweep_evaluation,
    write_pairwise_csv,
    write_tau_sweep_csv,
)
from .profiles import (
    AccuracyCell,
    AccuracyProfile,
    build_profile,
    per_text_mean_accuracy,
    profiles_to_matrix,
    write_cells_csv,
)
from .zoo import default_popularity, popular_and_obscure, spread_popularity

log = logging.getLogger(__name__)

REPORT_CSV = "report.csv"
REPORT_META_JSON = "report_meta.json"
TAU_SWEEP_CSV = "fig3.csv"
LOOCV_CSV = "loocv.csv"
ASSUMPTION_JSON = "assumption.json"
FIT_JSON = "fit.json"
PAIRWISE_CSV = "pairwise.csv"
PROFILE_DIR = "profiles"
CELLS_DIR = "cells"
FIGURE_DIR = "figures"

CHARS_PER_TOKEN = 4


def _safe_name(model_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", model_id).strip("-") or "model"


# ---------------------------------------------------------------------------
# Corpus resolution
# ---------------------------------------------------------------------------

def load_documents(config: RunConfig) -> list[TextDocument]:
    manifest = (default_manifest_path() if config.corpus.manifest is None
                else config.corpus.manifest)
    documents = read_corpus(manifest)
    validate_against_plan(documents, sampling_plan(config))
    return documents


def sampling_plan(config: RunConfig) -> SamplingPlan:
    return SamplingPlan(
        lengths=tuple(config.corpus.lengths),
        samples_per_length=config.corpus.samples_per_length,
        seed=config.corpus.seed,
    )


def resolve_specs(config: RunConfig, documents: Sequence[TextDocument]) -> list[ModelSpec]:
    """Materialize model specs, spreading default popularity over source texts
    for simulator entries that did not pin their own weights."""
    popularity = default_popularity(documents)
    return [entry.to_spec(popularity) for entry in config.models]


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------

@dataclass
class ModelMeasurement:
    model_id: str
    source_cells: list[AccuracyCell]
    baseline_cells: list[AccuracyCell]
    n_queries: int


def measure_model(client: ModelClient, spec: ModelSpec,
                  documents: Sequence[TextDocument], plan: SamplingPlan,
                  templates: Sequence[PromptTemplate] = DEFAULT_TEMPLATES,
                  ) -> ModelMeasurement:
    """Measure every (text, length) cell for one model.

    Simulated models without a cache skip the per-template query loop: the
    template-shared position verdict is drawn directly, which yields the
    same cells as the full loop (the simulator gives all five templates
    one draw) at a fifth of the calls. Any cache-backed or live model goes
    through the record path so results persist.
    """
    fast = spec.is_simulated and client.cache is None and not client.replay_only
    source_cells: list[AccuracyCell] = []
    baseline_cells: list[AccuracyCell] = []
    n_queries = 0
    for doc in documents:
        per_length = sample_prefixes(doc, plan)
        for length in plan.lengths:
            samples = per_length[length]
            if not samples:
                raise MeasurementError(
                    f"{spec.model_id}: no eligible positions for {doc.text_id} "
                    f"at length {length}"
                )
            n_correct = 0
            for sample in samples:
                if fast:
                    verdict = simulated_verdict(
                        spec.simulator, spec.model_id, sample.text_id,
                        sample.position, sample.length,
                    )
                    client.stats.simulate_calls += 1
                    n_queries += 1
                else:
                    records = [client.query(spec, sample, t) for t in templates]
                    n_queries += len(records)
                    verdict = any(r.correct for r in records)
                n_correct += bool(verdict)
            cell = AccuracyCell(
                text_id=doc.text_id,
                length=length,
                n_positions=len(samples),
                n_correct=n_correct,
            )
            if doc.kind is TextKind.SOURCE:
                source_cells.append(cell)
            else:
                baseline_cells.append(cell)
    return ModelMeasurement(
        model_id=spec.model_id,
        source_cells=source_cells,
        baseline_cells=baseline_cells,
        n_queries=n_queries,
    )


@dataclass
class MeasureOutcome:
    profiles: dict[str, AccuracyProfile] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def run_measure(config: RunConfig, client: ModelClient,
                documents: Sequence[TextDocument] | None = None,
                output_dir: str | Path | None = None,
                model_ids: Sequence[str] | None = None) -> MeasureOutcome:
    """Measure all (or the named) models; write cells and profiles.

    A failing model is recorded and skipped so one dead endpoint cannot
    sink an expensive run; callers decide whether partial output is fatal.
    """
    if documents is None:
        documents = load_documents(config)
    plan = sampling_plan(config)
    specs = resolve_specs(config, documents)
    if model_ids is not None:
        wanted = set(model_ids)
        unknown = wanted - {s.model_id for s in specs}
        if unknown:
            raise MeasurementError(f"unknown model ids requested: {sorted(unknown)}")
        specs = [s for s in specs if s.model_id in wanted]
    out_dir = Path(output_dir if output_dir is not None else config.output_dir)
    (out_dir / PROFILE_DIR).mkdir(parents=True, exist_ok=True)
    (out_dir / CELLS_DIR).mkdir(parents=True, exist_ok=True)
    outcome = MeasureOutcome()
    for spec in specs:
        try:
            measurement = measure_model(client, spec, documents, plan)
            profile = build_profile(
                spec.model_id,
                measurement.source_cells,
                measurement.baseline_cells,
                plan.lengths,
            )
        except (SizeboundError, ReplayMissError) as exc:
            log.warning("measurement failed for %s: %s", spec.model_id, exc)
            outcome.failures[spec.model_id] = str(exc)
            continue
        all_cells = measurement.source_cells + measurement.baseline_cells
        write_cells_csv(out_dir / CELLS_DIR / f"{_safe_name(spec.model_id)}.csv",
                        spec.model_id, all_cells)
        profile.save_json(out_dir / PROFILE_DIR / f"{_safe_name(spec.model_id)}.json")
        outcome.profiles[spec.model_id] = profile
        log.info("measured %s: %d queries, %d cells", spec.model_id,
                 measurement.n_queries, len(all_cells))
    return outcome


def load_profiles(config: RunConfig, output_dir: str | Path | None = None,
                  ) -> dict[str, AccuracyProfile]:
    out_dir = Path(output_dir if output_dir is not None else config.output_dir)
    profiles: dict[str, AccuracyProfile] = {}
    for entry in config.models:
        path = out_dir / PROFILE_DIR / f"{_safe_name(entry.model_id)}.json"
        if path.exists():
            profiles[entry.model_id] = AccuracyProfile.load_json(path)
    return profiles


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def reference_matrix(config: RunConfig, profiles: Mapping[str, AccuracyProfile],
                     ) -> tuple[np.ndarray, list[float], list[str]]:
    refs = [m for m in config.reference_entries() if m.model_id in profiles]
    if len(refs) < MIN_REFERENCES_FOR_FIT:
        raise AnalysisError(
            f"need {MIN_REFERENCES_FOR_FIT} measured dense references to fit, "
            f"have {len(refs)}"
        )
    ordered = [profiles[m.model_id] for m in refs]
    return (profiles_to_matrix(ordered),
            [float(m.known_size) for m in refs],
            [m.model_id for m in refs])


def run_fit(config: RunConfig, profiles: Mapping[str, AccuracyProfile],
            output_dir: str | Path | None = None,
            with_cv: bool = True) -> tuple[FitArtifact, LooCvResult | None]:
    """Fit the capability axis and scaling law on measured references."""
    matrix, sizes, ids = reference_matrix(config, profiles)
    inf = config.inference
    axis = first_component(matrix, tol=inf.pca_tol, max_iter=inf.pca_max_iter)
    fit = fit_scaling_law(axis.project_rows(matrix), sizes, ids)
    artifact = FitArtifact(axis=axis, fit=fit)
    cv = None
    if with_cv and len(ids) >= 4:
        cv = loo_cv(matrix, sizes, ids, tol=inf.pca_tol, max_iter=inf.pca_max_iter)
    out_dir = Path(output_dir if output_dir is not None else config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = artifact.to_dict()
    if cv is not None:
        payload["cv"] = {
            "r_squared": cv.cv_r_squared,
            "max_ratio_error": cv.max_ratio_error,
            "within_factor_2": cv.within_factor_2,
        }
        write_loocv_csv(out_dir / LOOCV_CSV, cv)
    (out_dir / FIT_JSON).write_text(json.dumps(payload, indent=2) + "\n",
                                    encoding="utf-8")
    log.info("fit: growth per unit score %.4f, in-sample R^2 %.4f",
             fit.growth_rate, fit.r_squared)
    return artifact, cv


def write_loocv_csv(path: str | Path, cv: LooCvResult) -> None:
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["model_id", "true_size", "predicted_size", "ratio_error"])
        for fold in cv.folds:
            writer.writerow([fold.model_id, f"{fold.true_size:g}",
                             f"{fold.predicted_size:.4f}", f"{fold.ratio_error:.4f}"])


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

def combine_bounds(abs_lb: int | None, rel_lb: int | None) -> tuple[int, str]:
    """Best bound and its source. Ties go to the relative method: when both
    routes agree on the number, the significance test is direct evidence
    while the halved prediction is heuristic."""
    if abs_lb is None and rel_lb is None:
        raise AnalysisError("neither an absolute nor a relative bound is available")
    if rel_lb is not None and (abs_lb is None or rel_lb >= abs_lb):
        return rel_lb, "Rel"
    return abs_lb, "Abs"


@dataclass(frozen=True)
class BoundRow:
    model_id: str
    known_size: float | None
    best_lb: int
    tightness_pct: int | None
    source: str
    abs_size: float | None
    abs_lb: int | None
    rel_lb: int | None


def run_bound(config: RunConfig, profiles: Mapping[str, AccuracyProfile],
              artifact: FitArtifact | None = None,
              output_dir: str | Path | None = None) -> list[BoundRow]:
    """Bound every target model; write report.csv plus pairwise detail.

    The absolute route needs a fit artifact (computed on the fly when
    enough references are measured); the relative route needs measured
    reference profiles. Skipping a route is recorded in report metadata,
    but at least one must be available.
    """
    refs = [(profiles[m.model_id], float(m.known_size))
            for m in config.reference_entries() if m.model_id in profiles]
    notes: list[str] = []
    if artifact is None:
        try:
            artifact, _ = run_fit(config, profiles, output_dir=output_dir, with_cv=False)
        except AnalysisError as exc:
            notes.append(f"absolute route skipped: {exc}")
            artifact = None
    if artifact is None and not refs:
        raise AnalysisError("no fit artifact and no measured references: cannot bound")
    inf = config.inference
    rows: list[BoundRow] = []
    pairwise_results = []
    for entry in config.target_entries():
        profile = profiles.get(entry.model_id)
        if profile is None:
            log.warning("no profile for target %s; skipped", entry.model_id)
            notes.append(f"target {entry.model_id} skipped: no profile")
            continue
        abs_size = abs_lb = None
        if artifact is not None:
            _, predicted = score_new_model(artifact.axis, artifact.fit, profile.values)
            abs_size = predicted
            abs_lb = absolute_lower_bound(predicted, inf.safety_factor)
        rel_lb = None
        if refs:
            rel_size, results = relative_lower_bound(
                profile, refs,
                alpha=inf.alpha_sig,
                exact_threshold=inf.exact_threshold,
                resamples=inf.resamples,
                seed=inf.permutation_seed,
            )
            pairwise_results.extend(results)
            rel_lb = round_half_up(rel_size) if rel_size is not None else None
        best, source = combine_bounds(abs_lb, rel_lb)
        tightness = None
        if entry.known_size:
            tightness = round(100.0 * best / entry.known_size)
        rows.append(BoundRow(
            model_id=entry.model_id,
            known_size=entry.known_size,
            best_lb=best,
            tightness_pct=tightness,
            source=source,
            abs_size=abs_size,
            abs_lb=abs_lb,
            rel_lb=rel_lb,
        ))
    rows.sort(key=lambda r: (-r.best_lb, r.model_id))
    out_dir = Path(output_dir if output_dir is not None else config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(out_dir / REPORT_CSV, rows)
    meta = {
        "tie_policy": "rel-wins",
        "safety_factor": inf.safety_factor,
        "alpha_sig": inf.alpha_sig,
        "architecture_policy": "unknown and mixture-routed targets receive bounds only",
        "notes": notes,
    }
    (out_dir / REPORT_META_JSON).write_text(json.dumps(meta, indent=2) + "\n",
                                            encoding="utf-8")
    if pairwise_results:
        write_pairwise_csv(out_dir / PAIRWISE_CSV, pairwise_results)
    return rows


def write_report_csv(path: str | Path, rows: Sequence[BoundRow]) -> None:
    """Size columns in integer billions (half-up); tightness in whole percent."""
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["model_id", "known_size", "best_lb", "tightness_pct",
                         "source", "abs_size", "abs_lb", "rel_lb"])
        for r in rows:
            writer.writerow([
                r.model_id,
                f"{r.known_size:g}" if r.known_size is not None else "",
                r.best_lb,
                r.tightness_pct if r.tightness_pct is not None else "",
                r.source,
                round_half_up(r.abs_size) if r.abs_size is not None else "",
                r.abs_lb if r.abs_lb is not None else "",
                r.rel_lb if r.rel_lb is not None else "",
            ])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationOutputs:
    cv: LooCvResult
    tau_points: list[TauPoint]
    assumptions: AssumptionReport


def run_evaluate(config: RunConfig, profiles: Mapping[str, AccuracyProfile],
                 output_dir: str | Path | None = None,
                 render_figures: bool = True) -> EvaluationOutputs:
    """Validate the method on measured references with known sizes."""
    matrix, sizes, ids = reference_matrix(config, profiles)
    inf = config.inference
    out_dir = Path(output_dir if output_dir is not None else config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, cv = run_fit(config, profiles, output_dir=out_dir, with_cv=True)
    if cv is None:
        raise AnalysisError("cross-validation needs at least 4 measured references")
    ref_profiles = [profiles[i] for i in ids]
    tau_points = tau_sweep_evaluation(
        ref_profiles, sizes,
        taus=inf.tau_grid,
        alpha=inf.alpha_sig,
        exact_threshold=inf.exact_threshold,
        resamples=inf.resamples,
        seed=inf.permutation_seed,
    )
    write_tau_sweep_csv(out_dir / TAU_SWEEP_CSV, tau_points)
    assumptions = assumption_report(config, profiles, out_dir)
    if render_figures:
        from . import figures

        fig_dir = out_dir / FIGURE_DIR
        fig_dir.mkdir(parents=True, exist_ok=True)
        axis = first_component(matrix, tol=inf.pca_tol, max_iter=inf.pca_max_iter)
        fit = fit_scaling_law(axis.project_rows(matrix), sizes, ids)
        figures.plot_scaling_law(fig_dir / "scaling_law.png",
                                 axis.project_rows(matrix), sizes, ids, fit)
        figures.plot_tau_sweep(fig_dir / "tau_sweep.png", tau_points)
        figures.plot_loocv(fig_dir / "loocv.png", cv)
        figures.plot_agreement(fig_dir / "agreement.png", assumptions.agreement)
    return EvaluationOutputs(cv=cv, tau_points=tau_points, assumptions=assumptions)


def assumption_report(config: RunConfig, profiles: Mapping[str, AccuracyProfile],
                      output_dir: str | Path | None = None) -> AssumptionReport:
    """Rank-agreement and popularity checks over all measured profiles."""
    if len(profiles) < 2:
        raise AnalysisError("assumption checks need at least 2 measured models")
    per_model = {
        model_id: per_text_mean_accuracy(profile)
        for model_id, profile in sorted(profiles.items())
    }
    popular: list[str] = []
    obscure: list[str] = []
    weights = _declared_popularity(config)
    if not weights and any(m.simulator is not None for m in config.models):
        # entries without pinned weights got the default spread over sorted
        # source ids at measure time; the profile layout preserves that order
        first = next(iter(per_model))
        weights = spread_popularity(profiles[first].text_ids)
    if weights:
        popular, obscure = popular_and_obscure(weights)
    report = check_assumptions(per_model, popular, obscure,
                               bar=config.inference.agreement_bar)
    if output_dir is not None:
        out_dir = Path(output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save_json(out_dir / ASSUMPTION_JSON)
    return report


def _declared_popularity(config: RunConfig) -> dict[str, float]:
    """Popularity weights shared by simulator entries, if any pin them."""
    for entry in config.models:
        if entry.simulator is not None and entry.simulator.popularity:
            return dict(entry.simulator.popularity)
    return {}


# ---------------------------------------------------------------------------
# Cost estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostEstimate:
    model_id: str
    n_queries: int
    est_input_tokens: int
    mean_prompt_chars: float


def estimate_cost(config: RunConfig, documents: Sequence[TextDocument] | None = None,
                  templates: Sequence[PromptTemplate] = DEFAULT_TEMPLATES,
                  ) -> list[CostEstimate]:
    """Per-model query count and input-token estimate.

    Queries scale as samples * lengths * templates * texts. Token cost uses
    the mean rendered-prompt length over one sampled position per (text,
    length, template) cell, at the 4-chars-per-token heuristic.
    """
    if documents is None:
        documents = load_documents(config)
    plan = sampling_plan(config)
    n_queries = (plan.samples_per_length * len(plan.lengths)
                 * len(templates) * len(documents))
    char_counts: list[int] = []
    for doc in documents:
        per_length = sample_prefixes(doc, plan)
        for length in plan.lengths:
            samples = per_length[length]
            if not samples:
                continue
            probe = samples[0]
            for template in templates:
                system_text, user_text = render_prompt(template, probe.prefix)
                char_counts.append(len(user_text) + len(system_text or ""))
    mean_chars = float(np.mean(char_counts)) if char_counts else 0.0
    tokens_per_query = math.ceil(mean_chars / CHARS_PER_TOKEN)
    return [
        CostEstimate(
            model_id=entry.model_id,
            n_queries=n_queries,
            est_input_tokens=n_queries * tokens_per_query,
            mean_prompt_chars=mean_chars,
        )
        for entry in config.models
    ]


# ---------------------------------------------------------------------------
# One-shot report
# ---------------------------------------------------------------------------

def run_report(config: RunConfig, client: ModelClient,
               output_dir: str | Path | None = None,
               render_figures: bool = True) -> tuple[MeasureOutcome, list[BoundRow]]:
    """measure -> fit -> bound in one pass; figures alongside the CSV."""
    validate_config(config, require_references=True)
    documents = load_documents(config)
    outcome = run_measure(config, client, documents, output_dir=output_dir)
    if not outcome.profiles:
        raise MeasurementError(
            "no model produced a profile; failures: "
            + "; ".join(f"{m}: {e}" for m, e in outcome.failures.items())
        )
    artifact, _ = run_fit(config, outcome.profiles, output_dir=output_dir)
    rows = run_bound(config, outcome.profiles, artifact, output_dir=output_dir)
    if render_figures and rows:
        from . import figures

        out_dir = Path(output_dir if output_dir is not None else config.output_dir)
        fig_dir = out_dir / FIGURE_DIR
        fig_dir.mkdir(parents=True, exist_ok=True)
        matrix, sizes, ids = reference_matrix(config, outcome.profiles)
        figures.plot_scaling_law(
            fig_dir / "scaling_law.png",
            artifact.axis.project_rows(matrix), sizes, ids, artifact.fit,
            extra_scores={
                r.model_id: artifact.axis.project(outcome.profiles[r.model_id].values)
                for r in rows if r.model_id in outcome.profiles
            },
        )
        figures.plot_bounds(fig_dir / "bounds.png", rows)
    return outcome, rows
