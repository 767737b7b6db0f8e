"""Command-line interface.

Exit codes: 0 success, 2 configuration or corpus problem, 3 incomplete
measurement (including cache replay misses), 4 analysis failure.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import sys
from pathlib import Path

import click

from . import pipeline
from .config import RunConfig, load_config, validate_config
from .errors import (
    AnalysisError,
    ConfigError,
    CorpusError,
    MeasurementError,
    SizeboundError,
    StorageError,
)
from .latent_scaling import FitArtifact
from .model_client import HttpTransport, ModelClient, QueryCache, TokenBucket

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_ANALYSIS = 4


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (ConfigError, CorpusError)):
        return EXIT_CONFIG
    if isinstance(exc, (MeasurementError, StorageError)):
        return EXIT_PARTIAL
    if isinstance(exc, AnalysisError):
        return EXIT_ANALYSIS
    return EXIT_ANALYSIS


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SizeboundError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code(exc))

    return wrapper


@dataclasses.dataclass
class CliState:
    config_path: str | None = None
    seed: int | None = None
    cache_path: str | None = None
    offline: bool = False

    def load_config(self) -> RunConfig:
        if self.config_path is None:
            raise ConfigError("no config file given; pass --config PATH")
        config = load_config(self.config_path)
        if self.seed is not None:
            config = dataclasses.replace(
                config, corpus=dataclasses.replace(config.corpus, seed=self.seed)
            )
        if self.cache_path is not None:
            config = dataclasses.replace(config, cache_path=self.cache_path)
        return config

    def make_client(self, config: RunConfig, replay_only: bool = False) -> ModelClient:
        cache = QueryCache(config.cache_path) if config.cache_path else None
        transport = None
        if not self.offline and not replay_only:
            t = config.transport
            transport = HttpTransport(
                timeout=t.timeout,
                max_attempts=t.max_attempts,
                rate_limiter=TokenBucket(t.burst, t.requests_per_second),
            )
        return ModelClient(
            cache=cache,
            transport=transport,
            offline=self.offline,
            replay_only=replay_only,
            max_in_flight=config.transport.max_in_flight,
        )


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Run configuration file (JSON; TOML on Python 3.11+).")
@click.option("--seed", type=int, default=None,
              help="Override the corpus sampling seed.")
@click.option("--cache", "cache_path", type=click.Path(), default=None,
              help="Override the query cache path (append-only JSONL).")
@click.option("--offline", is_flag=True,
              help="Forbid network: simulators and cached records only.")
@click.option("-v", "--verbose", is_flag=True, help="Verbose logging.")
@click.pass_context
def main(ctx, config_path, seed, cache_path, offline, verbose):
    """Conservative parameter-count lower bounds from next-word recall."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = CliState(config_path=config_path, seed=seed,
                       cache_path=cache_path, offline=offline)


@main.command("validate-config")
@click.pass_obj
@_handle_errors
def validate_config_cmd(state: CliState):
    """Check the config file and report problems with precise locations."""
    config = state.load_config()
    warnings = validate_config(config, require_references=False)
    click.echo(f"config ok: {len(config.models)} models "
               f"({len(config.reference_entries())} references, "
               f"{len(config.target_entries())} targets)")
    for w in warnings:
        click.echo(f"warning: {w}")


@main.command("estimate-cost")
@click.pass_obj
@_handle_errors
def estimate_cost_cmd(state: CliState):
    """Query and input-token estimates per model, before spending anything."""
    config = state.load_config()
    estimates = pipeline.estimate_cost(config)
    total_q = total_t = 0
    for est in estimates:
        click.echo(f"{est.model_id}: {est.n_queries} queries, "
                   f"~{est.est_input_tokens} input tokens "
                   f"(mean prompt {est.mean_prompt_chars:.0f} chars)")
        total_q += est.n_queries
        total_t += est.est_input_tokens
    click.echo(f"total: {total_q} queries, ~{total_t} input tokens")


def _echo_measure_outcome(outcome: pipeline.MeasureOutcome) -> None:
    for model_id in sorted(outcome.profiles):
        click.echo(f"measured {model_id}: profile dimension "
                   f"{outcome.profiles[model_id].dimension}")
    for model_id, reason in sorted(outcome.failures.items()):
        click.echo(f"FAILED {model_id}: {reason}", err=True)


@main.command("measure")
@click.option("--model", "models", multiple=True,
              help="Measure only these model ids (repeatable).")
@click.option("--output", type=click.Path(), default=None,
              help="Output directory (default: config output_dir).")
@click.pass_obj
@_handle_errors
def measure_cmd(state: CliState, models, output):
    """Run the measurement protocol and write cells and profiles."""
    config = state.load_config()
    client = state.make_client(config)
    outcome = pipeline.run_measure(config, client, output_dir=output,
                                   model_ids=list(models) or None)
    _echo_measure_outcome(outcome)
    click.echo(f"queries: {client.stats.simulate_calls} simulated, "
               f"{client.stats.network_calls} network, "
               f"{client.stats.cache_hits} cache hits, "
               f"{client.stats.failures} failures")
    if outcome.partial:
        sys.exit(EXIT_PARTIAL)


@main.command("profile")
@click.option("--output", type=click.Path(), default=None)
@click.pass_obj
@_handle_errors
def profile_cmd(state: CliState, output):
    """Rebuild profiles from the query cache without issuing any queries."""
    config = state.load_config()
    if not config.cache_path:
        raise ConfigError("profile rebuild needs a cache (--cache or cache_path)")
    client = state.make_client(config, replay_only=True)
    outcome = pipeline.run_measure(config, client, output_dir=output)
    _echo_measure_outcome(outcome)
    if outcome.partial:
        sys.exit(EXIT_PARTIAL)


@main.command("fit")
@click.option("--output", type=click.Path(), default=None)
@click.pass_obj
@_handle_errors
def fit_cmd(state: CliState, output):
    """Fit the capability axis and scaling law on measured references."""
    config = state.load_config()
    validate_config(config, require_references=True)
    profiles = pipeline.load_profiles(config, output_dir=output)
    artifact, cv = pipeline.run_fit(config, profiles, output_dir=output)
    click.echo(f"law: size = {artifact.fit.base_size:.3f} * "
               f"exp({artifact.fit.growth_rate:.4f} * score), "
               f"in-sample R^2 = {artifact.fit.r_squared:.4f}")
    if cv is not None:
        click.echo(f"leave-one-out: R^2 = {cv.cv_r_squared:.4f}, "
                   f"worst ratio {cv.max_ratio_error:.2f}, "
                   f"{100 * cv.within_factor_2:.0f}% within factor 2")


@main.command("bound")
@click.option("--output", type=click.Path(), default=None)
@click.pass_obj
@_handle_errors
def bound_cmd(state: CliState, output):
    """Compute absolute and relative lower bounds for target models."""
    config = state.load_config()
    profiles = pipeline.load_profiles(config, output_dir=output)
    out_dir = Path(output if output is not None else config.output_dir)
    artifact = None
    fit_path = out_dir / pipeline.FIT_JSON
    if fit_path.exists():
        artifact = FitArtifact.load_json(fit_path)
    rows = pipeline.run_bound(config, profiles, artifact, output_dir=output)
    for r in rows:
        rel = r.rel_lb if r.rel_lb is not None else "-"
        absolute = r.abs_lb if r.abs_lb is not None else "-"
        click.echo(f"{r.model_id}: best lower bound {r.best_lb}B via {r.source} "
                   f"(abs {absolute}, rel {rel})")
    click.echo(f"report written to {out_dir / pipeline.REPORT_CSV}")


@main.command("evaluate")
@click.option("--output", type=click.Path(), default=None)
@click.option("--no-figures", is_flag=True, help="Skip PNG rendering.")
@click.pass_obj
@_handle_errors
def evaluate_cmd(state: CliState, output, no_figures):
    """Validate the method on references: cross-validation and margin sweep."""
    config = state.load_config()
    profiles = pipeline.load_profiles(config, output_dir=output)
    outputs = pipeline.run_evaluate(config, profiles, output_dir=output,
                                    render_figures=not no_figures)
    click.echo(f"leave-one-out R^2 = {outputs.cv.cv_r_squared:.4f}, "
               f"{100 * outputs.cv.within_factor_2:.0f}% within factor 2")
    first = outputs.tau_points[0]
    click.echo(f"margin {first.tau:g}: precision {first.precision:.3f}, "
               f"recall {first.recall:.3f}, accuracy {first.accuracy:.3f}")
    click.echo(f"rank agreement: mean {outputs.assumptions.agreement.mean_rho:.3f}, "
               f"min {outputs.assumptions.agreement.min_rho:.3f}")


@main.command("assumption-check")
@click.option("--output", type=click.Path(), default=None)
@click.pass_obj
@_handle_errors
def assumption_check_cmd(state: CliState, output):
    """Rank-agreement and popularity checks over measured profiles."""
    config = state.load_config()
    profiles = pipeline.load_profiles(config, output_dir=output)
    report = pipeline.assumption_report(
        config, profiles,
        output_dir=Path(output if output is not None else config.output_dir),
    )
    ag = report.agreement
    click.echo(f"rank agreement over {len(ag.pair_rhos)} model pairs: "
               f"mean {ag.mean_rho:.3f}, min {ag.min_rho:.3f}, "
               f"{100 * ag.frac_above_bar:.0f}% above {ag.bar:g}")
    if report.popularity is not None:
        click.echo(f"popularity check: U = {report.popularity.u_statistic:g}, "
                   f"one-sided p = {report.popularity.p_value:.4g} "
                   f"({report.popularity.method})")


@main.command("report")
@click.option("--output", type=click.Path(), default=None)
@click.option("--no-figures", is_flag=True, help="Skip PNG rendering.")
@click.pass_obj
@_handle_errors
def report_cmd(state: CliState, output, no_figures):
    """One-shot run: measure, fit, bound, and render the report."""
    config = state.load_config()
    client = state.make_client(config)
    outcome, rows = pipeline.run_report(config, client, output_dir=output,
                                        render_figures=not no_figures)
    _echo_measure_outcome(outcome)
    for r in rows:
        click.echo(f"{r.model_id}: best lower bound {r.best_lb}B via {r.source}")
    out_dir = Path(output if output is not None else config.output_dir)
    click.echo(f"report written to {out_dir / pipeline.REPORT_CSV}")
    if outcome.partial:
        sys.exit(EXIT_PARTIAL)


if __name__ == "__main__":
    main()
