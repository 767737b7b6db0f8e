import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from sizebound import pipeline, zoo
from sizebound.cli import main as cli_main
from sizebound.profiles import build_profile
from sizebound.config import parse_config
from sizebound.corpus import SamplingPlan, sample_prefixes
from sizebound.errors import AnalysisError, CorpusError
from sizebound.model_client import (
    DEFAULT_TEMPLATES,
    ModelClient,
    QueryCache,
    render_prompt,
)
from sizebound.pairwise import block_scores, sign_permutation_test, tau_sweep_evaluation
from sizebound.pipeline import (
    ASSUMPTION_JSON,
    FIT_JSON,
    LOOCV_CSV,
    PAIRWISE_CSV,
    REPORT_CSV,
    REPORT_META_JSON,
    TAU_SWEEP_CSV,
    combine_bounds,
)

REF_SIZES = (10.0, 25.0, 60.0, 140.0)


def small_config_dict(manifest, out_dir, with_live=False):
    models = [
        {"model_id": f"ref-{s:g}b", "role": "reference", "architecture": "dense",
         "known_size": s, "simulator": {"pseudo_size": s}}
        for s in REF_SIZES
    ]
    models.append({"model_id": "target-45", "known_size": 45.0,
                   "architecture": "moe", "simulator": {"pseudo_size": 45.0}})
    models.append({"model_id": "mystery", "simulator": {"pseudo_size": 90.0}})
    if with_live:
        models.append({"model_id": "live-model", "endpoint": "https://api.invalid/v1",
                       "credential_ref": "NO_SUCH_KEY"})
    return {
        "corpus": {"manifest": str(manifest), "lengths": [4, 8],
                   "samples_per_length": 12, "seed": 99},
        "models": models,
        "inference": {"resamples": 600, "permutation_seed": 5},
        "output_dir": str(out_dir),
    }


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    docs = zoo.synthetic_documents(n_source=8, n_baseline=2, n_tokens=120, seed=11)
    manifest = zoo.write_corpus_files(docs, root)
    return docs, manifest


@pytest.fixture(scope="module")
def small_config(small_corpus, tmp_path_factory):
    _, manifest = small_corpus
    out = tmp_path_factory.mktemp("out")
    return parse_config(small_config_dict(manifest, out))


@pytest.fixture(scope="module")
def measured(small_config, small_corpus):
    docs, _ = small_corpus
    outcome = pipeline.run_measure(small_config, ModelClient(), documents=docs)
    assert not outcome.partial
    return outcome


class TestDocumentsAndSpecs:
    def test_builtin_manifest_needs_operator_texts(self):
        """The shipped manifest pins identities only; text files are supplied
        by the operator, so loading it without them fails with a clear error."""
        config = parse_config({"models": []})
        with pytest.raises(CorpusError, match="cannot read"):
            pipeline.load_documents(config)

    def test_written_corpus_round_trip(self, small_config, small_corpus):
        docs, _ = small_corpus
        loaded = pipeline.load_documents(small_config)
        assert [d.text_id for d in loaded] == [d.text_id for d in docs]
        assert loaded[0].tokens == docs[0].tokens

    def test_resolve_specs_spreads_popularity(self, small_config, small_corpus):
        docs, _ = small_corpus
        specs = pipeline.resolve_specs(small_config, docs)
        weights = specs[0].simulator.popularity_weights
        assert set(weights) == {d.text_id for d in docs if d.text_id.startswith("src")}
        assert min(weights.values()) == pytest.approx(zoo.POPULARITY_LOW)
        assert max(weights.values()) == pytest.approx(zoo.POPULARITY_HIGH)
        # all simulator entries share the same spread
        assert specs[1].simulator.popularity_weights == weights

    def test_resolve_specs_respects_pins(self, small_corpus):
        docs, manifest = small_corpus
        pins = {d.text_id: 0.5 for d in docs if d.text_id.startswith("src")}
        config = parse_config({
            "corpus": {"manifest": str(manifest), "lengths": [4, 8]},
            "models": [{"model_id": "m",
                        "simulator": {"pseudo_size": 5.0, "popularity": pins}}],
        })
        specs = pipeline.resolve_specs(config, docs)
        assert specs[0].simulator.popularity_weights == pins


class TestMeasurement:
    def test_fast_and_cached_paths_agree(self, small_config, small_corpus):
        """The no-cache shortcut must produce the same cells as the full
        five-template record path."""
        docs, _ = small_corpus
        plan = pipeline.sampling_plan(small_config)
        spec = pipeline.resolve_specs(small_config, docs)[0]

        fast_client = ModelClient()
        fast = pipeline.measure_model(fast_client, spec, docs, plan)
        slow_client = ModelClient(cache=QueryCache(None))
        slow = pipeline.measure_model(slow_client, spec, docs, plan)

        assert fast.source_cells == slow.source_cells
        assert fast.baseline_cells == slow.baseline_cells
        assert slow.n_queries == 5 * fast.n_queries
        assert fast_client.stats.simulate_calls == fast.n_queries

    def test_cell_count_and_positions(self, measured, small_config):
        profile = measured.profiles["ref-10b"]
        assert len(profile.text_ids) == 8
        assert profile.lengths == (4, 8)
        assert profile.dimension == 2 * 8 * 2

    def test_outputs_on_disk(self, measured, small_config):
        out = Path(small_config.output_dir)
        for entry in small_config.models:
            assert (out / "profiles" / f"{entry.model_id}.json").exists()
            assert (out / "cells" / f"{entry.model_id}.csv").exists()
        reloaded = pipeline.load_profiles(small_config)
        assert set(reloaded) == set(measured.profiles)
        assert np.array_equal(reloaded["mystery"].values,
                              measured.profiles["mystery"].values)

    def test_live_failure_is_partial_not_fatal(self, small_corpus, tmp_path):
        docs, manifest = small_corpus
        config = parse_config(small_config_dict(manifest, tmp_path, with_live=True))
        outcome = pipeline.run_measure(config, ModelClient(offline=True),
                                       documents=docs)
        assert outcome.partial
        assert set(outcome.failures) == {"live-model"}
        assert "no cached record" in outcome.failures["live-model"]
        assert len(outcome.profiles) == 6

    def test_unknown_model_id_rejected(self, small_config, small_corpus):
        docs, _ = small_corpus
        with pytest.raises(Exception, match="nope"):
            pipeline.run_measure(small_config, ModelClient(), documents=docs,
                                 model_ids=["nope"])


class TestCostEstimate:
    def test_query_count_formula(self, small_config, small_corpus):
        docs, _ = small_corpus
        estimates = pipeline.estimate_cost(small_config, docs)
        assert len(estimates) == len(small_config.models)
        # samples * lengths * templates * texts
        assert estimates[0].n_queries == 12 * 2 * 5 * 10
        assert all(e.n_queries == estimates[0].n_queries for e in estimates)

    def test_halving_samples_halves_queries(self, small_corpus, tmp_path):
        docs, manifest = small_corpus
        base = small_config_dict(manifest, tmp_path)
        half = json.loads(json.dumps(base))
        half["corpus"]["samples_per_length"] = 6
        q_base = pipeline.estimate_cost(parse_config(base), docs)[0].n_queries
        q_half = pipeline.estimate_cost(parse_config(half), docs)[0].n_queries
        assert q_half * 2 == q_base

    def test_token_estimate_close_to_full_render(self, small_config, small_corpus):
        """Probe-based token estimate vs rendering every single prompt."""
        docs, _ = small_corpus
        plan = pipeline.sampling_plan(small_config)
        total_chars = 0
        total_prompts = 0
        for doc in docs:
            per_length = sample_prefixes(doc, plan)
            for length in plan.lengths:
                for sample in per_length[length]:
                    for template in DEFAULT_TEMPLATES:
                        system_text, user_text = render_prompt(template, sample.prefix)
                        total_chars += len(user_text) + len(system_text or "")
                        total_prompts += 1
        exact_tokens = total_prompts * math.ceil(
            total_chars / total_prompts / pipeline.CHARS_PER_TOKEN)
        estimate = pipeline.estimate_cost(small_config, docs)[0]
        assert estimate.n_queries == total_prompts
        assert abs(estimate.est_input_tokens - exact_tokens) <= 0.2 * exact_tokens


class TestCombineBounds:
    def test_both_none_raises(self):
        with pytest.raises(AnalysisError):
            combine_bounds(None, None)

    @pytest.mark.parametrize("abs_lb,rel_lb,expected", [
        (10, None, (10, "Abs")),
        (None, 10, (10, "Rel")),
        (12, 10, (12, "Abs")),
        (10, 12, (12, "Rel")),
        (10, 10, (10, "Rel")),  # ties go to the significance test
    ])
    def test_cases(self, abs_lb, rel_lb, expected):
        assert combine_bounds(abs_lb, rel_lb) == expected


class TestFitBoundEvaluate:
    def test_run_fit_outputs(self, small_config, measured):
        artifact, cv = pipeline.run_fit(small_config, measured.profiles)
        out = Path(small_config.output_dir)
        payload = json.loads((out / FIT_JSON).read_text())
        assert set(payload) >= {"axis", "law", "cv"}
        assert payload["law"]["A"] == pytest.approx(artifact.fit.base_size)
        assert payload["law"]["B"] == pytest.approx(artifact.fit.growth_rate)
        assert cv is not None and len(cv.folds) == len(REF_SIZES)
        with open(out / LOOCV_CSV) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(REF_SIZES)
        assert {r["model_id"] for r in rows} == {f"ref-{s:g}b" for s in REF_SIZES}

    def test_run_bound_report(self, small_config, measured):
        rows = pipeline.run_bound(small_config, measured.profiles)
        assert [r.model_id for r in rows][:1]  # at least one target bounded
        assert {r.model_id for r in rows} == {"target-45", "mystery"}
        by_id = {r.model_id: r for r in rows}
        assert by_id["target-45"].tightness_pct == round(
            100.0 * by_id["target-45"].best_lb / 45.0)
        assert by_id["mystery"].tightness_pct is None
        # sorted by best bound descending
        assert [r.best_lb for r in rows] == sorted(
            (r.best_lb for r in rows), reverse=True)

        out = Path(small_config.output_dir)
        with open(out / REPORT_CSV) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = list(reader)
        assert header == ["model_id", "known_size", "best_lb", "tightness_pct",
                          "source", "abs_size", "abs_lb", "rel_lb"]
        assert len(data) == 2
        mystery = next(r for r in data if r[0] == "mystery")
        assert mystery[1] == "" and mystery[3] == ""
        meta = json.loads((out / REPORT_META_JSON).read_text())
        assert meta["tie_policy"] == "rel-wins"
        with open(out / PAIRWISE_CSV) as fh:
            pw_header = next(csv.reader(fh))
        assert pw_header == ["model_f", "model_g", "statistic", "p_value",
                             "method", "decision"]

    def test_bound_values_are_conservative_here(self, small_config, measured):
        """Structural sanity on this corpus: every bound is positive and the
        relative bound never exceeds the largest reference."""
        rows = pipeline.run_bound(small_config, measured.profiles)
        for row in rows:
            assert row.best_lb > 0
            if row.rel_lb is not None:
                assert row.rel_lb <= max(REF_SIZES)

    def test_run_evaluate_outputs(self, small_config, measured, tmp_path):
        outputs = pipeline.run_evaluate(small_config, measured.profiles,
                                        output_dir=tmp_path, render_figures=True)
        assert (tmp_path / TAU_SWEEP_CSV).exists()
        assert (tmp_path / ASSUMPTION_JSON).exists()
        assert (tmp_path / LOOCV_CSV).exists()
        for name in ("scaling_law", "tau_sweep", "loocv", "agreement"):
            assert (tmp_path / "figures" / f"{name}.png").stat().st_size > 0
        report = json.loads((tmp_path / ASSUMPTION_JSON).read_text())
        assert len(report["agreement"]["model_ids"]) == 6
        # simulators share the default spread, so the popularity check runs
        assert outputs.assumptions.popularity is not None
        with open(tmp_path / TAU_SWEEP_CSV) as fh:
            taus = list(csv.DictReader(fh))
        assert len(taus) == len(small_config.inference.tau_grid)

    def test_bound_without_profiles_fails_cleanly(self, small_config):
        with pytest.raises(AnalysisError):
            pipeline.run_bound(small_config, {})

    def test_run_report_end_to_end(self, small_corpus, tmp_path):
        docs, manifest = small_corpus
        config = parse_config(small_config_dict(manifest, tmp_path))
        outcome, rows = pipeline.run_report(config, ModelClient(),
                                            render_figures=True)
        assert not outcome.partial
        assert len(rows) == 2
        assert (tmp_path / REPORT_CSV).exists()
        assert (tmp_path / "figures" / "bounds.png").stat().st_size > 0
        assert (tmp_path / "figures" / "scaling_law.png").stat().st_size > 0


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

@pytest.fixture()
def cli_env(small_corpus, tmp_path):
    docs, manifest = small_corpus
    out = tmp_path / "out"
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(small_config_dict(manifest, out)))
    return config_path, out


def invoke(*args):
    return CliRunner().invoke(cli_main, [str(a) for a in args])


class TestCli:
    def test_validate_config_ok(self, cli_env):
        config_path, _ = cli_env
        result = invoke("--config", config_path, "validate-config")
        assert result.exit_code == 0, result.output
        assert "6 models" in result.output
        assert "4 references" in result.output

    def test_validate_config_missing_file(self, tmp_path):
        result = invoke("--config", tmp_path / "nope.json", "validate-config")
        assert result.exit_code == 2
        assert "not found" in result.output

    def test_validate_config_invalid(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"models": [{"model_id": "m"}]}))
        result = invoke("--config", bad, "validate-config")
        assert result.exit_code == 2

    def test_estimate_cost(self, cli_env):
        config_path, _ = cli_env
        result = invoke("--config", config_path, "estimate-cost")
        assert result.exit_code == 0, result.output
        assert "1200" in result.output  # 12 * 2 * 5 * 10 queries per model

    def test_measure_then_fit_then_bound(self, cli_env):
        config_path, out = cli_env
        result = invoke("--config", config_path, "measure")
        assert result.exit_code == 0, result.output
        assert (out / "profiles" / "mystery.json").exists()

        result = invoke("--config", config_path, "fit")
        assert result.exit_code == 0, result.output
        assert (out / FIT_JSON).exists()

        result = invoke("--config", config_path, "bound")
        assert result.exit_code == 0, result.output
        assert (out / REPORT_CSV).exists()
        assert "mystery" in result.output

    def test_measure_single_model(self, cli_env):
        config_path, out = cli_env
        result = invoke("--config", config_path, "measure", "--model", "mystery")
        assert result.exit_code == 0, result.output
        assert (out / "profiles" / "mystery.json").exists()
        assert not (out / "profiles" / "target-45.json").exists()

    def test_profile_requires_cache(self, cli_env):
        config_path, _ = cli_env
        result = invoke("--config", config_path, "profile")
        assert result.exit_code == 2
        assert "cache" in result.output

    def test_profile_replays_from_cache(self, cli_env, tmp_path):
        config_path, out = cli_env
        cache = tmp_path / "cache.jsonl"
        result = invoke("--config", config_path, "--cache", cache, "measure")
        assert result.exit_code == 0, result.output
        profile_path = out / "profiles" / "mystery.json"
        before = profile_path.read_bytes()
        for p in (out / "profiles").iterdir():
            p.unlink()
        result = invoke("--config", config_path, "--cache", cache, "profile")
        assert result.exit_code == 0, result.output
        assert profile_path.read_bytes() == before

    def test_profile_exit_3_on_missing_cache_entries(self, cli_env, tmp_path):
        config_path, _ = cli_env
        cache = tmp_path / "cache.jsonl"
        cache.write_text("")  # present but empty: every key misses
        result = invoke("--config", config_path, "--cache", cache, "profile")
        assert result.exit_code == 3

    def test_measure_partial_exit_3(self, small_corpus, tmp_path):
        docs, manifest = small_corpus
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(
            small_config_dict(manifest, tmp_path / "out", with_live=True)))
        result = invoke("--config", config_path, "--offline", "measure")
        assert result.exit_code == 3
        assert "live-model" in result.output

    def test_bound_without_measurements_exit_4(self, cli_env):
        config_path, _ = cli_env
        result = invoke("--config", config_path, "bound")
        assert result.exit_code == 4

    def test_evaluate_and_assumption_check(self, cli_env):
        config_path, out = cli_env
        assert invoke("--config", config_path, "measure").exit_code == 0
        result = invoke("--config", config_path, "evaluate", "--no-figures")
        assert result.exit_code == 0, result.output
        assert (out / TAU_SWEEP_CSV).exists()
        assert not (out / "figures").exists()
        result = invoke("--config", config_path, "assumption-check")
        assert result.exit_code == 0, result.output
        assert "agreement" in result.output.lower()

    def test_report_end_to_end(self, cli_env):
        config_path, out = cli_env
        result = invoke("--config", config_path, "report", "--no-figures")
        assert result.exit_code == 0, result.output
        assert (out / REPORT_CSV).exists()
        assert (out / REPORT_META_JSON).exists()

    def test_seed_override_changes_sampling(self, cli_env, tmp_path):
        config_path, out = cli_env
        assert invoke("--config", config_path, "measure").exit_code == 0
        baseline = (out / "profiles" / "mystery.json").read_bytes()
        assert invoke("--config", config_path, "--seed", "1", "measure").exit_code == 0
        assert (out / "profiles" / "mystery.json").read_bytes() != baseline


class TestSimulatorControls:
    """Negative controls: with the text-popularity signal removed the
    pipeline must stop claiming separations."""

    def _measure_ladder(self, sizes, popularity, docs, plan, seed_base=0):
        client = ModelClient()
        profiles = []
        for i, size in enumerate(sizes):
            spec = zoo.simulated_spec(f"m-{i:02d}", size, popularity,
                                      noise_seed=seed_base + i)
            m = pipeline.measure_model(client, spec, docs, plan)
            profiles.append(build_profile(spec.model_id, m.source_cells,
                                          m.baseline_cells, plan.lengths))
        return profiles

    def test_zero_popularity_kills_separation(self):
        docs = zoo.synthetic_documents(n_source=12, n_baseline=2, n_tokens=120,
                                       seed=5)
        plan = SamplingPlan(lengths=(4, 8), samples_per_length=40, seed=31)
        popularity = {d.text_id: 0.0 for d in docs
                      if d.text_id.startswith("src")}
        sizes = [8.0, 12.0, 18.0, 27.0, 40.0, 60.0, 90.0, 140.0]
        profiles = self._measure_ladder(sizes, popularity, docs, plan)
        point = tau_sweep_evaluation(profiles, sizes, taus=(0.01,),
                                     alpha=0.05, exact_threshold=20,
                                     resamples=2000, seed=0)[0]
        assert point.n_pairs == 56
        # the test should reject at roughly its false-positive rate only
        assert point.n_predicted / point.n_pairs <= 0.15
        # accuracy collapses to the 50% ground-truth base rate of this ladder
        assert 0.35 <= point.accuracy <= 0.65

    def test_null_pair_rejection_rate_is_near_alpha(self):
        """Two behaviorally identical models: the pairwise test rejects at
        close to its nominal level across independent seeds."""
        docs = zoo.synthetic_documents(n_source=12, n_baseline=2, n_tokens=120,
                                       seed=5)
        plan = SamplingPlan(lengths=(4, 8), samples_per_length=30, seed=31)
        popularity = zoo.default_popularity(docs)
        client = ModelClient()
        rejections = 0
        n_trials = 100
        for trial in range(n_trials):
            profiles = []
            for name in ("null-a", "null-b"):
                spec = zoo.simulated_spec(f"{name}-{trial}", 40.0, popularity,
                                          noise_seed=trial)
                m = pipeline.measure_model(client, spec, docs, plan)
                profiles.append(build_profile(spec.model_id, m.source_cells,
                                              m.baseline_cells, plan.lengths))
            result = sign_permutation_test(block_scores(profiles[0], profiles[1]),
                                           alpha=0.05)
            rejections += bool(result.significant)
        assert rejections / n_trials <= 0.12, f"{rejections}/{n_trials} rejections"


class TestFullProtocolScale:
    def test_default_plan_query_count(self, zoo_documents):
        """Default sampling over the shipped corpus shape costs 123000
        queries per model: 100 positions x 6 lengths x 5 templates x 41 texts."""
        config = parse_config({"models": [
            {"model_id": "m", "simulator": {"pseudo_size": 10.0}},
        ]})
        estimate = pipeline.estimate_cost(config, zoo_documents)[0]
        assert estimate.n_queries == 123_000
        assert estimate.est_input_tokens > 0
