"""Shared fixtures: small synthetic corpora and a fully measured model zoo."""

from __future__ import annotations

from dataclasses import dataclass

import pytest

from sizebound import zoo
from sizebound.corpus import SamplingPlan, TextDocument
from sizebound.model_client import ModelClient, ModelSpec
from sizebound.pipeline import measure_model
from sizebound.profiles import AccuracyCell, AccuracyProfile, build_profile

FULL_LENGTHS = (4, 8, 10, 12, 16, 24)
ZOO_SEED = 424242


@dataclass
class ZooRun:
    documents: list[TextDocument]
    plan: SamplingPlan
    popularity: dict[str, float]
    specs: list[ModelSpec]
    profiles: dict[str, AccuracyProfile]
    baseline_cells: dict[str, list[AccuracyCell]]
    sizes: dict[str, float]

    def ordered_profiles(self) -> list[AccuracyProfile]:
        return [self.profiles[s.model_id] for s in self.specs]

    def ordered_sizes(self) -> list[float]:
        return [self.sizes[s.model_id] for s in self.specs]


@pytest.fixture(scope="session")
def zoo_documents() -> list[TextDocument]:
    return zoo.synthetic_documents()


@pytest.fixture(scope="session")
def zoo_run(zoo_documents) -> ZooRun:
    """The 19-reference ladder measured at the full protocol scale."""
    plan = SamplingPlan(lengths=FULL_LENGTHS, samples_per_length=100, seed=ZOO_SEED)
    popularity = zoo.default_popularity(zoo_documents)
    specs = zoo.build_reference_zoo(popularity)
    client = ModelClient(offline=True)
    profiles: dict[str, AccuracyProfile] = {}
    baseline_cells: dict[str, list[AccuracyCell]] = {}
    for spec in specs:
        measurement = measure_model(client, spec, zoo_documents, plan)
        profiles[spec.model_id] = build_profile(
            spec.model_id, measurement.source_cells,
            measurement.baseline_cells, plan.lengths,
        )
        baseline_cells[spec.model_id] = measurement.baseline_cells
    return ZooRun(
        documents=list(zoo_documents),
        plan=plan,
        popularity=popularity,
        specs=specs,
        profiles=profiles,
        baseline_cells=baseline_cells,
        sizes={s.model_id: float(s.known_size) for s in specs},
    )


@pytest.fixture()
def tiny_docs() -> list[TextDocument]:
    return zoo.synthetic_documents(n_source=6, n_baseline=2, n_tokens=120)
