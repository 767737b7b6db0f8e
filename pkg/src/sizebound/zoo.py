"""Synthetic testbed: generated corpus plus a ladder of simulated models.

The zoo exists so the whole pipeline can be exercised and validated
offline. Reference sizes follow a realistic open-weights ladder, source
texts get a popularity spread, and baseline texts get popularity zero so
they only measure the guessing floor.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import TextDocument, TextKind
from .model_client import ModelSpec, SimulatedModel, SimulatorLink

N_SOURCE_TEXTS = 37
N_BASELINE_TEXTS = 4
TOKENS_PER_TEXT = 400
POPULARITY_LOW = 0.3
POPULARITY_HIGH = 1.0

# Known dense checkpoints usable as regression references, in billions.
REFERENCE_SIZES: tuple[float, ...] = (
    405, 405, 124, 111, 104, 72, 70, 70, 35, 27, 27, 27, 24, 24, 14, 12, 12, 9, 8,
)

_VOCAB = (
    "river", "stone", "lantern", "morning", "harbor", "willow", "ember",
    "quiet", "garden", "winter", "letter", "shadow", "window", "thunder",
    "meadow", "copper", "hollow", "signal", "velvet", "orchard", "evening",
    "anchor", "feather", "granite", "whisper", "saffron", "timber", "marble",
    "crescent", "juniper", "harvest", "bramble", "cinder", "voyage", "sparrow",
    "currant", "ivory", "basalt", "heather", "tide", "summit", "valley",
    "ribbon", "beacon", "clover", "drift", "fable", "grove", "haven", "inlet",
)


def synthetic_tokens(text_id: str, n_tokens: int = TOKENS_PER_TEXT,
                     seed: int = 7) -> tuple[str, ...]:
    """Deterministic pseudo-prose for one text id."""
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, sum(text_id.encode("utf-8"))])
    )
    idx = rng.integers(0, len(_VOCAB), size=n_tokens)
    return tuple(_VOCAB[i] for i in idx)


def synthetic_documents(n_source: int = N_SOURCE_TEXTS,
                        n_baseline: int = N_BASELINE_TEXTS,
                        n_tokens: int = TOKENS_PER_TEXT,
                        seed: int = 7) -> list[TextDocument]:
    docs = []
    for i in range(n_source):
        text_id = f"src-{i + 1:02d}"
        docs.append(TextDocument(
            text_id=text_id,
            title=f"Synthetic source {i + 1}",
            kind=TextKind.SOURCE,
            tokens=synthetic_tokens(text_id, n_tokens, seed),
        ))
    for i in range(n_baseline):
        text_id = f"base-{i + 1:02d}"
        docs.append(TextDocument(
            text_id=text_id,
            title=f"Synthetic baseline {i + 1}",
            kind=TextKind.BASELINE,
            tokens=synthetic_tokens(text_id, n_tokens, seed),
        ))
    return docs


def spread_popularity(text_ids: Sequence[str],
                      low: float = POPULARITY_LOW,
                      high: float = POPULARITY_HIGH) -> dict[str, float]:
    """Evenly spaced popularity over sorted text ids."""
    ordered = sorted(text_ids)
    if not ordered:
        return {}
    if len(ordered) == 1:
        return {ordered[0]: high}
    weights = np.linspace(low, high, len(ordered))
    return {t: float(w) for t, w in zip(ordered, weights)}


def default_popularity(documents: Sequence[TextDocument],
                       low: float = POPULARITY_LOW,
                       high: float = POPULARITY_HIGH) -> dict[str, float]:
    """Spread popularity over source texts; baselines stay at zero."""
    return spread_popularity(
        [d.text_id for d in documents if d.kind is TextKind.SOURCE], low, high
    )


def popular_and_obscure(popularity: Mapping[str, float],
                        fraction: float = 1 / 3) -> tuple[list[str], list[str]]:
    """Top and bottom popularity slices, for the popularity assumption check."""
    ordered = sorted(popularity, key=lambda t: (-popularity[t], t))
    k = max(1, int(len(ordered) * fraction))
    return ordered[:k], ordered[-k:]


def simulated_spec(model_id: str, pseudo_size: float,
                   popularity: Mapping[str, float],
                   role: str = "target",
                   known_size: float | None = None,
                   architecture: str = "unknown",
                   noise_seed: int = 0,
                   link: SimulatorLink = SimulatorLink()) -> ModelSpec:
    return ModelSpec(
        model_id=model_id,
        role=role,
        architecture=architecture,
        known_size=known_size,
        simulator=SimulatedModel(
            pseudo_size=pseudo_size,
            popularity_weights=dict(popularity),
            noise_seed=noise_seed,
            link=link,
        ),
    )


def build_reference_zoo(popularity: Mapping[str, float],
                        sizes: Sequence[float] = REFERENCE_SIZES,
                        noise_seed: int = 0,
                        link: SimulatorLink = SimulatorLink()) -> list[ModelSpec]:
    """One simulated dense reference per ladder size, pseudo_size = known size."""
    specs = []
    for i, size in enumerate(sizes):
        specs.append(simulated_spec(
            model_id=f"ref-{i + 1:02d}-{size:g}b",
            pseudo_size=float(size),
            popularity=popularity,
            role="reference",
            known_size=float(size),
            architecture="dense",
            noise_seed=noise_seed,
            link=link,
        ))
    return specs


def write_corpus_files(documents: Sequence[TextDocument], dest: str | Path) -> Path:
    """Materialize documents as text files plus a manifest; returns manifest path."""
    dest = Path(dest)
    (dest / "texts").mkdir(parents=True, exist_ok=True)
    entries = []
    for doc in documents:
        rel = f"texts/{doc.text_id}.txt"
        (dest / rel).write_text(" ".join(doc.tokens) + "\n", encoding="utf-8")
        entries.append({
            "text_id": doc.text_id,
            "title": doc.title,
            "kind": doc.kind.value,
            "path": rel,
        })
    manifest = dest / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    return manifest
