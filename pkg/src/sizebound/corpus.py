"""Text corpus handling: normalization, tokenization, and prefix sampling.

The measurement unit is the whitespace-delimited word, so all texts go
through one normalization rule (NFKC, lowercase, edge punctuation stripped,
internal apostrophes/hyphens kept). Model answers are normalized with the
same rule so that "Question." matches the corpus token "question".
"""

from __future__ import annotations

import hashlib
import json
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorpusError

DEFAULT_LENGTHS = (4, 8, 10, 12, 16, 24)
DEFAULT_SAMPLES_PER_LENGTH = 100

# Backtick/acute are category Sk, not P*, but behave as quotes in the wild.
_EXTRA_STRIP = {"`", "´"}


def _strippable(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P") or ch in _EXTRA_STRIP


def _strip_edges(token: str) -> str:
    start, end = 0, len(token)
    while start < end and _strippable(token[start]):
        start += 1
    while end > start and _strippable(token[end - 1]):
        end -= 1
    return token[start:end]


def tokenize(raw: str) -> list[str]:
    """Split raw text into normalized word tokens.

    NFKC-normalize, lowercase, split on whitespace, strip leading/trailing
    punctuation and quotes from each run, and drop runs that strip to
    nothing (bare dashes, ellipses). Internal apostrophes and hyphens
    survive, so "don't" and "well-known" stay single tokens.
    """
    text = unicodedata.normalize("NFKC", raw).lower()
    tokens = []
    for run in text.split():
        word = _strip_edges(run)
        if word:
            tokens.append(word)
    return tokens


class TextKind(str, Enum):
    SOURCE = "source"
    BASELINE = "baseline"


@dataclass(frozen=True)
class TextDocument:
    """An immutable tokenized text with a stable identity."""

    text_id: str
    title: str
    kind: TextKind
    tokens: tuple[str, ...]

    def __post_init__(self):
        for tok in self.tokens:
            if not tok or any(c.isspace() for c in tok):
                raise CorpusError(
                    f"text '{self.text_id}': token {tok!r} is empty or contains whitespace"
                )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class PrefixSample:
    """One sampled position: the l tokens before it and the true next word.

    `position` is the 1-based index of the target token, matching the
    accuracy definition where prefix length l makes positions l+1..n
    eligible.
    """

    text_id: str
    position: int
    length: int
    prefix: tuple[str, ...]
    target: str

    def __post_init__(self):
        if len(self.prefix) != self.length:
            raise CorpusError(
                f"sample at {self.text_id}:{self.position}: prefix has "
                f"{len(self.prefix)} tokens, expected {self.length}"
            )


@dataclass(frozen=True)
class SamplingPlan:
    """Which prefix lengths to probe and how many positions per length."""

    lengths: tuple[int, ...] = DEFAULT_LENGTHS
    samples_per_length: int = DEFAULT_SAMPLES_PER_LENGTH
    seed: int = 0

    def __post_init__(self):
        lengths = tuple(int(l) for l in self.lengths)
        object.__setattr__(self, "lengths", lengths)
        if not lengths or any(l < 1 for l in lengths):
            raise ConfigError("sampling.lengths: must be non-empty positive integers")
        if any(b <= a for a, b in zip(lengths, lengths[1:])):
            raise ConfigError("sampling.lengths: must be strictly ascending")
        if self.samples_per_length < 1:
            raise ConfigError("sampling.samples_per_length: must be >= 1")


def load_text(raw: str, text_id: str, title: str, kind: TextKind | str) -> TextDocument:
    """Normalize and tokenize one raw text into a TextDocument."""
    tokens = tokenize(raw)
    if not tokens:
        raise CorpusError(f"text '{text_id}': empty after tokenization")
    return TextDocument(text_id=text_id, title=title, kind=TextKind(kind), tokens=tuple(tokens))


def eligible_positions(doc: TextDocument, length: int) -> range:
    """1-based target positions with a full length-l prefix: {l+1, ..., n}."""
    if length < 1:
        raise ConfigError(f"prefix length must be >= 1, got {length}")
    n = len(doc)
    if length >= n:
        return range(0)
    return range(length + 1, n + 1)


def _subsample_seed(seed: int, text_id: str, length: int) -> np.random.SeedSequence:
    # sha256 keeps the per-text key stable across platforms and runs,
    # unlike hash() on strings.
    text_key = int.from_bytes(hashlib.sha256(text_id.encode("utf-8")).digest()[:8], "big")
    return np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, text_key, length])


def sample_positions(doc: TextDocument, length: int, k: int, seed: int) -> list[int]:
    """Draw up to k eligible positions uniformly without replacement, sorted.

    Deterministic in (seed, text_id, length); independent of k only in the
    sense that the same k always gives the same set.
    """
    eligible = eligible_positions(doc, length)
    n_eligible = len(eligible)
    if n_eligible == 0:
        raise CorpusError(
            f"text '{doc.text_id}': no eligible positions at length {length} (n={len(doc)})"
        )
    take = min(k, n_eligible)
    rng = np.random.default_rng(_subsample_seed(seed, doc.text_id, length))
    offsets = rng.choice(n_eligible, size=take, replace=False)
    return sorted(int(eligible[o]) for o in offsets)


def sample_prefixes(doc: TextDocument, plan: SamplingPlan) -> dict[int, list[PrefixSample]]:
    """Sample prefix/target pairs for every configured length.

    Texts shorter than samples_per_length + l fall back to all eligible
    positions; the caller sees the shortfall through the list length and
    accuracy denominators always use actual counts.
    """
    out: dict[int, list[PrefixSample]] = {}
    for length in plan.lengths:
        samples = []
        for pos in sample_positions(doc, length, plan.samples_per_length, plan.seed):
            prefix = doc.tokens[pos - length - 1 : pos - 1]
            samples.append(
                PrefixSample(
                    text_id=doc.text_id,
                    position=pos,
                    length=length,
                    prefix=tuple(prefix),
                    target=doc.tokens[pos - 1],
                )
            )
        out[length] = samples
    return out


def validate_against_plan(docs: Sequence[TextDocument], plan: SamplingPlan) -> None:
    """Every document must admit at least one target at the longest prefix."""
    max_len = max(plan.lengths)
    for doc in docs:
        if len(doc) < max_len + 2:
            raise CorpusError(
                f"text '{doc.text_id}': {len(doc)} tokens is too short for "
                f"prefix length {max_len} (need at least {max_len + 2})"
            )


# ---------------------------------------------------------------------------
# Corpus manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    text_id: str
    title: str
    kind: TextKind
    path: str


def _slug(title: str) -> str:
    out = []
    for ch in title.lower():
        if ch.isalnum():
            out.append(ch)
        elif out and out[-1] != "-":
            out.append("-")
    return "".join(out).strip("-")


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a corpus manifest: a JSON list of {text_id, title, kind, path}."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"manifest {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise ConfigError(f"manifest {path}: expected a JSON list")
    out = []
    seen = set()
    for i, entry in enumerate(entries):
        for key in ("text_id", "title", "kind", "path"):
            if key not in entry:
                raise ConfigError(f"manifest {path}: entry {i}: missing '{key}'")
        if entry["kind"] not in (k.value for k in TextKind):
            raise ConfigError(
                f"manifest {path}: entry {i}: kind must be 'source' or 'baseline', "
                f"got {entry['kind']!r}"
            )
        if entry["text_id"] in seen:
            raise ConfigError(f"manifest {path}: duplicate text_id {entry['text_id']!r}")
        seen.add(entry["text_id"])
        out.append(
            ManifestEntry(
                text_id=entry["text_id"],
                title=entry["title"],
                kind=TextKind(entry["kind"]),
                path=entry["path"],
            )
        )
    return out


def read_corpus(manifest_path: str | Path) -> list[TextDocument]:
    """Load every text listed in a manifest; paths resolve relative to it."""
    manifest_path = Path(manifest_path)
    docs = []
    for entry in load_manifest(manifest_path):
        file_path = Path(entry.path)
        if not file_path.is_absolute():
            file_path = manifest_path.parent / file_path
        try:
            raw = file_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise CorpusError(f"text '{entry.text_id}': cannot read {file_path}: {exc}") from exc
        docs.append(load_text(raw, entry.text_id, entry.title, entry.kind))
    return docs


def default_manifest_path() -> Path:
    return Path(__file__).parent / "data" / "default_manifest.json"


def default_manifest() -> list[ManifestEntry]:
    """The shipped 37-source + 4-baseline manifest with placeholder paths.

    Text content is the operator's responsibility; this only pins identities
    and kinds so profiles from different runs line up.
    """
    return load_manifest(default_manifest_path())
