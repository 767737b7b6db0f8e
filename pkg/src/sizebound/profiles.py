"""Accuracy profiles: per-cell accuracy, baseline lifting, vector layout.

A profile is one vector per model. Source texts are ordered by text_id,
lengths ascend, and each (text, length) cell contributes two adjacent
channels: raw accuracy then baseline-lifted accuracy. Vector dimension is
therefore 2 * n_texts * n_lengths (444 for the default 37-text, 6-length
protocol).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AssemblyError, CompatibilityError, StorageError

LAYOUT_VERSION = 1
RAW_CHANNEL = 0
LIFTED_CHANNEL = 1


@dataclass(frozen=True)
class AccuracyCell:
    """Fraction of sampled positions answered correctly for one (text, length)."""

    text_id: str
    length: int
    n_positions: int
    n_correct: int

    def __post_init__(self):
        if self.n_positions <= 0:
            raise AssemblyError("?", [f"{self.text_id}@{self.length}: no positions"])
        if not 0 <= self.n_correct <= self.n_positions:
            raise AssemblyError(
                "?", [f"{self.text_id}@{self.length}: n_correct out of range"]
            )

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_positions


def raw_accuracy(verdicts: Sequence[bool]) -> float:
    """Share of correct positions; the empirical form of per-length accuracy."""
    if not verdicts:
        raise AssemblyError("?", ["raw_accuracy of zero positions"])
    return sum(bool(v) for v in verdicts) / len(verdicts)


@dataclass(frozen=True)
class BaselineCurve:
    """Per-length guessing floor beta(l): mean over baseline texts of their
    per-text accuracy at that length (a mean of means, so each baseline text
    counts equally regardless of sampled position counts)."""

    lengths: tuple[int, ...]
    values: tuple[float, ...]
    baseline_text_ids: tuple[str, ...]

    def __post_init__(self):
        if len(self.lengths) != len(self.values):
            raise CompatibilityError("baseline curve lengths/values size mismatch")

    def value_at(self, length: int) -> float:
        try:
            return self.values[self.lengths.index(length)]
        except ValueError:
            raise CompatibilityError(f"baseline curve has no length {length}") from None


def baseline_accuracy(cells: Iterable[AccuracyCell], lengths: Sequence[int]) -> BaselineCurve:
    """Build the baseline curve from baseline-text cells."""
    by_length: dict[int, list[AccuracyCell]] = {l: [] for l in lengths}
    text_ids: set[str] = set()
    for cell in cells:
        if cell.length not in by_length:
            raise CompatibilityError(
                f"baseline cell {cell.text_id}@{cell.length} not in protocol lengths {list(lengths)}"
            )
        by_length[cell.length].append(cell)
        text_ids.add(cell.text_id)
    values = []
    for l in lengths:
        group = by_length[l]
        if not group:
            raise CompatibilityError(f"no baseline cells at length {l}")
        values.append(sum(c.accuracy for c in group) / len(group))
    return BaselineCurve(tuple(lengths), tuple(values), tuple(sorted(text_ids)))


def lifted_accuracy(raw: float, baseline: float) -> float:
    """Lift: raw accuracy minus the guessing floor. May be negative."""
    return raw - baseline


@dataclass(frozen=True)
class AccuracyProfile:
    """One model's profile vector plus the layout needed to interpret it."""

    model_id: str
    text_ids: tuple[str, ...]
    lengths: tuple[int, ...]
    values: np.ndarray
    baseline: BaselineCurve
    layout_version: int = LAYOUT_VERSION

    def __post_init__(self):
        expected = 2 * len(self.text_ids) * len(self.lengths)
        if self.values.shape != (expected,):
            raise CompatibilityError(
                f"profile for {self.model_id}: expected {expected} values, "
                f"got shape {self.values.shape}"
            )
        if list(self.text_ids) != sorted(self.text_ids):
            raise CompatibilityError("profile text_ids must be sorted")
        if list(self.lengths) != sorted(self.lengths):
            raise CompatibilityError("profile lengths must ascend")

    @property
    def dimension(self) -> int:
        return self.values.shape[0]

    def slot(self, text_id: str, length: int, channel: int) -> int:
        """Flat index of one channel: text-major, length-minor, raw/lifted adjacent."""
        if channel not in (RAW_CHANNEL, LIFTED_CHANNEL):
            raise CompatibilityError(f"channel must be 0 (raw) or 1 (lifted), got {channel}")
        try:
            j = self.text_ids.index(text_id)
        except ValueError:
            raise CompatibilityError(f"unknown text_id {text_id!r}") from None
        try:
            k = self.lengths.index(length)
        except ValueError:
            raise CompatibilityError(f"unknown length {length}") from None
        return j * 2 * len(self.lengths) + k * 2 + channel

    def value(self, text_id: str, length: int, channel: int) -> float:
        return float(self.values[self.slot(text_id, length, channel)])

    def raw_matrix(self) -> np.ndarray:
        """(n_texts, n_lengths) raw-channel view."""
        return self.values.reshape(len(self.text_ids), len(self.lengths), 2)[:, :, RAW_CHANNEL]

    def lifted_matrix(self) -> np.ndarray:
        return self.values.reshape(len(self.text_ids), len(self.lengths), 2)[:, :, LIFTED_CHANNEL]

    def compatible_with(self, other: "AccuracyProfile") -> bool:
        return (
            self.layout_version == other.layout_version
            and self.text_ids == other.text_ids
            and self.lengths == other.lengths
        )

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "layout_version": self.layout_version,
            "model_id": self.model_id,
            "text_ids": list(self.text_ids),
            "lengths": list(self.lengths),
            "baseline": {
                "lengths": list(self.baseline.lengths),
                "values": list(self.baseline.values),
                "baseline_text_ids": list(self.baseline.baseline_text_ids),
            },
            "values": [float(v) for v in self.values],
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, obj: dict) -> "AccuracyProfile":
        try:
            version = obj["layout_version"]
            if version != LAYOUT_VERSION:
                raise CompatibilityError(
                    f"profile layout version {version} is not supported "
                    f"(expected {LAYOUT_VERSION})"
                )
            baseline = BaselineCurve(
                tuple(obj["baseline"]["lengths"]),
                tuple(obj["baseline"]["values"]),
                tuple(obj["baseline"]["baseline_text_ids"]),
            )
            return cls(
                model_id=obj["model_id"],
                text_ids=tuple(obj["text_ids"]),
                lengths=tuple(obj["lengths"]),
                values=np.asarray(obj["values"], dtype=float),
                baseline=baseline,
                layout_version=version,
            )
        except KeyError as exc:
            raise StorageError(f"profile JSON is missing field {exc}") from exc

    @classmethod
    def load_json(cls, path: str | Path) -> "AccuracyProfile":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"cannot read profile {path}: {exc}") from exc
        return cls.from_dict(obj)


def build_profile(model_id: str,
                  source_cells: Iterable[AccuracyCell],
                  baseline_cells: Iterable[AccuracyCell],
                  lengths: Sequence[int]) -> AccuracyProfile:
    """Assemble a profile vector; every (source text, length) cell is required.

    Raises AssemblyError listing each missing cell so a partial measurement
    run fails loudly rather than silently zero-filling.
    """
    lengths = tuple(sorted(lengths))
    baseline = baseline_accuracy(baseline_cells, lengths)
    by_key: dict[tuple[str, int], AccuracyCell] = {}
    text_ids: set[str] = set()
    gaps: list[str] = []
    for cell in source_cells:
        key = (cell.text_id, cell.length)
        if key in by_key:
            gaps.append(f"duplicate cell {cell.text_id}@{cell.length}")
        by_key[key] = cell
        text_ids.add(cell.text_id)
    ordered_texts = tuple(sorted(text_ids))
    if not ordered_texts:
        raise AssemblyError(model_id, ["no source cells at all"])
    values = np.empty(2 * len(ordered_texts) * len(lengths), dtype=float)
    for j, text_id in enumerate(ordered_texts):
        for k, length in enumerate(lengths):
            cell = by_key.get((text_id, length))
            if cell is None:
                gaps.append(f"missing cell {text_id}@{length}")
                continue
            base = j * 2 * len(lengths) + k * 2
            values[base + RAW_CHANNEL] = cell.accuracy
            values[base + LIFTED_CHANNEL] = lifted_accuracy(
                cell.accuracy, baseline.value_at(length)
            )
    if gaps:
        raise AssemblyError(model_id, gaps)
    return AccuracyProfile(
        model_id=model_id,
        text_ids=ordered_texts,
        lengths=lengths,
        values=values,
        baseline=baseline,
    )


def per_text_mean_accuracy(profile: AccuracyProfile, channel: int = RAW_CHANNEL,
                           ) -> dict[str, float]:
    """Mean accuracy across lengths for each text; used for rank agreement."""
    matrix = profile.raw_matrix() if channel == RAW_CHANNEL else profile.lifted_matrix()
    means = matrix.mean(axis=1)
    return {text_id: float(m) for text_id, m in zip(profile.text_ids, means)}


def per_text_mean_from_cells(cells: Iterable[AccuracyCell]) -> dict[str, float]:
    """Same statistic computed straight from cells (mean over lengths per text)."""
    sums: dict[str, list[float]] = {}
    for cell in cells:
        sums.setdefault(cell.text_id, []).append(cell.accuracy)
    return {t: sum(v) / len(v) for t, v in sorted(sums.items())}


def profiles_to_matrix(profiles: Sequence[AccuracyProfile]) -> np.ndarray:
    """Stack compatible profiles into an (n_models, dimension) matrix."""
    if not profiles:
        raise CompatibilityError("cannot stack zero profiles")
    head = profiles[0]
    for p in profiles[1:]:
        if not head.compatible_with(p):
            raise CompatibilityError(
                f"profile {p.model_id} layout differs from {head.model_id}"
            )
    return np.vstack([p.values for p in profiles])


def write_cells_csv(path: str | Path, model_id: str,
                    cells: Iterable[AccuracyCell]) -> None:
    """Delimited dump of one model's cells for spreadsheet inspection."""
    rows = sorted(cells, key=lambda c: (c.text_id, c.length))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "text_id", "length", "n_positions", "n_correct", "accuracy"])
        for c in rows:
            writer.writerow([model_id, c.text_id, c.length, c.n_positions,
                             c.n_correct, f"{c.accuracy:.6f}"])


def read_cells_csv(path: str | Path) -> tuple[str, list[AccuracyCell]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cells = []
        model_id = ""
        for row in reader:
            model_id = row["model_id"]
            cells.append(AccuracyCell(
                text_id=row["text_id"],
                length=int(row["length"]),
                n_positions=int(row["n_positions"]),
                n_correct=int(row["n_correct"]),
            ))
    if not cells:
        raise StorageError(f"no cells in {path}")
    return model_id, cells
