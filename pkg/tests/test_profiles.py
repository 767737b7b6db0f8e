import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sizebound.errors import AssemblyError, CompatibilityError, StorageError
from sizebound.profiles import (
    LIFTED_CHANNEL,
    RAW_CHANNEL,
    AccuracyCell,
    AccuracyProfile,
    BaselineCurve,
    baseline_accuracy,
    build_profile,
    lifted_accuracy,
    per_text_mean_accuracy,
    per_text_mean_from_cells,
    profiles_to_matrix,
    raw_accuracy,
    read_cells_csv,
    write_cells_csv,
)


def cells_for(text_ids, lengths, accuracy_of):
    """Build one cell per (text, length) with accuracy accuracy_of(t, l)."""
    cells = []
    for t in text_ids:
        for l in lengths:
            acc = accuracy_of(t, l)
            cells.append(AccuracyCell(text_id=t, length=l, n_positions=100,
                                      n_correct=int(round(100 * acc))))
    return cells


class TestAccuracyCell:
    def test_accuracy(self):
        assert AccuracyCell("t", 4, 80, 20).accuracy == 0.25

    def test_validation(self):
        with pytest.raises(AssemblyError):
            AccuracyCell("t", 4, 0, 0)
        with pytest.raises(AssemblyError):
            AccuracyCell("t", 4, 10, 11)

    def test_raw_accuracy_matches_indicator_mean(self):
        # the share-of-correct-positions estimator, recomputed longhand
        verdicts = [True, False, True, True, False, False, True]
        expected = sum(1 for v in verdicts if v) / len(verdicts)
        assert raw_accuracy(verdicts) == expected

    @given(st.lists(st.booleans(), min_size=1, max_size=200))
    @settings(max_examples=100)
    def test_raw_accuracy_bounds(self, verdicts):
        acc = raw_accuracy(verdicts)
        assert 0.0 <= acc <= 1.0
        assert acc == pytest.approx(np.mean(verdicts))


class TestBaselineCurve:
    def test_mean_of_means_weighs_texts_equally(self):
        # unequal position counts must not skew the per-length floor
        cells = [
            AccuracyCell("b1", 4, 10, 5),    # 0.5
            AccuracyCell("b2", 4, 1000, 100),  # 0.1
        ]
        curve = baseline_accuracy(cells, [4])
        assert curve.value_at(4) == pytest.approx(0.3)

    def test_multiple_lengths(self):
        def acc(t, l):
            return {"b1": 0.2, "b2": 0.4}[t] / l
        cells = cells_for(["b1", "b2"], [4, 8], acc)
        curve = baseline_accuracy(cells, [4, 8])
        assert curve.value_at(4) == pytest.approx((0.05 + 0.1) / 2)
        assert curve.value_at(8) == pytest.approx((0.03 + 0.05) / 2, abs=0.005)

    def test_missing_length_raises(self):
        cells = [AccuracyCell("b1", 4, 10, 1)]
        with pytest.raises(CompatibilityError, match="length 8"):
            baseline_accuracy(cells, [4, 8])

    def test_stray_length_raises(self):
        cells = [AccuracyCell("b1", 5, 10, 1)]
        with pytest.raises(CompatibilityError):
            baseline_accuracy(cells, [4])

    def test_lifted_may_go_negative(self):
        assert lifted_accuracy(0.02, 0.05) == pytest.approx(-0.03)


def build_toy_profile(model_id="m", texts=("ta", "tb", "tc"), lengths=(4, 8)):
    def src_acc(t, l):
        return 0.1 * (ord(t[1]) - ord("a") + 1) + 0.01 * l

    def base_acc(t, l):
        return 0.05

    return build_profile(
        model_id,
        cells_for(texts, lengths, src_acc),
        cells_for(("zb1", "zb2"), lengths, base_acc),
        lengths,
    ), src_acc


class TestBuildProfile:
    def test_dimension_is_two_per_cell(self):
        profile, _ = build_toy_profile()
        assert profile.dimension == 2 * 3 * 2

    def test_default_protocol_dimension(self):
        texts = tuple(f"t{i:02d}" for i in range(37))
        lengths = (4, 8, 10, 12, 16, 24)
        profile = build_profile(
            "m",
            cells_for(texts, lengths, lambda t, l: 0.5),
            cells_for(("b1",), lengths, lambda t, l: 0.1),
            lengths,
        )
        assert profile.dimension == 444

    def test_slot_layout_text_major_raw_lifted_adjacent(self):
        profile, src_acc = build_toy_profile()
        n_lengths = len(profile.lengths)
        for j, t in enumerate(profile.text_ids):
            for k, l in enumerate(profile.lengths):
                # independent flat-index oracle
                expected_slot = j * 2 * n_lengths + k * 2
                assert profile.slot(t, l, RAW_CHANNEL) == expected_slot
                assert profile.slot(t, l, LIFTED_CHANNEL) == expected_slot + 1
                assert profile.value(t, l, RAW_CHANNEL) == pytest.approx(src_acc(t, l))
                assert profile.value(t, l, LIFTED_CHANNEL) == pytest.approx(
                    src_acc(t, l) - 0.05
                )

    def test_text_ids_sorted_regardless_of_input_order(self):
        lengths = (4,)
        cells = cells_for(["zz", "aa"], lengths, lambda t, l: 0.5)
        profile = build_profile("m", cells,
                                cells_for(("b",), lengths, lambda t, l: 0.0), lengths)
        assert profile.text_ids == ("aa", "zz")

    def test_missing_cells_listed(self):
        lengths = (4, 8)
        cells = cells_for(["ta", "tb"], lengths, lambda t, l: 0.5)
        del cells[1]  # drop ta@8
        with pytest.raises(AssemblyError, match="ta@8"):
            build_profile("m", cells,
                          cells_for(("b",), lengths, lambda t, l: 0.0), lengths)

    def test_duplicate_cells_rejected(self):
        lengths = (4,)
        cells = cells_for(["ta"], lengths, lambda t, l: 0.5) * 2
        with pytest.raises(AssemblyError, match="duplicate"):
            build_profile("m", cells,
                          cells_for(("b",), lengths, lambda t, l: 0.0), lengths)

    def test_matrix_views(self):
        profile, src_acc = build_toy_profile()
        raw = profile.raw_matrix()
        lifted = profile.lifted_matrix()
        assert raw.shape == (3, 2)
        assert raw[1, 1] == pytest.approx(src_acc("tb", 8))
        assert lifted[1, 1] == pytest.approx(src_acc("tb", 8) - 0.05)


class TestProfilePersistence:
    def test_json_round_trip_is_exact(self, tmp_path):
        profile, _ = build_toy_profile()
        path = tmp_path / "p.json"
        profile.save_json(path)
        loaded = AccuracyProfile.load_json(path)
        assert loaded.model_id == profile.model_id
        assert loaded.text_ids == profile.text_ids
        assert loaded.lengths == profile.lengths
        assert np.array_equal(loaded.values, profile.values)
        assert loaded.baseline == profile.baseline

    def test_layout_version_guard(self, tmp_path):
        profile, _ = build_toy_profile()
        obj = profile.to_dict()
        obj["layout_version"] = 99
        with pytest.raises(CompatibilityError, match="layout version"):
            AccuracyProfile.from_dict(obj)

    def test_missing_field(self):
        profile, _ = build_toy_profile()
        obj = profile.to_dict()
        del obj["values"]
        with pytest.raises(StorageError):
            AccuracyProfile.from_dict(obj)

    def test_compatibility(self):
        a, _ = build_toy_profile("a")
        b, _ = build_toy_profile("b")
        c, _ = build_toy_profile("c", lengths=(4, 16))
        assert a.compatible_with(b)
        assert not a.compatible_with(c)

    def test_stacking(self):
        a, _ = build_toy_profile("a")
        b, _ = build_toy_profile("b")
        matrix = profiles_to_matrix([a, b])
        assert matrix.shape == (2, a.dimension)
        c, _ = build_toy_profile("c", lengths=(4, 16))
        with pytest.raises(CompatibilityError):
            profiles_to_matrix([a, c])


class TestPerTextMeans:
    def test_two_routes_agree(self):
        profile, src_acc = build_toy_profile()
        from_profile = per_text_mean_accuracy(profile)
        source_cells = cells_for(profile.text_ids, profile.lengths, src_acc)
        from_cells = per_text_mean_from_cells(source_cells)
        assert set(from_profile) == set(from_cells)
        for t in from_profile:
            assert from_profile[t] == pytest.approx(from_cells[t])

    def test_mean_over_lengths(self):
        profile, src_acc = build_toy_profile()
        means = per_text_mean_accuracy(profile)
        assert means["ta"] == pytest.approx((src_acc("ta", 4) + src_acc("ta", 8)) / 2)


class TestCellsCsv:
    def test_round_trip(self, tmp_path):
        cells = cells_for(["ta", "tb"], (4, 8), lambda t, l: 0.25)
        path = tmp_path / "cells.csv"
        write_cells_csv(path, "my-model", cells)
        model_id, loaded = read_cells_csv(path)
        assert model_id == "my-model"
        assert sorted(loaded, key=lambda c: (c.text_id, c.length)) == sorted(
            cells, key=lambda c: (c.text_id, c.length)
        )

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "cells.csv"
        write_cells_csv(path, "m", [])
        with pytest.raises(StorageError):
            read_cells_csv(path)
