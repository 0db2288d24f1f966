import numpy as np
import pytest

from cordseg.centerline import Centerline
from cordseg.errors import ConfigError, GeometryError
from cordseg.metrics import (
    LesionMatchConfig,
    MetricsReport,
    aggregate,
    centerline_mse,
    connected_components,
    dice,
    lesionwise_pr,
    localization_rate,
    majority_vote,
    relative_volume_difference,
    volumewise_specificity,
    voxelwise_pr,
)
from cordseg.volume import Mask

from oracles import flood_fill_components


def mask_of(data, spacing=(1.0, 1.0, 1.0)):
    return Mask(np.asarray(data, dtype=np.uint8), spacing)


def blank(dims=(8, 8, 8)):
    return np.zeros(dims, dtype=np.uint8)


class TestCenterlineMSE:
    def _cl(self, xy, spacing=(1.0, 1.0, 1.0)):
        xy = np.asarray(xy, dtype=np.float64)
        return Centerline(np.arange(len(xy)), xy, spacing)

    def test_identical_is_zero(self):
        cl = self._cl([[1, 2], [3, 4], [5, 6]])
        assert centerline_mse(cl, cl) == 0.0

    def test_uniform_offset(self):
        a = self._cl([[0, 0], [0, 0]])
        b = self._cl([[3, 0], [3, 0]])
        assert np.isclose(centerline_mse(a, b), 3.0)

    def test_rms_of_mixed_offsets(self):
        a = self._cl([[0, 0], [0, 0]])
        b = self._cl([[0, 0], [4, 0]])
        assert np.isclose(centerline_mse(a, b), np.sqrt((0 + 16) / 2))

    def test_spacing_converts_to_mm(self):
        a = self._cl([[0, 0]], spacing=(0.5, 0.5, 0.5))
        b = self._cl([[4, 0]], spacing=(0.5, 0.5, 0.5))
        assert np.isclose(centerline_mse(a, b), 2.0)

    def test_restricted_to_shared_slices(self):
        a = Centerline(np.array([0, 1, 2]), np.zeros((3, 2)), (1, 1, 1))
        b = Centerline(np.array([2, 3]), np.array([[3.0, 0.0], [9.0, 9.0]]), (1, 1, 1))
        assert np.isclose(centerline_mse(a, b), 3.0)

    def test_no_shared_slices_rejected(self):
        a = Centerline(np.array([0]), np.zeros((1, 2)), (1, 1, 1))
        b = Centerline(np.array([5]), np.zeros((1, 2)), (1, 1, 1))
        with pytest.raises(ConfigError):
            centerline_mse(a, b)


class TestLocalizationRate:
    def test_centroid_centerline_inside_convex_mask(self):
        data = blank()
        data[2:6, 2:6, :] = 1
        mask = mask_of(data)
        cl = Centerline(np.arange(8), np.tile([3.5, 3.5], (8, 1)), (1, 1, 1))
        assert localization_rate(cl, mask) == 100.0

    def test_fully_outside_is_zero(self):
        data = blank()
        data[2:4, 2:4, :] = 1
        cl = Centerline(np.arange(8), np.tile([7.0, 7.0], (8, 1)), (1, 1, 1))
        assert localization_rate(cl, mask_of(data)) == 0.0

    def test_half_inside(self):
        data = blank((8, 8, 4))
        data[2:4, 2:4, :] = 1
        xy = np.array([[2.0, 2.0], [2.0, 2.0], [7.0, 7.0], [7.0, 7.0]])
        cl = Centerline(np.arange(4), xy, (1, 1, 1))
        assert localization_rate(cl, mask_of(data)) == 50.0

    def test_uncovered_slices_count_as_misses(self):
        data = blank((8, 8, 4))
        data[2:4, 2:4, :] = 1
        cl = Centerline(np.array([0, 1]), np.tile([2.0, 2.0], (2, 1)), (1, 1, 1))
        assert localization_rate(cl, mask_of(data)) == 50.0

    def test_empty_mask_rejected(self):
        cl = Centerline(np.array([0]), np.zeros((1, 2)), (1, 1, 1))
        with pytest.raises(ConfigError):
            localization_rate(cl, mask_of(blank()))


class TestDice:
    def test_identical_masks(self):
        data = blank()
        data[1:5, 1:5, 1:5] = 1
        assert dice(mask_of(data), mask_of(data)) == 100.0

    def test_disjoint_masks(self):
        a = blank()
        a[0:2] = 1
        b = blank()
        b[5:7] = 1
        assert dice(mask_of(a), mask_of(b)) == 0.0

    def test_hand_counted_overlap(self):
        a = blank()
        a[0, 0, :4] = 1  # |A| = 4
        b = blank()
        b[0, 0, 1:7] = 1  # |B| = 6, overlap 3
        assert np.isclose(dice(mask_of(a), mask_of(b)), 100.0 * 2 * 3 / 10)

    def test_both_empty_convention(self):
        assert dice(mask_of(blank()), mask_of(blank())) == 100.0

    def test_symmetry_random(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a = mask_of((rng.random((6, 6, 6)) > 0.5).astype(np.uint8))
            b = mask_of((rng.random((6, 6, 6)) > 0.5).astype(np.uint8))
            assert dice(a, b) == dice(b, a)

    def test_geometry_mismatch_rejected(self):
        with pytest.raises(GeometryError):
            dice(mask_of(blank((4, 4, 4))), mask_of(blank((5, 5, 5))))


class TestRVD:
    def test_equal_volumes_zero(self):
        data = blank()
        data[:3] = 1
        assert relative_volume_difference(mask_of(data), mask_of(data)) == 0.0

    def test_under_segmentation_negative(self):
        manual = blank((12, 12, 12))
        manual[0, 0, :10] = 1  # 10 voxels
        auto = blank((12, 12, 12))
        auto[0, 0, :9] = 1  # 9 voxels
        assert np.isclose(relative_volume_difference(mask_of(auto), mask_of(manual)), -10.0)

    def test_empty_auto_is_minus_100(self):
        manual = blank()
        manual[2:4] = 1
        assert relative_volume_difference(mask_of(blank()), mask_of(manual)) == -100.0

    def test_strict_subset_is_negative_random(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            manual = (rng.random((6, 6, 6)) > 0.4).astype(np.uint8)
            auto = manual.copy()
            on = np.argwhere(auto)
            drop = on[rng.integers(len(on))]
            auto[tuple(drop)] = 0
            assert relative_volume_difference(mask_of(auto), mask_of(manual)) < 0

    def test_volumes_in_mm3(self):
        manual = blank((4, 4, 4))
        manual[:2] = 1
        auto = blank((4, 4, 4))
        auto[:1] = 1
        # spacing scales both volumes; the ratio is unchanged
        assert np.isclose(
            relative_volume_difference(mask_of(auto, (2, 2, 2)), mask_of(manual, (2, 2, 2))),
            -50.0,
        )

    def test_empty_manual_rejected(self):
        with pytest.raises(ConfigError):
            relative_volume_difference(mask_of(blank()), mask_of(blank()))


class TestVoxelwisePR:
    def test_perfect(self):
        data = blank()
        data[1:3] = 1
        sens, prec = voxelwise_pr(mask_of(data), mask_of(data))
        assert (sens, prec) == (100.0, 100.0)

    def test_half_subset(self):
        manual = blank()
        manual[0, 0, :8] = 1
        auto = blank()
        auto[0, 0, :4] = 1
        sens, prec = voxelwise_pr(mask_of(auto), mask_of(manual))
        assert (sens, prec) == (50.0, 100.0)

    def test_empty_auto_gives_zero_and_na(self):
        manual = blank()
        manual[1] = 1
        sens, prec = voxelwise_pr(mask_of(blank()), mask_of(manual))
        assert sens == 0.0
        assert prec is None


class TestConnectedComponents:
    def test_diagonal_voxels_single_component_26(self):
        data = blank((4, 4, 4))
        data[1, 1, 1] = 1
        data[2, 2, 2] = 1
        _, count = connected_components(mask_of(data), 26)
        assert count == 1
        _, count6 = connected_components(mask_of(data), 6)
        assert count6 == 2

    def test_separated_voxels_two_components(self):
        data = blank((5, 5, 5))
        data[0, 0, 0] = 1
        data[0, 0, 2] = 1
        _, count = connected_components(mask_of(data), 26)
        assert count == 2

    def test_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(2)
        for conn in (6, 26):
            for _ in range(15):
                data = (rng.random((6, 6, 6)) > 0.7).astype(np.uint8)
                labels, count = connected_components(data, conn)
                ref_labels, ref_count = flood_fill_components(data, conn)
                assert count == ref_count
                # same partition and same deterministic ordering: both label
                # components by first C-order voxel
                assert np.array_equal(labels, ref_labels)


class TestLesionwisePR:
    def test_overlap_above_quarter_detected(self):
        manual = blank()
        manual[0, 0, :8] = 1  # one lesion, 8 voxels
        auto = blank()
        auto[0, 0, :3] = 1  # 3/8 = 37.5% > 25%
        counts = lesionwise_pr(mask_of(auto), mask_of(manual))
        assert (counts.tp, counts.fn, counts.fp) == (1, 0, 0)
        assert counts.sensitivity == 100.0
        assert counts.precision == 100.0

    def test_exactly_quarter_is_fn(self):
        manual = blank()
        manual[0, 0, :8] = 1
        auto = blank()
        auto[0, 0, :2] = 1  # 2/8 = 25% exactly: strict > fails
        counts = lesionwise_pr(mask_of(auto), mask_of(manual))
        assert (counts.tp, counts.fn) == (0, 1)
        assert counts.sensitivity == 0.0

    def test_matched_pair_plus_spurious_blob(self):
        manual = blank((10, 10, 10))
        manual[1:3, 1:3, 1:3] = 1
        auto = blank((10, 10, 10))
        auto[1:3, 1:3, 1:3] = 1
        auto[7:9, 7:9, 7:9] = 1
        counts = lesionwise_pr(mask_of(auto), mask_of(manual))
        assert counts.sensitivity == 100.0
        assert counts.precision == 50.0
        assert (counts.tp, counts.fp, counts.fn) == (1, 1, 0)

    def test_no_manual_lesions_na(self):
        auto = blank()
        auto[0, 0, 0] = 1
        counts = lesionwise_pr(mask_of(auto), mask_of(blank()))
        assert counts.sensitivity is None
        assert counts.precision == 0.0
        assert counts.fp == 1

    def test_component_touching_detected_lesion_is_correct(self):
        # two auto components both touch the same detected manual lesion
        manual = blank((12, 4, 4))
        manual[0:8, 0, 0] = 1
        auto = blank((12, 4, 4))
        auto[0:3, 0, 0] = 1
        auto[5:8, 0, 0] = 1  # disjoint from the first auto component
        counts = lesionwise_pr(mask_of(auto), mask_of(manual))
        assert counts.tp == 1
        assert counts.fp == 0
        assert counts.precision == 100.0


class TestSpecificityAndConsensus:
    def test_all_empty_predictions(self):
        masks = [mask_of(blank()) for _ in range(4)]
        assert volumewise_specificity(masks) == 100.0

    def test_one_of_four_flagged(self):
        masks = [mask_of(blank()) for _ in range(3)]
        flagged = blank()
        flagged[0, 0, 0] = 1
        masks.append(mask_of(flagged))
        assert volumewise_specificity(masks) == 75.0

    def test_all_flagged(self):
        flagged = blank()
        flagged[0, 0, 0] = 1
        assert volumewise_specificity([mask_of(flagged)] * 3) == 0.0

    def test_majority_vote_thresholds(self):
        dims = (2, 2, 2)
        voters = []
        for i in range(7):
            data = np.zeros(dims, dtype=np.uint8)
            if i < 4:
                data[0, 0, 0] = 1  # 4 of 7 raters mark this voxel
            if i < 3:
                data[1, 1, 1] = 1  # 3 of 7 raters mark this one
            voters.append(mask_of(data))
        voted = majority_vote(voters)
        assert voted.data[0, 0, 0] == 1
        assert voted.data[1, 1, 1] == 0

    def test_unanimous_identity(self):
        data = blank()
        data[2:4, 2:4, 2:4] = 1
        m = mask_of(data)
        assert np.array_equal(majority_vote([m, m, m]).data, m.data)

    def test_needs_two_masks(self):
        with pytest.raises(ConfigError):
            majority_vote([mask_of(blank())])


class TestAggregate:
    def test_odd_count_median(self):
        rows = [{"metric": "dice", "value": v} for v in (1, 2, 3)]
        assert aggregate(rows)["dice"]["median"] == 2.0

    def test_even_count_median_and_iqr(self):
        rows = [{"metric": "dice", "value": v} for v in (1, 2, 3, 4)]
        agg = aggregate(rows)["dice"]
        assert agg["median"] == 2.5
        assert np.isclose(agg["iqr"], 3.25 - 1.75)

    def test_single_value(self):
        agg = aggregate([{"metric": "mse", "value": 7.0}])["mse"]
        assert agg["median"] == 7.0
        assert agg["iqr"] == 0.0

    def test_none_values_skipped(self):
        rows = [{"metric": "prec", "value": None}, {"metric": "prec", "value": 50.0}]
        assert aggregate(rows)["prec"]["n"] == 1

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            aggregate([])


class TestMetricsReport:
    def test_json_and_csv_output(self, tmp_path):
        report = MetricsReport()
        report.add("s1", "dice", 90.0)
        report.add("s2", "dice", 80.0)
        report.add("s1", "rvd", -5.0)
        report.to_json(tmp_path / "r.json")
        report.to_csv(tmp_path / "r.csv")
        import json

        payload = json.loads((tmp_path / "r.json").read_text())
        assert payload["aggregates"]["dice"]["median"] == 85.0
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "metric,median (IQR),n"
        assert any("dice" in line for line in lines)
