import numpy as np
import pytest

from cordseg.centerline import Centerline
from cordseg.errors import ConfigError
from cordseg.preprocess import (
    IntensityLandmarks,
    NormStats,
    PatchConfig,
    apply_zscore,
    compute_norm_stats,
    extract_axial_patches,
    extract_patches_along_centerline,
    learn_landmarks,
    reconstruct_volume,
    standardize,
)
from cordseg.volume import Volume


def make_volume(data):
    return Volume(np.asarray(data, dtype=np.float32), (1, 1, 1), "RPI")


class TestAxialPatches:
    def test_exact_fit_one_patch_per_slice(self):
        rng = np.random.default_rng(0)
        vol = make_volume(rng.random((96, 96, 10)))
        patches = extract_axial_patches(vol, PatchConfig())
        assert len(patches) == 10
        assert all(pl == (z, 0, 0) for z, (_, pl) in enumerate(patches) for pl in [pl])
        assert np.array_equal(patches[3][0], vol.data[:, :, 3].T)

    def test_overlapping_tiles_cover_everything(self):
        rng = np.random.default_rng(1)
        vol = make_volume(rng.random((100, 96, 1)))
        patches = extract_axial_patches(vol, PatchConfig())
        assert len(patches) == 2  # ceil(100/96) tiles in x
        covered = np.zeros((100, 96), dtype=bool)
        for _, (z, y0, x0) in patches:
            covered[x0 : x0 + 96, y0 : y0 + 96] = True
        assert covered.all()

    def test_small_volume_zero_padded(self):
        vol = make_volume(np.full((40, 50, 2), 7.0))
        patches = extract_axial_patches(vol, PatchConfig())
        assert len(patches) == 2
        patch = patches[0][0]
        assert patch.shape == (96, 96)
        assert patch[:50, :40].min() == 7.0
        assert patch[50:, :].max() == 0.0 and patch[:, 40:].max() == 0.0

    def test_constant_volume_constant_patches(self):
        vol = make_volume(np.full((96, 96, 3), 2.0))
        for patch, _ in extract_axial_patches(vol, PatchConfig()):
            assert np.all(patch == 2.0)


class TestNormStats:
    def test_known_arithmetic(self):
        stats = NormStats(mean=5.0, std=2.0)
        assert apply_zscore(np.array([9.0], dtype=np.float32), stats)[0] == 2.0

    def test_pooled_training_set_normalizes_to_unit(self):
        rng = np.random.default_rng(2)
        patches = [rng.random((96, 96)).astype(np.float32) * 7 + 3 for _ in range(20)]
        stats = compute_norm_stats(patches)
        pooled = np.concatenate([apply_zscore(p, stats).ravel() for p in patches])
        assert abs(pooled.mean()) < 1e-4
        assert abs(pooled.std() - 1.0) < 1e-4

    def test_constant_training_set_rejected(self):
        with pytest.raises(ConfigError, match="variance"):
            compute_norm_stats([np.full((4, 4), 1.0)])

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            compute_norm_stats([])


class TestLandmarks:
    def test_fixed_point_on_matching_stack(self):
        rng = np.random.default_rng(3)
        stack = rng.random((4, 8, 8, 8)).astype(np.float64) * 100
        landmarks = learn_landmarks([stack])
        out = standardize(stack, landmarks)
        src = np.percentile(stack, landmarks.percentiles)
        inside = (stack >= src[0]) & (stack <= src[-1])
        # the learned map for its own training stack is affine; values at and
        # between landmark knots reproduce the [0, 100]-rescaled input
        expected = (stack - src[0]) / (src[-1] - src[0]) * 100.0
        assert np.allclose(out[inside], expected[inside], atol=1e-6)

    def test_affine_equivariance(self):
        rng = np.random.default_rng(4)
        stack = rng.standard_normal((2, 6, 6, 6)) * 10 + 50
        landmarks = learn_landmarks([stack])
        shifted = 3.0 * stack + 11.0
        a = standardize(stack, landmarks)
        b = standardize(shifted, landmarks)
        assert np.allclose(a, b, atol=1e-6)

    def test_monotone(self):
        rng = np.random.default_rng(5)
        stack = rng.random((1, 5, 5, 5)) * 40
        landmarks = learn_landmarks([rng.random((1, 5, 5, 5)) * 7 + 1])
        flat = np.sort(stack.ravel())
        out = standardize(flat, landmarks)
        assert np.all(np.diff(out) >= -1e-9)

    def test_fixed_point_and_idempotency_on_standardized_data(self):
        # 101 sorted samples put every landmark percentile rank on an exact
        # order statistic, so the stack's percentiles equal the landmarks
        rng = np.random.default_rng(6)
        landmarks = learn_landmarks([rng.random((2, 6, 6, 6)) * 25 + 5])
        ranks = np.asarray(landmarks.percentiles)
        knots = np.asarray(landmarks.values)
        data = np.interp(np.arange(101, dtype=np.float64), ranks, knots)
        np.testing.assert_allclose(np.percentile(data, ranks), knots, atol=1e-12)
        once = standardize(data, landmarks)
        assert np.allclose(once, data, atol=1e-6)   # fixed point
        twice = standardize(once, landmarks)
        assert np.allclose(twice, once, atol=1e-6)  # idempotent

    def test_degenerate_stack_rejected(self):
        landmarks = IntensityLandmarks(values=tuple(float(v) for v in np.linspace(0, 100, 11)))
        with pytest.raises(ConfigError, match="degenerate"):
            standardize(np.full((2, 2, 2), 3.0), landmarks)
        with pytest.raises(ConfigError, match="degenerate"):
            learn_landmarks([np.full((2, 2, 2), 3.0)])


class TestCenterlinePatches:
    def _centerline(self, depth, x=24.0, y=24.0):
        z = np.arange(depth)
        return Centerline(z, np.tile([x, y], (depth, 1)), (1, 1, 1))

    def test_exact_fit_single_patch(self):
        rng = np.random.default_rng(7)
        vol = make_volume(rng.random((48, 48, 48)))
        cfg = PatchConfig(stage2_size=(48, 48, 48), inference_stride_z=48)
        patches = extract_patches_along_centerline(vol, self._centerline(48), cfg, "infer")
        assert len(patches) == 1
        assert patches[0][1] == (0, 0, 0)
        assert np.array_equal(patches[0][0], vol.data.transpose(2, 1, 0))

    def test_stride_24_covers_96_slices(self):
        rng = np.random.default_rng(8)
        vol = make_volume(rng.random((48, 48, 96)))
        cfg = PatchConfig(stage2_size=(48, 48, 48), inference_stride_z=24)
        patches = extract_patches_along_centerline(vol, self._centerline(96), cfg, "infer")
        starts = [pl[0] for _, pl in patches]
        assert starts == [0, 24, 48]
        covered = np.zeros(96, dtype=bool)
        for z0 in starts:
            covered[z0 : z0 + 48] = True
        assert covered.all()

    def test_coverage_for_any_stride(self):
        rng = np.random.default_rng(9)
        vol = make_volume(rng.random((48, 48, 70)))
        for stride in (1, 7, 16, 33, 48):
            cfg = PatchConfig(stage2_size=(48, 48, 48), inference_stride_z=stride)
            patches = extract_patches_along_centerline(vol, self._centerline(70), cfg, "infer")
            covered = np.zeros(70, dtype=bool)
            for _, (z0, _, _) in patches:
                covered[z0 : min(70, z0 + 48)] = True
            assert covered.all(), stride

    def test_edge_centerline_pads(self):
        rng = np.random.default_rng(10)
        vol = make_volume(rng.random((48, 48, 48)))
        cl = self._centerline(48, x=2.0, y=2.0)
        cfg = PatchConfig(stage2_size=(48, 48, 48), inference_stride_z=48)
        (patch, placement), = extract_patches_along_centerline(vol, cl, cfg, "infer")
        assert placement == (0, -22, -22)
        assert patch[:, 0, 0] .max() == 0.0  # padded corner

    def test_train_mode_deterministic(self):
        rng = np.random.default_rng(11)
        vol = make_volume(rng.random((48, 48, 60)))
        cfg = PatchConfig(stage2_size=(48, 48, 48), inference_stride_z=24)
        a = extract_patches_along_centerline(vol, self._centerline(60), cfg, "train", 3,
                                             np.random.default_rng(5))
        b = extract_patches_along_centerline(vol, self._centerline(60), cfg, "train", 3,
                                             np.random.default_rng(5))
        assert all(np.array_equal(pa, pb) and la == lb for (pa, la), (pb, lb) in zip(a, b))

    def test_empty_centerline_rejected(self):
        vol = make_volume(np.zeros((8, 8, 8)))
        empty = Centerline(np.array([], dtype=int), np.zeros((0, 2)), (1, 1, 1))
        with pytest.raises(ConfigError, match="empty"):
            extract_patches_along_centerline(vol, empty, PatchConfig(), "infer")


class TestReconstruct:
    def test_single_full_patch(self):
        ref = make_volume(np.zeros((48, 48, 48)))
        patch = np.full((48, 48, 48), 0.7, dtype=np.float32)
        out = reconstruct_volume([(patch, (0, 0, 0))], ref)
        assert np.allclose(out.data, 0.7)

    def test_overlap_averages(self):
        ref = make_volume(np.zeros((4, 4, 8)))
        a = np.full((6, 4, 4), 0.2, dtype=np.float32)
        b = np.full((6, 4, 4), 0.8, dtype=np.float32)
        out = reconstruct_volume([(a, (0, 0, 0)), (b, (2, 0, 0))], ref)
        assert np.allclose(out.data[:, :, 2:6], 0.5)
        assert np.allclose(out.data[:, :, :2], 0.2)
        assert np.allclose(out.data[:, :, 6:], 0.8)

    def test_disjoint_copy_through_and_uncovered_zero(self):
        ref = make_volume(np.zeros((4, 4, 10)))
        a = np.full((2, 4, 4), 0.3, dtype=np.float32)
        out = reconstruct_volume([(a, (1, 0, 0))], ref)
        assert np.allclose(out.data[:, :, 1:3], 0.3)
        assert np.allclose(out.data[:, :, 0], 0.0)
        assert np.allclose(out.data[:, :, 3:], 0.0)

    def test_extract_reconstruct_identity(self):
        rng = np.random.default_rng(12)
        vol = make_volume(rng.random((100, 96, 4)))
        patches = extract_axial_patches(vol, PatchConfig())
        out = reconstruct_volume(patches, vol)
        assert np.allclose(out.data, vol.data, atol=1e-6)

    def test_identity_along_centerline(self):
        rng = np.random.default_rng(13)
        vol = make_volume(rng.random((48, 48, 70)))
        cl = Centerline(np.arange(70), np.tile([24.0, 24.0], (70, 1)), (1, 1, 1))
        cfg = PatchConfig(stage2_size=(48, 48, 48), inference_stride_z=17)
        patches = extract_patches_along_centerline(vol, cl, cfg, "infer")
        out = reconstruct_volume(patches, vol)
        assert np.allclose(out.data, vol.data, atol=1e-6)

    def test_no_predictions_rejected(self):
        with pytest.raises(ConfigError):
            reconstruct_volume([], make_volume(np.zeros((2, 2, 2))))
