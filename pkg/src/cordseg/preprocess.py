"""Patch extraction, z-score normalization, percentile-landmark intensity
standardization, and probability-volume reconstruction.

Patch arrays are (H, W) for axial 2D patches and (D, H, W) for 3D patches,
where D is the slice axis, H the second volume axis, and W the first.
A placement is the (z0, y0, x0) volume index of the patch's first voxel;
offsets may be negative for patches that hang past the volume edge
(out-of-bounds regions are zero-padded on extraction and ignored on
reconstruction).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .volume import Volume


@dataclass(frozen=True)
class PatchConfig:
    """Patch sizes for both stages and the slice stride used at inference."""

    stage1_size: int = 96
    stage2_size: tuple[int, int, int] = (48, 64, 64)  # (D, H, W)
    inference_stride_z: int = 24

    def __post_init__(self):
        if self.stage1_size < 1 or min(self.stage2_size) < 1:
            raise ConfigError("patch sizes must be positive")
        if not 1 <= self.inference_stride_z <= self.stage2_size[0]:
            raise ConfigError("inference stride must be in [1, patch depth]")


@dataclass(frozen=True)
class NormStats:
    """Pooled intensity mean/std of the training patches."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ConfigError(f"normalization std must be positive, got {self.std}")


LANDMARK_PERCENTILES = (1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99)


@dataclass(frozen=True)
class IntensityLandmarks:
    """Percentile landmarks mapped onto the fixed [0, 100] standard scale."""

    percentiles: tuple = LANDMARK_PERCENTILES
    values: tuple = ()

    def __post_init__(self):
        if len(self.percentiles) != len(self.values):
            raise ConfigError("percentiles and values must have equal length")
        for seq, label in ((self.percentiles, "percentiles"), (self.values, "values")):
            if any(b <= a for a, b in zip(seq, seq[1:])):
                raise ConfigError(f"landmark {label} must be strictly increasing")


def _tile_offsets(extent: int, tile: int) -> list[int]:
    """Left-aligned stride-``tile`` offsets plus a right-aligned trailing
    tile when the extent is not an exact multiple."""
    if extent <= tile:
        return [0]
    offsets = list(range(0, extent - tile + 1, tile))
    if offsets[-1] != extent - tile:
        offsets.append(extent - tile)
    return offsets


def _crop_padded(data: np.ndarray, z0: int, y0: int, x0: int, d: int, h: int, w: int):
    """(D, H, W) patch cut out of an (X, Y, Z) volume, zero-padded."""
    out = np.zeros((d, h, w), dtype=data.dtype)
    x_lo, x_hi = max(0, x0), min(data.shape[0], x0 + w)
    y_lo, y_hi = max(0, y0), min(data.shape[1], y0 + h)
    z_lo, z_hi = max(0, z0), min(data.shape[2], z0 + d)
    if x_lo < x_hi and y_lo < y_hi and z_lo < z_hi:
        block = data[x_lo:x_hi, y_lo:y_hi, z_lo:z_hi]
        out[z_lo - z0 : z_hi - z0, y_lo - y0 : y_hi - y0, x_lo - x0 : x_hi - x0] = (
            block.transpose(2, 1, 0)
        )
    return out


def extract_axial_patches(vol: Volume, cfg: PatchConfig):
    """Tile every axial slice with stage-1 patches.

    Returns a list of (patch, placement) where patch is (size, size) and
    placement is (z, y0, x0). The tiling covers every in-plane voxel;
    patches overlap when the in-plane dims are not multiples of the size.
    """
    size = cfg.stage1_size
    w_ext, h_ext, depth = vol.dims
    xs = _tile_offsets(w_ext, size)
    ys = _tile_offsets(h_ext, size)
    patches = []
    for z in range(depth):
        for y0 in ys:
            for x0 in xs:
                patch = _crop_padded(vol.data, z, y0, x0, 1, size, size)[0]
                patches.append((patch, (z, y0, x0)))
    return patches


def compute_norm_stats(training_patches) -> NormStats:
    """Pooled mean and standard deviation over all training-patch voxels."""
    n = 0
    total = 0.0
    total_sq = 0.0
    for patch in training_patches:
        n += patch.size
        total += float(np.sum(patch, dtype=np.float64))
        total_sq += float(np.sum(np.square(patch, dtype=np.float64)))
    if n == 0:
        raise ConfigError("need at least one training patch")
    mean = total / n
    var = total_sq / n - mean * mean
    if var <= 0:
        raise ConfigError("training patches have zero intensity variance")
    return NormStats(mean, float(np.sqrt(var)))


def apply_zscore(patch: np.ndarray, stats: NormStats) -> np.ndarray:
    return ((patch - stats.mean) / stats.std).astype(patch.dtype)


def learn_landmarks(training_stacks) -> IntensityLandmarks:
    """Average the per-stack percentile profiles on the [0, 100] scale.

    Each stack is the pile of 3D patches of one training volume; its
    percentile vector is rescaled so the 1st percentile maps to 0 and the
    99th to 100 before averaging across stacks.
    """
    pcts = np.asarray(LANDMARK_PERCENTILES, dtype=np.float64)
    profiles = []
    for stack in training_stacks:
        v = np.percentile(stack, pcts)
        span = v[-1] - v[0]
        if span <= 0:
            raise ConfigError("degenerate stack: intensity percentiles are flat")
        profiles.append((v - v[0]) / span * 100.0)
    if not profiles:
        raise ConfigError("need at least one training stack")
    values = np.mean(profiles, axis=0)
    return IntensityLandmarks(tuple(float(p) for p in pcts), tuple(float(v) for v in values))


def standardize(stack: np.ndarray, landmarks: IntensityLandmarks) -> np.ndarray:
    """Piecewise-linear map of the stack's own percentiles onto the
    landmark values, clamped beyond the outermost landmarks. Monotone
    non-decreasing by construction."""
    src = np.percentile(stack, np.asarray(landmarks.percentiles, dtype=np.float64))
    if src[-1] - src[0] <= 0:
        raise ConfigError("degenerate stack: intensity percentiles are flat")
    tgt = np.asarray(landmarks.values, dtype=np.float64)
    # np.interp needs strictly increasing knots; drop ties (map stays monotone)
    keep = [0]
    for i in range(1, len(src)):
        if src[i] > src[keep[-1]]:
            keep.append(i)
    out = np.interp(stack.astype(np.float64), src[keep], tgt[keep])
    return out.astype(stack.dtype)


def extract_patches_along_centerline(vol: Volume, centerline, cfg: PatchConfig,
                                     mode: str, n_samples: int = 1, rng=None):
    """Stage-2 patches whose in-plane centers track the centerline.

    Infer mode tiles the slice axis with ``cfg.inference_stride_z`` so the
    union of patches covers the full centerline extent; train mode draws
    ``n_samples`` patch centers at rng-chosen centerline slices. Each
    patch's in-plane center is the centerline point at its central slice,
    rounded to the nearest voxel.
    """
    if len(centerline.z) == 0:
        raise ConfigError("empty centerline")
    d, h, w = cfg.stage2_size
    z_lo, z_hi = int(centerline.z[0]), int(centerline.z[-1])
    if mode == "infer":
        starts = []
        z0 = z_lo
        while z0 + d <= z_hi + 1:
            starts.append(z0)
            z0 += cfg.inference_stride_z
        covered_to = starts[-1] + d if starts else z_lo
        if covered_to < z_hi + 1:
            starts.append(max(z_lo, z_hi + 1 - d))
    elif mode == "train":
        if rng is None:
            raise ConfigError("train-mode extraction needs a seeded rng")
        centers = rng.choice(centerline.z, size=n_samples)
        starts = [int(zc) - d // 2 for zc in centers]
    else:
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")

    out = []
    for z0 in starts:
        zc = z0 + d // 2
        cx, cy = centerline.point_at(zc)
        x0 = int(np.floor(cx + 0.5)) - w // 2
        y0 = int(np.floor(cy + 0.5)) - h // 2
        patch = _crop_padded(vol.data, z0, y0, x0, d, h, w)
        out.append((patch, (z0, y0, x0)))
    return out


def reconstruct_volume(predictions, reference: Volume) -> Volume:
    """Paste patch predictions back onto the reference grid.

    Overlapping voxels are averaged (accumulated in float64); voxels not
    covered by any patch are 0.
    """
    if not predictions:
        raise ConfigError("no predictions to reconstruct from")
    acc = np.zeros(reference.dims, dtype=np.float64)
    cnt = np.zeros(reference.dims, dtype=np.float64)
    w_ext, h_ext, depth = reference.dims
    for patch, placement in predictions:
        if patch.ndim == 2:
            patch = patch[None]
        z0, y0, x0 = placement
        d, h, w = patch.shape
        x_lo, x_hi = max(0, x0), min(w_ext, x0 + w)
        y_lo, y_hi = max(0, y0), min(h_ext, y0 + h)
        z_lo, z_hi = max(0, z0), min(depth, z0 + d)
        if x_lo >= x_hi or y_lo >= y_hi or z_lo >= z_hi:
            continue
        block = patch[z_lo - z0 : z_hi - z0, y_lo - y0 : y_hi - y0, x_lo - x0 : x_hi - x0]
        acc[x_lo:x_hi, y_lo:y_hi, z_lo:z_hi] += block.transpose(2, 1, 0)
        cnt[x_lo:x_hi, y_lo:y_hi, z_lo:z_hi] += 1.0
    covered = cnt > 0
    acc[covered] /= cnt[covered]
    return reference.with_data(acc.astype(np.float32))
