"""Seeded training-time augmentation: shift, rotation, elastic deformation,
flips, and lesion-border jitter.

Geometric transforms are applied with identical parameters to the image
and its label; images are warped with linear interpolation, labels with
nearest-neighbor so they stay binary. Transform order is
shift -> rotate -> elastic -> flip, composed into a single resampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion, gaussian_filter, label, map_coordinates

from .errors import ConfigError


@dataclass(frozen=True)
class AugmentConfig:
    shift_max: float = 10.0          # voxels per axis
    rotate_max: float = 20.0         # degrees, in-plane
    elastic_alpha: float = 100.0     # deformation coefficient
    elastic_sigma: float = 16.0      # smoothing std, voxels
    border_jitter_radius: int = 1    # lesion labels only
    enable_shift: bool = True
    enable_rotate: bool = True
    enable_elastic: bool = True
    enable_flip: bool = True
    enable_border_jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.shift_max, self.rotate_max, self.elastic_alpha, self.elastic_sigma) < 0:
            raise ConfigError("augmentation magnitudes must be non-negative")
        if self.border_jitter_radius < 0:
            raise ConfigError("border jitter radius must be non-negative")

    @classmethod
    def stage2_default(cls, seed: int = 0) -> "AugmentConfig":
        """Stage-2 policy: flips plus lesion-border jitter only."""
        return cls(enable_shift=False, enable_rotate=False, enable_elastic=False,
                   enable_flip=True, enable_border_jitter=True, seed=seed)


def _ball(radius: int, ndim: int) -> np.ndarray:
    grids = np.indices((2 * radius + 1,) * ndim) - radius
    return (grids**2).sum(axis=0) <= radius**2


def _displacement(shape, alpha, sigma, rng):
    return [
        gaussian_filter(rng.uniform(-1.0, 1.0, size=shape), sigma) * alpha
        for _ in range(len(shape))
    ]


def elastic_deform(patch: np.ndarray, alpha: float, sigma: float, seed,
                   interp: str = "linear") -> np.ndarray:
    """Backward-warp by a Gaussian-smoothed random displacement field.

    The field is uniform noise in [-1, 1] per axis, smoothed with std
    ``sigma`` and scaled by ``alpha``; alpha = 0 is the identity. Edge
    samples replicate the border so constant patches stay constant.
    """
    if alpha < 0 or sigma <= 0:
        raise ConfigError("need alpha >= 0 and sigma > 0")
    if alpha == 0:
        return patch.copy()
    rng = np.random.default_rng(seed)
    disp = _displacement(patch.shape, alpha, sigma, rng)
    coords = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in patch.shape), indexing="ij")
    coords = [c + d for c, d in zip(coords, disp)]
    order = 1 if interp == "linear" else 0
    return map_coordinates(patch, coords, order=order, mode="nearest")


def _in_plane_rotation(angle_deg: float, ndim: int):
    """Backward-map rotation matrix acting on the last two axes."""
    theta = np.deg2rad(angle_deg)
    rot2 = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    mat = np.eye(ndim)
    mat[ndim - 2 :, ndim - 2 :] = rot2
    return mat


def augment_pair(image: np.ndarray, lbl: np.ndarray, cfg: AugmentConfig, sample_seed: int):
    """One random draw of the enabled transforms applied to an (image,
    label) patch pair; a pure function of (inputs, cfg, sample_seed)."""
    if image.shape != lbl.shape:
        raise ConfigError(f"image/label shape mismatch: {image.shape} vs {lbl.shape}")
    rng = np.random.default_rng((cfg.seed, sample_seed))
    ndim = image.ndim

    shift = np.zeros(ndim)
    if cfg.enable_shift:
        shift = rng.uniform(-cfg.shift_max, cfg.shift_max, size=ndim)
    angle = 0.0
    if cfg.enable_rotate:
        angle = float(rng.uniform(-cfg.rotate_max, cfg.rotate_max))
    disp = None
    if cfg.enable_elastic and cfg.elastic_alpha > 0:
        disp = _displacement(image.shape, cfg.elastic_alpha, cfg.elastic_sigma, rng)
    flips = []
    if cfg.enable_flip:
        # in-plane axes only; drawn independently with p = 0.5
        flips = [ax for ax in (ndim - 2, ndim - 1) if rng.random() < 0.5]

    out_img, out_lbl = image, lbl
    if cfg.enable_shift or cfg.enable_rotate or disp is not None:
        coords = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in image.shape),
                             indexing="ij")
        pts = np.stack([c.ravel() for c in coords])
        if disp is not None:
            pts = pts + np.stack([d.ravel() for d in disp])
        center = (np.asarray(image.shape, dtype=np.float64) - 1.0) / 2.0
        rot = _in_plane_rotation(angle, ndim)
        # source = R^-1 (p - c) + c - shift (backward map for shift then rotate)
        pts = rot.T @ (pts - center[:, None]) + (center - shift)[:, None]
        src = [p.reshape(image.shape) for p in pts]
        out_img = map_coordinates(image, src, order=1, mode="constant", cval=0.0)
        out_lbl = map_coordinates(lbl, src, order=0, mode="constant", cval=0)
    if cfg.enable_border_jitter and cfg.border_jitter_radius >= 1:
        out_lbl = border_jitter(out_lbl, cfg.border_jitter_radius,
                                rng.integers(np.iinfo(np.int64).max))
    for ax in flips:
        out_img = np.flip(out_img, axis=ax)
        out_lbl = np.flip(out_lbl, axis=ax)
    return np.ascontiguousarray(out_img), np.ascontiguousarray(out_lbl)


def border_jitter(lbl: np.ndarray, radius: int, seed) -> np.ndarray:
    """Randomly erode or dilate each connected lesion by a small ball.

    Voxels farther than ``radius`` from a lesion boundary never change;
    single-voxel lesions may vanish under an erosion draw. The result is
    binary; empty labels pass through unchanged.
    """
    if radius < 1:
        raise ConfigError(f"jitter radius must be >= 1, got {radius}")
    labels, count = label(lbl > 0, structure=np.ones((3,) * lbl.ndim))
    if count == 0:
        return lbl.copy()
    rng = np.random.default_rng(seed)
    out = np.zeros(lbl.shape, dtype=np.uint8)
    for comp in range(1, count + 1):
        comp_mask = labels == comp
        r = int(rng.integers(1, radius + 1))
        if rng.random() < 0.5:
            comp_mask = binary_erosion(comp_mask, structure=_ball(r, lbl.ndim))
        else:
            comp_mask = binary_dilation(comp_mask, structure=_ball(r, lbl.ndim))
        out |= comp_mask.astype(np.uint8)
    return out
