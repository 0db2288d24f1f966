"""Synthetic MRI-like phantom generator with exact ground truth.

Stands in for clinical data: a curved cord inside a CSF sheath over a
tissue background, with contrast presets, intramedullary lesions, additive
noise, and a low-frequency multiplicative bias field along the slice axis.
Masks and the analytic centerline are returned exactly (geometry is not
blurred, only intensities are).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .centerline import Centerline
from .dataset import DatasetIndex, SubjectRecord, split_dataset
from .errors import ConfigError
from .volume import Mask, Volume, write_volume

# (background, cord, csf, grey matter) per preset; grey matter is only
# painted for t2s ("grey matter visible")
_PRESETS = {
    "t1": {"bg": 45.0, "cord": 75.0, "csf": 25.0, "gm": None},
    "t2": {"bg": 30.0, "cord": 45.0, "csf": 95.0, "gm": None},
    "t2s": {"bg": 30.0, "cord": 45.0, "csf": 90.0, "gm": 62.0},
}


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    cord_radius: tuple[float, float] = (3.5, 4.5)        # mm
    curve_amplitude: tuple[float, float] = (2.0, 6.0)    # mm
    curve_period: tuple[float, float] = (80.0, 160.0)    # mm
    contrast: str = "t2"
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (2.0, 3.5)      # mm
    lesion_contrast: tuple[float, float] = (0.4, 0.7)    # fraction of cord->csf step
    csf_thickness: float = 2.0                           # mm
    noise_std: float = 0.05        # fraction of |csf - cord| contrast
    bias_amplitude: float = 0.2    # multiplicative, along the slice axis
    atrophy: tuple[float, float] = (1.0, 1.0)  # local radius compression factor
    pv_sigma: float = 0.0          # optional partial-volume blur, voxels
    seed: int = 0

    def __post_init__(self):
        if self.contrast not in _PRESETS:
            raise ConfigError(f"contrast must be one of {sorted(_PRESETS)}, got {self.contrast}")
        if self.cord_radius[0] <= 0 or self.cord_radius[0] > self.cord_radius[1]:
            raise ConfigError(f"bad cord radius range {self.cord_radius}")
        min_extent_mm = min(self.dims[0] * self.spacing[0], self.dims[1] * self.spacing[1])
        if self.cord_radius[1] >= min_extent_mm / 4:
            raise ConfigError("cord radius must be below a quarter of the in-plane extent")
        if self.lesion_count[0] < 0 or self.lesion_count[0] > self.lesion_count[1]:
            raise ConfigError(f"bad lesion count range {self.lesion_count}")
        if self.lesion_count[1] > 0 and self.lesion_radius[0] > self.cord_radius[1]:
            raise ConfigError("lesion radius too large for cord")
        if not 0 <= self.bias_amplitude < 1:
            raise ConfigError("bias amplitude must be in [0, 1)")


def generate_phantom(cfg: PhantomConfig, seed=None):
    """Build one phantom; returns (volume, cord mask, lesion mask,
    ground-truth centerline). Deterministic given (cfg, seed)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    w, h, d = cfg.dims
    sx, sy, sz = cfg.spacing
    preset = _PRESETS[cfg.contrast]

    r0 = rng.uniform(*cfg.cord_radius)
    amp_x = rng.uniform(*cfg.curve_amplitude)
    amp_y = rng.uniform(*cfg.curve_amplitude) * 0.5
    period = rng.uniform(*cfg.curve_period)
    phase_x, phase_y, phase_r = rng.uniform(0, 2 * np.pi, size=3)

    z_mm = np.arange(d) * sz
    cx_mm = w * sx / 2.0 + amp_x * np.sin(2 * np.pi * z_mm / period + phase_x)
    cy_mm = h * sy / 2.0 + amp_y * np.sin(2 * np.pi * z_mm / period + phase_y)

    radius = r0 * (1.0 + 0.08 * np.sin(2 * np.pi * 1.7 * z_mm / (d * sz) + phase_r))
    squeeze = rng.uniform(*cfg.atrophy)
    if squeeze < 1.0:
        center = rng.uniform(0.3, 0.7) * d * sz
        width = 0.15 * d * sz
        radius = radius * (1.0 - (1.0 - squeeze) * np.exp(-(((z_mm - center) / width) ** 2)))

    xg = (np.arange(w) * sx)[:, None]
    yg = (np.arange(h) * sy)[None, :]
    cord = np.zeros(cfg.dims, dtype=np.uint8)
    csf = np.zeros(cfg.dims, dtype=bool)
    gm = np.zeros(cfg.dims, dtype=bool)
    for z in range(d):
        dist_sq = (xg - cx_mm[z]) ** 2 + (yg - cy_mm[z]) ** 2
        inside = dist_sq <= radius[z] ** 2
        cord[:, :, z] = inside
        csf[:, :, z] = (dist_sq <= (radius[z] + cfg.csf_thickness) ** 2) & ~inside
        if preset["gm"] is not None:
            gm[:, :, z] = _butterfly(xg, yg, cx_mm[z], cy_mm[z], radius[z]) & inside

    lesion = np.zeros(cfg.dims, dtype=np.uint8)
    n_lesions = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    blobs = []
    zg = (np.arange(d) * sz)[None, None, :]
    for _ in range(n_lesions):
        zi = int(rng.integers(int(0.15 * d), int(0.85 * d)))
        r_les = rng.uniform(*cfg.lesion_radius)
        a = min(r_les * rng.uniform(0.8, 1.2), 0.75 * radius[zi])
        b = min(r_les * rng.uniform(0.8, 1.2), 0.75 * radius[zi])
        c = r_les * rng.uniform(1.2, 2.0)
        shift_r = rng.uniform(0, max(0.0, radius[zi] - max(a, b)) * 0.5)
        shift_t = rng.uniform(0, 2 * np.pi)
        lx = cx_mm[zi] + shift_r * np.cos(shift_t)
        ly = cy_mm[zi] + shift_r * np.sin(shift_t)
        ell = (
            ((xg[:, :, None] - lx) / a) ** 2
            + ((yg[:, :, None] - ly) / b) ** 2
            + ((zg - zi * sz) / c) ** 2
        ) <= 1.0
        ell &= cord > 0  # intramedullary by construction
        lesion |= ell.astype(np.uint8)
        blobs.append((ell, rng.uniform(*cfg.lesion_contrast)))

    img = np.full(cfg.dims, preset["bg"], dtype=np.float64)
    img[csf] = preset["csf"]
    img[cord > 0] = preset["cord"]
    if preset["gm"] is not None:
        img[gm] = preset["gm"]
    step = preset["csf"] - preset["cord"]
    for ell, level in blobs:
        img[ell] = preset["cord"] + level * step
    if cfg.pv_sigma > 0:
        img = gaussian_filter(img, cfg.pv_sigma)
    if cfg.bias_amplitude > 0:
        freq = rng.uniform(0.5, 1.0)
        phase = rng.uniform(0, 2 * np.pi)
        profile = 1.0 + cfg.bias_amplitude * np.sin(2 * np.pi * freq * np.arange(d) / d + phase)
        img = img * profile[None, None, :]
    if cfg.noise_std > 0:
        contrast = abs(preset["csf"] - preset["cord"])
        img = img + rng.normal(0.0, cfg.noise_std * contrast, size=cfg.dims)

    vol = Volume(img.astype(np.float32), cfg.spacing, "RPI")
    cord_mask = Mask(cord, cfg.spacing, "RPI")
    lesion_mask = Mask(lesion, cfg.spacing, "RPI")
    gt = Centerline(np.arange(d), np.stack([cx_mm / sx, cy_mm / sy], axis=1), cfg.spacing)
    return vol, cord_mask, lesion_mask, gt


def _butterfly(xg, yg, cx, cy, r):
    """Rough grey-matter butterfly: two lateral lobes plus a central bar."""
    lobes = np.zeros((xg.shape[0], yg.shape[1]), dtype=bool)
    for side in (-1.0, 1.0):
        lobes |= (((xg - (cx + side * 0.35 * r)) / (0.35 * r)) ** 2
                  + ((yg - cy) / (0.22 * r)) ** 2) <= 1.0
    lobes |= (((xg - cx) / (0.5 * r)) ** 2 + ((yg - cy) / (0.12 * r)) ** 2) <= 1.0
    return lobes


def generate_dataset(
    n: int,
    cfg: PhantomConfig,
    out_dir: str | Path,
    seed: int = 0,
    lesion_free_fraction: float = 0.0,
    fractions=(0.8, 0.1, 0.1),
) -> DatasetIndex:
    """Write ``n`` phantoms (NIfTI + centerline CSV) plus an index JSON.

    Exactly round(n * lesion_free_fraction) subjects get no lesions and a
    null lesion-mask entry. Byte-identical for a given seed.
    """
    if n < 3:
        raise ConfigError(f"need at least 3 subjects for a dataset, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    master = np.random.SeedSequence(seed)
    picker = np.random.default_rng(master.spawn(1)[0])
    n_free = int(np.floor(n * lesion_free_fraction + 0.5))
    lesion_free = set(picker.permutation(n)[:n_free].tolist())
    subject_seeds = master.spawn(n)

    ids = [f"sub-{i:03d}" for i in range(n)]
    assignment = split_dataset(ids, fractions, seed)
    records = []
    for i, sid in enumerate(ids):
        sub_cfg = replace(cfg, lesion_count=(0, 0)) if i in lesion_free else cfg
        vol, cord, lesion, gt = generate_phantom(sub_cfg, subject_seeds[i])
        image_name = f"{sid}_{cfg.contrast}.nii"
        cord_name = f"{sid}_{cfg.contrast}_cord.nii"
        lesion_name = f"{sid}_{cfg.contrast}_lesion.nii"
        write_volume(vol, out_dir / image_name)
        write_volume(cord, out_dir / cord_name)
        has_lesion = i not in lesion_free
        if has_lesion:
            write_volume(lesion, out_dir / lesion_name)
        gt.save_csv(out_dir / f"{sid}_{cfg.contrast}_centerline.csv")
        records.append(
            SubjectRecord(
                id=sid,
                contrast=cfg.contrast,
                image=image_name,
                cord_mask=cord_name,
                lesion_mask=lesion_name if has_lesion else None,
                split=assignment[sid],
            )
        )
    index = DatasetIndex(records, root=out_dir)
    index.save(out_dir / "index.json")
    return index
