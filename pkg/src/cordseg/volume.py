"""Volume and mask data model, NIfTI I/O, reorientation, and resampling.

Conventions
-----------
* ``Volume.data`` is indexed ``[x, y, z]`` (W, H, D); the first index moves
  fastest in the file payload.
* Orientation codes use the from-convention: each letter names the
  anatomical side the axis starts at, e.g. ``RPI`` = Right-to-left,
  Posterior-to-anterior, Inferior-to-superior.
* The affine maps voxel indices to world mm in the usual RAS+ frame
  (+x Right, +y Anterior, +z Superior).
* Resampled grids are anchored at the input's world-space corner
  (voxel centers shift by half the spacing difference), so resampling at
  the native spacing is the identity.

All types are immutable after construction; all operations are pure
functions and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from . import nifti
from .errors import ConfigError, GeometryError

# letter -> (world axis, sign of world motion along increasing index)
_LETTER_DIR = {
    "R": (0, -1.0),
    "L": (0, 1.0),
    "A": (1, -1.0),
    "P": (1, 1.0),
    "S": (2, -1.0),
    "I": (2, 1.0),
}
_DIR_LETTER = {v: k for k, v in _LETTER_DIR.items()}


def validate_orientation(code: str) -> str:
    """Check that a 3-letter code names each anatomical axis exactly once."""
    code = code.upper()
    if len(code) != 3 or any(c not in _LETTER_DIR for c in code):
        raise ConfigError(f"invalid orientation code {code!r}")
    axes = sorted(_LETTER_DIR[c][0] for c in code)
    if axes != [0, 1, 2]:
        raise ConfigError(f"orientation code {code!r} repeats an anatomical axis")
    return code


def orientation_from_affine(affine: np.ndarray) -> str:
    """Derive the orientation code from an affine's dominant axis directions.

    Rejects affines that are oblique by more than 45 degrees on two or more
    axes, or whose dominant directions do not form a permutation.
    """
    letters = []
    claimed = set()
    oblique = 0
    for j in range(3):
        col = affine[:3, j]
        norm_sq = float(col @ col)
        if norm_sq == 0:
            raise GeometryError("affine has a zero column")
        w = int(np.argmax(np.abs(col)))
        if col[w] ** 2 < 0.5 * norm_sq:
            oblique += 1
        if w in claimed:
            raise GeometryError("ambiguous affine: two axes share a dominant direction")
        claimed.add(w)
        letters.append(_DIR_LETTER[(w, 1.0 if col[w] > 0 else -1.0)])
    if oblique >= 2:
        raise GeometryError("affine is oblique by more than 45 degrees on two axes")
    return "".join(letters)


def default_affine(spacing, orientation: str) -> np.ndarray:
    """Axis-aligned affine consistent with an orientation code, origin at 0."""
    affine = np.zeros((4, 4))
    affine[3, 3] = 1.0
    for j, letter in enumerate(orientation):
        w, s = _LETTER_DIR[letter]
        affine[w, j] = s * spacing[j]
    return affine


@dataclass(frozen=True)
class Volume:
    """3D scalar grid with voxel spacing (mm), orientation, and affine."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    orientation: str = "RPI"
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ConfigError(f"volume data must be 3D, got {self.data.ndim}-D")
        if min(self.data.shape) < 1:
            raise ConfigError(f"degenerate dimensions {self.data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ConfigError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "orientation", validate_orientation(self.orientation))
        if self.affine is None:
            object.__setattr__(self, "affine", default_affine(spacing, self.orientation))
        else:
            object.__setattr__(self, "affine", np.asarray(self.affine, dtype=np.float64))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new voxel values."""
        return type(self)(data, self.spacing, self.orientation, self.affine)

    def same_geometry(self, other: "Volume", tol: float = 1e-5) -> bool:
        return (
            self.dims == other.dims
            and self.orientation == other.orientation
            and np.allclose(self.spacing, other.spacing, atol=tol)
        )


@dataclass(frozen=True)
class Mask(Volume):
    """Volume whose voxels are restricted to {0, 1}; stored as uint8."""

    def __post_init__(self):
        data = self.data
        if data.dtype != np.uint8:
            values = np.unique(data)
            if not np.all(np.isin(values, (0, 1))):
                raise ConfigError("mask voxels must be exactly 0 or 1")
            data = data.astype(np.uint8)
            object.__setattr__(self, "data", data)
        elif data.size and data.max() > 1:
            raise ConfigError("mask voxels must be exactly 0 or 1")
        super().__post_init__()

    @classmethod
    def from_volume(cls, vol: Volume) -> "Mask":
        return cls(vol.data, vol.spacing, vol.orientation, vol.affine)


def read_volume(path: str | Path) -> Volume:
    """Read a NIfTI-1 file (.nii or .nii.gz) into a Volume.

    Voxel values arrive as float32 with any header scaling applied; the
    orientation code is derived from the file's affine.
    """
    data, spacing, affine = nifti.read_nifti(path)
    orientation = orientation_from_affine(affine)
    return Volume(data, spacing, orientation, affine)


def read_mask(path: str | Path) -> Mask:
    return Mask.from_volume(read_volume(path))


def write_volume(vol: Volume, path: str | Path) -> None:
    """Write a Volume (float32) or Mask (uint8) as NIfTI-1."""
    nifti.write_nifti(path, vol.data, vol.spacing, vol.affine)


def reorient(vol: Volume, target: str) -> Volume:
    """Permute/flip voxel axes so the volume's orientation equals ``target``.

    World-space content is unchanged: the affine is composed with the
    inverse index transform. The multiset of voxel values is preserved.
    """
    target = validate_orientation(target)
    if target == vol.orientation:
        return vol
    src = [_LETTER_DIR[c] for c in vol.orientation]
    perm = []
    flips = []
    for letter in target:
        w, s = _LETTER_DIR[letter]
        i = next(i for i, (wi, _) in enumerate(src) if wi == w)
        perm.append(i)
        flips.append(src[i][1] != s)

    data = np.transpose(vol.data, perm)
    spacing = tuple(vol.spacing[i] for i in perm)
    index_map = np.zeros((4, 4))
    index_map[3, 3] = 1.0
    for j, (i, flip) in enumerate(zip(perm, flips)):
        if flip:
            data = np.flip(data, axis=j)
            index_map[i, j] = -1.0
            index_map[i, 3] = vol.dims[i] - 1
        else:
            index_map[i, j] = 1.0
    affine = vol.affine @ index_map
    data = np.ascontiguousarray(data)
    if isinstance(vol, Mask):
        return Mask(data, spacing, target, affine)
    return Volume(data, spacing, target, affine)


def _output_dims(in_dims, in_spacing, out_spacing) -> tuple[int, int, int]:
    return tuple(
        max(1, int(np.floor(d * si / so + 0.5)))
        for d, si, so in zip(in_dims, in_spacing, out_spacing)
    )


def resample(vol: Volume, target_spacing, interp: str = "trilinear") -> Volume:
    """Resample onto a grid with the given spacing, anchored at the corner.

    Output dims follow max(1, round(dim * in_spacing / out_spacing)).
    ``interp`` is "trilinear" or "nearest"; masks require nearest.
    """
    target_spacing = tuple(float(s) for s in np.broadcast_to(target_spacing, (3,)))
    if min(target_spacing) <= 0:
        raise ConfigError(f"target spacing must be positive, got {target_spacing}")
    if interp not in ("trilinear", "nearest"):
        raise ConfigError(f"unknown interpolation {interp!r}")
    if isinstance(vol, Mask) and interp != "nearest":
        raise ConfigError("masks must be resampled with nearest interpolation")

    out_dims = _output_dims(vol.dims, vol.spacing, target_spacing)
    ratios = [so / si for si, so in zip(vol.spacing, target_spacing)]
    axes = [
        np.arange(n, dtype=np.float64) * r + (0.5 * r - 0.5)
        for n, r in zip(out_dims, ratios)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    order = 1 if interp == "trilinear" else 0
    out = map_coordinates(vol.data, coords, order=order, mode="nearest")

    scale = np.eye(4)
    for j, r in enumerate(ratios):
        scale[j, j] = r
        scale[j, 3] = 0.5 * r - 0.5
    affine = vol.affine @ scale
    if isinstance(vol, Mask):
        return Mask(out, target_spacing, vol.orientation, affine)
    return Volume(out, target_spacing, vol.orientation, affine)


def resample_to_geometry(mask: Mask, reference: Volume) -> Mask:
    """Map a mask onto a reference grid via the affines (nearest-neighbor)."""
    if mask.affine is None or reference.affine is None:
        raise GeometryError("both affines are required to map between grids")
    to_mask = np.linalg.inv(mask.affine) @ reference.affine
    idx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in reference.dims), indexing="ij")
    coords = [
        to_mask[i, 0] * idx[0] + to_mask[i, 1] * idx[1] + to_mask[i, 2] * idx[2] + to_mask[i, 3]
        for i in range(3)
    ]
    out = map_coordinates(mask.data, coords, order=0, mode="constant", cval=0)
    return Mask(out, reference.spacing, reference.orientation, reference.affine)
