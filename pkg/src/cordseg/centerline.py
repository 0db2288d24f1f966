"""Centerline extraction: distance-map heatmap, global curve optimization
by dynamic programming, and reference centerlines from manual masks.

The curve optimizer minimizes, over one candidate position per slice,

    sum_z -heat(x_z, y_z, z) + lambda * sum_z ||(x,y)_{z+1} - (x,y)_z||^2

solved exactly by stage-wise dynamic programming. Slices with no heat are
absent from the optimization and take the straight-line interpolation
between their decided neighbors; a gap of g slices contributes
lambda * ||delta||^2 / g, the exact cost of that interpolation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, distance_transform_edt

from .errors import ConfigError
from .volume import Mask, Volume


@dataclass(frozen=True)
class Centerline:
    """One continuous in-plane point per covered axial slice."""

    z: np.ndarray          # slice indices, strictly increasing
    xy: np.ndarray         # (S, 2) voxel coordinates (x, y)
    spacing: tuple[float, float, float]

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.int64)
        xy = np.asarray(self.xy, dtype=np.float64)
        if z.ndim != 1 or xy.shape != (len(z), 2):
            raise ConfigError("centerline needs matching z and (x, y) arrays")
        if len(z) and np.any(np.diff(z) <= 0):
            raise ConfigError("centerline slice indices must be strictly increasing")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    def point_at(self, z: int) -> tuple[float, float]:
        """(x, y) at a slice, clamped to the covered range."""
        i = int(np.clip(np.searchsorted(self.z, z), 0, len(self.z) - 1))
        if self.z[i] != z and i > 0 and abs(self.z[i - 1] - z) < abs(self.z[i] - z):
            i -= 1
        return float(self.xy[i, 0]), float(self.xy[i, 1])

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["z", "x", "y"])
            for zi, (x, y) in zip(self.z, self.xy):
                writer.writerow([int(zi), repr(float(x)), repr(float(y))])

    @classmethod
    def load_csv(cls, path: str | Path, spacing=(0.5, 0.5, 0.5)) -> "Centerline":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                rows.append((int(row["z"]), float(row["x"]), float(row["y"])))
        rows.sort()
        z = np.array([r[0] for r in rows])
        xy = np.array([[r[1], r[2]] for r in rows])
        return cls(z, xy, spacing)


@dataclass(frozen=True)
class CurveOptConfig:
    smooth_weight: float = 0.5   # lambda, per squared voxel displacement
    candidate_margin: int = 2    # dilation of the heat support, voxels
    search_radius: float | None = None  # optional cap around the previous slice

    def __post_init__(self):
        if self.smooth_weight < 0:
            raise ConfigError("smoothness weight must be non-negative")


def distance_heatmap(binary_pred: Mask) -> Volume:
    """Euclidean distance (mm, anisotropy-aware) from each foreground voxel
    to the nearest background voxel; 0 outside the predicted region."""
    dist = distance_transform_edt(binary_pred.data, sampling=binary_pred.spacing)
    return Volume(dist.astype(np.float32), binary_pred.spacing,
                  binary_pred.orientation, binary_pred.affine)


def _slice_candidates(heat2d: np.ndarray, margin: int):
    """Candidate (x, y) positions: heat support plus a dilated margin,
    ordered by (y, then x) so argmin tie-breaks deterministically."""
    support = heat2d > 0
    if not support.any():
        return None
    if margin > 0:
        support = binary_dilation(support, iterations=margin)
    xs, ys = np.nonzero(support)
    order = np.lexsort((xs, ys))
    return xs[order], ys[order]


def optimize_centerline(heatmap: Volume, cfg: CurveOptConfig = CurveOptConfig()) -> Centerline:
    """Exact minimizer of the smoothness-regularized path cost.

    Ties are broken toward the candidate with the smallest (y, then x).
    Raises on an all-zero heatmap.
    """
    heat = heatmap.data
    depth = heat.shape[2]
    stages = []
    for z in range(depth):
        cand = _slice_candidates(heat[:, :, z], cfg.candidate_margin)
        if cand is not None:
            stages.append((z, cand[0].astype(np.float64), cand[1].astype(np.float64),
                           heat[cand[0], cand[1], z].astype(np.float64)))
    if not stages:
        raise ConfigError("all-zero heatmap: no centerline candidates")

    lam = cfg.smooth_weight
    cost = -stages[0][3]
    pointers = []
    prev = stages[0]
    for i in range(1, len(stages)):
        z, xs, ys, h = stages[i]
        pxs, pys = prev[1], prev[2]
        if cfg.search_radius is not None:
            # cheap band cap around the previous slice's strongest candidate;
            # disable (None) for exact optimization
            center = int(np.argmax(prev[3]))
            keep = (np.abs(xs - pxs[center]) <= cfg.search_radius) & (
                np.abs(ys - pys[center]) <= cfg.search_radius
            )
            if keep.any():
                xs, ys, h = xs[keep], ys[keep], h[keep]
                stages[i] = (z, xs, ys, h)
        gap = z - prev[0]
        d2 = (xs[:, None] - pxs[None, :]) ** 2 + (ys[:, None] - pys[None, :]) ** 2
        total = cost[None, :] + (lam / gap) * d2
        arg = np.argmin(total, axis=1)
        cost = total[np.arange(len(xs)), arg] - h
        pointers.append(arg)
        prev = stages[i]

    # backtrack
    idx = int(np.argmin(cost))
    picks = [idx]
    for arg in reversed(pointers):
        idx = int(arg[picks[-1]])
        picks.append(idx)
    picks.reverse()

    z_out = []
    xy_out = []
    prev_z = None
    prev_xy = None
    for (z, xs, ys, _), pick in zip(stages, picks):
        x, y = float(xs[pick]), float(ys[pick])
        if prev_z is not None and z - prev_z > 1:
            for zi in range(prev_z + 1, z):
                t = (zi - prev_z) / (z - prev_z)
                z_out.append(zi)
                xy_out.append([prev_xy[0] + t * (x - prev_xy[0]),
                               prev_xy[1] + t * (y - prev_xy[1])])
        z_out.append(z)
        xy_out.append([x, y])
        prev_z, prev_xy = z, (x, y)
    return Centerline(np.array(z_out), np.array(xy_out), heatmap.spacing)


def path_cost(heatmap: Volume, z: np.ndarray, xy: np.ndarray, smooth_weight: float) -> float:
    """Cost of an explicit candidate path under the optimizer's functional.

    Only slices listed in ``z`` contribute unary terms; consecutive entries
    with a slice gap g contribute smooth_weight * ||delta||^2 / g.
    """
    heat = heatmap.data
    total = 0.0
    for i in range(len(z)):
        total += -float(heat[int(round(xy[i, 0])), int(round(xy[i, 1])), int(z[i])])
        if i:
            gap = int(z[i]) - int(z[i - 1])
            d2 = float((xy[i, 0] - xy[i - 1, 0]) ** 2 + (xy[i, 1] - xy[i - 1, 1]) ** 2)
            total += smooth_weight * d2 / gap
    return total


def centerline_from_mask(mask: Mask, smoothing_window: int = 5) -> Centerline:
    """Per-slice foreground centroids, interpolated through interior gaps
    and smoothed along z with a centered moving average."""
    data = mask.data
    depth = data.shape[2]
    zs = []
    cents = []
    for z in range(depth):
        sl = data[:, :, z]
        if not sl.any():
            continue
        xs, ys = np.nonzero(sl)
        zs.append(z)
        cents.append([xs.mean(), ys.mean()])
    if len(zs) < 2:
        raise ConfigError("mask must be non-empty on at least 2 slices")
    zs = np.array(zs)
    cents = np.array(cents)
    full_z = np.arange(zs[0], zs[-1] + 1)
    x = np.interp(full_z, zs, cents[:, 0])
    y = np.interp(full_z, zs, cents[:, 1])
    if smoothing_window > 1:
        x = _moving_average(x, smoothing_window)
        y = _moving_average(y, smoothing_window)
    return Centerline(full_z, np.stack([x, y], axis=1), mask.spacing)


def _moving_average(values: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    out = np.empty_like(values)
    for i in range(len(values)):
        lo = max(0, i - half)
        hi = min(len(values), i + half + 1)
        out[i] = values[lo:hi].mean()
    return out
