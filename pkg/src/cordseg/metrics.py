"""Evaluation suite: centerline detection metrics, overlap/volume metrics,
lesion-wise detection, volume-wise specificity, rater consensus, and
median/IQR aggregation.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .centerline import Centerline
from .errors import ConfigError, GeometryError
from .volume import Mask

log = logging.getLogger(__name__)


def _check_geometry(a: Mask, b: Mask):
    if not a.same_geometry(b):
        raise GeometryError(
            f"mask geometry mismatch: {a.dims}/{a.spacing}/{a.orientation} vs "
            f"{b.dims}/{b.spacing}/{b.orientation}"
        )


def centerline_mse(pred: Centerline, ref: Centerline) -> float:
    """Root-mean-square in-plane distance (mm) over the shared slices."""
    if pred.spacing[:2] != ref.spacing[:2]:
        raise GeometryError("centerlines live on grids with different in-plane spacing")
    shared, pi, ri = np.intersect1d(pred.z, ref.z, return_indices=True)
    if len(shared) == 0:
        raise ConfigError("centerlines share no slices")
    sx, sy = pred.spacing[0], pred.spacing[1]
    dx = (pred.xy[pi, 0] - ref.xy[ri, 0]) * sx
    dy = (pred.xy[pi, 1] - ref.xy[ri, 1]) * sy
    return float(np.sqrt(np.mean(dx * dx + dy * dy)))


def localization_rate(pred: Centerline, manual_mask: Mask) -> float:
    """Percentage of mask-covered axial slices whose predicted point falls
    inside the manual cord mask (slices the prediction misses count as
    failures)."""
    data = manual_mask.data
    covered = [z for z in range(data.shape[2]) if data[:, :, z].any()]
    if not covered:
        raise ConfigError("manual mask is empty")
    pred_lookup = {int(z): xy for z, xy in zip(pred.z, pred.xy)}
    hits = 0
    for z in covered:
        xy = pred_lookup.get(z)
        if xy is None:
            continue
        x = int(np.floor(xy[0] + 0.5))
        y = int(np.floor(xy[1] + 0.5))
        if 0 <= x < data.shape[0] and 0 <= y < data.shape[1] and data[x, y, z]:
            hits += 1
    return 100.0 * hits / len(covered)


def dice(a: Mask, b: Mask) -> float:
    """Dice similarity coefficient in percent; both-empty is 100 by
    convention (logged)."""
    _check_geometry(a, b)
    sa = int(a.data.sum())
    sb = int(b.data.sum())
    if sa + sb == 0:
        log.info("dice of two empty masks: returning 100.0 by convention")
        return 100.0
    inter = int(np.logical_and(a.data, b.data).sum())
    return 100.0 * 2.0 * inter / (sa + sb)


def relative_volume_difference(auto: Mask, manual: Mask) -> float:
    """100 * (V_auto - V_manual) / V_manual, volumes in mm^3 (negative
    means under-segmentation)."""
    _check_geometry(auto, manual)
    voxel = float(np.prod(manual.spacing))
    v_manual = float(manual.data.sum()) * voxel
    if v_manual == 0:
        raise ConfigError("manual mask is empty; relative volume difference undefined")
    v_auto = float(auto.data.sum()) * voxel
    return 100.0 * (v_auto - v_manual) / v_manual


def voxelwise_pr(auto: Mask, manual: Mask):
    """(sensitivity %, precision %); undefined denominators come back as
    None, never NaN."""
    _check_geometry(auto, manual)
    tp = int(np.logical_and(auto.data, manual.data).sum())
    n_manual = int(manual.data.sum())
    n_auto = int(auto.data.sum())
    sens = 100.0 * tp / n_manual if n_manual else None
    prec = 100.0 * tp / n_auto if n_auto else None
    return sens, prec


def connected_components(mask, connectivity: int = 26):
    """Label 3D connected components.

    Returns (labels, count) with labels 1..count assigned in order of each
    component's lexicographically smallest voxel index.
    ``connectivity`` is 6, 18, or 26.
    """
    data = mask.data if isinstance(mask, Mask) else np.asarray(mask)
    structure = {
        6: ndimage.generate_binary_structure(3, 1),
        18: ndimage.generate_binary_structure(3, 2),
        26: ndimage.generate_binary_structure(3, 3),
    }.get(connectivity)
    if structure is None:
        raise ConfigError(f"connectivity must be 6, 18, or 26, got {connectivity}")
    raw, count = ndimage.label(data > 0, structure=structure)
    if count == 0:
        return raw.astype(np.int32), 0
    labs, first = np.unique(raw.ravel(), return_index=True)
    keep = labs > 0
    order = labs[keep][np.argsort(first[keep])]
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order] = np.arange(1, count + 1)
    return remap[raw], count


@dataclass(frozen=True)
class LesionMatchConfig:
    overlap_threshold: float = 0.25  # fraction of manual lesion voxels, strict >
    connectivity: int = 26

    def __post_init__(self):
        if not 0 < self.overlap_threshold <= 1:
            raise ConfigError("overlap threshold must be in (0, 1]")


@dataclass(frozen=True)
class LesionCounts:
    tp: int
    fp: int
    fn: int
    sensitivity: float | None
    precision: float | None


def lesionwise_pr(auto: Mask, manual: Mask,
                  cfg: LesionMatchConfig = LesionMatchConfig()) -> LesionCounts:
    """Detection metrics over individual lesions (3D connected objects).

    A manual lesion is detected when the automatic segmentation overlaps
    strictly more than ``overlap_threshold`` of its voxels. An automatic
    component is correct when some manual lesion it touches is detected;
    otherwise it is a false positive.
    """
    _check_geometry(auto, manual)
    man_labels, n_man = connected_components(manual, cfg.connectivity)
    auto_labels, n_auto = connected_components(auto, cfg.connectivity)
    auto_fg = auto.data > 0

    detected = np.zeros(n_man + 1, dtype=bool)
    for lesion in range(1, n_man + 1):
        sel = man_labels == lesion
        overlap = int(np.count_nonzero(auto_fg & sel))
        detected[lesion] = overlap > cfg.overlap_threshold * int(np.count_nonzero(sel))

    tp = int(detected.sum())
    fn = n_man - tp
    fp = 0
    correct_auto = 0
    for comp in range(1, n_auto + 1):
        touched = np.unique(man_labels[auto_labels == comp])
        touched = touched[touched > 0]
        if len(touched) and detected[touched].any():
            correct_auto += 1
        else:
            fp += 1

    sens = 100.0 * tp / n_man if n_man else None
    prec = 100.0 * correct_auto / n_auto if n_auto else None
    return LesionCounts(tp, fp, fn, sens, prec)


def volumewise_specificity(auto_masks) -> float:
    """Percentage of reference-lesion-free volumes with an empty automatic
    lesion mask."""
    masks = list(auto_masks)
    if not masks:
        raise ConfigError("specificity needs at least one volume")
    clean = sum(1 for m in masks if not m.data.any())
    return 100.0 * clean / len(masks)


def majority_vote(rater_masks) -> Mask:
    """Per-voxel consensus: 1 where strictly more than half the raters
    marked the voxel."""
    masks = list(rater_masks)
    if len(masks) < 2:
        raise ConfigError("consensus needs at least two rater masks")
    for m in masks[1:]:
        _check_geometry(masks[0], m)
    votes = np.zeros(masks[0].dims, dtype=np.int32)
    for m in masks:
        votes += m.data
    out = (2 * votes > len(masks)).astype(np.uint8)
    return Mask(out, masks[0].spacing, masks[0].orientation, masks[0].affine)


def aggregate(rows) -> dict:
    """Median and IQR per metric over per-volume report rows.

    Rows are dicts with at least ``metric`` and ``value`` keys; rows whose
    value is None (not-applicable) are skipped. IQR uses linearly
    interpolated quartiles.
    """
    by_metric: dict[str, list[float]] = {}
    for row in rows:
        if row["value"] is None:
            continue
        by_metric.setdefault(row["metric"], []).append(float(row["value"]))
    if not by_metric:
        raise ConfigError("no metric values to aggregate")
    out = {}
    for metric, values in by_metric.items():
        arr = np.asarray(values, dtype=np.float64)
        q1, q3 = np.percentile(arr, [25.0, 75.0])
        out[metric] = {"median": float(np.median(arr)), "iqr": float(q3 - q1),
                       "n": len(values)}
    return out


@dataclass
class MetricsReport:
    """Per-volume metric rows plus their median/IQR aggregates."""

    rows: list = field(default_factory=list)

    def add(self, volume_id: str, metric: str, value, units: str = "%"):
        if value is not None:
            value = float(value)
        self.rows.append({"id": volume_id, "metric": metric, "value": value, "units": units})

    def aggregates(self) -> dict:
        return aggregate(self.rows)

    def to_json(self, path: str | Path):
        payload = {"volumes": self.rows, "aggregates": self.aggregates()}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    def to_csv(self, path: str | Path):
        aggs = self.aggregates()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "median (IQR)", "n"])
            for metric, agg in aggs.items():
                writer.writerow([metric, f"{agg['median']:.1f} ({agg['iqr']:.1f})", agg["n"]])
