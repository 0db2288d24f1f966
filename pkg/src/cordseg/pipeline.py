"""End-to-end orchestration: training of the detection and segmentation
networks, bundle persistence, and two-stage inference in native space.

The working space for all learning and inference is RPI orientation at
0.5 mm isotropic; predictions are mapped back to the input grid at the
end, with no morphological post-processing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, augment_pair
from .centerline import Centerline, CurveOptConfig, centerline_from_mask, distance_heatmap, \
    optimize_centerline
from .dataset import DatasetIndex, split_dataset  # noqa: F401  (re-exported API)
from .errors import ConfigError, GeometryError, MissingDataError, NoCordFoundError
from .nn import AdamState, ModelParams, NetworkSpec, adam_step, backward, build_cnn1, \
    build_cnn2, forward, load_params, save_params
from .nn.loss import dice_loss_batch
from .preprocess import LANDMARK_PERCENTILES, IntensityLandmarks, NormStats, PatchConfig, \
    apply_zscore, compute_norm_stats, extract_axial_patches, \
    extract_patches_along_centerline, learn_landmarks, reconstruct_volume, standardize
from .preprocess import _crop_padded
from .volume import Mask, Volume, read_mask, read_volume, reorient, resample, \
    resample_to_geometry

log = logging.getLogger(__name__)

WORKING_ORIENTATION = "RPI"
STAGES = ("centerline", "cord", "lesion")
CONTRASTS = ("t1", "t2", "t2s")

_STAGE_DEFAULTS = {
    "centerline": {"lr": 1e-4, "batch_size": 32, "epochs": 100, "dropout": 0.2},
    "cord": {"lr": 5e-5, "batch_size": 4, "epochs": 300, "dropout": 0.4},
    "lesion": {"lr": 5e-5, "batch_size": 4, "epochs": 300, "dropout": 0.4},
}


@dataclass
class TrainConfig:
    """Training hyperparameters; unset core values take the stage defaults
    (centerline: lr 1e-4 / batch 32 / 100 epochs / dropout 0.2;
    cord & lesion: lr 5e-5 / batch 4 / 300 epochs / dropout 0.4)."""

    stage: str
    contrast: str = "t2"
    lr: float = None  # type: ignore[assignment]
    batch_size: int = None  # type: ignore[assignment]
    epochs: int = None  # type: ignore[assignment]
    dropout: float = None  # type: ignore[assignment]
    seed: int = 0
    base_channels: int = 32
    batches_per_epoch: int = 8      # per-epoch sample cap for desk-scale runs
    samples_per_subject: int = 2    # stage-2 patches per subject per epoch
    val_patches: int = 32
    patience: int | None = 20       # early stop after this many stale epochs
    augment: AugmentConfig = None  # type: ignore[assignment]
    working_spacing: float = 0.5
    patch: PatchConfig = field(default_factory=PatchConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.contrast not in CONTRASTS:
            raise ConfigError(f"contrast must be one of {CONTRASTS}, got {self.contrast!r}")
        defaults = _STAGE_DEFAULTS[self.stage]
        for name, value in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, value)
        if self.augment is None:
            if self.stage == "centerline":
                self.augment = AugmentConfig(seed=self.seed)
            else:
                aug = AugmentConfig.stage2_default(seed=self.seed)
                self.augment = aug if self.stage == "lesion" else \
                    replace(aug, enable_border_jitter=False)

    def fingerprint(self) -> dict:
        out = {k: v for k, v in vars(self).items() if not isinstance(v, (AugmentConfig, PatchConfig))}
        out["augment"] = vars(self.augment)
        out["patch"] = {"stage1_size": self.patch.stage1_size,
                        "stage2_size": list(self.patch.stage2_size),
                        "inference_stride_z": self.patch.inference_stride_z}
        return out


@dataclass
class BundleComponent:
    """One trained network with its preprocessing state."""

    spec: NetworkSpec
    model: ModelParams
    norm_stats: NormStats
    landmarks: IntensityLandmarks | None = None
    patch_size: tuple | None = None
    config: dict = field(default_factory=dict)


@dataclass
class TrainedBundle:
    """Per-contrast set of trained components plus the shared configs."""

    contrast: str
    components: dict = field(default_factory=dict)
    patch_cfg: PatchConfig = field(default_factory=PatchConfig)
    curve_cfg: CurveOptConfig = field(default_factory=CurveOptConfig)
    working_spacing: float = 0.5

    def require(self, name: str) -> BundleComponent:
        comp = self.components.get(name)
        if comp is None:
            raise ConfigError(f"bundle has no trained {name!r} stage")
        return comp

    def check_contrast(self, contrast: str | None):
        if contrast is not None and contrast != self.contrast:
            raise ConfigError(
                f"bundle was trained for contrast {self.contrast!r}, caller declared {contrast!r}"
            )

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "contrast": self.contrast,
            "working_spacing": self.working_spacing,
            "patch": {"stage1_size": self.patch_cfg.stage1_size,
                      "stage2_size": list(self.patch_cfg.stage2_size),
                      "inference_stride_z": self.patch_cfg.inference_stride_z},
            "curve": {"smooth_weight": self.curve_cfg.smooth_weight,
                      "candidate_margin": self.curve_cfg.candidate_margin,
                      "search_radius": self.curve_cfg.search_radius},
            "components": {},
        }
        for name, comp in self.components.items():
            params_file = f"{name}.params"
            save_params(comp.model, comp.spec, out_dir / params_file)
            entry = {
                "params_file": params_file,
                "spec": comp.spec.to_dict(),
                "norm_stats": {"mean": comp.norm_stats.mean, "std": comp.norm_stats.std},
                "patch_size": list(comp.patch_size) if comp.patch_size else None,
                "config": comp.config,
            }
            if comp.landmarks is not None:
                entry["landmarks"] = {"percentiles": list(comp.landmarks.percentiles),
                                      "values": list(comp.landmarks.values)}
            manifest["components"][name] = entry
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, bundle_dir: str | Path) -> "TrainedBundle":
        bundle_dir = Path(bundle_dir)
        manifest_path = bundle_dir / "manifest.json"
        if not manifest_path.exists():
            raise MissingDataError(f"no bundle manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        patch = manifest["patch"]
        curve = manifest["curve"]
        bundle = cls(
            contrast=manifest["contrast"],
            patch_cfg=PatchConfig(patch["stage1_size"], tuple(patch["stage2_size"]),
                                  patch["inference_stride_z"]),
            curve_cfg=CurveOptConfig(curve["smooth_weight"], curve["candidate_margin"],
                                     curve["search_radius"]),
            working_spacing=manifest["working_spacing"],
        )
        for name, entry in manifest["components"].items():
            spec = NetworkSpec.from_dict(entry["spec"])
            model = load_params(bundle_dir / entry["params_file"], spec)
            landmarks = None
            if "landmarks" in entry:
                landmarks = IntensityLandmarks(tuple(entry["landmarks"]["percentiles"]),
                                               tuple(entry["landmarks"]["values"]))
            bundle.components[name] = BundleComponent(
                spec=spec,
                model=model,
                norm_stats=NormStats(entry["norm_stats"]["mean"], entry["norm_stats"]["std"]),
                landmarks=landmarks,
                patch_size=tuple(entry["patch_size"]) if entry.get("patch_size") else None,
                config=entry.get("config", {}),
            )
        return bundle


def to_working(vol: Volume, working_spacing: float = 0.5, interp: str = "trilinear") -> Volume:
    """Reorient to RPI and resample isotropically (Fig-3 preprocessing order)."""
    return resample(reorient(vol, WORKING_ORIENTATION), (working_spacing,) * 3, interp)


@dataclass
class _Subject:
    id: str
    image: Volume
    cord: Mask
    lesion: Mask | None
    centerline: Centerline


def _working_mask(mask: Mask, spacing: float) -> Mask:
    return resample(reorient(mask, WORKING_ORIENTATION), (spacing,) * 3, "nearest")


def _load_split(index: DatasetIndex, split: str, cfg: TrainConfig, need_lesion: bool):
    subjects = []
    for rec in index.by_split(split):
        if rec.contrast != cfg.contrast:
            continue
        if need_lesion and rec.lesion_mask is None:
            continue
        native = read_volume(index.resolve(rec.image))
        cord_native = read_mask(index.resolve(rec.cord_mask))
        if cord_native.dims != native.dims:
            raise GeometryError(f"{rec.id}: cord mask geometry differs from the image")
        image = to_working(native, cfg.working_spacing)
        cord = _working_mask(cord_native, cfg.working_spacing)
        lesion = None
        if rec.lesion_mask is not None:
            lesion = _working_mask(read_mask(index.resolve(rec.lesion_mask)), cfg.working_spacing)
        subjects.append(_Subject(rec.id, image, cord, lesion, centerline_from_mask(cord)))
    return subjects


def _mini_batches(samples, batch_size):
    for i in range(0, len(samples) - batch_size + 1, batch_size):
        chunk = samples[i : i + batch_size]
        x = np.stack([s[0] for s in chunk])[:, None]
        t = np.stack([s[1] for s in chunk])[:, None]
        yield x.astype(np.float32), t.astype(np.float32)


def _train_loop(spec, cfg: TrainConfig, sample_epoch, val_batches):
    """Shared optimization loop: seeded shuffled mini-batches, per-epoch
    train/val Dice loss logging, best-validation checkpoint retention."""
    model = ModelParams.initialize(spec, cfg.seed)
    adam = AdamState(lr=cfg.lr)
    best = model.copy()
    best_val = np.inf
    stale = 0
    rows = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng((cfg.seed, epoch))
        train_losses = []
        for bi, (x, t) in enumerate(sample_epoch(rng)):
            drop_seed = (cfg.seed * 1_000_003 + epoch) * 1_009 + bi
            pred, cache = forward(spec, model.params, model.state, x, "train", drop_seed)
            loss, grad = dice_loss_batch(pred, t)
            grads = backward(spec, model.params, cache, grad)
            adam_step(model.params, grads, adam)
            model.state.update(cache["bn_stats"])
            train_losses.append(loss)
        train_loss = float(np.mean(train_losses)) if train_losses else float("nan")
        if val_batches:
            val_losses = []
            for x, t in val_batches:
                pred, _ = forward(spec, model.params, model.state, x, "infer")
                val_losses.append(dice_loss_batch(pred, t)[0])
            val_loss = float(np.mean(val_losses))
        else:
            val_loss = train_loss
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d: train %.4f val %.4f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                log.info("early stop at epoch %d (patience %d)", epoch, cfg.patience)
                break
    return best, rows


def _slice_window(subject: _Subject, z: int, size: int, rng):
    """Training window for one axial slice: biased toward the cord, with a
    jittered center; otherwise anywhere in-plane."""
    w_ext, h_ext = subject.image.dims[0], subject.image.dims[1]
    sl = subject.cord.data[:, :, z]
    if sl.any() and rng.random() < 0.7:
        xs, ys = np.nonzero(sl)
        cx = float(xs.mean()) + rng.uniform(-16, 16)
        cy = float(ys.mean()) + rng.uniform(-16, 16)
        x0 = int(round(cx)) - size // 2
        y0 = int(round(cy)) - size // 2
    else:
        x0 = int(rng.integers(-size // 4, max(1, w_ext - 3 * size // 4)))
        y0 = int(rng.integers(-size // 4, max(1, h_ext - 3 * size // 4)))
    return x0, y0


def train_centerline_model(index: DatasetIndex, cfg: TrainConfig):
    """Train the 2D detection network as dense cord segmentation on axial
    patches. Returns (component, log rows)."""
    if cfg.stage != "centerline":
        raise ConfigError(f"config stage is {cfg.stage!r}, expected 'centerline'")
    train_subjects = _load_split(index, "train", cfg, need_lesion=False)
    if not train_subjects:
        raise MissingDataError("training split is empty")
    val_subjects = _load_split(index, "val", cfg, need_lesion=False)

    size = cfg.patch.stage1_size
    stats = compute_norm_stats(
        p for s in train_subjects for p, _ in extract_axial_patches(s.image, cfg.patch)
    )
    spec = build_cnn1(cfg.base_channels, cfg.dropout)

    def make_sample(subject, z, x0, y0, sample_seed, augmented):
        img = _crop_padded(subject.image.data, z, y0, x0, 1, size, size)[0]
        lbl = _crop_padded(subject.cord.data, z, y0, x0, 1, size, size)[0]
        img = apply_zscore(img, stats)
        if augmented:
            img, lbl = augment_pair(img, lbl, cfg.augment, sample_seed)
        return img, lbl

    def sample_epoch(rng):
        n = cfg.batches_per_epoch * cfg.batch_size
        samples = []
        for i in range(n):
            subject = train_subjects[int(rng.integers(len(train_subjects)))]
            z = int(rng.integers(subject.image.dims[2]))
            x0, y0 = _slice_window(subject, z, size, rng)
            samples.append(make_sample(subject, z, x0, y0,
                                       int(rng.integers(2**62)), True))
        return _mini_batches(samples, cfg.batch_size)

    val_batches = []
    if val_subjects:
        vrng = np.random.default_rng((cfg.seed, 118))
        samples = []
        for _ in range(cfg.val_patches):
            subject = val_subjects[int(vrng.integers(len(val_subjects)))]
            z = int(vrng.integers(subject.image.dims[2]))
            x0, y0 = _slice_window(subject, z, size, vrng)
            samples.append(make_sample(subject, z, x0, y0, 0, False))
        val_batches = list(_mini_batches(samples, min(cfg.batch_size, len(samples))))

    model, rows = _train_loop(spec, cfg, sample_epoch, val_batches)
    comp = BundleComponent(spec=spec, model=model, norm_stats=stats,
                           config=cfg.fingerprint())
    return comp, rows


def _subject_stack(subject: _Subject, cfg: TrainConfig, patch_size):
    patch_cfg = replace(cfg.patch, stage2_size=patch_size,
                        inference_stride_z=min(cfg.patch.inference_stride_z, patch_size[0]))
    patches = extract_patches_along_centerline(subject.image, subject.centerline,
                                               patch_cfg, "infer")
    return np.stack([p for p, _ in patches])


def train_seg_model(index: DatasetIndex, cfg: TrainConfig, target: str):
    """Train a 3D segmentation network (cord or lesion) on patches along
    the reference centerlines. Returns (component, log rows)."""
    if target not in ("cord", "lesion"):
        raise ConfigError(f"target must be 'cord' or 'lesion', got {target!r}")
    if cfg.stage != target:
        raise ConfigError(f"config stage is {cfg.stage!r}, expected {target!r}")
    need_lesion = target == "lesion"
    train_subjects = _load_split(index, "train", cfg, need_lesion)
    if not train_subjects:
        if need_lesion:
            raise MissingDataError("lesion training requested with no lesion masks")
        raise MissingDataError("training split is empty")
    if need_lesion and not any(s.lesion.data.any() for s in train_subjects):
        log.warning("all training lesion masks are empty; training on negatives only")
    val_subjects = _load_split(index, "val", cfg, need_lesion)

    patch_size = cfg.patch.stage2_size if target == "cord" else \
        (cfg.patch.stage2_size[0],) * 3
    spec = build_cnn2(patch_size, cfg.base_channels, cfg.dropout)
    d, h, w = patch_size

    # per-subject intensity profile for landmark standardization
    stacks = [_subject_stack(s, cfg, patch_size) for s in train_subjects]
    landmarks = learn_landmarks(stacks)
    std_stacks = [standardize(stack, landmarks) for stack in stacks]
    stats = compute_norm_stats(std_stacks)

    src_pcts = {s.id: np.percentile(stack, np.asarray(LANDMARK_PERCENTILES, dtype=np.float64))
                for s, stack in zip(train_subjects, stacks)}
    for s in val_subjects:
        src_pcts[s.id] = np.percentile(_subject_stack(s, cfg, patch_size),
                                       np.asarray(LANDMARK_PERCENTILES, dtype=np.float64))
    tgt_vals = np.asarray(landmarks.values, dtype=np.float64)

    def normalize_patch(subject, patch):
        src = src_pcts[subject.id]
        keep = np.concatenate(([True], np.diff(src) > 0))
        mapped = np.interp(patch.astype(np.float64), src[keep], tgt_vals[keep])
        return apply_zscore(mapped.astype(np.float32), stats)

    def target_patch(subject, placement):
        source = subject.lesion if need_lesion else subject.cord
        return _crop_padded(source.data, *placement, d, h, w)

    def make_samples(subject, rng, n, augmented):
        patch_cfg = replace(cfg.patch, stage2_size=patch_size)
        out = []
        for patch, placement in extract_patches_along_centerline(
                subject.image, subject.centerline, patch_cfg, "train", n, rng):
            img = normalize_patch(subject, patch)
            lbl = target_patch(subject, placement)
            if augmented:
                img, lbl = augment_pair(img, lbl, cfg.augment, int(rng.integers(2**62)))
            out.append((img, lbl))
        return out

    def sample_epoch(rng):
        samples = []
        for subject in train_subjects:
            samples.extend(make_samples(subject, rng, cfg.samples_per_subject, True))
        order = rng.permutation(len(samples))
        samples = [samples[i] for i in order]
        return _mini_batches(samples, cfg.batch_size)

    val_batches = []
    if val_subjects:
        vrng = np.random.default_rng((cfg.seed, 97))
        samples = []
        for subject in val_subjects:
            samples.extend(make_samples(subject, vrng, cfg.samples_per_subject, False))
        if samples:
            val_batches = list(_mini_batches(samples, min(cfg.batch_size, len(samples))))

    model, rows = _train_loop(spec, cfg, sample_epoch, val_batches)
    comp = BundleComponent(spec=spec, model=model, norm_stats=stats, landmarks=landmarks,
                           patch_size=patch_size, config=cfg.fingerprint())
    return comp, rows


def _infer_batches(spec, model: ModelParams, patches, batch_size: int):
    """Deterministic inference over a patch list; preserves order."""
    probs = []
    for i in range(0, len(patches), batch_size):
        x = np.stack(patches[i : i + batch_size])[:, None].astype(np.float32)
        pred, _ = forward(spec, model.params, model.state, x, "infer")
        probs.extend(pred[:, 0])
    return probs


def _detect_on_working(working: Volume, bundle: TrainedBundle) -> Centerline:
    comp = bundle.require("centerline")
    pairs = extract_axial_patches(working, bundle.patch_cfg)
    patches = [apply_zscore(p, comp.norm_stats) for p, _ in pairs]
    probs = _infer_batches(comp.spec, comp.model, patches, 64)
    prob_vol = reconstruct_volume(
        [(prob, placement) for prob, (_, placement) in zip(probs, pairs)], working)
    binary = (prob_vol.data > 0.5).astype(np.uint8)
    if not binary.any():
        raise NoCordFoundError("no cord found: stage-1 prediction is empty")
    heat = distance_heatmap(Mask(binary, working.spacing, working.orientation, working.affine))
    return optimize_centerline(heat, bundle.curve_cfg)


def detect_centerline(vol: Volume, bundle: TrainedBundle,
                      contrast: str | None = None) -> Centerline:
    """Stage 1: preprocess, tile, infer, reconstruct, threshold at 0.5,
    distance map, and global curve optimization. The returned centerline
    lives in working-space voxel coordinates."""
    bundle.check_contrast(contrast)
    return _detect_on_working(to_working(vol, bundle.working_spacing), bundle)


def _pad_depth(working: Volume, min_depth: int) -> tuple[Volume, int]:
    """Edge-replicate trailing slices so short volumes fit one 3D patch."""
    depth = working.dims[2]
    if depth >= min_depth:
        return working, depth
    data = np.pad(working.data, ((0, 0), (0, 0), (0, min_depth - depth)), mode="edge")
    return Volume(data, working.spacing, working.orientation, working.affine), depth


def segment(vol: Volume, bundle: TrainedBundle, target: str,
            contrast: str | None = None, return_probability: bool = False):
    """Two-stage segmentation returning a binary mask on the input's own
    grid (no post-processing beyond the 0.5 threshold)."""
    if target not in ("cord", "lesion"):
        raise ConfigError(f"target must be 'cord' or 'lesion', got {target!r}")
    bundle.check_contrast(contrast)
    comp = bundle.require(target)
    working = to_working(vol, bundle.working_spacing)
    cline = _detect_on_working(working, bundle)

    d, h, w = comp.patch_size
    needed = int(cline.z[0]) + d
    padded, native_depth = _pad_depth(working, needed)
    patch_cfg = replace(bundle.patch_cfg, stage2_size=comp.patch_size,
                        inference_stride_z=min(bundle.patch_cfg.inference_stride_z, d))
    pairs = extract_patches_along_centerline(padded, cline, patch_cfg, "infer")
    stack = np.stack([p for p, _ in pairs])
    std_stack = standardize(stack, comp.landmarks)
    patches = [apply_zscore(p, comp.norm_stats) for p in std_stack]
    probs = _infer_batches(comp.spec, comp.model, patches, 4)
    prob_vol = reconstruct_volume(list(zip(probs, (pl for _, pl in pairs))), padded)
    if padded.dims[2] != native_depth:
        prob_vol = Volume(prob_vol.data[:, :, :native_depth], working.spacing,
                          working.orientation, working.affine)
    working_mask = Mask((prob_vol.data > 0.5).astype(np.uint8), prob_vol.spacing,
                        prob_vol.orientation, prob_vol.affine)
    native = resample_to_geometry(working_mask, vol)
    if return_probability:
        return native, prob_vol
    return native
