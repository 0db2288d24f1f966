"""Declarative network specs, the two U-net builders, forward and backward.

A NetworkSpec is an ordered tuple of layer descriptors interpreted by
``forward``/``backward``. Skip connections reference earlier layers by
index; concatenation is [current, skip] along the channel axis.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ..errors import ConfigError
from . import layers


@dataclass(frozen=True)
class Conv:
    name: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1


@dataclass(frozen=True)
class BatchNorm:
    name: str
    channels: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class MaxPool:
    factor: int = 2


@dataclass(frozen=True)
class Upsample:
    factor: int = 2


@dataclass(frozen=True)
class ConcatSkip:
    source: int  # index of the layer whose output is concatenated


@dataclass(frozen=True)
class Sigmoid:
    pass


_LAYER_KINDS = {
    "conv": Conv,
    "batch_norm": BatchNorm,
    "relu": Relu,
    "dropout": Dropout,
    "maxpool": MaxPool,
    "upsample": Upsample,
    "concat_skip": ConcatSkip,
    "sigmoid": Sigmoid,
}
_KIND_NAMES = {v: k for k, v in _LAYER_KINDS.items()}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: spatial rank, input channels, layer list."""

    ndim: int
    in_channels: int
    layers: tuple
    input_size: tuple | None = None
    channels_out: tuple = field(init=False, repr=False, compare=False, default=())

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ConfigError(f"ndim must be 2 or 3, got {self.ndim}")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "channels_out", self._validate())

    def _validate(self) -> tuple:
        channels = self.in_channels
        scale = Fraction(1)
        seen_sigmoid = False
        per_layer = []
        scales = []
        for i, layer in enumerate(self.layers):
            if seen_sigmoid:
                raise ConfigError("sigmoid must be the terminal layer")
            if isinstance(layer, Conv):
                if layer.in_channels != channels:
                    raise ConfigError(
                        f"layer {i} ({layer.name}): expects {layer.in_channels} channels, "
                        f"gets {channels}"
                    )
                channels = layer.out_channels
            elif isinstance(layer, BatchNorm):
                if layer.channels != channels:
                    raise ConfigError(f"layer {i} ({layer.name}): channel mismatch")
            elif isinstance(layer, MaxPool):
                scale *= layer.factor
            elif isinstance(layer, Upsample):
                scale /= layer.factor
            elif isinstance(layer, ConcatSkip):
                if not 0 <= layer.source < i:
                    raise ConfigError(f"layer {i}: skip source {layer.source} out of range")
                if scales[layer.source] != scale:
                    raise ConfigError(
                        f"layer {i}: skip source at scale {scales[layer.source]}, "
                        f"current scale {scale}"
                    )
                channels += per_layer[layer.source]
            elif isinstance(layer, Sigmoid):
                if channels != 1:
                    raise ConfigError(
                        f"terminal sigmoid requires a single channel, got {channels}"
                    )
                seen_sigmoid = True
            per_layer.append(channels)
            scales.append(scale)
        if not seen_sigmoid:
            raise ConfigError("network must end with a sigmoid")
        return tuple(per_layer)

    def param_defs(self):
        """(name, shape, init) triples for every trainable tensor, in order."""
        defs = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                shape = (layer.out_channels, layer.in_channels) + (layer.kernel,) * self.ndim
                defs.append((f"{layer.name}.weight", shape, "he"))
                defs.append((f"{layer.name}.bias", (layer.out_channels,), "zeros"))
            elif isinstance(layer, BatchNorm):
                defs.append((f"{layer.name}.scale", (layer.channels,), "ones"))
                defs.append((f"{layer.name}.shift", (layer.channels,), "zeros"))
        return defs

    def state_defs(self):
        defs = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                defs.append((f"{layer.name}.running_mean", (layer.channels,), "zeros"))
                defs.append((f"{layer.name}.running_var", (layer.channels,), "ones"))
        return defs

    def to_dict(self) -> dict:
        out = {
            "ndim": self.ndim,
            "in_channels": self.in_channels,
            "input_size": list(self.input_size) if self.input_size else None,
            "layers": [],
        }
        for layer in self.layers:
            entry = {"kind": _KIND_NAMES[type(layer)]}
            entry.update(vars(layer))
            out["layers"].append(entry)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        built = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = _LAYER_KINDS[entry.pop("kind")]
            built.append(kind(**entry))
        size = tuple(d["input_size"]) if d.get("input_size") else None
        return cls(d["ndim"], d["in_channels"], tuple(built), size)

    def fingerprint(self) -> int:
        """64-bit hash of the canonical spec serialization."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return int.from_bytes(hashlib.blake2b(blob.encode(), digest_size=8).digest(), "little")


def _conv_block(name, in_ch, out_ch, dilation, dropout):
    return [
        Conv(name, in_ch, out_ch, kernel=3, dilation=dilation),
        BatchNorm(f"{name}_bn", out_ch),
        Relu(),
        Dropout(dropout),
    ]


def _unet_layers(base, dropout, enc_dilation):
    """Two-level U-net layer list; skip indices are positions of the
    block-final dropout layers."""
    b = base
    spec = []
    spec += _conv_block("e0c1", 1, b, enc_dilation, dropout)
    spec += _conv_block("e0c2", b, b, enc_dilation, dropout)
    skip0 = len(spec) - 1
    spec.append(MaxPool(2))
    spec += _conv_block("e1c1", b, 2 * b, enc_dilation, dropout)
    spec += _conv_block("e1c2", 2 * b, 2 * b, enc_dilation, dropout)
    skip1 = len(spec) - 1
    spec.append(MaxPool(2))
    spec += _conv_block("bc1", 2 * b, 4 * b, enc_dilation, dropout)
    spec += _conv_block("bc2", 4 * b, 4 * b, enc_dilation, dropout)
    spec.append(Upsample(2))
    spec += _conv_block("d1c1", 4 * b, 2 * b, 1, dropout)
    spec.append(ConcatSkip(skip1))
    spec += _conv_block("d1c2", 4 * b, 2 * b, 1, dropout)
    spec.append(Upsample(2))
    spec += _conv_block("d0c1", 2 * b, b, 1, dropout)
    spec.append(ConcatSkip(skip0))
    spec += _conv_block("d0c2", 2 * b, b, 1, dropout)
    spec.append(Conv("out", b, 1, kernel=1, dilation=1))
    spec.append(Sigmoid())
    return tuple(spec)


def build_cnn1(base_channels: int = 32, dropout: float = 0.2) -> NetworkSpec:
    """2D detection U-net: two downsampling levels, dilation-3 convolutions
    on the contracting path, terminal 1x1 conv + sigmoid, 96x96 patches."""
    return NetworkSpec(2, 1, _unet_layers(base_channels, dropout, enc_dilation=3), (96, 96))


def build_cnn2(patch_shape: tuple, base_channels: int = 32, dropout: float = 0.4) -> NetworkSpec:
    """3D segmentation U-net: two downsampling levels, dropout 0.4 default.

    ``patch_shape`` is (D, H, W); every spatial dim must be divisible by 4.
    """
    if len(patch_shape) != 3:
        raise ConfigError(f"patch shape must be (D, H, W), got {patch_shape}")
    if any(s % 4 for s in patch_shape):
        raise ConfigError(f"patch dims {patch_shape} must be divisible by 4")
    return NetworkSpec(3, 1, _unet_layers(base_channels, dropout, enc_dilation=1), tuple(patch_shape))


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32):
    """He-normal conv weights, zero biases, unit batch-norm scale.

    Returns (params, state) dicts keyed by tensor name; draws happen in
    spec order so a given (seed, dtype) is bit-reproducible.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params = {}
    for name, shape, init in spec.param_defs():
        if init == "he":
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
        elif init == "ones":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    state = {}
    for name, shape, init in spec.state_defs():
        state[name] = np.ones(shape, dtype) if init == "ones" else np.zeros(shape, dtype)
    return params, state


def forward(spec: NetworkSpec, params: dict, state: dict, x: np.ndarray, mode: str,
            dropout_seed: int = 0):
    """Run the network; returns (prediction, cache).

    ``mode`` is "train" (batch statistics, dropout active) or "infer"
    (running statistics, dropout off). The cache holds per-layer context
    for ``backward`` plus updated running stats under ``cache["bn_stats"]``.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != spec.ndim + 2:
        raise ConfigError(f"expected {spec.ndim + 2}-D batch, got {x.ndim}-D")
    if x.shape[1] != spec.in_channels:
        raise ConfigError(f"expected {spec.in_channels} input channels, got {x.shape[1]}")
    rng = np.random.default_rng(dropout_seed)
    outputs = []
    records = []
    bn_stats = {}
    cur = x
    for layer in spec.layers:
        if isinstance(layer, Conv):
            ctx = cur
            if spec.ndim == 2:
                cur = layers.conv2d(cur, params[f"{layer.name}.weight"],
                                    params[f"{layer.name}.bias"], layer.dilation)
            else:
                cur = layers.conv3d(cur, params[f"{layer.name}.weight"],
                                    params[f"{layer.name}.bias"], layer.dilation)
        elif isinstance(layer, BatchNorm):
            cur, ctx, stats = layers.batch_norm_forward(
                cur, params[f"{layer.name}.scale"], params[f"{layer.name}.shift"],
                state[f"{layer.name}.running_mean"], state[f"{layer.name}.running_var"], mode,
            )
            if mode == "train":
                bn_stats[f"{layer.name}.running_mean"] = stats[0]
                bn_stats[f"{layer.name}.running_var"] = stats[1]
        elif isinstance(layer, Relu):
            ctx = cur > 0
            cur = layers.relu(cur)
        elif isinstance(layer, Dropout):
            cur, ctx = layers.dropout_forward(cur, layer.rate, mode, rng)
        elif isinstance(layer, MaxPool):
            cur, ctx = layers.maxpool_forward(cur, layer.factor)
        elif isinstance(layer, Upsample):
            ctx = None
            cur = layers.upsample(cur, layer.factor)
        elif isinstance(layer, ConcatSkip):
            ctx = cur.shape[1]
            cur = np.concatenate([cur, outputs[layer.source]], axis=1)
        else:  # Sigmoid
            cur = layers.sigmoid(cur)
            ctx = cur
        outputs.append(cur)
        records.append(ctx)
    cache = {"outputs": outputs, "records": records, "bn_stats": bn_stats, "input": x}
    return cur, cache


def backward(spec: NetworkSpec, params: dict, cache: dict, gout: np.ndarray):
    """Backpropagate through a cached forward pass.

    Returns a gradient dict aligned with the trainable params.
    """
    outputs = cache["outputs"]
    records = cache["records"]
    if len(outputs) != len(spec.layers):
        raise ConfigError("stale or mismatched forward cache")
    grads = {}
    pending = {len(spec.layers) - 1: gout}
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        g = pending.pop(i, None)
        if g is None:
            continue
        ctx = records[i]
        if isinstance(layer, Conv):
            gx, gw, gb = layers.conv_backward(ctx, params[f"{layer.name}.weight"], g,
                                              layer.dilation)
            grads[f"{layer.name}.weight"] = gw
            grads[f"{layer.name}.bias"] = gb
            g = gx
        elif isinstance(layer, BatchNorm):
            g, dgamma, dbeta = layers.batch_norm_backward(g, params[f"{layer.name}.scale"], ctx)
            grads[f"{layer.name}.scale"] = dgamma
            grads[f"{layer.name}.shift"] = dbeta
        elif isinstance(layer, Relu):
            g = g * ctx
        elif isinstance(layer, Dropout):
            g = layers.dropout_backward(g, ctx)
        elif isinstance(layer, MaxPool):
            g = layers.maxpool_backward(g, ctx)
        elif isinstance(layer, Upsample):
            g = layers.upsample_backward(g, layer.factor)
        elif isinstance(layer, ConcatSkip):
            main = g[:, :ctx]
            skip = np.ascontiguousarray(g[:, ctx:])
            src = layer.source
            pending[src] = pending.get(src, 0) + skip
            g = np.ascontiguousarray(main)
        else:  # Sigmoid
            g = g * ctx * (1.0 - ctx)
        if i > 0:
            pending[i - 1] = pending.get(i - 1, 0) + g
    return grads
