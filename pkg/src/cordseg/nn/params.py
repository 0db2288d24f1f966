"""Model parameter container and its binary file format.

File layout (little-endian): magic "CSEG", u32 format version, u64 spec
fingerprint, u64 init seed, u32 tensor count, then per tensor: u16 name
length + utf-8 name, u8 kind (0 trainable / 1 state), u8 dtype code
(0 f32 / 1 f64), u8 ndim, u32 dims, raw payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, FormatError
from .network import NetworkSpec, init_params

MAGIC = b"CSEG"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class ModelParams:
    """Trainable tensors plus batch-norm running statistics."""

    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]
    seed: int = 0

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int, dtype=np.float32) -> "ModelParams":
        params, state = init_params(spec, seed, dtype)
        return cls(params, state, seed)

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.state.items()},
            self.seed,
        )


def _pack_tensor(name: str, kind: int, arr: np.ndarray) -> bytes:
    if arr.dtype not in _DTYPE_CODES:
        raise ConfigError(f"cannot serialize dtype {arr.dtype} for {name}")
    encoded = name.encode()
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<BBB", kind, _DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()


def save_params(model: ModelParams, spec: NetworkSpec, path: str | Path) -> None:
    """Write parameters with the spec fingerprint for load-time checking."""
    items = [(n, 0, a) for n, a in model.params.items()]
    items += [(n, 1, a) for n, a in model.state.items()]
    blob = MAGIC + struct.pack("<IQQI", VERSION, spec.fingerprint(), model.seed, len(items))
    for name, kind, arr in items:
        blob += _pack_tensor(name, kind, arr)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: corrupt parameter file (truncated)")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(path: str | Path, spec: NetworkSpec) -> ModelParams:
    """Read parameters; fails if the file targets a different spec."""
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(4) != MAGIC:
        raise FormatError(f"{path}: not a parameter file")
    version, fingerprint, seed, count = rd.unpack("<IQQI")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if fingerprint != spec.fingerprint():
        raise ConfigError(
            f"{path}: parameter file fingerprint {fingerprint:#x} does not match "
            f"the network spec ({spec.fingerprint():#x})"
        )
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode()
        kind, dtype_code, ndim = rd.unpack("<BBB")
        if dtype_code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {dtype_code}")
        shape = rd.unpack(f"<{ndim}I")
        dtype = _CODE_DTYPES[dtype_code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(rd.take(n_bytes), dtype=dtype.newbyteorder("<")).reshape(shape)
        arr = arr.astype(dtype)  # native, writable copy
        (state if kind else params)[name] = arr
    expected = {n for n, _, _ in spec.param_defs()}
    if set(params) != expected:
        raise FormatError(f"{path}: tensor names do not match the spec")
    return ModelParams(params, state, int(seed))
