"""Flat field layouts, per-channel normalization, and the binary field format.

A field is an ndarray of shape ``(channels, *spatial)``. Samplers work on the
flattened, channel-first, row-major view; ``FieldLayout`` converts between the
two. Field files are self-describing binary: 8 magic bytes, a little-endian
uint32 dimension count, the extents (channel axis first), then raw float64
values in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FIELD_MAGIC = b"FM4PDE01"


class FieldFormatError(ValueError):
    """A field file failed magic, shape, or size validation."""


@dataclass(frozen=True)
class FieldLayout:
    channels: int
    shape: tuple

    def __post_init__(self):
        if self.channels < 1 or any(int(n) < 1 for n in self.shape):
            raise ValueError("layout extents must be positive")
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))

    @property
    def points(self) -> int:
        return int(np.prod(self.shape))

    @property
    def dim(self) -> int:
        return self.channels * self.points

    def flatten(self, fields: np.ndarray) -> np.ndarray:
        fields = np.asarray(fields, dtype=np.float64)
        if fields.shape != (self.channels, *self.shape):
            raise ValueError(f"field shape {fields.shape} does not match layout "
                             f"({self.channels}, {self.shape})")
        return np.ascontiguousarray(fields).ravel()

    def unflatten(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.size != self.dim:
            raise ValueError(f"state of size {x.size} does not match layout dim {self.dim}")
        return x.reshape((self.channels, *self.shape))

    def channel_slice(self, channel: int) -> slice:
        if not 0 <= channel < self.channels:
            raise ValueError(f"channel {channel} out of range")
        return slice(channel * self.points, (channel + 1) * self.points)


def channel_statistics(fields) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over a sequence of (C, *spatial) fields.

    Stds are floored at 1e-12 so degenerate channels stay invertible.
    """
    arr = np.stack([np.asarray(f, dtype=np.float64) for f in fields])
    axes = (0, *range(2, arr.ndim))
    mean = arr.mean(axis=axes)
    std = np.maximum(arr.std(axis=axes), 1e-12)
    return mean, std


def identity_statistics(channels: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros(channels), np.ones(channels)


def normalize_field(field: np.ndarray, stats) -> np.ndarray:
    mean, std = stats
    bc = (slice(None),) + (None,) * (field.ndim - 1)
    return (field - mean[bc]) / std[bc]


def denormalize_field(field: np.ndarray, stats) -> np.ndarray:
    mean, std = stats
    bc = (slice(None),) + (None,) * (field.ndim - 1)
    return field * std[bc] + mean[bc]


def flat_statistics(layout: FieldLayout, stats) -> tuple[np.ndarray, np.ndarray]:
    """Expand per-channel stats to flat vectors aligned with the state layout."""
    mean, std = stats
    if len(mean) != layout.channels:
        raise ValueError("statistics channel count does not match layout")
    return (np.repeat(np.asarray(mean, dtype=np.float64), layout.points),
            np.repeat(np.asarray(std, dtype=np.float64), layout.points))


def write_field(path, field: np.ndarray) -> None:
    field = np.ascontiguousarray(field, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<I", field.ndim))
        fh.write(struct.pack(f"<{field.ndim}I", *field.shape))
        fh.write(field.astype("<f8", copy=False).tobytes())


def read_field(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:8] != FIELD_MAGIC:
        raise FieldFormatError(f"{path}: bad or missing magic bytes")
    (ndim,) = struct.unpack("<I", raw[8:12])
    header_end = 12 + 4 * ndim
    if ndim < 1 or ndim > 8 or len(raw) < header_end:
        raise FieldFormatError(f"{path}: truncated extent header")
    shape = struct.unpack(f"<{ndim}I", raw[12:header_end])
    count = int(np.prod(shape))
    if len(raw) != header_end + 8 * count:
        raise FieldFormatError(f"{path}: payload size mismatch for shape {shape}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=header_end)
    return data.reshape(shape).astype(np.float64)
