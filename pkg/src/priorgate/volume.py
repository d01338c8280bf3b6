"""CT volume preprocessing and 2.5D tri-slice construction.

The preprocessing chain is clip -> resample -> center crop/pad -> tri-slice.
Resampling uses the half-pixel-center convention: output voxel j samples the
input at u = (j + 0.5) * (n_in / n_out) - 0.5, clamped to the valid range.
Intensities interpolate linearly (separable per axis); masks resampled
alongside use nearest-neighbor on the same coordinate map to stay binary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io
from .autodiff import DimensionError

HU_MIN = -1000.0
HU_MAX = 1000.0

# Canonical published channel statistics for encoders pretrained on natural
# images, applied after mapping HU to [0, 1].
CHANNEL_MEAN = (0.485, 0.456, 0.406)
CHANNEL_STD = (0.229, 0.224, 0.225)


@dataclass
class Volume:
    """A D x H x W scalar field in Hounsfield units with (z, y, x) mm spacing."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive extents, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class TriSliceBatch:
    """T tri-slices of shape 3 x H' x W', channel-normalized, plus their source centers."""

    slices: np.ndarray  # (T, 3, H', W')
    centers: np.ndarray  # (T,) source slice indices
    stride: int

    def __post_init__(self):
        if self.slices.ndim != 4 or self.slices.shape[1] != 3:
            raise DimensionError(f"tri-slice batch must be (T, 3, H', W'), got {self.slices.shape}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def clip_hu(v: Volume) -> Volume:
    """Clamp every voxel to [-1000, 1000] HU."""
    return Volume(np.clip(v.data, HU_MIN, HU_MAX), v.spacing)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _linear_resize_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_out == n_in:
        return arr
    u = np.clip(_axis_coords(n_in, n_out), 0.0, n_in - 1.0)
    lo = np.floor(u).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = u - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    w = frac.reshape(shape)
    return a * (1.0 - w) + b * w


def _nearest_resize_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_out == n_in:
        return arr
    idx = np.floor(_axis_coords(n_in, n_out) + 0.5).astype(int)
    idx = np.clip(idx, 0, n_in - 1)
    return np.take(arr, idx, axis=axis)


def _target_extents(shape, spacing, target_spacing) -> tuple[int, ...]:
    out = []
    for n, s, t in zip(shape, spacing, target_spacing):
        m = int(round(n * s / t))
        if m < 1:
            raise DimensionError(f"resampling {n} voxels at {s} mm to {t} mm collapses the axis")
        out.append(m)
    return tuple(out)


def resample(v: Volume, target_spacing: tuple[float, float, float]) -> Volume:
    """Trilinear resample to the target (z, y, x) spacing."""
    if any(t <= 0 for t in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    extents = _target_extents(v.data.shape, v.spacing, target_spacing)
    data = v.data
    for axis in range(3):
        data = _linear_resize_axis(data, axis, extents[axis])
    return Volume(data, tuple(float(t) for t in target_spacing))


def resample_nearest(mask: np.ndarray, spacing, target_spacing) -> np.ndarray:
    """Nearest-neighbor resample for binary masks, same coordinate map as resample."""
    extents = _target_extents(mask.shape, spacing, target_spacing)
    data = mask
    for axis in range(3):
        data = _nearest_resize_axis(data, axis, extents[axis])
    return data


def crop_or_pad_array(arr: np.ndarray, target: tuple[int, ...], pad_value: float) -> np.ndarray:
    """Symmetric center crop and/or pad of a 3-D array to the target extents."""
    out = arr
    for axis, tgt in enumerate(target):
        n = out.shape[axis]
        if n > tgt:
            start = (n - tgt) // 2
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(start, start + tgt)
            out = out[tuple(sl)]
        elif n < tgt:
            before = (tgt - n) // 2
            after = tgt - n - before
            widths = [(0, 0)] * out.ndim
            widths[axis] = (before, after)
            out = np.pad(out, widths, mode="constant", constant_values=pad_value)
    return out


def center_crop_or_pad(v: Volume, target: tuple[int, int, int], pad_value: float = HU_MIN) -> Volume:
    if any(t <= 0 for t in target):
        raise ValueError(f"target extents must be positive, got {target}")
    return Volume(crop_or_pad_array(v.data, target, pad_value), v.spacing)


def tri_slice_channels(data: np.ndarray, t: int) -> np.ndarray:
    """Raw (3, H, W) channels [t-1, t, t+1] with boundary replication, before resize."""
    d = data.shape[0]
    lo = max(t - 1, 0)
    hi = min(t + 1, d - 1)
    return np.stack([data[lo], data[t], data[hi]])


def tri_slice(v: Volume, stride: int, input_size: tuple[int, int]) -> TriSliceBatch:
    """Build the 2.5D batch: centers {0, s, 2s, ...}, bilinear resize, normalize.

    Intensities are mapped HU -> [0, 1] via (hu + 1000) / 2000, then each
    channel is standardized with the canonical channel statistics.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    depth = v.data.shape[0]
    if depth < 1:
        raise DimensionError("volume has no slices")
    h_out, w_out = input_size
    centers = np.arange(0, depth, stride)
    slices = np.empty((centers.size, 3, h_out, w_out), dtype=np.float64)
    for i, t in enumerate(centers):
        tri = tri_slice_channels(v.data, int(t))
        tri = _linear_resize_axis(tri, 1, h_out)
        tri = _linear_resize_axis(tri, 2, w_out)
        slices[i] = tri
    slices = (slices + 1000.0) / 2000.0
    mean = np.asarray(CHANNEL_MEAN).reshape(1, 3, 1, 1)
    std = np.asarray(CHANNEL_STD).reshape(1, 3, 1, 1)
    slices = (slices - mean) / std
    return TriSliceBatch(slices=slices, centers=centers, stride=stride)


def save_volume(base_path: str, v: Volume) -> None:
    io.write_array(base_path, v.data, meta={"spacing": list(v.spacing)})


def load_volume(base_path: str) -> Volume:
    data, sidecar = io.read_array(base_path)
    return Volume(data, tuple(sidecar["spacing"]))
