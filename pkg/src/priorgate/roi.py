"""Per-label ROI masks: composition, physical-radius dilation, token-grid projection.

A label's ROI starts from one or more binary organ masks, widens by a
physical radius to capture peri-organ context, and is finally projected to
the encoder's patch grid as a binary token mask. The projection samples the
2D mask at each tri-slice center with nearest-neighbor resizing, then keeps
the value at each patch's center pixel (row a*p + p//2, col b*p + p//2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from . import io
from .autodiff import DimensionError

SOURCE_SINGLE = "single-organ"
SOURCE_UNION = "multi-organ-union"
SOURCE_BOX = "localization-box"
SOURCES = (SOURCE_SINGLE, SOURCE_UNION, SOURCE_BOX)


@dataclass
class RoiMask:
    label: str
    mask: np.ndarray  # binary (D, H, W), uint8
    dilation_radius_mm: float
    source: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.ndim != 3:
            raise DimensionError(f"ROI mask must be 3-D, got {self.mask.shape}")
        vals = np.unique(self.mask)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("ROI mask values must be 0/1")
        self.mask = self.mask.astype(np.uint8)
        if self.dilation_radius_mm < 0:
            raise ValueError("dilation radius must be >= 0")
        if self.source not in SOURCES:
            raise ValueError(f"unknown mask source {self.source!r}")


@dataclass
class TokenMask:
    values: np.ndarray  # (T, N) binary
    grid: tuple[int, int]  # (tokens_y, tokens_x)

    def __post_init__(self):
        self.values = np.asarray(self.values).astype(np.uint8)
        if self.values.ndim != 2 or self.values.shape[1] != self.grid[0] * self.grid[1]:
            raise DimensionError(
                f"token mask {self.values.shape} inconsistent with grid {self.grid}"
            )


def compose_mask(channels: list[np.ndarray], mode: str, label: str, dilation_radius_mm: float = 0.0) -> RoiMask:
    """Combine segmentation channels into one label ROI.

    single-organ passes the sole channel through; multi-organ-union takes the
    voxelwise OR; localization-box fills the axis-aligned bounding box of the
    union (empty union stays empty).
    """
    if not channels:
        raise ValueError("compose_mask needs at least one channel")
    shapes = {c.shape for c in channels}
    if len(shapes) != 1:
        raise DimensionError(f"channels live on different grids: {shapes}")
    if mode == SOURCE_SINGLE:
        if len(channels) != 1:
            raise ValueError("single-organ composition expects exactly one channel")
        combined = channels[0].astype(bool)
    elif mode == SOURCE_UNION:
        combined = np.zeros(channels[0].shape, dtype=bool)
        for c in channels:
            combined |= c.astype(bool)
    elif mode == SOURCE_BOX:
        union = np.zeros(channels[0].shape, dtype=bool)
        for c in channels:
            union |= c.astype(bool)
        combined = np.zeros_like(union)
        if union.any():
            idx = np.nonzero(union)
            lo = [int(i.min()) for i in idx]
            hi = [int(i.max()) for i in idx]
            combined[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] = True
    else:
        raise ValueError(f"unknown composition mode {mode!r}")
    return RoiMask(label=label, mask=combined.astype(np.uint8), dilation_radius_mm=dilation_radius_mm, source=mode)


def dilate_mm(m: RoiMask, spacing: tuple[float, float, float]) -> RoiMask:
    """Binary dilation by a box with per-axis half-width round(r / spacing_axis)."""
    if any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    if m.dilation_radius_mm == 0:
        return RoiMask(m.label, m.mask.copy(), m.dilation_radius_mm, m.source)
    half = [int(round(m.dilation_radius_mm / s)) for s in spacing]
    if all(k == 0 for k in half):
        return RoiMask(m.label, m.mask.copy(), m.dilation_radius_mm, m.source)
    dilated = maximum_filter(
        m.mask, size=tuple(2 * k + 1 for k in half), mode="constant", cval=0
    )
    return RoiMask(m.label, dilated.astype(np.uint8), m.dilation_radius_mm, m.source)


def _nearest_index_map(n_out: int, n_in: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(int)
    return np.clip(idx, 0, n_in - 1)


def to_token_mask(
    m: RoiMask,
    centers: np.ndarray,
    encoder_input: tuple[int, int],
    patch: int,
) -> TokenMask:
    """Project the 3D ROI onto the (H'/p) x (W'/p) token grid per tri-slice center."""
    h_out, w_out = encoder_input
    if h_out % patch or w_out % patch:
        raise DimensionError(f"encoder input {encoder_input} not divisible by patch {patch}")
    depth, h_in, w_in = m.mask.shape
    centers = np.asarray(centers, dtype=int)
    if centers.size and (centers.min() < 0 or centers.max() >= depth):
        raise IndexError(f"tri-slice center out of range for depth {depth}")
    grid = (h_out // patch, w_out // patch)
    rows = _nearest_index_map(h_out, h_in)
    cols = _nearest_index_map(w_out, w_in)
    # token (a, b) keeps the nearest-neighbor sample at its patch-center pixel
    center_rows = rows[np.arange(grid[0]) * patch + patch // 2]
    center_cols = cols[np.arange(grid[1]) * patch + patch // 2]
    values = np.empty((centers.size, grid[0] * grid[1]), dtype=np.uint8)
    for i, t in enumerate(centers):
        plane = m.mask[t]
        values[i] = plane[np.ix_(center_rows, center_cols)].reshape(-1)
    return TokenMask(values=values, grid=grid)


def save_mask(base_path: str, m: RoiMask) -> None:
    io.write_array(
        base_path,
        m.mask.astype(np.float64),
        meta={
            "label": m.label,
            "dilation_radius_mm": m.dilation_radius_mm,
            "source": m.source,
        },
    )


def load_mask(base_path: str) -> RoiMask:
    data, sidecar = io.read_array(base_path)
    return RoiMask(
        label=sidecar["label"],
        mask=data.astype(np.uint8),
        dilation_radius_mm=float(sidecar["dilation_radius_mm"]),
        source=sidecar["source"],
    )
