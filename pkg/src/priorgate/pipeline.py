"""Preprocessing bridge: phantom samples to model-ready inputs.

Volumes run clip -> resample -> center crop/pad -> tri-slice; each label's
ROI mask follows the same grid changes (nearest-neighbor, zero padding), is
dilated by its physical radius on the final grid, and is projected to the
token grid at the tri-slice centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import volume as vol
from . import roi
from .gating import PriorVector
from .phantom import PhantomSample
from .roi import RoiMask, TokenMask
from .volume import TriSliceBatch, Volume


@dataclass
class PipelineConfig:
    target_spacing: tuple[float, float, float] = (3.0, 1.5, 1.5)
    target_grid: tuple[int, int, int] = (20, 44, 44)
    input_size: tuple[int, int] = (64, 64)
    patch_size: int = 8
    stride: int = 4


@dataclass
class ModelSample:
    sample_id: str
    split: str
    tri: TriSliceBatch
    token_masks: dict[str, TokenMask]
    priors: dict[str, PriorVector]
    targets: dict[str, int | None]
    raw_priors: dict[str, PriorVector] = field(default_factory=dict)


def preprocess_sample(sample: PhantomSample, cfg: PipelineConfig) -> ModelSample:
    v = vol.clip_hu(sample.volume)
    v = vol.resample(v, cfg.target_spacing)
    v = vol.center_crop_or_pad(v, cfg.target_grid)
    tri = vol.tri_slice(v, cfg.stride, cfg.input_size)
    token_masks: dict[str, TokenMask] = {}
    for label, m in sample.masks.items():
        grid_mask = vol.resample_nearest(m.mask, sample.volume.spacing, cfg.target_spacing)
        grid_mask = vol.crop_or_pad_array(grid_mask, cfg.target_grid, 0).astype(np.uint8)
        aligned = RoiMask(m.label, grid_mask, m.dilation_radius_mm, m.source)
        dilated = roi.dilate_mm(aligned, cfg.target_spacing)
        token_masks[label] = roi.to_token_mask(dilated, tri.centers, cfg.input_size, cfg.patch_size)
    return ModelSample(
        sample_id=sample.sample_id,
        split=sample.split,
        tri=tri,
        token_masks=token_masks,
        priors=dict(sample.priors),
        targets=dict(sample.targets),
        raw_priors=dict(sample.priors),
    )


def preprocess_dataset(samples: list[PhantomSample], cfg: PipelineConfig) -> list[ModelSample]:
    return [preprocess_sample(s, cfg) for s in samples]


def with_priors(ms: ModelSample, priors: dict[str, PriorVector]) -> ModelSample:
    """A shallow variant of a preprocessed sample with substituted prior vectors."""
    return ModelSample(
        sample_id=ms.sample_id,
        split=ms.split,
        tri=ms.tri,
        token_masks=ms.token_masks,
        priors=dict(priors),
        targets=ms.targets,
        raw_priors=ms.raw_priors,
    )
