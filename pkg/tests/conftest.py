import numpy as np
import pytest

from priorgate import phantom, roi
from priorgate.model import ModelConfig
from priorgate.phantom import LabelRule, OrganBlueprint, PhantomSpec, ShiftParams
from priorgate.pipeline import PipelineConfig, preprocess_dataset


def tiny_phantom_spec(seed: int = 0) -> PhantomSpec:
    """A scaled-down three-family spec for fast mechanical tests."""
    organs = (
        OrganBlueprint("organ_a", (0.50, 0.35, 0.35), 1.5, (3.0, 7.0), 0.1, (80.0, 120.0)),
        OrganBlueprint("organ_b1", (0.50, 0.62, 0.32), 1.5, (3.0, 5.0), 0.1, (20.0, 90.0)),
        OrganBlueprint("organ_b2", (0.50, 0.65, 0.62), 1.5, (2.5, 4.0), 0.1, (20.0, 90.0), hu_from="organ_b1"),
        OrganBlueprint("organ_c", (0.50, 0.32, 0.66), 1.0, (3.5, 5.0), 0.1, (55.0, 75.0)),
        OrganBlueprint("lesion", (0.0, 0.0, 0.0), 0.0, (1.2, 2.0), 0.0, (150.0, 190.0), presence_prob=0.5, inside="organ_c"),
    )
    rules = (
        LabelRule("geometric", "geometric", "organ_a.radius_mm", ">", 5.0,
                  ("organ_a",), roi.SOURCE_SINGLE, 2.0,
                  (("geo_radius_mm", "organ_a.radius_mm"), ("geo_volume_ml", "organ_a.volume_ml"))),
        LabelRule("densitometric", "densitometric", "organ_b1.mean_hu", "<", 55.0,
                  ("organ_b1", "organ_b2"), roi.SOURCE_UNION, 2.0,
                  (("dens_mean_hu", "organ_b1.mean_hu"), ("dens_volume_ml", "organ_b1.volume_ml"))),
        LabelRule("focal", "focal", "lesion.radius_mm", ">", 0.5,
                  ("organ_c",), roi.SOURCE_BOX, 1.0,
                  (("focal_host_radius_mm", "organ_c.radius_mm"), ("focal_host_mean_hu", "organ_c.mean_hu"))),
    )
    return PhantomSpec(
        grid=(10, 16, 16),
        spacing=(3.0, 1.5, 1.5),
        organs=organs,
        rules=rules,
        missing_prob=0.3,
        shift=ShiftParams(hu_offset=-40.0, blur_mm=1.5, noise_hu=20.0),
        seed=seed,
    )


def tiny_pipeline_config() -> PipelineConfig:
    return PipelineConfig(
        target_spacing=(3.0, 1.5, 1.5),
        target_grid=(10, 16, 16),
        input_size=(16, 16),
        patch_size=4,
        stride=3,
    )


def tiny_model_config() -> ModelConfig:
    spec = tiny_phantom_spec()
    return ModelConfig(
        labels=spec.labels(),
        feature_counts={r.label: len(r.priors) for r in spec.rules},
        embed_dim=8,
        patch_size=4,
        input_size=(16, 16),
        attention_block=True,
        concat_width=4,
    )


@pytest.fixture(scope="session")
def tiny_model_samples():
    """Preprocessed train/val model inputs from the tiny phantom."""
    spec = tiny_phantom_spec(seed=0)
    cfg = tiny_pipeline_config()
    train = preprocess_dataset(phantom.generate(spec, 12, "train"), cfg)
    val = preprocess_dataset(phantom.generate(spec, 6, "val"), cfg)
    return train, val
