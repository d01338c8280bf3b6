"""Synthetic measurement-defined phantoms: volumes, masks, analytic priors, labels.

Each sample is a small CT-like volume containing ellipsoidal organs whose
generating parameters (radius, mean attenuation, lesion presence) define the
labels via fixed thresholds. Priors are those generating parameters verbatim,
so anatomy is exact while appearance can be degraded: the external split
re-renders the same latent draws and then blurs, offsets, and noises the
volume only, leaving masks, priors, and labels untouched.

Label families:
  geometric      positive when an organ's radius exceeds a cutoff,
  densitometric  positive when a (multi-organ) attenuation falls below a cutoff,
  focal          positive when a small bright lesion is present; its priors are
                 host-organ measurements and deliberately carry no signal.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter

from . import io, roi
from .gating import PriorVector
from .roi import RoiMask
from .seeding import derived_rng
from .volume import Volume

SPLITS = ("train", "val", "test-internal", "test-external")
_SPLIT_PREFIX = {"train": "tr", "val": "va", "test-internal": "ti", "test-external": "te"}
# test-internal and test-external share one latent stream: they are twins
_LATENT_KEY = {"train": "train", "val": "val", "test-internal": "test", "test-external": "test"}


class SpecError(ValueError):
    """The phantom specification cannot generate both label classes."""


@dataclass
class OrganBlueprint:
    name: str
    center_frac: tuple[float, float, float]  # nominal center, fraction of grid extent
    center_jitter_mm: float
    radius_range_mm: tuple[float, float]
    aniso_jitter: float  # per-axis radius multiplier drawn from U(1-a, 1+a)
    hu_range: tuple[float, float]
    presence_prob: float = 1.0
    inside: str | None = None  # place centered within this organ
    hu_from: str | None = None  # share the drawn HU of another organ


@dataclass
class LabelRule:
    label: str
    family: str
    measurement: str  # "<organ>.<radius_mm|mean_hu>"
    op: str  # ">" or "<"
    cutoff: float
    roi_organs: tuple[str, ...]
    roi_mode: str
    dilation_mm: float
    priors: tuple[tuple[str, str], ...]  # (feature name, "<organ>.<quantity>")


@dataclass
class ShiftParams:
    """Appearance shift for the external split, applied to volumes only.

    The offset and blur each get a per-sample uniform jitter around the
    configured value, and gain_jitter rescales intensities about the water
    point per sample (v -> v * gain). These model scanner-to-scanner
    calibration and kernel variation; a constant offset or blur alone would
    preserve sample ranking and leave rank metrics untouched. All-zero
    parameters mean no shift.
    """

    hu_offset: float = -40.0
    blur_mm: float = 2.0
    noise_hu: float = 25.0
    hu_offset_jitter: float = 0.0
    blur_jitter_mm: float = 0.0
    gain_jitter: float = 0.0


@dataclass
class PhantomSpec:
    grid: tuple[int, int, int] = (24, 44, 44)
    spacing: tuple[float, float, float] = (3.0, 1.5, 1.5)
    organs: tuple[OrganBlueprint, ...] = ()
    rules: tuple[LabelRule, ...] = ()
    missing_prob: float = 0.3
    shift: ShiftParams = field(default_factory=ShiftParams)
    seed: int = 0
    background_hu: float = 30.0
    texture_noise_hu: float = 8.0

    def labels(self) -> list[str]:
        return [r.label for r in self.rules]

    def families(self) -> dict[str, str]:
        return {r.label: r.family for r in self.rules}


@dataclass
class PhantomSample:
    sample_id: str
    split: str
    volume: Volume
    masks: dict[str, RoiMask]
    priors: dict[str, PriorVector]
    targets: dict[str, int | None]
    measurements: dict[str, float] = field(default_factory=dict)
    organ_masks: dict[str, np.ndarray] = field(default_factory=dict)
    feature_origins: dict[str, str] = field(default_factory=dict)


def default_spec(seed: int = 0) -> PhantomSpec:
    organs = (
        OrganBlueprint("organ_a", (0.50, 0.32, 0.34), 3.0, (8.0, 16.0), 0.12, (80.0, 120.0)),
        OrganBlueprint("organ_b1", (0.50, 0.62, 0.30), 3.0, (9.0, 13.0), 0.12, (10.0, 100.0)),
        OrganBlueprint("organ_b2", (0.50, 0.66, 0.62), 3.0, (7.0, 10.0), 0.12, (10.0, 100.0), hu_from="organ_b1"),
        OrganBlueprint("organ_c", (0.50, 0.30, 0.68), 2.0, (10.0, 13.0), 0.10, (55.0, 75.0)),
        OrganBlueprint("lesion", (0.0, 0.0, 0.0), 0.0, (5.0, 7.0), 0.0, (210.0, 250.0), presence_prob=0.5, inside="organ_c"),
    )
    rules = (
        LabelRule(
            label="geometric",
            family="geometric",
            measurement="organ_a.radius_mm",
            op=">",
            cutoff=12.0,
            roi_organs=("organ_a",),
            roi_mode=roi.SOURCE_SINGLE,
            dilation_mm=4.0,
            priors=(("geo_radius_mm", "organ_a.radius_mm"), ("geo_volume_ml", "organ_a.volume_ml")),
        ),
        LabelRule(
            label="densitometric",
            family="densitometric",
            measurement="organ_b1.mean_hu",
            op="<",
            cutoff=55.0,
            roi_organs=("organ_b1", "organ_b2"),
            roi_mode=roi.SOURCE_UNION,
            dilation_mm=4.0,
            priors=(("dens_mean_hu", "organ_b1.mean_hu"), ("dens_volume_ml", "organ_b1.volume_ml")),
        ),
        LabelRule(
            label="focal",
            family="focal",
            measurement="lesion.radius_mm",
            op=">",
            cutoff=1.0,
            roi_organs=("organ_c",),
            roi_mode=roi.SOURCE_BOX,
            dilation_mm=2.0,
            priors=(("focal_host_radius_mm", "organ_c.radius_mm"), ("focal_host_mean_hu", "organ_c.mean_hu")),
        ),
    )
    return PhantomSpec(
        organs=organs,
        rules=rules,
        seed=seed,
        shift=ShiftParams(
            hu_offset=-30.0,
            blur_mm=1.5,
            noise_hu=20.0,
            hu_offset_jitter=25.0,
            blur_jitter_mm=1.0,
            gain_jitter=0.15,
        ),
    )


def validate_spec(spec: PhantomSpec) -> None:
    if not spec.organs or not spec.rules:
        raise SpecError("spec needs at least one organ and one label rule")
    organs = {o.name: o for o in spec.organs}
    for o in spec.organs:
        if not (0.0 <= o.presence_prob <= 1.0):
            raise SpecError(f"{o.name}: presence probability outside [0, 1]")
        if o.radius_range_mm[0] > o.radius_range_mm[1] or o.radius_range_mm[0] <= 0:
            raise SpecError(f"{o.name}: bad radius range {o.radius_range_mm}")
        if o.inside is not None and o.inside not in organs:
            raise SpecError(f"{o.name}: host organ {o.inside!r} unknown")
        if o.hu_from is not None and o.hu_from not in organs:
            raise SpecError(f"{o.name}: hu_from organ {o.hu_from!r} unknown")
    if not (0.0 <= spec.missing_prob <= 1.0):
        raise SpecError("missing-label probability outside [0, 1]")
    for rule in spec.rules:
        organ_name, qty = _split_measurement(rule.measurement)
        if organ_name not in organs:
            raise SpecError(f"rule {rule.label}: organ {organ_name!r} unknown")
        if rule.op not in (">", "<"):
            raise SpecError(f"rule {rule.label}: op must be '>' or '<'")
        organ = organs[organ_name]
        if qty == "radius_mm":
            lo, hi = organ.radius_range_mm
        elif qty == "mean_hu":
            lo, hi = organ.hu_range
        else:
            raise SpecError(f"rule {rule.label}: cannot threshold on {qty!r}")
        if organ.presence_prob < 1.0:
            # absent organ measures 0; the cutoff must separate 0 from [lo, hi]
            if not (0.0 < rule.cutoff < lo):
                raise SpecError(
                    f"rule {rule.label}: cutoff {rule.cutoff} must lie in (0, {lo}) for a presence organ"
                )
            if rule.op != ">":
                raise SpecError(f"rule {rule.label}: presence rules use op '>'")
        elif not (lo < rule.cutoff < hi):
            raise SpecError(
                f"rule {rule.label}: cutoff {rule.cutoff} outside generating range ({lo}, {hi})"
            )
        for organ_of_roi in rule.roi_organs:
            if organ_of_roi not in organs:
                raise SpecError(f"rule {rule.label}: ROI organ {organ_of_roi!r} unknown")


def analytic_prevalence(spec: PhantomSpec, label: str) -> float:
    """Closed-form positive rate implied by the generating distribution."""
    rule = next(r for r in spec.rules if r.label == label)
    organ = next(o for o in spec.organs if o.name == _split_measurement(rule.measurement)[0])
    qty = _split_measurement(rule.measurement)[1]
    lo, hi = organ.radius_range_mm if qty == "radius_mm" else organ.hu_range
    if organ.presence_prob < 1.0:
        return organ.presence_prob  # cutoff sits between 0 and lo
    frac_above = (hi - rule.cutoff) / (hi - lo)
    return frac_above if rule.op == ">" else 1.0 - frac_above


def _split_measurement(name: str) -> tuple[str, str]:
    organ, _, qty = name.partition(".")
    return organ, qty


def sample_latents(spec: PhantomSpec, index: int, split: str) -> dict:
    """Draw one sample's generating parameters; test twins share a stream."""
    rng = derived_rng(spec.seed, "latents", _LATENT_KEY[split], index)
    extent_mm = np.array(spec.grid) * np.array(spec.spacing)
    organs: dict[str, dict] = {}
    for bp in spec.organs:
        jitter = rng.uniform(-bp.center_jitter_mm, bp.center_jitter_mm, size=3)
        radius = float(rng.uniform(*bp.radius_range_mm))
        axes = radius * (1.0 + rng.uniform(-bp.aniso_jitter, bp.aniso_jitter, size=3))
        hu = float(rng.uniform(*bp.hu_range))
        present = bool(rng.random() < bp.presence_prob) if bp.presence_prob < 1.0 else True
        if bp.inside is not None:
            host = organs[bp.inside]
            slack = np.maximum(np.asarray(host["axes"]) - axes, 0.0)
            offset = rng.uniform(-0.5, 0.5, size=3) * slack
            center = np.asarray(host["center"]) + offset
        else:
            center = np.array(bp.center_frac) * extent_mm + jitter
        if bp.hu_from is not None:
            hu = organs[bp.hu_from]["hu"]
        organs[bp.name] = {
            "center": center.tolist(),
            "radius": radius,
            "axes": axes.tolist(),
            "hu": hu,
            "present": present,
        }
    return organs


def measurements_from_latents(latents: dict) -> dict[str, float]:
    out = {}
    for name, o in latents.items():
        present = o["present"]
        axes = np.asarray(o["axes"])
        out[f"{name}.radius_mm"] = o["radius"] if present else 0.0
        out[f"{name}.volume_ml"] = float(4.0 / 3.0 * np.pi * axes.prod() / 1000.0) if present else 0.0
        out[f"{name}.mean_hu"] = o["hu"] if present else 0.0
        out[f"{name}.present"] = 1.0 if present else 0.0
    return out


def apply_rule(rule: LabelRule, measurements: dict[str, float]) -> int:
    value = measurements[rule.measurement]
    return int(value > rule.cutoff) if rule.op == ">" else int(value < rule.cutoff)


def _voxel_centers_mm(spec: PhantomSpec):
    return [
        (np.arange(n) + 0.5) * s
        for n, s in zip(spec.grid, spec.spacing)
    ]


def _ellipsoid_mask(spec: PhantomSpec, center, axes) -> np.ndarray:
    zc, yc, xc = _voxel_centers_mm(spec)
    dz = ((zc - center[0]) / axes[0]) ** 2
    dy = ((yc - center[1]) / axes[1]) ** 2
    dx = ((xc - center[2]) / axes[2]) ** 2
    return (dz[:, None, None] + dy[None, :, None] + dx[None, None, :]) <= 1.0


def render(spec: PhantomSpec, latents: dict, index: int, split: str) -> tuple[Volume, dict[str, np.ndarray]]:
    """Rasterize one sample: body ellipse, organs in blueprint order, texture noise."""
    extent_mm = np.array(spec.grid) * np.array(spec.spacing)
    data = np.full(spec.grid, -1000.0)
    body = _ellipsoid_mask(spec, extent_mm / 2.0, extent_mm * 0.48)
    data[body] = spec.background_hu
    organ_masks: dict[str, np.ndarray] = {}
    for bp in spec.organs:
        o = latents[bp.name]
        if not o["present"]:
            organ_masks[bp.name] = np.zeros(spec.grid, dtype=np.uint8)
            continue
        mask = _ellipsoid_mask(spec, o["center"], o["axes"])
        data[mask] = o["hu"]
        organ_masks[bp.name] = mask.astype(np.uint8)
    rng = derived_rng(spec.seed, "texture", _LATENT_KEY[split], index)
    data = data + rng.normal(0.0, spec.texture_noise_hu, size=spec.grid)
    return Volume(data, spec.spacing), organ_masks


def apply_shift(volume: Volume, shift: ShiftParams, rng: np.random.Generator) -> Volume:
    """Appearance shift for the external split: blur, offset, noise, volume only."""
    data = volume.data
    blur = shift.blur_mm
    if shift.blur_jitter_mm > 0:
        blur = max(0.0, blur + rng.uniform(-shift.blur_jitter_mm, shift.blur_jitter_mm))
    offset = shift.hu_offset
    if shift.hu_offset_jitter > 0:
        offset = offset + rng.uniform(-shift.hu_offset_jitter, shift.hu_offset_jitter)
    if blur > 0:
        sigma = [blur / s for s in volume.spacing]
        data = gaussian_filter(data, sigma=sigma)
    if shift.gain_jitter > 0:
        gain = 1.0 + rng.uniform(-shift.gain_jitter, shift.gain_jitter)
        data = data * gain
    if offset != 0:
        data = data + offset
    if shift.noise_hu > 0:
        data = data + rng.normal(0.0, shift.noise_hu, size=data.shape)
    return Volume(data, volume.spacing)


def generate(spec: PhantomSpec, n: int, split: str) -> list[PhantomSample]:
    """Deterministically generate n samples of the given split."""
    validate_spec(spec)
    if n <= 0:
        raise SpecError(f"split {split!r} needs a positive sample count, got {n}")
    if split not in SPLITS:
        raise SpecError(f"unknown split {split!r}; expected one of {SPLITS}")
    samples = []
    for i in range(n):
        latents = sample_latents(spec, i, split)
        meas = measurements_from_latents(latents)
        volume, organ_masks = render(spec, latents, i, split)
        if split == "test-external":
            volume = apply_shift(volume, spec.shift, derived_rng(spec.seed, "shift", i))
        masks: dict[str, RoiMask] = {}
        priors: dict[str, PriorVector] = {}
        targets: dict[str, int | None] = {}
        origins: dict[str, str] = {}
        missing_rng = derived_rng(spec.seed, "missing", _LATENT_KEY[split], i)
        for rule in spec.rules:
            masks[rule.label] = roi.compose_mask(
                [organ_masks[name] for name in rule.roi_organs],
                rule.roi_mode,
                rule.label,
                rule.dilation_mm,
            )
            names = tuple(f for f, _ in rule.priors)
            values = np.array([meas[m] for _, m in rule.priors])
            priors[rule.label] = PriorVector(label=rule.label, values=values, features=names)
            origins.update({f: m for f, m in rule.priors})
            y = apply_rule(rule, meas)
            if split == "train" and missing_rng.random() < spec.missing_prob:
                targets[rule.label] = None
            else:
                targets[rule.label] = y
        samples.append(
            PhantomSample(
                sample_id=f"{_SPLIT_PREFIX[split]}_{i:04d}",
                split=split,
                volume=volume,
                masks=masks,
                priors=priors,
                targets=targets,
                measurements=meas,
                organ_masks=organ_masks,
                feature_origins=origins,
            )
        )
    return samples


def corrupt_priors(samples: list[PhantomSample], p_percent: float, seed: int) -> list[PhantomSample]:
    """Multiplicative uniform noise v*(1+u), u ~ U(-p/100, p/100), per raw feature.

    Inference-time corruption: volumes, masks, and labels are shared with the
    input samples, only the prior vectors are replaced.
    """
    if p_percent < 0:
        raise ValueError("corruption percentage must be >= 0")
    out = []
    for idx, sample in enumerate(samples):
        if p_percent == 0:
            out.append(sample)
            continue
        rng = derived_rng(seed, "corrupt", idx)
        new_priors = {}
        for label in sorted(sample.priors):
            pv = sample.priors[label]
            u = rng.uniform(-p_percent / 100.0, p_percent / 100.0, size=pv.values.shape)
            new_priors[label] = PriorVector(label=pv.label, values=pv.values * (1.0 + u), features=pv.features)
        out.append(
            PhantomSample(
                sample_id=sample.sample_id,
                split=sample.split,
                volume=sample.volume,
                masks=sample.masks,
                priors=new_priors,
                targets=sample.targets,
                measurements=sample.measurements,
                organ_masks=sample.organ_masks,
                feature_origins=sample.feature_origins,
            )
        )
    return out


@dataclass
class AugmentParams:
    rotation_deg: float
    scale: float
    gamma: float
    noise_hu: float


def draw_augment_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        rotation_deg=float(rng.uniform(-10.0, 10.0)),
        scale=float(rng.uniform(0.9, 1.1)),
        gamma=float(rng.uniform(0.8, 1.25)),
        noise_hu=float(rng.uniform(0.0, 20.0)),
    )


def apply_augment(sample: PhantomSample, params: AugmentParams, rng: np.random.Generator | None = None) -> PhantomSample:
    """In-plane rotation + isotropic scale, gamma jitter, additive noise.

    Masks follow the same affine with nearest-neighbor sampling; geometric
    prior features (mm / mL) are recomputed from the transformed organ masks.
    """
    out = copy.deepcopy(sample)
    data = out.volume.data
    identity_affine = params.rotation_deg == 0.0 and params.scale == 1.0
    if not identity_affine:
        theta = np.deg2rad(params.rotation_deg)
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]) / params.scale
        center = (np.array(data.shape) - 1) / 2.0
        offset = center - rot @ center
        data = affine_transform(data, rot, offset=offset, order=1, mode="constant", cval=-1000.0)
        for label, m in out.masks.items():
            warped = affine_transform(m.mask, rot, offset=offset, order=0, mode="constant", cval=0)
            out.masks[label] = RoiMask(m.label, warped, m.dilation_radius_mm, m.source)
        for name, m in out.organ_masks.items():
            out.organ_masks[name] = affine_transform(m, rot, offset=offset, order=0, mode="constant", cval=0)
    if params.gamma != 1.0:
        unit = np.clip((data + 1000.0) / 2000.0, 0.0, 1.0)
        data = np.power(unit, params.gamma) * 2000.0 - 1000.0
    if params.noise_hu > 0:
        noise_rng = rng if rng is not None else np.random.default_rng(0)
        data = data + noise_rng.normal(0.0, params.noise_hu, size=data.shape)
    out.volume = Volume(data, out.volume.spacing)
    if not identity_affine:
        _recompute_geometric_priors(out)
    return out


def augment(sample: PhantomSample, seed: int) -> PhantomSample:
    rng = derived_rng(seed, "augment", sample.sample_id)
    return apply_augment(sample, draw_augment_params(rng), rng)


def _recompute_geometric_priors(sample: PhantomSample) -> None:
    voxel_ml = float(np.prod(sample.volume.spacing)) / 1000.0
    for label, pv in sample.priors.items():
        values = pv.values.copy()
        for i, feature in enumerate(pv.features):
            origin = sample.feature_origins.get(feature)
            if origin is None:
                continue
            organ_name, qty = _split_measurement(origin)
            if qty not in ("radius_mm", "volume_ml"):
                continue
            mask = sample.organ_masks.get(organ_name)
            if mask is None:
                continue
            volume_ml = float(mask.sum()) * voxel_ml
            if qty == "volume_ml":
                values[i] = volume_ml
            else:
                values[i] = float((3.0 * volume_ml * 1000.0 / (4.0 * np.pi)) ** (1.0 / 3.0))
        sample.priors[label] = PriorVector(label=pv.label, values=values, features=pv.features)


# -- dataset persistence ------------------------------------------------------


def write_dataset(out_dir: str, spec: PhantomSpec, samples_by_split: dict[str, list[PhantomSample]]) -> None:
    import os

    os.makedirs(os.path.join(out_dir, "volumes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    prior_rows = []
    targets: dict[str, dict[str, int | None]] = {}
    splits: dict[str, list[str]] = {}
    for split in sorted(samples_by_split):
        ids = []
        for sample in samples_by_split[split]:
            sid = sample.sample_id
            ids.append(sid)
            io.write_array(
                os.path.join(out_dir, "volumes", sid),
                sample.volume.data,
                meta={"spacing": list(sample.volume.spacing)},
            )
            for label in sorted(sample.masks):
                roi.save_mask(os.path.join(out_dir, "masks", f"{sid}__{label}"), sample.masks[label])
            for label in sorted(sample.priors):
                pv = sample.priors[label]
                for feature, value in zip(pv.features, pv.values):
                    prior_rows.append((sid, label, feature, float(value)))
            targets[sid] = dict(sample.targets)
        splits[split] = ids
    io.write_csv(os.path.join(out_dir, "priors.csv"), ["sample_id", "label", "feature", "value"], prior_rows)
    manifest = {
        "schema_version": 1,
        "seed": spec.seed,
        "grid": list(spec.grid),
        "spacing": list(spec.spacing),
        "labels": spec.labels(),
        "families": spec.families(),
        "rules": [
            {"label": r.label, "dilation_mm": r.dilation_mm, "roi_mode": r.roi_mode}
            for r in spec.rules
        ],
        "splits": splits,
        "targets": targets,
        "shift": asdict(spec.shift),
        "missing_prob": spec.missing_prob,
    }
    io.dump_json(manifest, os.path.join(out_dir, "manifest.json"))


def load_dataset(data_dir: str, split: str) -> list[PhantomSample]:
    import os

    from .gating import load_priors_csv

    manifest = io.load_json(os.path.join(data_dir, "manifest.json"))
    if split not in manifest["splits"]:
        raise io.DataError(f"split {split!r} not present in {data_dir}")
    by_sample = load_priors_csv(os.path.join(data_dir, "priors.csv"))
    samples = []
    for sid in manifest["splits"][split]:
        data, sidecar = io.read_array(os.path.join(data_dir, "volumes", sid))
        volume = Volume(data, tuple(sidecar["spacing"]))
        masks = {}
        priors = {}
        for label in manifest["labels"]:
            masks[label] = roi.load_mask(os.path.join(data_dir, "masks", f"{sid}__{label}"))
            priors[label] = by_sample[sid][label]
        raw_targets = manifest["targets"][sid]
        targets = {k: (None if v is None else int(v)) for k, v in raw_targets.items()}
        samples.append(
            PhantomSample(
                sample_id=sid,
                split=split,
                volume=volume,
                masks=masks,
                priors=priors,
                targets=targets,
            )
        )
    return samples
