"""Operator surface: generate phantoms, train arms, evaluate, sweep, analyze.

Verbs: generate, train, evaluate, corrupt-sweep, gate-analysis. A single JSON
config drives every stage; the schema is versioned and unknown keys are
rejected so typos fail fast. All randomness flows from one root seed with
labeled derivations, and every command writes byte-identical outputs when
rerun with the same config and seed.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Plots are not rendered; the outputs are plot-ready CSVs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io, metrics, model as mdl, phantom, pipeline
from .autodiff import NumericError
from .io import DataError
from .model import ModelConfig, TrainConfig
from .phantom import (
    LabelRule,
    OrganBlueprint,
    PhantomSpec,
    ShiftParams,
    SpecError,
)
from .pipeline import PipelineConfig
from .seeding import derived_rng

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """The experiment config is malformed or inconsistent."""


def _take(d: dict, allowed: set[str], context: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")


# -- config (de)serialization --------------------------------------------------


def phantom_spec_to_dict(spec: PhantomSpec) -> dict:
    return {
        "grid": list(spec.grid),
        "spacing": list(spec.spacing),
        "organs": [
            {
                "name": o.name,
                "center_frac": list(o.center_frac),
                "center_jitter_mm": o.center_jitter_mm,
                "radius_range_mm": list(o.radius_range_mm),
                "aniso_jitter": o.aniso_jitter,
                "hu_range": list(o.hu_range),
                "presence_prob": o.presence_prob,
                "inside": o.inside,
                "hu_from": o.hu_from,
            }
            for o in spec.organs
        ],
        "rules": [
            {
                "label": r.label,
                "family": r.family,
                "measurement": r.measurement,
                "op": r.op,
                "cutoff": r.cutoff,
                "roi_organs": list(r.roi_organs),
                "roi_mode": r.roi_mode,
                "dilation_mm": r.dilation_mm,
                "priors": [[f, m] for f, m in r.priors],
            }
            for r in spec.rules
        ],
        "missing_prob": spec.missing_prob,
        "shift": {
            "hu_offset": spec.shift.hu_offset,
            "blur_mm": spec.shift.blur_mm,
            "noise_hu": spec.shift.noise_hu,
            "hu_offset_jitter": spec.shift.hu_offset_jitter,
            "blur_jitter_mm": spec.shift.blur_jitter_mm,
            "gain_jitter": spec.shift.gain_jitter,
        },
        "background_hu": spec.background_hu,
        "texture_noise_hu": spec.texture_noise_hu,
    }


def phantom_spec_from_dict(d: dict, seed: int) -> PhantomSpec:
    _take(
        d,
        {"grid", "spacing", "organs", "rules", "missing_prob", "shift", "background_hu", "texture_noise_hu"},
        "phantom",
    )
    organs = []
    for o in d["organs"]:
        _take(
            o,
            {"name", "center_frac", "center_jitter_mm", "radius_range_mm", "aniso_jitter",
             "hu_range", "presence_prob", "inside", "hu_from"},
            f"phantom.organs[{o.get('name', '?')}]",
        )
        organs.append(
            OrganBlueprint(
                name=o["name"],
                center_frac=tuple(o["center_frac"]),
                center_jitter_mm=float(o["center_jitter_mm"]),
                radius_range_mm=tuple(o["radius_range_mm"]),
                aniso_jitter=float(o["aniso_jitter"]),
                hu_range=tuple(o["hu_range"]),
                presence_prob=float(o.get("presence_prob", 1.0)),
                inside=o.get("inside"),
                hu_from=o.get("hu_from"),
            )
        )
    rules = []
    for r in d["rules"]:
        _take(
            r,
            {"label", "family", "measurement", "op", "cutoff", "roi_organs", "roi_mode", "dilation_mm", "priors"},
            f"phantom.rules[{r.get('label', '?')}]",
        )
        rules.append(
            LabelRule(
                label=r["label"],
                family=r["family"],
                measurement=r["measurement"],
                op=r["op"],
                cutoff=float(r["cutoff"]),
                roi_organs=tuple(r["roi_organs"]),
                roi_mode=r["roi_mode"],
                dilation_mm=float(r["dilation_mm"]),
                priors=tuple((f, m) for f, m in r["priors"]),
            )
        )
    shift = d["shift"]
    _take(shift, {"hu_offset", "blur_mm", "noise_hu", "hu_offset_jitter", "blur_jitter_mm", "gain_jitter"}, "phantom.shift")
    return PhantomSpec(
        grid=tuple(d["grid"]),
        spacing=tuple(d["spacing"]),
        organs=tuple(organs),
        rules=tuple(rules),
        missing_prob=float(d["missing_prob"]),
        shift=ShiftParams(**{k: float(v) for k, v in shift.items()}),
        seed=seed,
        background_hu=float(d["background_hu"]),
        texture_noise_hu=float(d["texture_noise_hu"]),
    )


class ExperimentConfig:
    """Parsed experiment configuration; see default_config_dict() for the schema."""

    def __init__(
        self,
        seed: int,
        dataset_dir: str,
        output_dir: str,
        phantom_dict: dict,
        counts: dict[str, int],
        pipe: PipelineConfig,
        embed_dim: int,
        attention_block: bool,
        concat_width: int,
        train_base: dict,
        arms: list[str],
        arm_overrides: dict[str, dict],
        bins: int,
        resamples: int,
        corruption_levels: list[float],
        gate_feature: str,
    ):
        self.seed = seed
        self.dataset_dir = dataset_dir
        self.output_dir = output_dir
        self.phantom_dict = phantom_dict
        self.counts = counts
        self.pipe = pipe
        self.embed_dim = embed_dim
        self.attention_block = attention_block
        self.concat_width = concat_width
        self.train_base = train_base
        self.arms = arms
        self.arm_overrides = arm_overrides
        self.bins = bins
        self.resamples = resamples
        self.corruption_levels = corruption_levels
        self.gate_feature = gate_feature

    def spec(self) -> PhantomSpec:
        return phantom_spec_from_dict(self.phantom_dict, self.seed)

    def train_config(self, arm: str) -> TrainConfig:
        if arm not in self.arms:
            raise ConfigError(f"arm {arm!r} not configured; arms: {self.arms}")
        merged = dict(self.train_base)
        merged.update(self.arm_overrides.get(arm, {}))
        return TrainConfig(
            epochs=int(merged["epochs"]),
            batch_size=int(merged["batch_size"]),
            lr=float(merged["lr"]),
            seed=self.seed,
            mode=arm,
            stride=self.pipe.stride,
            clip_norm=float(merged.get("clip_norm", 0.5)),
        )

    def model_config(self, spec: PhantomSpec) -> ModelConfig:
        return ModelConfig(
            labels=spec.labels(),
            feature_counts={r.label: len(r.priors) for r in spec.rules},
            embed_dim=self.embed_dim,
            patch_size=self.pipe.patch_size,
            input_size=self.pipe.input_size,
            attention_block=self.attention_block,
            concat_width=self.concat_width,
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "paths": {"dataset_dir": self.dataset_dir, "output_dir": self.output_dir},
            "phantom": self.phantom_dict,
            "counts": dict(self.counts),
            "pipeline": {
                "target_spacing": list(self.pipe.target_spacing),
                "target_grid": list(self.pipe.target_grid),
                "input_size": list(self.pipe.input_size),
                "patch_size": self.pipe.patch_size,
                "stride": self.pipe.stride,
            },
            "model": {
                "embed_dim": self.embed_dim,
                "attention_block": self.attention_block,
                "concat_width": self.concat_width,
            },
            "train": dict(self.train_base, arms={a: dict(self.arm_overrides.get(a, {})) for a in self.arms}),
            "metrics": {"bins": self.bins, "resamples": self.resamples},
            "corruption_levels": list(self.corruption_levels),
            "gate_feature": self.gate_feature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _take(
            d,
            {"schema_version", "seed", "paths", "phantom", "counts", "pipeline", "model",
             "train", "metrics", "corruption_levels", "gate_feature"},
            "config",
        )
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {d.get('schema_version')!r}")
        paths = d["paths"]
        _take(paths, {"dataset_dir", "output_dir"}, "paths")
        counts = d["counts"]
        _take(counts, set(phantom.SPLITS), "counts")
        pipe_d = d["pipeline"]
        _take(pipe_d, {"target_spacing", "target_grid", "input_size", "patch_size", "stride"}, "pipeline")
        pipe = PipelineConfig(
            target_spacing=tuple(pipe_d["target_spacing"]),
            target_grid=tuple(pipe_d["target_grid"]),
            input_size=tuple(pipe_d["input_size"]),
            patch_size=int(pipe_d["patch_size"]),
            stride=int(pipe_d["stride"]),
        )
        model_d = d["model"]
        _take(model_d, {"embed_dim", "attention_block", "concat_width"}, "model")
        train_d = dict(d["train"])
        _take(train_d, {"epochs", "batch_size", "lr", "clip_norm", "arms"}, "train")
        arms_d = train_d.pop("arms")
        if not isinstance(arms_d, dict) or not arms_d:
            raise ConfigError("train.arms must map arm ids to override dicts")
        arms = list(arms_d)
        if len(set(arms)) != len(arms):
            raise ConfigError("train.arms ids must be distinct")
        for arm, overrides in arms_d.items():
            if arm not in mdl.MODES:
                raise ConfigError(f"unknown arm {arm!r}; expected one of {mdl.MODES}")
            _take(overrides, {"epochs", "batch_size", "lr", "clip_norm"}, f"train.arms[{arm}]")
        metrics_d = d["metrics"]
        _take(metrics_d, {"bins", "resamples"}, "metrics")
        return cls(
            seed=int(d["seed"]),
            dataset_dir=paths["dataset_dir"],
            output_dir=paths["output_dir"],
            phantom_dict=d["phantom"],
            counts={k: int(v) for k, v in counts.items()},
            pipe=pipe,
            embed_dim=int(model_d["embed_dim"]),
            attention_block=bool(model_d["attention_block"]),
            concat_width=int(model_d["concat_width"]),
            train_base=train_d,
            arms=arms,
            arm_overrides={a: dict(v) for a, v in arms_d.items()},
            bins=int(metrics_d["bins"]),
            resamples=int(metrics_d["resamples"]),
            corruption_levels=[float(x) for x in d["corruption_levels"]],
            gate_feature=d["gate_feature"],
        )


def default_config_dict(dataset_dir: str = "dataset", output_dir: str = "runs", seed: int = 0) -> dict:
    spec = phantom.default_spec(seed=seed)
    cfg = ExperimentConfig(
        seed=seed,
        dataset_dir=dataset_dir,
        output_dir=output_dir,
        phantom_dict=phantom_spec_to_dict(spec),
        counts={"train": 200, "val": 100, "test-internal": 200, "test-external": 200},
        pipe=PipelineConfig(),
        embed_dim=32,
        attention_block=True,
        concat_width=16,
        train_base={"epochs": 20, "batch_size": 8, "lr": 0.3, "clip_norm": 0.5},
        arms=["gated", "concat", "none"],
        arm_overrides={"gated": {}, "concat": {}, "none": {}},
        bins=10,
        resamples=1000,
        corruption_levels=[10.0, 20.0, 50.0],
        gate_feature="geo_radius_mm",
    )
    return cfg.to_dict()


def load_config(path: str, seed_override: int | None = None) -> ExperimentConfig:
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    cfg = ExperimentConfig.from_dict(raw)
    if seed_override is not None:
        cfg.seed = int(seed_override)
    return cfg


# -- shared command plumbing ----------------------------------------------------


def _load_split(cfg: ExperimentConfig, split: str) -> list[pipeline.ModelSample]:
    samples = phantom.load_dataset(cfg.dataset_dir, split)
    return pipeline.preprocess_dataset(samples, cfg.pipe)


def _checkpoint_base(cfg: ExperimentConfig, arm: str) -> str:
    return os.path.join(cfg.output_dir, arm, "checkpoint")


def _load_arm(cfg: ExperimentConfig, arm: str) -> mdl.ModelParams:
    base = _checkpoint_base(cfg, arm)
    if not os.path.exists(base + ".json"):
        raise DataError(f"no checkpoint for arm {arm!r} at {base}.json; run train first")
    return mdl.load_model(base)


def _families(cfg: ExperimentConfig) -> dict[str, str]:
    manifest = io.load_json(os.path.join(cfg.dataset_dir, "manifest.json"))
    return manifest["families"]


# -- commands --------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig) -> int:
    spec = cfg.spec()
    by_split = {}
    for split in phantom.SPLITS:
        n = cfg.counts.get(split, 0)
        by_split[split] = phantom.generate(spec, n, split)
    os.makedirs(cfg.dataset_dir, exist_ok=True)
    phantom.write_dataset(cfg.dataset_dir, spec, by_split)
    for split in phantom.SPLITS:
        print(f"{split}: {len(by_split[split])}")
    return 0


def cmd_train(cfg: ExperimentConfig, arm: str) -> int:
    spec = cfg.spec()
    train_cfg = cfg.train_config(arm)
    model_cfg = cfg.model_config(spec)
    train_samples = _load_split(cfg, "train")
    val_samples = _load_split(cfg, "val")
    params, log_rows = mdl.train(train_samples, val_samples, model_cfg, train_cfg)
    arm_dir = os.path.join(cfg.output_dir, arm)
    os.makedirs(arm_dir, exist_ok=True)
    mdl.save_model(_checkpoint_base(cfg, arm), params)
    io.write_jsonl(os.path.join(arm_dir, "train_log.jsonl"), log_rows)
    print(f"trained arm {arm}: {len(log_rows)} epochs, final loss {log_rows[-1]['loss']:.6f}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, arms: list[str], split: str) -> int:
    samples = _load_split(cfg, split)
    os.makedirs(cfg.output_dir, exist_ok=True)
    boot_seed = int(derived_rng(cfg.seed, "bootstrap").integers(0, 2**31 - 1))
    psets: dict[str, metrics.PredictionSet] = {}
    for arm in arms:
        params = _load_arm(cfg, arm)
        pset = mdl.predict(params, samples, model_id=arm)
        pset.to_csv(os.path.join(cfg.output_dir, f"predictions_{arm}_{split}.csv"))
        report = metrics.evaluate_predictions(pset, n_resamples=cfg.resamples, bins=cfg.bins, seed=boot_seed)
        report.write(os.path.join(cfg.output_dir, f"metrics_{arm}_{split}"))
        psets[arm] = pset
        print(f"{arm} {split}: macro AUROC {report.macro['auroc'][0]:.4f}")
    if "none" in psets and "gated" in psets:
        veto = metrics.tsr_and_selectivity(psets["none"], psets["gated"])
        rows = []
        for label in sorted(veto.per_label_pvr):
            rows.append(
                (
                    label,
                    veto.per_label_pvr[label],
                    veto.per_label_counts[label],
                    veto.per_label_tsr.get(label),
                    veto.per_label_selectivity.get(label),
                )
            )
        io.write_csv(
            os.path.join(cfg.output_dir, f"veto_{split}.csv"),
            ["label", "pvr", "n_qualifying", "tsr", "selectivity"],
            rows,
        )
        io.dump_json(
            {
                "macro_pvr": veto.macro_pvr,
                "macro_tsr": veto.macro_tsr,
                "macro_selectivity": (
                    None
                    if veto.macro_selectivity is None
                    else ("inf" if veto.macro_selectivity == float("inf") else veto.macro_selectivity)
                ),
            },
            os.path.join(cfg.output_dir, f"veto_{split}_macro.json"),
        )
    families = _families(cfg)
    family_names = sorted(set(families.values()))
    rows = []
    for family in family_names:
        labels = [l for l, f in families.items() if f == family]
        row = [family]
        for arm in arms:
            values = []
            for label in labels:
                y, p = psets[arm].column(label)
                try:
                    values.append(metrics.auroc(p, y))
                except metrics.SingleClassError:
                    pass
            row.append(float(np.mean(values)) if values else None)
        rows.append(tuple(row))
    io.write_csv(
        os.path.join(cfg.output_dir, f"stratified_{split}.csv"),
        ["family"] + [f"auroc_{arm}" for arm in arms],
        rows,
    )
    return 0


def cmd_corruption_sweep(cfg: ExperimentConfig, arms: list[str], split: str) -> int:
    raw_samples = phantom.load_dataset(cfg.dataset_dir, split)
    base_samples = pipeline.preprocess_dataset(raw_samples, cfg.pipe)
    levels = [0.0] + [lv for lv in cfg.corruption_levels if lv != 0.0]
    rows = []
    for arm in arms:
        params = _load_arm(cfg, arm)
        for level in levels:
            corrupt_seed = int(derived_rng(cfg.seed, "corruption", int(level)).integers(0, 2**31 - 1))
            corrupted = phantom.corrupt_priors(raw_samples, level, corrupt_seed)
            swapped = [
                pipeline.with_priors(ms, c.priors) for ms, c in zip(base_samples, corrupted)
            ]
            pset = mdl.predict(params, swapped, model_id=arm)
            rows.append((arm, level, metrics.macro_auroc(pset)))
            print(f"{arm} level {level:g}%: macro AUROC {rows[-1][2]:.4f}")
    os.makedirs(cfg.output_dir, exist_ok=True)
    io.write_csv(
        os.path.join(cfg.output_dir, f"corruption_sweep_{split}.csv"),
        ["arm", "level", "macro_auroc"],
        rows,
    )
    return 0


def cmd_gate_analysis(cfg: ExperimentConfig, feature: str, split: str) -> int:
    spec = cfg.spec()
    label = None
    for rule in spec.rules:
        if feature in {f for f, _ in rule.priors}:
            label = rule.label
    if label is None:
        raise ConfigError(f"unknown prior feature {feature!r}")
    params = _load_arm(cfg, "gated")
    raw_samples = phantom.load_dataset(cfg.dataset_dir, split)
    samples = pipeline.preprocess_dataset(raw_samples, cfg.pipe)
    rows = []
    for sample in samples:
        pv = sample.priors[label]
        value = float(pv.values[list(pv.features).index(feature)])
        mean_g = mdl.mean_gates(params, sample)[label]
        rows.append((sample.sample_id, label, sample.targets.get(label), value, mean_g))
    os.makedirs(cfg.output_dir, exist_ok=True)
    io.write_csv(
        os.path.join(cfg.output_dir, f"gate_analysis_{feature}_{split}.csv"),
        ["sample_id", "label", "y", "feature_value", "mean_gate"],
        rows,
    )
    print(f"gate analysis: {len(rows)} rows for feature {feature}")
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="priorgate",
        description="Phantom benchmark for prior-gated CT triage models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--out", default=None, help="override the output directory")

    p = sub.add_parser("generate", help="write the phantom dataset")
    common(p)

    p = sub.add_parser("train", help="train one fusion arm")
    common(p)
    p.add_argument("--arm", required=True, choices=mdl.MODES)

    p = sub.add_parser("evaluate", help="metrics, CIs, veto report, stratified table")
    common(p)
    p.add_argument("--arms", default=None, help="comma-separated arm list (default: all configured)")
    p.add_argument("--split", default="test-external")

    p = sub.add_parser("corrupt-sweep", help="macro AUROC under prior corruption levels")
    common(p)
    p.add_argument("--arms", default=None)
    p.add_argument("--split", default="test-external")

    p = sub.add_parser("gate-analysis", help="per-sample mean gate vs a raw prior feature")
    common(p)
    p.add_argument("--feature", default=None, help="raw prior feature name (default from config)")
    p.add_argument("--split", default="test-external")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        if args.out is not None:
            cfg.output_dir = args.out
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.arm)
        arms = args.arms.split(",") if getattr(args, "arms", None) else list(cfg.arms)
        for arm in arms:
            if arm not in mdl.MODES:
                raise ConfigError(f"unknown arm {arm!r}")
        if args.command == "evaluate":
            return cmd_evaluate(cfg, arms, args.split)
        if args.command == "corrupt-sweep":
            return cmd_corruption_sweep(cfg, arms, args.split)
        if args.command == "gate-analysis":
            return cmd_gate_analysis(cfg, args.feature or cfg.gate_feature, args.split)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, SpecError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
