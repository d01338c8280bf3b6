"""End-to-end model: fusion modes, curriculum-weighted loss, training loop.

Three fusion arms share the encoder/pooling trunk and differ only in how the
per-label prior vector enters the head:

  gated   p = sigmoid(w . (z_v * g) + b), g = sigmoid(W s + b_g)
  concat  p = sigmoid(w . [z_v ; proj(s)] + b), proj a learned K -> 16 map
  none    p = sigmoid(w . z_v + b), priors ignored entirely

Missing labels contribute weak-negative BCE terms whose weight ramps in over
epochs; fully observed batches reduce exactly to mean BCE at any epoch.

Training is plain SGD with momentum 0.9 and cosine-decayed learning rate,
single-threaded, with all randomness derived from the configured seed; two
runs of the same configuration produce bitwise-identical logs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import gating, io, pooling
from .autodiff import NumericError, Tensor
from .gating import GateParams, PriorNormalizer
from .metrics import PredictionSet, macro_auroc
from .pipeline import ModelSample
from .pooling import PoolParams
from .seeding import derived_rng

logger = logging.getLogger(__name__)

MODES = ("gated", "concat", "none")
PROB_CLAMP = 1e-7


class TrainingDivergedError(NumericError):
    """The training loss became non-finite."""


@dataclass
class CurriculumSchedule:
    w_max: float = 0.3
    e_ignore: int = 10
    e_ramp: int = 10

    def weight(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        if epoch <= self.e_ignore:
            return 0.0
        if epoch >= self.e_ignore + self.e_ramp:
            return self.w_max
        return self.w_max * (epoch - self.e_ignore) / self.e_ramp


def curriculum_weight(epoch: int) -> float:
    return CurriculumSchedule().weight(epoch)


@dataclass
class ModelConfig:
    labels: list[str]
    feature_counts: dict[str, int]
    embed_dim: int = 32
    patch_size: int = 8
    input_size: tuple[int, int] = (64, 64)
    attention_block: bool = True
    concat_width: int = 16

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "feature_counts": dict(self.feature_counts),
            "embed_dim": self.embed_dim,
            "patch_size": self.patch_size,
            "input_size": list(self.input_size),
            "attention_block": self.attention_block,
            "concat_width": self.concat_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            labels=list(d["labels"]),
            feature_counts={k: int(v) for k, v in d["feature_counts"].items()},
            embed_dim=int(d["embed_dim"]),
            patch_size=int(d["patch_size"]),
            input_size=tuple(d["input_size"]),
            attention_block=bool(d["attention_block"]),
            concat_width=int(d["concat_width"]),
        )


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.3
    seed: int = 0
    mode: str = "gated"
    stride: int = 4
    clip_norm: float = 0.5  # global gradient-norm ceiling; 0 disables

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.stride < 1:
            raise ValueError("hyperparameters must be positive")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"fusion mode {self.mode!r} not one of {MODES}")


@dataclass
class HeadParams:
    w: Tensor
    b: Tensor

    def named_tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


@dataclass
class ProjParams:
    w: Tensor  # (concat_width, K)
    b: Tensor  # (concat_width,)

    def named_tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


@dataclass
class ModelParams:
    mode: str
    config: ModelConfig
    encoder: enc.EncoderParams
    pools: dict[str, PoolParams]
    gates: dict[str, GateParams]
    projs: dict[str, ProjParams]
    heads: dict[str, HeadParams]
    normalizer: PriorNormalizer

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = list(self.encoder.named_tensors())
        for label in self.config.labels:
            out.extend(self.pools[label].named_tensors(f"pool.{label}"))
            if self.mode == "gated":
                out.extend(self.gates[label].named_tensors(f"gate.{label}"))
            if self.mode == "concat":
                out.extend(self.projs[label].named_tensors(f"proj.{label}"))
            out.extend(self.heads[label].named_tensors(f"head.{label}"))
        return out


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_model_params(
    config: ModelConfig, mode: str, normalizer: PriorNormalizer, rng: np.random.Generator
) -> ModelParams:
    if mode not in MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    d = config.embed_dim
    encoder_params = enc.init_encoder_params(config.patch_size, d, config.attention_block, rng)
    pools, gates, projs, heads = {}, {}, {}, {}
    for label in config.labels:
        k = config.feature_counts[label]
        pools[label] = pooling.init_pool_params(d, rng)
        if mode == "gated":
            gates[label] = gating.init_gate_params(d, k, rng)
        if mode == "concat":
            projs[label] = ProjParams(
                w=_uniform(rng, (config.concat_width, k), k),
                b=Tensor(np.zeros(config.concat_width), requires_grad=True),
            )
        head_dim = d + (config.concat_width if mode == "concat" else 0)
        heads[label] = HeadParams(
            w=_uniform(rng, (head_dim,), head_dim),
            b=Tensor(0.0, requires_grad=True),
        )
    return ModelParams(
        mode=mode,
        config=config,
        encoder=encoder_params,
        pools=pools,
        gates=gates,
        projs=projs,
        heads=heads,
        normalizer=normalizer,
    )


def forward(params: ModelParams, sample: ModelSample) -> dict[str, Tensor]:
    """Per-label probabilities for one sample (scalar tensors in (0, 1))."""
    tokens = enc.encode(sample.tri, params.encoder)
    out: dict[str, Tensor] = {}
    for label in params.config.labels:
        z_v = pooling.pool(tokens, sample.token_masks[label], params.pools[label])
        if params.mode == "gated":
            s_norm = params.normalizer.normalize(sample.priors[label])
            g = gating.gate(s_norm, params.gates[label])
            feat = gating.modulate(z_v, g)
        elif params.mode == "concat":
            s_norm = params.normalizer.normalize(sample.priors[label])
            proj = params.projs[label]
            k = s_norm.shape[0]
            s_proj = ad.add(
                ad.reshape(ad.matmul(proj.w, Tensor(s_norm.reshape(k, 1))), (params.config.concat_width,)),
                proj.b,
            )
            feat = ad.concat([z_v, s_proj])
        else:
            feat = z_v
        head = params.heads[label]
        logit = ad.add(ad.dot(head.w, feat), head.b)
        out[label] = ad.sigmoid(logit)
    return out


def mean_gates(params: ModelParams, sample: ModelSample) -> dict[str, float]:
    """Per-label mean gate openness for one sample (gated mode only)."""
    if params.mode != "gated":
        raise ValueError("mean gates are defined for the gated fusion mode")
    out = {}
    for label in params.config.labels:
        s_norm = params.normalizer.normalize(sample.priors[label])
        g = gating.gate(s_norm, params.gates[label])
        out[label] = gating.mean_gate(g)
    return out


def _bce(p: Tensor, y: int) -> Tensor:
    if y == 1:
        return ad.mul(ad.log(p), -1.0)
    return ad.mul(ad.log(ad.sub(1.0, p)), -1.0)


def loss(
    probs: dict[str, Tensor],
    targets: dict[str, int | None],
    epoch: int,
    schedule: CurriculumSchedule | None = None,
) -> Tensor:
    """Curriculum-weighted BCE over partially observed labels.

    Observed labels contribute plain BCE; missing labels contribute
    weak-negative BCE scaled by the epoch's curriculum weight, and the sum is
    normalized by the total weight. With no observed labels and zero
    curriculum weight the loss is 0 (logged).
    """
    schedule = schedule or CurriculumSchedule()
    w_epoch = schedule.weight(epoch)
    total: Tensor | None = None
    denom = 0.0
    for label in sorted(probs):
        p = ad.clamp(probs[label], PROB_CLAMP, 1.0 - PROB_CLAMP)
        y = targets[label]
        if y is None:
            if w_epoch == 0.0:
                continue
            term = ad.mul(_bce(p, 0), w_epoch)
            denom += w_epoch
        else:
            term = _bce(p, int(y))
            denom += 1.0
        total = term if total is None else ad.add(total, term)
    if total is None or denom == 0.0:
        logger.warning("loss: no observed labels and zero curriculum weight; contributing 0")
        return Tensor(0.0)
    return ad.mul(total, 1.0 / denom)


def fit_normalizer_from_samples(samples: list[ModelSample]) -> PriorNormalizer:
    priors = [pv for s in samples for pv in s.priors.values()]
    return gating.fit_normalizer(priors)


def _sgd_step(named, velocities, lr, momentum=0.9, clip_norm=0.0):
    if clip_norm > 0:
        sq = 0.0
        for _, tensor in named:
            if tensor.grad is not None:
                sq += float((tensor.grad * tensor.grad).sum())
        norm = math.sqrt(sq)
        if norm > clip_norm:
            scale = clip_norm / norm
            for _, tensor in named:
                if tensor.grad is not None:
                    tensor.grad *= scale
    for name, tensor in named:
        g = tensor.grad
        if g is None:
            continue
        v = velocities[name]
        v *= momentum
        v -= lr * g
        tensor.data += v
        tensor.zero_grad()


def train(
    train_samples: list[ModelSample],
    val_samples: list[ModelSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> tuple[ModelParams, list[dict]]:
    """Train one arm; returns fitted parameters and the per-epoch log rows."""
    if not train_samples:
        raise ValueError("training set is empty")
    normalizer = fit_normalizer_from_samples(train_samples)
    rng_init = derived_rng(train_config.seed, "init", train_config.mode)
    params = init_model_params(model_config, train_config.mode, normalizer, rng_init)
    named = params.named_tensors()
    velocities = {name: np.zeros_like(t.data) for name, t in named}
    order_rng = derived_rng(train_config.seed, "order", train_config.mode)
    schedule = CurriculumSchedule()
    n = len(train_samples)
    log_rows: list[dict] = []
    for epoch in range(train_config.epochs):
        lr = train_config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / train_config.epochs))
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, train_config.batch_size):
            batch = perm[start : start + train_config.batch_size]
            scale = 1.0 / len(batch)
            batch_loss = 0.0
            for idx in batch:
                sample = train_samples[idx]
                probs = forward(params, sample)
                sample_loss = loss(probs, sample.targets, epoch, schedule)
                value = float(sample_loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, sample {sample.sample_id}; "
                        f"batch: {[train_samples[i].sample_id for i in batch]}"
                    )
                if sample_loss.requires_grad:
                    sample_loss.backward(seed=scale)
                batch_loss += value * scale
            _sgd_step(named, velocities, lr, clip_norm=train_config.clip_norm)
            epoch_loss += batch_loss * len(batch)
        epoch_loss /= n
        row = {
            "epoch": epoch,
            "loss": epoch_loss,
            "w_curriculum": schedule.weight(epoch),
            "lr": lr,
        }
        if val_samples:
            row["val_auroc"] = macro_auroc(predict(params, val_samples))
        log_rows.append(row)
    return params, log_rows


def predict(params: ModelParams, samples: list[ModelSample], model_id: str = "") -> PredictionSet:
    """Pure inference over a dataset; probabilities straight from forward()."""
    labels = params.config.labels
    y = np.full((len(samples), len(labels)), np.nan)
    p = np.zeros((len(samples), len(labels)))
    for i, sample in enumerate(samples):
        probs = forward(params, sample)
        for j, label in enumerate(labels):
            p[i, j] = float(probs[label].data)
            target = sample.targets.get(label)
            if target is not None:
                y[i, j] = float(target)
    return PredictionSet(
        sample_ids=[s.sample_id for s in samples],
        labels=list(labels),
        y=y,
        p=p,
        model_id=model_id or params.mode,
    )


def save_model(base_path: str, params: ModelParams) -> None:
    named = [(name, t.data) for name, t in params.named_tensors()]
    io.save_checkpoint(
        base_path,
        named,
        extra={
            "mode": params.mode,
            "model_config": params.config.to_dict(),
            "normalizer": params.normalizer.to_rows(),
        },
    )


def load_model(base_path: str) -> ModelParams:
    arrays, sidecar = io.load_checkpoint(base_path)
    config = ModelConfig.from_dict(sidecar["model_config"])
    normalizer = PriorNormalizer.from_rows(sidecar["normalizer"])
    params = init_model_params(config, sidecar["mode"], normalizer, np.random.default_rng(0))
    for name, tensor in params.named_tensors():
        if name not in arrays:
            raise io.DataError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != tensor.data.shape:
            raise io.DataError(
                f"checkpoint parameter {name!r} has shape {arrays[name].shape}, expected {tensor.data.shape}"
            )
        tensor.data = np.array(arrays[name], dtype=np.float64, order="C")
    return params
