"""Symbolic stream: prior normalization and the anatomical multiplicative gate.

Raw per-label prior vectors (physical units: mm, mL, HU, counts) are z-scored
with statistics fit on the training split only; those statistics are reused
verbatim for validation, test, and shifted external data. The gate maps the
normalized vector through a per-label affine layer and a sigmoid, yielding a
vector in (0,1)^d that rescales the visual embedding coordinate-wise. The
bias starts at 2.0, so each gate coordinate opens near sigmoid(2) ~ 0.88.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

STD_FLOOR = 1e-6
GATE_LOGIT_CLAMP = 30.0
GATE_BIAS_INIT = 2.0


@dataclass
class PriorVector:
    label: str
    values: np.ndarray  # (K,) raw physical values
    features: tuple[str, ...]  # names carry units, e.g. "geo_radius_mm"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.features = tuple(self.features)
        if self.values.shape != (len(self.features),):
            raise DimensionError(
                f"{len(self.features)} feature names but values shape {self.values.shape}"
            )
        if not np.isfinite(self.values).all():
            raise ValueError(f"non-finite prior values for label {self.label!r}")


class PriorNormalizer:
    """Per-feature z-scoring with training-set statistics (population std, floored)."""

    def __init__(self, stats: dict[str, tuple[float, float]]):
        self.stats = dict(stats)

    def normalize(self, pv: PriorVector) -> np.ndarray:
        out = np.empty(len(pv.features))
        for i, name in enumerate(pv.features):
            if name not in self.stats:
                raise KeyError(f"no normalization statistics for feature {name!r}")
            mean, std = self.stats[name]
            out[i] = (pv.values[i] - mean) / std
        return out

    def to_rows(self) -> list[dict]:
        return [
            {"feature": name, "mean": mean, "std": std}
            for name, (mean, std) in sorted(self.stats.items())
        ]

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "PriorNormalizer":
        return cls({r["feature"]: (float(r["mean"]), float(r["std"])) for r in rows})


def load_priors_csv(path: str) -> dict[str, dict[str, PriorVector]]:
    """Ingest a (sample_id, label, feature, value) manifest into prior vectors."""
    from . import io

    header, rows = io.read_csv(path)
    if header != ["sample_id", "label", "feature", "value"]:
        raise ValueError(f"unexpected priors manifest header: {header}")
    grouped: dict[str, dict[str, list[tuple[str, float]]]] = {}
    for sid, label, feature, value in rows:
        grouped.setdefault(sid, {}).setdefault(label, []).append((feature, float(value)))
    return {
        sid: {
            label: PriorVector(
                label=label,
                values=np.array([v for _, v in feats]),
                features=tuple(f for f, _ in feats),
            )
            for label, feats in by_label.items()
        }
        for sid, by_label in grouped.items()
    }


def fit_normalizer(training_priors: list[PriorVector]) -> PriorNormalizer:
    if not training_priors:
        raise ValueError("cannot fit a normalizer on an empty training set")
    by_feature: dict[str, list[float]] = {}
    for pv in training_priors:
        for name, value in zip(pv.features, pv.values):
            by_feature.setdefault(name, []).append(float(value))
    stats = {}
    for name, values in by_feature.items():
        arr = np.asarray(values)
        mean = float(arr.mean())
        std = float(arr.std())  # population convention (divide by n)
        stats[name] = (mean, max(std, STD_FLOOR))
    return PriorNormalizer(stats)


@dataclass
class GateParams:
    w: Tensor  # (d, K)
    b: Tensor  # (d,), initialized to 2.0 everywhere

    def named_tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


def init_gate_params(embed_dim: int, n_features: int, rng: np.random.Generator) -> GateParams:
    bound = 0.01 / np.sqrt(n_features)
    return GateParams(
        w=Tensor(rng.uniform(-bound, bound, size=(embed_dim, n_features)), requires_grad=True),
        b=Tensor(np.full(embed_dim, GATE_BIAS_INIT), requires_grad=True),
    )


def gate(s_norm: np.ndarray, params: GateParams) -> Tensor:
    """g = sigmoid(W s + b), every coordinate strictly inside (0, 1).

    Logits are clamped to +-30 so the sigmoid never saturates to an exact
    0 or 1 in float64.
    """
    s = np.asarray(s_norm, dtype=np.float64)
    d, k = params.w.data.shape
    if s.shape != (k,):
        raise DimensionError(f"prior vector shape {s.shape} does not match gate width {k}")
    logits = ad.add(ad.reshape(ad.matmul(params.w, Tensor(s.reshape(k, 1))), (d,)), params.b)
    return ad.sigmoid(ad.clamp(logits, -GATE_LOGIT_CLAMP, GATE_LOGIT_CLAMP))


def modulate(z_v: Tensor, g: Tensor) -> Tensor:
    """Hadamard product: the gated visual embedding."""
    if z_v.data.shape != g.data.shape:
        raise DimensionError(f"shapes disagree: {z_v.data.shape} vs {g.data.shape}")
    return ad.mul(z_v, g)


def mean_gate(g) -> float:
    """Arithmetic mean of the gate coordinates (scalar gate-openness summary)."""
    data = g.data if isinstance(g, Tensor) else np.asarray(g)
    return float(data.mean())
