"""ROI-masked attention pooling of token embeddings into a label-specific vector.

Per tri-slice, a linear scorer plus temperature produces attention logits;
a softmax restricted to in-ROI tokens yields weights that sum to one per
slice, and the pooled vector is the slice-mean of the weighted token sums.

Fallbacks for degenerate masks: if every slice has an empty ROI, weights are
uniform over all T*N tokens (the pooled vector is the exact global token
mean); if only some slices are empty, those slices contribute the zero
vector while the outer average still counts all T slices.

The in-ROI logit bias is kept as a parameter, but the softmax support is
exactly the ROI, so the bias shifts every supported logit equally; after
per-slice centering its contribution is identically zero. It therefore
never enters the numeric path and its gradient is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import io
from .autodiff import Tensor
from .roi import TokenMask


@dataclass
class PoolParams:
    scorer_w: Tensor  # (d, 1) linear scorer
    inside_bias: Tensor  # scalar logit bias for ROI tokens
    log_temp: Tensor  # scalar; temperature tau = exp(log_temp) > 0

    def named_tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.scorer_w", self.scorer_w),
            (f"{prefix}.inside_bias", self.inside_bias),
            (f"{prefix}.log_temp", self.log_temp),
        ]

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temp.data))


def init_pool_params(embed_dim: int, rng: np.random.Generator) -> PoolParams:
    bound = 1.0 / np.sqrt(embed_dim)
    return PoolParams(
        scorer_w=Tensor(rng.uniform(-bound, bound, size=(embed_dim, 1)), requires_grad=True),
        inside_bias=Tensor(0.0, requires_grad=True),
        log_temp=Tensor(0.0, requires_grad=True),
    )


def _pool_graph(tokens: Tensor, token_mask: TokenMask, params: PoolParams):
    t_count, n_count, d = tokens.data.shape
    mask = token_mask.values
    if mask.shape != (t_count, n_count):
        raise ad.DimensionError(
            f"token mask {mask.shape} does not match tokens {(t_count, n_count)}"
        )
    nonempty = mask.any(axis=1)

    if not nonempty.any():
        z = ad.mean(ad.reshape(tokens, (t_count * n_count, d)), axis=0)
        weights = np.full((t_count, n_count), 1.0 / n_count)
        return z, weights

    inv_temp = ad.exp(ad.mul(params.log_temp, -1.0))
    scores = ad.reshape(
        ad.matmul(ad.reshape(tokens, (t_count * n_count, d)), params.scorer_w),
        (t_count, n_count),
    )
    logits = ad.mul(scores, inv_temp)

    if nonempty.all():
        w = ad.masked_softmax(logits, mask, axis=1)
        weighted = ad.mul(tokens, ad.reshape(w, (t_count, n_count, 1)))
        z = ad.mean(ad.tsum(weighted, axis=1), axis=0)
        return z, w.data

    sub_logits = ad.gather_by_mask(logits, nonempty)
    sub_mask = mask[nonempty]
    w_sub = ad.masked_softmax(sub_logits, sub_mask, axis=1)
    sub_tokens = ad.gather_by_mask(tokens, nonempty)
    weighted = ad.mul(sub_tokens, ad.reshape(w_sub, (int(nonempty.sum()), n_count, 1)))
    z = ad.mul(ad.tsum(ad.tsum(weighted, axis=1), axis=0), 1.0 / t_count)
    weights = np.zeros((t_count, n_count))
    weights[nonempty] = w_sub.data
    return z, weights


def pool(tokens: Tensor, token_mask: TokenMask, params: PoolParams) -> Tensor:
    """Pool (T, N, d) tokens into the label-specific d-vector."""
    z, _ = _pool_graph(tokens, token_mask, params)
    return z


def attention_map(tokens: Tensor, token_mask: TokenMask, params: PoolParams) -> np.ndarray:
    """The (T, N) weights pool uses; zero outside the ROI (uniform on full fallback)."""
    _, weights = _pool_graph(tokens, token_mask, params)
    return weights


def attention_rows(weights: np.ndarray) -> list[tuple[int, int, float]]:
    """Flatten an attention map to (slice, token, weight) rows for CSV export."""
    t_count, n_count = weights.shape
    return [
        (t, i, float(weights[t, i]))
        for t in range(t_count)
        for i in range(n_count)
    ]


def write_attention_csv(path: str, weights: np.ndarray) -> None:
    """Persist one sample/label attention map as (t, i, weight) rows."""
    io.write_csv(path, ["t", "i", "weight"], attention_rows(weights))
