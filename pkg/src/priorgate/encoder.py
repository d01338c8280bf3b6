"""Toy patch encoder producing per-tri-slice token embeddings on a regular grid.

Non-overlapping p x p x 3 patches are flattened (channel, row, col) and
linearly projected to the embedding width. An optional single pre-norm
self-attention + MLP block mixes the N tokens of each tri-slice
independently. There are no CLS or register tokens in this encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .volume import TriSliceBatch

_LN_EPS = 1e-5


@dataclass
class AttentionBlockParams:
    norm1_scale: Tensor
    norm1_offset: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm2_scale: Tensor
    norm2_offset: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderParams:
    patch_size: int
    embed_dim: int
    proj_w: Tensor  # (3 p^2, d)
    proj_b: Tensor  # (d,)
    attn: AttentionBlockParams | None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("encoder.proj_w", self.proj_w), ("encoder.proj_b", self.proj_b)]
        if self.attn is not None:
            for field in (
                "norm1_scale", "norm1_offset", "wq", "wk", "wv", "wo",
                "norm2_scale", "norm2_offset", "w1", "b1", "w2", "b2",
            ):
                out.append((f"encoder.attn.{field}", getattr(self.attn, field)))
        return out


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_encoder_params(
    patch_size: int, embed_dim: int, with_attention: bool, rng: np.random.Generator
) -> EncoderParams:
    """Uniform +-(1/sqrt(fan_in)) weights, zero biases, unit norm scales."""
    d = embed_dim
    flat = 3 * patch_size * patch_size
    attn = None
    if with_attention:
        attn = AttentionBlockParams(
            norm1_scale=Tensor(np.ones(d), requires_grad=True),
            norm1_offset=Tensor(np.zeros(d), requires_grad=True),
            wq=_uniform(rng, (d, d), d),
            wk=_uniform(rng, (d, d), d),
            wv=_uniform(rng, (d, d), d),
            wo=_uniform(rng, (d, d), d),
            norm2_scale=Tensor(np.ones(d), requires_grad=True),
            norm2_offset=Tensor(np.zeros(d), requires_grad=True),
            w1=_uniform(rng, (d, 4 * d), d),
            b1=Tensor(np.zeros(4 * d), requires_grad=True),
            w2=_uniform(rng, (4 * d, d), 4 * d),
            b2=Tensor(np.zeros(d), requires_grad=True),
        )
    return EncoderParams(
        patch_size=patch_size,
        embed_dim=d,
        proj_w=_uniform(rng, (flat, d), flat),
        proj_b=Tensor(np.zeros(d), requires_grad=True),
        attn=attn,
    )


def patchify(slices: np.ndarray, patch: int) -> np.ndarray:
    """(T, 3, H, W) -> (T, N, 3 p^2) with (channel, row, col) flattening per patch."""
    t, c, h, w = slices.shape
    if h % patch or w % patch:
        raise DimensionError(f"spatial size {(h, w)} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = slices.reshape(t, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (T, gh, gw, c, p, p)
    return np.ascontiguousarray(x.reshape(t, gh * gw, c * patch * patch))


def _layernorm(x: Tensor, scale: Tensor, offset: Tensor) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.mean(ad.mul(centered, centered), axis=-1, keepdims=True)
    inv = ad.powc(ad.add(var, _LN_EPS), -0.5)
    return ad.add(ad.mul(ad.mul(centered, inv), scale), offset)


def _attention_block(x: Tensor, p: AttentionBlockParams, d: int) -> Tensor:
    h = _layernorm(x, p.norm1_scale, p.norm1_offset)
    q = ad.matmul(h, p.wq)
    k = ad.matmul(h, p.wk)
    v = ad.matmul(h, p.wv)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    attn = ad.masked_softmax(scores, None, axis=-1)
    x = ad.add(x, ad.matmul(ad.matmul(attn, v), p.wo))
    h2 = _layernorm(x, p.norm2_scale, p.norm2_offset)
    hidden = ad.gelu(ad.add(ad.matmul(h2, p.w1), p.b1))
    return ad.add(x, ad.add(ad.matmul(hidden, p.w2), p.b2))


def encode(batch: TriSliceBatch, params: EncoderParams) -> Tensor:
    """Map a tri-slice batch to token embeddings of shape (T, N, d)."""
    patches = Tensor(patchify(batch.slices, params.patch_size))
    tokens = ad.add(ad.matmul(patches, params.proj_w), params.proj_b)
    if params.attn is not None:
        tokens = _attention_block(tokens, params.attn, params.embed_dim)
    return tokens


def token_grid(input_size: tuple[int, int], patch: int) -> tuple[int, int]:
    return (input_size[0] // patch, input_size[1] // patch)
