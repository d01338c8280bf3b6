import numpy as np
import pytest

from priorgate import autodiff as ad
from priorgate import encoder as enc
from priorgate.autodiff import DimensionError, Tensor, grad_check
from priorgate.volume import TriSliceBatch


def _batch(slices, stride=1):
    return TriSliceBatch(
        slices=np.asarray(slices, dtype=float),
        centers=np.arange(slices.shape[0]),
        stride=stride,
    )


def test_zero_input_zero_bias_gives_zero_tokens():
    rng = np.random.default_rng(0)
    params = enc.init_encoder_params(patch_size=4, embed_dim=8, with_attention=True, rng=rng)
    batch = _batch(np.zeros((2, 3, 8, 8)))
    out = enc.encode(batch, params)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_token_count_224_over_16():
    rng = np.random.default_rng(1)
    params = enc.init_encoder_params(patch_size=16, embed_dim=4, with_attention=False, rng=rng)
    batch = _batch(np.random.default_rng(2).normal(size=(1, 3, 224, 224)))
    out = enc.encode(batch, params)
    assert out.data.shape == (1, 196, 4)
    assert enc.token_grid((224, 224), 16) == (14, 14)


def test_single_patch_identity_projection():
    # p=2 -> 12 inputs per patch; identity projection reproduces the
    # flattened (channel, row, col) patch values
    rng = np.random.default_rng(3)
    params = enc.init_encoder_params(patch_size=2, embed_dim=12, with_attention=False, rng=rng)
    params.proj_w = Tensor(np.eye(12), requires_grad=True)
    params.proj_b = Tensor(np.zeros(12), requires_grad=True)
    x = rng.normal(size=(1, 3, 2, 2))
    out = enc.encode(_batch(x), params)
    expected = x[0].reshape(-1)  # (c, y, x) order
    np.testing.assert_allclose(out.data[0, 0], expected, atol=1e-12)


def test_token_count_invariant():
    rng = np.random.default_rng(4)
    params = enc.init_encoder_params(patch_size=8, embed_dim=6, with_attention=True, rng=rng)
    for hw in (32, 64):
        batch = _batch(rng.normal(size=(2, 3, hw, hw)))
        out = enc.encode(batch, params)
        assert out.data.shape == (2, (hw // 8) ** 2, 6)


def test_translation_by_patch_permutes_tokens():
    rng = np.random.default_rng(5)
    p = 4
    params = enc.init_encoder_params(patch_size=p, embed_dim=5, with_attention=False, rng=rng)
    img = np.zeros((1, 3, 16, 16))
    img[0, :, 5, 6] = 1.0  # impulse inside patch (1, 1)
    shifted = np.roll(img, p, axis=3)  # move one patch to the right
    out_a = enc.encode(_batch(img), params).data.reshape(4, 4, 5)
    out_b = enc.encode(_batch(shifted), params).data.reshape(4, 4, 5)
    np.testing.assert_allclose(out_b[1, 2], out_a[1, 1], atol=1e-12)
    np.testing.assert_allclose(out_b[:, 0], out_a[:, 3], atol=1e-12)


def test_indivisible_input_rejected():
    rng = np.random.default_rng(6)
    params = enc.init_encoder_params(patch_size=5, embed_dim=4, with_attention=False, rng=rng)
    with pytest.raises(DimensionError):
        enc.encode(_batch(np.zeros((1, 3, 12, 12))), params)


def test_gradient_check_through_encode():
    rng = np.random.default_rng(7)
    params = enc.init_encoder_params(patch_size=4, embed_dim=8, with_attention=True, rng=rng)
    batch = _batch(rng.normal(size=(1, 3, 8, 8)))
    probe = Tensor(rng.normal(size=(1, 4, 8)))
    names = params.named_tensors()

    def f():
        return ad.tsum(ad.mul(enc.encode(batch, params), probe))

    err = grad_check(f, [t for _, t in names], eps=1e-5)
    assert err < 1e-5


def test_init_is_seeded():
    a = enc.init_encoder_params(4, 8, True, np.random.default_rng(42))
    b = enc.init_encoder_params(4, 8, True, np.random.default_rng(42))
    np.testing.assert_array_equal(a.proj_w.data, b.proj_w.data)
    np.testing.assert_array_equal(a.attn.w1.data, b.attn.w1.data)
