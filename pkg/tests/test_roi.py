import numpy as np
import pytest

from priorgate import roi
from priorgate.autodiff import DimensionError
from priorgate.roi import RoiMask


def _brute_force_dilate(mask: np.ndarray, half: tuple[int, int, int]) -> np.ndarray:
    """Set every voxel within the box neighborhood of a set voxel."""
    out = np.zeros_like(mask)
    dz, dy, dx = half
    d, h, w = mask.shape
    for z, y, x in zip(*np.nonzero(mask)):
        out[
            max(z - dz, 0) : min(z + dz + 1, d),
            max(y - dy, 0) : min(y + dy + 1, h),
            max(x - dx, 0) : min(x + dx + 1, w),
        ] = 1
    return out


def _rand_mask(rng, shape=(6, 8, 8), density=0.1):
    return (rng.random(shape) < density).astype(np.uint8)


class TestCompose:
    def test_disjoint_union_counts(self):
        a = np.zeros((4, 4, 4), dtype=np.uint8)
        b = np.zeros((4, 4, 4), dtype=np.uint8)
        a[0, 0, 0] = 1
        b[3, 3, 3] = 1
        out = roi.compose_mask([a, b], roi.SOURCE_UNION, "lbl")
        assert out.mask.sum() == a.sum() + b.sum()

    def test_single_passthrough(self):
        rng = np.random.default_rng(0)
        a = _rand_mask(rng)
        out = roi.compose_mask([a], roi.SOURCE_SINGLE, "lbl")
        np.testing.assert_array_equal(out.mask, a)

    def test_union_matches_voxel_loop(self):
        rng = np.random.default_rng(1)
        a, b = _rand_mask(rng, density=0.3), _rand_mask(rng, density=0.3)
        out = roi.compose_mask([a, b], roi.SOURCE_UNION, "lbl")
        expected = np.zeros_like(a)
        for z in range(a.shape[0]):
            for y in range(a.shape[1]):
                for x in range(a.shape[2]):
                    expected[z, y, x] = 1 if (a[z, y, x] or b[z, y, x]) else 0
        np.testing.assert_array_equal(out.mask, expected)

    def test_box_fills_bounding_box(self):
        a = np.zeros((5, 5, 5), dtype=np.uint8)
        a[1, 1, 1] = 1
        a[3, 2, 4] = 1
        out = roi.compose_mask([a], roi.SOURCE_BOX, "lbl")
        expected = np.zeros_like(a)
        expected[1:4, 1:3, 1:5] = 1
        np.testing.assert_array_equal(out.mask, expected)

    def test_empty_channel_list(self):
        with pytest.raises(ValueError):
            roi.compose_mask([], roi.SOURCE_UNION, "lbl")


class TestDilate:
    def test_zero_radius_identity(self):
        rng = np.random.default_rng(2)
        m = RoiMask("lbl", _rand_mask(rng), 0.0, roi.SOURCE_SINGLE)
        out = roi.dilate_mm(m, (3.0, 1.5, 1.5))
        np.testing.assert_array_equal(out.mask, m.mask)

    def test_single_voxel_box_extents(self):
        # r = 6 mm at spacing (3, 1.5, 1.5) -> half-widths (2, 4, 4) -> 5x9x9 box
        mask = np.zeros((11, 13, 13), dtype=np.uint8)
        mask[5, 6, 6] = 1
        m = RoiMask("lbl", mask, 6.0, roi.SOURCE_SINGLE)
        out = roi.dilate_mm(m, (3.0, 1.5, 1.5))
        assert out.mask.sum() == 5 * 9 * 9
        np.testing.assert_array_equal(out.mask, _brute_force_dilate(mask, (2, 4, 4)))

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(3)
        mask = _rand_mask(rng, (5, 7, 7), density=0.08)
        m = RoiMask("lbl", mask, 2.0, roi.SOURCE_SINGLE)
        out = roi.dilate_mm(m, (2.0, 1.0, 1.0))
        np.testing.assert_array_equal(out.mask, _brute_force_dilate(mask, (1, 2, 2)))

    def test_saturation(self):
        m = RoiMask("lbl", np.ones((4, 4, 4), dtype=np.uint8), 10.0, roi.SOURCE_SINGLE)
        out = roi.dilate_mm(m, (1.0, 1.0, 1.0))
        assert (out.mask == 1).all()

    def test_extensive_and_monotone(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            mask = _rand_mask(rng, (6, 6, 6), density=0.1)
            m1 = roi.dilate_mm(RoiMask("l", mask, 1.5, roi.SOURCE_SINGLE), (1.0, 1.0, 1.0))
            m2 = roi.dilate_mm(RoiMask("l", mask, 3.0, roi.SOURCE_SINGLE), (1.0, 1.0, 1.0))
            assert (m1.mask >= mask).all()  # extensive
            assert (m2.mask >= m1.mask).all()  # monotone in radius


class TestTokenMask:
    def test_all_ones_full_grid(self):
        mask = np.ones((3, 224, 224), dtype=np.uint8)
        m = RoiMask("lbl", mask, 0.0, roi.SOURCE_SINGLE)
        tm = roi.to_token_mask(m, np.array([0, 1, 2]), (224, 224), 16)
        assert tm.grid == (14, 14)
        assert (tm.values == 1).all()

    def test_all_zeros(self):
        m = RoiMask("lbl", np.zeros((2, 32, 32), dtype=np.uint8), 0.0, roi.SOURCE_SINGLE)
        tm = roi.to_token_mask(m, np.array([0, 1]), (32, 32), 8)
        assert (tm.values == 0).all()

    def test_half_plane_left_columns(self):
        mask = np.zeros((1, 224, 224), dtype=np.uint8)
        mask[:, :, :112] = 1
        m = RoiMask("lbl", mask, 0.0, roi.SOURCE_SINGLE)
        tm = roi.to_token_mask(m, np.array([0]), (224, 224), 16)
        grid = tm.values.reshape(14, 14)
        np.testing.assert_array_equal(grid[:, :7], 1)
        np.testing.assert_array_equal(grid[:, 7:], 0)

    def test_matches_brute_force_sampling_oracle(self):
        # token is 1 iff the source voxel reached by (NN resize -> patch-center
        # pick) is 1; the oracle recomputes the two-stage map with loops
        rng = np.random.default_rng(5)
        mask = (rng.random((2, 20, 28)) < 0.4).astype(np.uint8)
        m = RoiMask("lbl", mask, 0.0, roi.SOURCE_SINGLE)
        h_out, w_out, p = 32, 32, 8
        tm = roi.to_token_mask(m, np.array([0, 1]), (h_out, w_out), p)
        for t in range(2):
            for a in range(h_out // p):
                for b in range(w_out // p):
                    pr = a * p + p // 2
                    pc = b * p + p // 2
                    sr = min(int(np.floor((pr + 0.5) * mask.shape[1] / h_out)), mask.shape[1] - 1)
                    sc = min(int(np.floor((pc + 0.5) * mask.shape[2] / w_out)), mask.shape[2] - 1)
                    assert tm.values[t, a * (w_out // p) + b] == mask[t, sr, sc]

    def test_empty_roi_empty_tokens_every_slice(self):
        m = RoiMask("lbl", np.zeros((4, 16, 16), dtype=np.uint8), 0.0, roi.SOURCE_SINGLE)
        tm = roi.to_token_mask(m, np.array([0, 1, 2, 3]), (16, 16), 4)
        assert tm.values.sum() == 0

    def test_center_out_of_range(self):
        m = RoiMask("lbl", np.zeros((2, 16, 16), dtype=np.uint8), 0.0, roi.SOURCE_SINGLE)
        with pytest.raises(IndexError):
            roi.to_token_mask(m, np.array([5]), (16, 16), 4)

    def test_indivisible_input(self):
        m = RoiMask("lbl", np.zeros((1, 16, 16), dtype=np.uint8), 0.0, roi.SOURCE_SINGLE)
        with pytest.raises(DimensionError):
            roi.to_token_mask(m, np.array([0]), (18, 16), 4)


class TestMaskIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        m = RoiMask("geo", _rand_mask(rng), 4.0, roi.SOURCE_UNION)
        base = str(tmp_path / "mask_geo")
        roi.save_mask(base, m)
        back = roi.load_mask(base)
        np.testing.assert_array_equal(back.mask, m.mask)
        assert back.label == "geo"
        assert back.dilation_radius_mm == 4.0
        assert back.source == roi.SOURCE_UNION

    def test_binary_validation(self):
        with pytest.raises(ValueError):
            RoiMask("l", np.full((2, 2, 2), 2.0), 0.0, roi.SOURCE_SINGLE)
