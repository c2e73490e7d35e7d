import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpsnet import losses as L
from dpsnet import metrics as M
from dpsnet.gradcheck import check
from dpsnet.tensor import Tensor

LN2 = np.log(2.0)

# frozen from a scripted run of the reference toolkit implementation of each measure
# (8x8, gt = left half, pred = 0.5); E-measure rescaled from its (N - 1) divisor to N
GOLDEN = dict(mae=0.5, s_measure=0.5874999999999999, e_measure=0.25, weighted_f=0.5884696305565973)


def square_mask(size=96, lo=18, hi=78):
    m = np.zeros((size, size))
    m[lo:hi, lo:hi] = 1.0
    return m


class TestMaskLoss:
    def test_perfect_prediction(self):
        gt = square_mask()[None, None]
        wbce, wiou = L.mask_loss(Tensor(gt.copy()), gt)
        assert wbce.item() < 1e-10
        assert abs(wiou.item()) < 1e-12

    def test_half_prediction_is_ln2(self, rng):
        gt = (rng.random((2, 1, 32, 32)) < 0.3).astype(float)
        wbce, _ = L.mask_loss(Tensor(np.full(gt.shape, 0.5)), gt)
        assert wbce.item() == pytest.approx(LN2, rel=1e-12)

    def test_weights_interior_and_edge(self):
        w = L.hard_pixel_weights(square_mask())[0, 0]
        assert w[48, 48] == 1.0
        assert w[18, 48] > 1.0 and w[17, 48] > 1.0

    def test_weights_loop_oracle(self, rng):
        gt = (rng.random((20, 20)) < 0.4).astype(float)
        padded = np.pad(gt, 15)
        w = L.hard_pixel_weights(gt)[0, 0]
        for y, x in [(0, 0), (5, 13), (19, 19), (10, 2)]:
            pooled = padded[y : y + 31, x : x + 31].mean()
            assert w[y, x] == pytest.approx(1 + 5 * abs(pooled - gt[y, x]), rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            L.mask_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)))

    def test_moving_toward_gt_lowers_wbce(self, rng):
        gt = (rng.random((1, 1, 16, 16)) < 0.5).astype(float)
        prev = None
        for t in np.linspace(0.0, 0.9, 7):
            pred = 0.5 + t * (gt - 0.5)
            cur = L.mask_loss(Tensor(pred), gt)[0].item()
            assert prev is None or cur < prev
            prev = cur

    def test_gradient(self, rng):
        pred = Tensor(rng.uniform(0.05, 0.95, (2, 1, 8, 8)), requires_grad=True)
        gt = (rng.random((2, 1, 8, 8)) < 0.5).astype(float)

        def fn():
            a, b = L.mask_loss(pred, gt)
            return (a + b).reshape(1)

        assert check(fn, {"p": pred}, rng, per_tensor=64)[0] < 1e-6


class TestBoundaryLoss:
    def test_perfect(self):
        e = np.zeros((1, 1, 8, 8))
        e[0, 0, 3, :] = 1
        assert L.boundary_loss(Tensor(e.copy()), e).item() < 1e-10

    def test_half_is_ln2(self):
        e = np.zeros((1, 1, 8, 8))
        assert L.boundary_loss(Tensor(np.full(e.shape, 0.5)), e).item() == pytest.approx(LN2, rel=1e-12)

    def test_gradient(self, rng):
        pred = Tensor(rng.uniform(0.05, 0.95, (1, 1, 6, 6)), requires_grad=True)
        gt = (rng.random((1, 1, 6, 6)) < 0.3).astype(float)
        assert check(lambda: L.boundary_loss(pred, gt).reshape(1), {"p": pred}, rng, per_tensor=36)[0] < 1e-6


class TestDilation:
    def test_radius_zero_identity(self, rng):
        e = (rng.random((1, 1, 9, 9)) < 0.2).astype(np.uint8)
        np.testing.assert_array_equal(L.dilate_boundary(e, 0), e)

    def test_single_pixel_radius_one(self):
        e = np.zeros((7, 7), np.uint8)
        e[3, 3] = 1
        d = L.dilate_boundary(e, 1)
        assert d.sum() == 9 and d[2:5, 2:5].all()

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), a=st.integers(0, 3), b=st.integers(0, 3))
    def test_extensive_monotone_composable(self, seed, a, b):
        e = (np.random.default_rng(seed).random((1, 1, 16, 16)) < 0.05).astype(np.uint8)
        da = L.dilate_boundary(e, a)
        assert np.all(da >= e)
        assert L.dilate_boundary(e, a + 1).sum() >= da.sum()
        np.testing.assert_array_equal(L.dilate_boundary(da, b), L.dilate_boundary(e, a + b))


class TestTotalLoss:
    def test_additivity(self, rng):
        mask = (rng.random((2, 1, 32, 32)) < 0.4).astype(float)
        edge = (rng.random((2, 1, 32, 32)) < 0.1).astype(float)
        pred = Tensor(rng.uniform(0.05, 0.95, mask.shape))
        epred = Tensor(rng.uniform(0.05, 0.95, (2, 1, 8, 8)))
        total, rep = L.total_loss(pred, epred, mask, edge)
        assert rep.total == total.item()
        assert rep.total == pytest.approx(rep.mask_wbce + rep.mask_wiou + rep.boundary_bce, rel=1e-15)
        assert min(rep.mask_wbce, rep.mask_wiou, rep.boundary_bce) >= 0

    def test_without_boundary_branch(self, rng):
        mask = (rng.random((1, 1, 16, 16)) < 0.4).astype(float)
        _, rep = L.total_loss(Tensor(np.full(mask.shape, 0.3)), None, mask, mask)
        assert rep.boundary_bce == 0.0
        assert rep.total == pytest.approx(rep.mask_wbce + rep.mask_wiou)


class TestMetrics:
    def test_perfect(self):
        gt = square_mask(32, 8, 20)
        r = M.evaluate_all(gt.copy(), gt)
        assert r.mae == 0.0
        for v in (r.s_measure, r.e_measure, r.weighted_f):
            assert v == pytest.approx(1.0, abs=1e-6)

    def test_inverted_mae(self):
        gt = square_mask(32, 8, 20)
        assert M.mae(1 - gt, gt) == 1.0

    def test_golden_hand_case(self):
        gt = np.zeros((8, 8))
        gt[:, :4] = 1
        r = M.evaluate_all(np.full((8, 8), 0.5), gt)
        for key, value in GOLDEN.items():
            assert getattr(r, key) == pytest.approx(value, abs=1e-9), key

    def test_s_measure_hand_decomposition(self):
        # object part 0.8 (both sides score 2*.5/(.25+1)); region part 0.375 (SSIM 0.5 on the two populated quadrants)
        gt = np.zeros((8, 8))
        gt[:, :4] = 1
        assert M.s_measure(np.full((8, 8), 0.5), gt) == pytest.approx(0.5 * 0.8 + 0.5 * 0.375, abs=1e-12)

    def test_empty_gt_special_cases(self):
        gt = np.zeros((8, 8))
        assert M.weighted_f(np.zeros((8, 8)), gt) == 1.0
        assert M.weighted_f(np.full((8, 8), 0.2), gt) == 0.0
        assert M.s_measure(np.full((8, 8), 0.25), gt) == 0.75
        assert M.e_measure(np.full((8, 8), 0.1), gt) == 1.0
        # adaptive threshold of an all-zero map is 0, so every pixel binarizes to foreground
        assert M.e_measure(np.zeros((8, 8)), gt) == 0.0

    def test_full_gt_special_cases(self):
        gt = np.ones((8, 8))
        assert M.s_measure(np.full((8, 8), 0.25), gt) == 0.25
        assert M.e_measure(np.ones((8, 8)), gt) == 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            M.mae(np.zeros((4, 4)), np.zeros((4, 5)))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 100_000), frac=st.floats(0.05, 0.9))
    def test_ranges_and_mae_symmetry(self, seed, frac):
        r = np.random.default_rng(seed)
        gt = (r.random((16, 16)) < frac).astype(float)
        pred = r.random((16, 16))
        rep = M.evaluate_all(pred, gt)
        for v in (rep.mae, rep.s_measure, rep.e_measure, rep.weighted_f):
            assert 0.0 <= v <= 1.0
        assert M.mae(pred, gt) == pytest.approx(M.mae(1 - pred, 1 - gt), abs=1e-15)
