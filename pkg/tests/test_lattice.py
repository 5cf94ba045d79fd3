"""Pairwise operator tests: feature builders, oracle, lattice accuracy."""

import math

import numpy as np
import pytest

from cascrf.lattice import (
    BRUTE_FORCE_LIMIT,
    DenseGaussianPairwise,
    FlippedPairwise,
    PermutohedralLattice,
    brute_force_pairwise,
    build_bilateral_features,
    build_pairwise,
    build_spatial_features,
    kernel_row_sums,
)


class TestFeatureBuilders:
    def test_bilateral_shape_and_order(self):
        img = np.zeros((2, 3, 3), dtype=np.float64)
        img[0, 1] = [0.5, 0.25, 1.0]
        emb = build_bilateral_features(img, 2.0, 0.5)
        assert emb.shape == (6, 5)
        # row-major: pixel (x=1, y=0) is row 1
        np.testing.assert_allclose(emb[1], [0.5, 0.0, 1.0, 0.5, 2.0])

    def test_bilateral_hand_kernel(self):
        # pixels at (0,0) and (3,4), same color, sigma 5: distance 1
        img = np.full((5, 4, 3), 0.7)
        emb = build_bilateral_features(img, 5.0, 1.0)
        i, j = 0, 4 * 4 + 3  # (x=0,y=0) and (x=3,y=4)
        d2 = ((emb[i] - emb[j]) ** 2).sum()
        assert d2 == pytest.approx(1.0, abs=1e-12)
        assert math.exp(-0.5 * d2) == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_bilateral_bandwidth_scaling(self):
        img = np.random.default_rng(0).random((4, 4, 3))
        wide = build_bilateral_features(img, 60.0, 5.0)
        narrow = build_bilateral_features(img, 5.0, 5.0)
        np.testing.assert_allclose(narrow[:, :2], wide[:, :2] * 12.0)

    def test_spatial_hand_kernels(self):
        emb = build_spatial_features(3, 1, 1.0)
        d2 = ((emb[0] - emb[1]) ** 2).sum()
        assert math.exp(-0.5 * d2) == pytest.approx(math.exp(-0.5))
        assert ((emb[0] - emb[0]) ** 2).sum() == 0.0
        emb10 = build_spatial_features(3, 1, 10.0)
        d2 = ((emb10[0] - emb10[1]) ** 2).sum()
        assert math.exp(-0.5 * d2) == pytest.approx(math.exp(-1.0 / 200.0))

    def test_bad_bandwidths(self):
        img = np.zeros((2, 2, 3))
        with pytest.raises(ValueError):
            build_bilateral_features(img, 0.0, 1.0)
        with pytest.raises(ValueError):
            build_bilateral_features(img, 1.0, -2.0)
        with pytest.raises(ValueError):
            build_spatial_features(4, 4, 0.0)

    def test_bad_image_shape(self):
        with pytest.raises(ValueError):
            build_bilateral_features(np.zeros((2, 2)), 1.0, 1.0)


class TestDenseOracle:
    def test_matches_manual_three_points(self):
        emb = np.array([[0.0], [1.0], [2.5]])
        v = np.array([2.0, -1.0, 0.5])
        expect = np.zeros(3)
        for i in range(3):
            for j in range(3):
                if i != j:
                    d2 = (emb[i, 0] - emb[j, 0]) ** 2
                    expect[i] += math.exp(-0.5 * d2) * v[j]
        np.testing.assert_allclose(brute_force_pairwise(emb, v), expect, atol=1e-14)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(1)
        op = DenseGaussianPairwise(rng.standard_normal((30, 4)))
        u = rng.standard_normal(30)
        v = rng.standard_normal(30)
        lhs = u @ op.pairwise_apply(v)
        rhs = op.pairwise_apply(u) @ v
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_zero_values(self):
        emb = np.random.default_rng(2).standard_normal((10, 3))
        np.testing.assert_array_equal(brute_force_pairwise(emb, np.zeros(10)), np.zeros(10))

    def test_size_guard(self):
        emb = np.zeros((BRUTE_FORCE_LIMIT + 1, 2))
        with pytest.raises(ValueError):
            DenseGaussianPairwise(emb)


class TestTinyExamples:
    """Spec-level examples on the factory path (exact for small N)."""

    def test_single_pixel(self):
        op = build_pairwise(np.array([[0.3, -0.2]]))
        assert op.gaussian_filter(np.array([4.5]))[0] == pytest.approx(4.5, abs=1e-12)
        assert op.pairwise_apply(np.array([4.5]))[0] == pytest.approx(0.0, abs=1e-12)
        assert kernel_row_sums(op)[0] == pytest.approx(0.0, abs=1e-12)

    def test_two_pixels(self):
        emb = np.array([[0.0, 0.0], [1.0, 1.0]])
        k = math.exp(-0.5 * 2.0)
        op = build_pairwise(emb)
        out = op.pairwise_apply(np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [0.0, k], atol=1e-14)
        np.testing.assert_allclose(op.row_sums(), [k, k], atol=1e-14)

    def test_constant_map_matches_row_sums(self):
        rng = np.random.default_rng(3)
        emb = rng.standard_normal((49, 5))
        op = build_pairwise(emb)
        c = 2.75
        np.testing.assert_allclose(
            op.pairwise_apply(np.full(49, c)), c * op.row_sums(), atol=1e-12
        )


def _regimes(img, h, w):
    return [
        build_bilateral_features(img, 60.0, 5.0),
        build_spatial_features(w, h, 3.0),
        build_spatial_features(w, h, 10.0),
    ]


class TestLatticeAccuracy:
    def test_oracle_agreement_16(self):
        rng = np.random.default_rng(20)
        for _ in range(3):
            img = rng.random((16, 16, 3))
            for emb in _regimes(img, 16, 16):
                lat = PermutohedralLattice(emb)
                vs = rng.standard_normal((256, 8))
                diff2 = ref2 = 0.0
                for c in range(8):
                    ref = brute_force_pairwise(emb, vs[:, c])
                    got = lat.pairwise_apply(vs[:, c])
                    diff2 += ((got - ref) ** 2).sum()
                    ref2 += (ref ** 2).sum()
                assert math.sqrt(diff2 / ref2) <= 0.05

    def test_oracle_agreement_32(self):
        rng = np.random.default_rng(21)
        img = rng.random((32, 32, 3))
        for emb in _regimes(img, 32, 32):
            lat = PermutohedralLattice(emb)
            vs = rng.standard_normal((1024, 8))
            diff2 = ref2 = 0.0
            for c in range(8):
                ref = brute_force_pairwise(emb, vs[:, c])
                got = lat.pairwise_apply(vs[:, c])
                diff2 += ((got - ref) ** 2).sum()
                ref2 += (ref ** 2).sum()
            assert math.sqrt(diff2 / ref2) <= 0.05

    def test_linearity_exact(self):
        rng = np.random.default_rng(22)
        emb = build_spatial_features(12, 12, 3.0)
        lat = PermutohedralLattice(emb)
        v = rng.standard_normal(144)
        np.testing.assert_array_equal(lat.gaussian_filter(2.0 * v), 2.0 * lat.gaussian_filter(v))

    def test_operator_symmetry(self):
        rng = np.random.default_rng(23)
        img = rng.random((12, 12, 3))
        for emb in _regimes(img, 12, 12):
            lat = PermutohedralLattice(emb)
            u = rng.standard_normal(144)
            v = rng.standard_normal(144)
            gap = abs(u @ lat.pairwise_apply(v) - lat.pairwise_apply(u) @ v)
            assert gap <= 1e-4 * np.linalg.norm(u) * np.linalg.norm(v)

    def test_row_sums_nonnegative(self):
        rng = np.random.default_rng(24)
        img = rng.random((16, 16, 3))
        for emb in _regimes(img, 16, 16):
            assert PermutohedralLattice(emb).row_sums().min() >= -1e-6

    def test_single_pixel_lattice(self):
        lat = PermutohedralLattice(np.array([[0.1, 0.2, 0.3]]))
        assert lat.gaussian_filter(np.array([3.0]))[0] == pytest.approx(3.0, rel=1e-9)

    def test_size_mismatch(self):
        lat = PermutohedralLattice(build_spatial_features(4, 4, 2.0))
        with pytest.raises(ValueError):
            lat.gaussian_filter(np.zeros(15))

    def test_shape_passthrough(self):
        emb = build_spatial_features(6, 5, 2.0)
        lat = PermutohedralLattice(emb)
        out = lat.pairwise_apply(np.ones((5, 6)))
        assert out.shape == (5, 6)

    def test_bad_passes(self):
        with pytest.raises(ValueError):
            PermutohedralLattice(np.zeros((4, 2)), passes=0)


class TestFlippedPairwise:
    def test_matches_operator_on_flipped_grid(self):
        rng = np.random.default_rng(30)
        h, w = 4, 6
        img = rng.random((h, w, 3))
        base = build_pairwise(build_bilateral_features(img, 2.0, 0.5))
        flipped_img = img[:, ::-1]
        direct = build_pairwise(build_bilateral_features(flipped_img, 2.0, 0.5))
        view = FlippedPairwise(base, h, w)
        v = rng.standard_normal((h, w))
        np.testing.assert_allclose(view.pairwise_apply(v), direct.pairwise_apply(v), atol=1e-12)
        np.testing.assert_allclose(view.row_sums(), direct.row_sums(), atol=1e-12)

    def test_size_mismatch(self):
        base = build_pairwise(np.zeros((6, 2)))
        with pytest.raises(ValueError):
            FlippedPairwise(base, 2, 4)


class TestBuildPairwise:
    def test_auto_routes(self):
        small = build_pairwise(np.zeros((10, 2)))
        assert isinstance(small, DenseGaussianPairwise)
        big = build_pairwise(build_spatial_features(10, 10, 3.0))
        assert isinstance(big, PermutohedralLattice)

    def test_explicit_methods(self):
        emb = build_spatial_features(5, 5, 2.0)
        assert isinstance(build_pairwise(emb, method="dense"), DenseGaussianPairwise)
        assert isinstance(build_pairwise(emb, method="lattice"), PermutohedralLattice)
        with pytest.raises(ValueError):
            build_pairwise(emb, method="grid")
