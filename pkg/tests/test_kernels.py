import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from condo.core import CATEGORICAL, CONTINUOUS, AffineMap, DimensionMismatch, InvalidArgument, SchemaMismatch
from condo.kernels import (
    WHITE_BACKGROUND,
    RbfKernel,
    confounder_kernel_eval,
    dynamic_bandwidth,
    fit_confounder_kernel,
    kmeans,
    rbf_eval,
    rbf_gram,
)

CONT = [("y", CONTINUOUS)]
CAT = [("c", CATEGORICAL)]


class TestRbf:
    def test_self_similarity(self):
        assert rbf_eval(RbfKernel([0.7, 2.0]), [1.0, -3.0], [1.0, -3.0]) == 1.0

    def test_half_point(self):
        x_half = 1.0 * math.sqrt(2 * math.log(2))
        assert rbf_eval(RbfKernel([1.0]), [0.0], [x_half]) == pytest.approx(0.5, abs=1e-15)

    def test_tail(self):
        assert rbf_eval(RbfKernel([1.0, 1.0]), [0.0, 0.0], [50.0, 50.0]) < 1e-10

    def test_floor(self):
        k = RbfKernel([0.0, 1e-9], floor=1e-6)
        np.testing.assert_array_equal(k.bandwidths, [1e-6, 1e-6])

    def test_ard_product(self):
        k = RbfKernel([1.0, 3.0])
        assert rbf_eval(k, [0, 0], [1, 2]) == pytest.approx(
            math.exp(-0.5) * math.exp(-0.5 * 4 / 9), rel=1e-14)

    def test_gram_matches_eval(self, rng):
        k = RbfKernel([0.5, 2.0])
        x, z = rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
        g = rbf_gram(k, x, z)
        for i in range(4):
            for j in range(3):
                assert g[i, j] == pytest.approx(rbf_eval(k, x[i], z[j]), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(x=arrays(float, 3, elements=st.floats(-10, 10)), z=arrays(float, 3, elements=st.floats(-10, 10)),
           s=arrays(float, 3, elements=st.floats(0.1, 5)))
    def test_symmetry(self, x, z, s):
        k = RbfKernel(s)
        assert rbf_eval(k, x, z) == rbf_eval(k, z, x)


class TestDynamicBandwidth:
    def test_floor_on_zero_residual(self, rng):
        xs = rng.standard_normal((6, 2))
        g = AffineMap([[2.0, 0.1], [0.0, 1.0]], [1.0, -1.0])
        bw = dynamic_bandwidth(g.apply(xs), xs, g, floor=1e-6)
        np.testing.assert_array_equal(bw, [1e-6, 1e-6])

    def test_arithmetic(self):
        bw = dynamic_bandwidth([[1.0], [3.0]], [[0.0], [0.0]], AffineMap.identity(1))
        assert bw[0] == pytest.approx(math.sqrt(5), rel=1e-15)

    def test_homogeneity(self, rng):
        xt, xs = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
        g = AffineMap.identity(3)
        np.testing.assert_allclose(dynamic_bandwidth(-2.5 * xt, -2.5 * xs, g),
                                   2.5 * dynamic_bandwidth(xt, xs, g), rtol=1e-14)

    def test_mismatch(self):
        with pytest.raises(DimensionMismatch):
            dynamic_bandwidth(np.zeros((3, 2)), np.zeros((4, 2)), AffineMap.identity(2))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        xt, xs = rng.standard_normal((10, 2)), rng.standard_normal((10, 2))
        g = AffineMap(rng.standard_normal((2, 2)), rng.standard_normal(2))
        p = rng.permutation(10)
        np.testing.assert_allclose(dynamic_bandwidth(xt[p], xs[p], g), dynamic_bandwidth(xt, xs, g), rtol=1e-12)


class TestKMeans:
    def test_single_cluster_is_mean(self, rng):
        x = rng.standard_normal((20, 3))
        np.testing.assert_allclose(kmeans(x, 1).centroids[0], x.mean(axis=0), atol=1e-14)

    def test_separated(self):
        res = kmeans([0.0, 0.0, 10.0, 10.0], 2, seed=3)
        assert sorted(res.centroids[:, 0]) == [0.0, 10.0]

    def test_k_equals_n(self, rng):
        x = rng.standard_normal((6, 2))
        assert kmeans(x, 6).sse == 0.0

    def test_k_too_large(self):
        with pytest.raises(InvalidArgument):
            kmeans(np.zeros((3, 1)), 4)

    def test_centroids_are_member_means(self, rng):
        x = rng.standard_normal((60, 2))
        res = kmeans(x, 4, seed=1)
        for j in range(4):
            np.testing.assert_allclose(res.centroids[j], x[res.labels == j].mean(axis=0), atol=1e-12)

    def test_deterministic(self, rng):
        x = rng.standard_normal((50, 2))
        a, b = kmeans(x, 5, seed=9), kmeans(x, 5, seed=9)
        np.testing.assert_array_equal(a.centroids, b.centroids)
        np.testing.assert_array_equal(a.labels, b.labels)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 8))
    def test_sse_non_increasing(self, seed, k):
        x = np.random.default_rng(seed).standard_normal((40, 2))
        trace = kmeans(x, k, seed=seed).sse_trace
        assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(trace, trace[1:]))


class TestConfounderKernel:
    def test_zero_residuals_no_noise(self, rng):
        vals = [(float(v),) for v in rng.uniform(0, 8, 30)]
        kern = fit_confounder_kernel(vals, CONT, np.zeros(30), k=5)
        np.testing.assert_array_equal(kern.noise(vals), 0.0)
        base = kern.base_gram(vals, vals)
        np.testing.assert_array_equal(kern.gram(vals), base)

    def test_single_prototype_constant_noise(self, rng):
        vals = [(float(v),) for v in rng.uniform(0, 8, 10)]
        kern = fit_confounder_kernel(vals, CONT, np.full(10, 4.0), k=1)
        np.testing.assert_allclose(kern.noise(vals + [(100.0,)]), 4.0, rtol=1e-14)
        assert confounder_kernel_eval(kern, (2.0,), (2.0,)) == pytest.approx(1.0 + 4.0)

    def test_two_cluster_noise_regression(self):
        # hand computation: median pairwise distance 9.95 -> encoded points
        # {0, 0.01005, 1.00503, 1.01508}; centroids at the pair means; the
        # smoothing bandwidth sqrt(SSE/N) equals the half-gap 0.1/(2*9.95),
        # so the far prototype gets weight ~exp(-2e4) at any training point.
        y = [0.0, 0.1, 10.0, 10.1]
        kern = fit_confounder_kernel([(v,) for v in y], CONT, np.array([1.0, 1.0, 9.0, 9.0]), k=2)
        ell = 9.95
        h = 0.05 / ell
        assert kern.lengthscales[0] == pytest.approx(ell)
        assert kern.smoothing == pytest.approx(h, rel=1e-9)
        enc = np.array(y) / ell
        cents = np.array([0.05, 10.05]) / ell
        logits = -0.5 * (enc[:, None] - cents[None, :]) ** 2 / h**2
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        oracle = w @ np.array([1.0, 9.0])
        np.testing.assert_allclose(kern.noise([(v,) for v in y]), oracle, rtol=1e-9)
        assert abs(oracle[0] - 1) < 1e-6 and abs(oracle[3] - 9) < 1e-6

    def test_categorical_values(self):
        kern = fit_confounder_kernel([("a",), ("b",)], CAT)
        assert confounder_kernel_eval(kern, ("a",), ("a",)) == 1.0
        assert confounder_kernel_eval(kern, ("a",), ("b",)) == WHITE_BACKGROUND

    def test_categorical_diagonal_noise(self):
        kern = fit_confounder_kernel([("a",), ("a",), ("b",)], CAT, np.array([2.0, 2.0, 0.0]), k=2)
        assert confounder_kernel_eval(kern, ("a",), ("a",)) == pytest.approx(3.0, rel=1e-9)
        assert confounder_kernel_eval(kern, ("a",), ("b",)) == WHITE_BACKGROUND

    def test_mixed_product(self):
        schema = [("c", CATEGORICAL), ("y", CONTINUOUS)]
        vals = [("a", 0.0), ("b", 1.0), ("a", 3.0)]
        kern = fit_confounder_kernel(vals, schema)
        assert confounder_kernel_eval(kern, ("a", 2.0), ("a", 2.0)) == 1.0
        ell = kern.lengthscales[1]
        expected = WHITE_BACKGROUND * math.exp(-0.5 * (1.0 / ell) ** 2)
        assert confounder_kernel_eval(kern, ("a", 1.0), ("b", 2.0)) == pytest.approx(expected, rel=1e-12)

    def test_schema_mismatch(self):
        kern = fit_confounder_kernel([(1.0,), (2.0,)], CONT)
        with pytest.raises(SchemaMismatch):
            confounder_kernel_eval(kern, (1.0, 2.0), (1.0,))

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            fit_confounder_kernel([], CONT)

    def test_k_clamped(self):
        kern = fit_confounder_kernel([("a",), ("a",), ("b",)], CAT, np.ones(3), k=10)
        assert kern.prototypes.shape[0] == 2

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_symmetry_and_self_similarity(self, seed):
        rng = np.random.default_rng(seed)
        schema = [("c", CATEGORICAL), ("y", CONTINUOUS)]
        vals = [(str(rng.integers(3)), float(rng.uniform(0, 5))) for _ in range(12)]
        kern = fit_confounder_kernel(vals, schema, rng.random(12), k=3, seed=seed)
        for i in range(0, 12, 3):
            for j in range(12):
                kij = confounder_kernel_eval(kern, vals[i], vals[j])
                assert kij == confounder_kernel_eval(kern, vals[j], vals[i])
        base = kern.base_gram(vals, vals)
        assert np.all(np.diag(base)[:, None] >= base - 1e-15)
