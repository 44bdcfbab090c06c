import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from fracpoisson.noise import (
    CholeskyError,
    GridSpec,
    NoiseSample,
    NoiseSampler,
    aggregate,
    aggregate_array,
    aggregation_matrix,
    axis_covariance,
    build_axis_cholesky,
    covariance_r,
    increment_covariance,
    increment_covariance_1d,
    kronecker_covariance,
    read_noise_csv,
    sample,
    write_noise_csv,
)
from fracpoisson.rates import HurstVector


def fractional_double_integral(h, ab, cd):
    """Independent oracle: int_a^b int_c^d H(2H-1)|u-v|^{2H-2} dv du."""
    a, b = ab
    c, d = cd
    coef = h * (2 * h - 1)
    kern = lambda v, u: coef * abs(u - v) ** (2 * h - 2)
    points = sorted({a, b, c, d})
    total = 0.0
    for u0, u1 in zip(points[:-1], points[1:]):
        if not (a <= u0 and u1 <= b):
            continue
        for v0, v1 in zip(points[:-1], points[1:]):
            if not (c <= v0 and v1 <= d):
                continue
            if (u0, u1) == (v0, v1):
                # diagonal block: reduce to int_0^L 2 (L - s) s^{2H-2} ds with an algebraic weight
                length = u1 - u0
                val, _ = integrate.quad(lambda s: 2 * coef * (length - s), 0, length,
                                        weight="alg", wvar=(2 * h - 2, 0), epsabs=1e-13)
            else:
                val, _ = integrate.dblquad(kern, u0, u1, v0, v1, epsabs=1e-11, epsrel=1e-11)
            total += val
    return total


class TestGrid:
    def test_kappa(self):
        g = GridSpec(2, 4)
        np.testing.assert_allclose(g.kappa([0.3, 0.99]), [0.25, 0.75])
        assert g.cell_index([0.5, 0.0]) == (2, 0)

    def test_cells_partition(self):
        g = GridSpec(2, 3)
        assert len(list(g.cells())) == 9

    @pytest.mark.parametrize("k,n", [(0, 4), (1, 1)])
    def test_invalid(self, k, n):
        with pytest.raises(ValueError):
            GridSpec(k, n)


class TestCovariance:
    def test_brownian_variance(self):
        assert covariance_r(HurstVector((0.5,)), 0.5, 0.5) == pytest.approx(0.5)

    def test_origin(self):
        assert covariance_r(HurstVector((0.7, 0.6)), [0.0, 0.3], [0.4, 0.9]) == 0.0

    def test_three_quarter_value(self):
        # 0.5 * (0.25^1.5 + 0.75^1.5 - 0.5^1.5)
        assert covariance_r(HurstVector((0.75,)), 0.25, 0.75) == pytest.approx(0.2104828311, abs=1e-9)

    def test_covariance_monte_carlo(self):
        # B(x) on a dyadic grid is a partial sum of cell increments
        h = HurstVector((0.75,))
        grid = GridSpec(1, 4)
        inc = NoiseSampler(h, grid).sample_batch(11, 0, range(20000))
        b = np.cumsum(inc, axis=1)
        x1, x3 = b[:, 0], b[:, 2]
        prod = x1 * x3
        se = prod.std(ddof=1) / np.sqrt(prod.size)
        assert abs(prod.mean() - covariance_r(h, 0.25, 0.75)) < 4 * se

    @pytest.mark.parametrize("h,ab,cd,expected", [
        (0.5, (0, 0.5), (0.5, 1), 0.0),
        (0.5, (0, 0.5), (0, 0.5), 0.5),
    ])
    def test_1d_examples(self, h, ab, cd, expected):
        assert increment_covariance_1d(h, ab, cd) == pytest.approx(expected, abs=1e-15)

    def test_adjacent_halves_three_quarter(self):
        # 0.5 * (0 + 1 - 0.5^1.5 - 0.5^1.5) = 0.5 - 0.5^1.5
        val = increment_covariance_1d(0.75, (0, 0.5), (0.5, 1))
        assert val == pytest.approx(0.5 - 0.5**1.5, abs=1e-15)
        assert val == pytest.approx(fractional_double_integral(0.75, (0, 0.5), (0.5, 1)), rel=1e-7)

    @pytest.mark.parametrize("h,ab,cd", [
        (0.6, (0.0, 0.3), (0.5, 0.9)),
        (0.9, (0.1, 0.4), (0.2, 0.7)),
        (0.75, (0.2, 0.6), (0.2, 0.6)),
    ])
    def test_against_double_integral(self, h, ab, cd):
        np.testing.assert_allclose(increment_covariance_1d(h, ab, cd),
                                   fractional_double_integral(h, ab, cd), rtol=1e-6)

    def test_multi_axis(self):
        g = GridSpec(2, 2)
        h = HurstVector((0.75, 0.75))
        assert increment_covariance(h, g, (0, 0), (0, 0)) == pytest.approx(0.125)
        assert increment_covariance(HurstVector((0.5, 0.8)), g, (0, 1), (1, 1)) == 0.0

    def test_k1_reduces(self):
        g = GridSpec(1, 4)
        assert increment_covariance(HurstVector((0.7,)), g, (1,), (3,)) == \
            increment_covariance_1d(0.7, (0.25, 0.5), (0.75, 1.0))

    @given(st.floats(0.5, 0.99), st.floats(0, 1), st.floats(0.01, 1), st.floats(0, 1),
           st.floats(0.01, 1), st.floats(-5, 5))
    @settings(max_examples=200, deadline=None)
    def test_stationarity(self, h, a, la, c, lc, shift):
        base = increment_covariance_1d(h, (a, a + la), (c, c + lc))
        moved = increment_covariance_1d(h, (a + shift, a + la + shift), (c + shift, c + lc + shift))
        assert moved == pytest.approx(base, rel=1e-9, abs=1e-12)


class TestCholesky:
    def test_brownian_factor(self):
        f = build_axis_cholesky(HurstVector((0.5,)), GridSpec(1, 2))[0]
        np.testing.assert_allclose(f.dense(), np.diag([np.sqrt(0.5)] * 2))

    @pytest.mark.parametrize("h", [0.5, 0.6, 0.75, 0.95])
    @pytest.mark.parametrize("n", [2, 8, 32])
    def test_reproduces_axis_covariance(self, h, n):
        f = build_axis_cholesky(HurstVector((h,)), GridSpec(1, n), fast_path=False)[0].dense()
        np.testing.assert_allclose(f @ f.T, axis_covariance(h, n), atol=1e-12)

    def test_axis_covariance_matches_pairwise(self):
        n, h = 6, 0.7
        g = GridSpec(1, n)
        direct = np.array([[increment_covariance_1d(h, g.cell_interval(i), g.cell_interval(j))
                            for j in range(n)] for i in range(n)])
        np.testing.assert_allclose(axis_covariance(h, n), direct, atol=1e-15)

    def test_error_reports_axis(self, monkeypatch):
        import fracpoisson.noise as noise_mod
        real = noise_mod.axis_covariance

        def broken(h, n):
            m = real(h, n)
            if h == 0.8:
                m[-1, -1] = -1.0
            return m

        monkeypatch.setattr(noise_mod, "axis_covariance", broken)
        with pytest.raises(CholeskyError) as err:
            build_axis_cholesky(HurstVector((0.6, 0.8)), GridSpec(2, 4))
        assert err.value.axis == 1 and err.value.pivot == 4

    @pytest.mark.parametrize("k,n", [(1, 16), (2, 4), (2, 8)])
    def test_psd(self, k, n):
        c = kronecker_covariance(HurstVector((0.75, 0.6)[:k]), GridSpec(k, n))
        np.testing.assert_allclose(c, c.T, atol=0)
        assert np.linalg.eigvalsh(c).min() >= -1e-10


class TestSampling:
    def test_zero_normals(self):
        s = NoiseSampler(HurstVector((0.7, 0.6)), GridSpec(2, 4))
        np.testing.assert_array_equal(s.transform(np.zeros((4, 4))), 0.0)

    def test_deterministic(self):
        h, g = HurstVector((0.7, 0.6)), GridSpec(2, 8)
        a = sample(h, g, seed=5, stream_id=2, replicate=3)
        b = sample(h, g, seed=5, stream_id=2, replicate=3)
        np.testing.assert_array_equal(a.increments, b.increments)
        c = sample(h, g, seed=5, stream_id=2, replicate=4)
        assert not np.array_equal(a.increments, c.increments)

    def test_transform_matches_kronecker(self):
        h, g = HurstVector((0.7, 0.55)), GridSpec(2, 4)
        s = NoiseSampler(h, g)
        z = np.random.default_rng(0).standard_normal((4, 4))
        l_full = np.kron(s.factors[0].dense(), s.factors[1].dense())
        np.testing.assert_allclose(s.transform(z).ravel(), l_full @ z.ravel(), atol=1e-14)

    def test_fast_path_same_as_general(self):
        h, g = HurstVector((0.5, 0.7)), GridSpec(2, 8)
        z = np.random.default_rng(1).standard_normal((3, 8, 8))
        fast = NoiseSampler(h, g).transform(z)
        slow = NoiseSampler(h, g, fast_path=False).transform(z)
        np.testing.assert_allclose(fast, slow, atol=1e-14)

    def test_monte_carlo_k2(self):
        h, g = HurstVector((0.75, 0.6)), GridSpec(2, 4)
        x = NoiseSampler(h, g).sample_batch(3, 0, range(20000)).reshape(20000, -1)
        cov = kronecker_covariance(h, g)
        prods = x[:, :, None] * x[:, None, :]
        se = prods.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
        assert np.max(np.abs(prods.mean(axis=0) - cov) / se) < 4.5

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            NoiseSample(GridSpec(1, 4), HurstVector((0.6,)), np.zeros(3))


class TestAggregation:
    def test_identity(self):
        s = sample(HurstVector((0.7,)), GridSpec(1, 8), seed=0)
        np.testing.assert_array_equal(aggregate(s, GridSpec(1, 8)).increments, s.increments)

    def test_additivity(self):
        s = sample(HurstVector((0.7,)), GridSpec(1, 4), seed=0)
        c = aggregate(s, GridSpec(1, 2)).increments
        assert c[0] == s.increments[0] + s.increments[1]

    def test_non_divisible(self):
        s = sample(HurstVector((0.7,)), GridSpec(1, 6), seed=0)
        with pytest.raises(ValueError):
            aggregate(s, GridSpec(1, 4))

    @pytest.mark.parametrize("h", [(0.75, 0.6), (0.5, 0.9)])
    def test_coarse_covariance_exact(self, h):
        hv = HurstVector(h)
        fine, coarse = GridSpec(2, 8), GridSpec(2, 2)
        a1 = aggregation_matrix(8, 2)
        a = np.kron(a1, a1)
        np.testing.assert_allclose(a @ kronecker_covariance(hv, fine) @ a.T,
                                   kronecker_covariance(hv, coarse), atol=1e-12)

    def test_batch_aggregation(self):
        x = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
        out = aggregate_array(x, 2, 2)
        assert out.shape == (2, 2, 2)
        assert out[1, 0, 1] == x[1, 0:2, 2:4].sum()


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        s = sample(HurstVector((0.65, 0.8)), GridSpec(2, 4), seed=123, stream_id=4, replicate=2)
        path = tmp_path / "noise.csv"
        write_noise_csv(s, path)
        back = read_noise_csv(path)
        np.testing.assert_array_equal(back.increments, s.increments)
        assert (back.seed, back.stream_id, back.replicate) == (123, 4, 2)
        assert back.h == s.h
