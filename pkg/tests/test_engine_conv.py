"""Convolution forward/backward against brute-force and finite-difference oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oneframe.engine import ConvGeometry, conv3d, conv3d_vjp, finite_difference_gradient, maxpool3d
from oneframe.errors import GeometryError, ShapeError

from reference import conv3d_reference, max_relative_error


def _random_case(rng, groups=1, max_kernel=3):
    kernel_dims = tuple(int(rng.integers(1, max_kernel + 1)) for _ in range(3))
    stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
    padding = tuple(int(rng.integers(0, 2)) for _ in range(3))
    geom = ConvGeometry(kernel=kernel_dims, stride=stride, padding=padding, groups=groups)
    cin = groups * int(rng.integers(1, 3))
    cout = groups * int(rng.integers(1, 3))
    extents = tuple(
        int(rng.integers(max(1, k - 2 * p), k - 2 * p + 4)) + max(0, k - 1)
        for k, p in zip(kernel_dims, padding)
    )
    n = int(rng.integers(1, 3))
    x = rng.standard_normal((n, cin) + extents, dtype=np.float32)
    w = rng.standard_normal((cout, cin // groups) + kernel_dims, dtype=np.float32)
    b = rng.standard_normal(cout, dtype=np.float32)
    return x, w, b, geom


class TestConvForward:
    def test_identity_kernel_returns_input(self, rng):
        x = rng.uniform(-2, 2, size=(2, 1, 4, 5, 5)).astype(np.float32)
        w = np.ones((1, 1, 1, 1, 1), dtype=np.float32)
        b = np.zeros(1, dtype=np.float32)
        out = conv3d(x, w, b, ConvGeometry(kernel=(1, 1, 1)))
        np.testing.assert_array_equal(out, x)

    def test_stem_geometry_contracts_32_frames_to_8(self, rng):
        """A stride-2 5x7x7 conv then temporal-stride-2 pooling: 32 -> 16 -> 8 frames."""
        x = rng.uniform(0, 1, size=(1, 3, 32, 16, 16)).astype(np.float32)
        geom = ConvGeometry(kernel=(5, 7, 7), stride=(2, 2, 2), padding=(2, 3, 3))
        w = rng.standard_normal((4, 3, 5, 7, 7), dtype=np.float32) * 0.1
        out = conv3d(x, w, np.zeros(4, dtype=np.float32), geom)
        assert out.shape[2] == 16
        pooled, _ = maxpool3d(out, ConvGeometry(kernel=(1, 3, 3), stride=(2, 2, 2), padding=(0, 1, 1)))
        assert pooled.shape[2] == 8

    def test_matches_nested_loop_oracle(self, rng):
        for _ in range(12):
            x, w, b, geom = _random_case(rng)
            expected = conv3d_reference(x, w, b, geom)
            actual = conv3d(x, w, b, geom)
            assert max_relative_error(actual, expected) < 1e-5

    def test_fixed_oracle_case(self, rng):
        x = rng.standard_normal((3, 2, 4, 5, 5), dtype=np.float32)
        geom = ConvGeometry(kernel=(3, 3, 3), stride=(1, 2, 1), padding=(1, 1, 0))
        w = rng.standard_normal((4, 2, 3, 3, 3), dtype=np.float32)
        b = rng.standard_normal(4, dtype=np.float32)
        assert max_relative_error(conv3d(x, w, b, geom), conv3d_reference(x, w, b, geom)) < 1e-5

    def test_grouped_matches_per_channel_decomposition(self, rng):
        for _ in range(6):
            x, w, b, geom = _random_case(rng, groups=1)
            c = x.shape[1]
            dw = rng.standard_normal((c, 1) + geom.kernel, dtype=np.float32)
            db = rng.standard_normal(c, dtype=np.float32)
            grouped_geom = ConvGeometry(geom.kernel, geom.stride, geom.padding, groups=c)
            grouped = conv3d(x, dw, db, grouped_geom)
            single_geom = ConvGeometry(geom.kernel, geom.stride, geom.padding, groups=1)
            for ci in range(c):
                alone = conv3d(x[:, ci:ci + 1], dw[ci:ci + 1], db[ci:ci + 1], single_geom)
                np.testing.assert_allclose(grouped[:, ci:ci + 1], alone, rtol=1e-6, atol=1e-6)

    def test_deterministic_bitwise(self, rng):
        x, w, b, geom = _random_case(rng)
        first = conv3d(x, w, b, geom)
        second = conv3d(x, w, b, geom)
        np.testing.assert_array_equal(first, second)

    @settings(max_examples=20, deadline=None)
    @given(a=st.floats(-3, 3), b_coef=st.floats(-3, 3))
    def test_linearity_with_zero_bias(self, a, b_coef):
        local = np.random.Generator(np.random.Philox(7))
        x = local.standard_normal((1, 2, 4, 4, 4), dtype=np.float32)
        y = local.standard_normal((1, 2, 4, 4, 4), dtype=np.float32)
        w = local.standard_normal((3, 2, 3, 3, 3), dtype=np.float32)
        zero = np.zeros(3, dtype=np.float32)
        geom = ConvGeometry(kernel=(3, 3, 3), padding=(1, 1, 1))
        lhs = conv3d(np.float32(a) * x + np.float32(b_coef) * y, w, zero, geom)
        rhs = np.float32(a) * conv3d(x, w, zero, geom) + np.float32(b_coef) * conv3d(y, w, zero, geom)
        assert max_relative_error(lhs, rhs) < 1e-5 or np.abs(rhs).max() < 1e-4

    def test_channel_mismatch_raises(self, rng):
        x = rng.standard_normal((1, 3, 4, 4, 4), dtype=np.float32)
        w = rng.standard_normal((2, 2, 3, 3, 3), dtype=np.float32)
        with pytest.raises(ShapeError):
            conv3d(x, w, np.zeros(2, dtype=np.float32), ConvGeometry(kernel=(3, 3, 3)))

    def test_empty_output_raises_geometry_error(self, rng):
        x = rng.standard_normal((1, 1, 2, 4, 4), dtype=np.float32)
        w = rng.standard_normal((1, 1, 5, 3, 3), dtype=np.float32)
        with pytest.raises(GeometryError):
            conv3d(x, w, np.zeros(1, dtype=np.float32), ConvGeometry(kernel=(5, 3, 3)))


class TestConvVjp:
    def test_zero_upstream_gives_zero_gradients(self, rng):
        x, w, b, geom = _random_case(rng)
        out_shape = (x.shape[0], w.shape[0]) + geom.output_shape(x.shape[2:])
        gi, gk, gb = conv3d_vjp(x, w, geom, np.zeros(out_shape, dtype=np.float32))
        assert not gi.any() and not gk.any() and not gb.any()

    def test_identity_kernel_passes_upstream_through(self, rng):
        x = rng.standard_normal((2, 1, 3, 4, 4), dtype=np.float32)
        w = np.ones((1, 1, 1, 1, 1), dtype=np.float32)
        upstream = rng.standard_normal(x.shape, dtype=np.float32)
        gi, _, _ = conv3d_vjp(x, w, ConvGeometry(kernel=(1, 1, 1)), upstream)
        np.testing.assert_array_equal(gi, upstream)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed):
        local = np.random.Generator(np.random.Philox(seed))
        x, w, b, geom = _random_case(local)
        x = local.uniform(0, 1, size=x.shape).astype(np.float32)
        upstream = local.standard_normal(
            (x.shape[0], w.shape[0]) + geom.output_shape(x.shape[2:])
        ).astype(np.float32)
        gi, gk, gb = conv3d_vjp(x, w, geom, upstream)

        def loss_of_input(xv):
            return float((upstream * conv3d(xv, w, b, geom)).sum())

        fd_input = finite_difference_gradient(loss_of_input, x, step=1e-2)
        assert max_relative_error(gi, fd_input) < 1e-3

        def loss_of_kernel(wv):
            return float((upstream * conv3d(x, wv, b, geom)).sum())

        fd_kernel = finite_difference_gradient(loss_of_kernel, w, step=1e-2)
        assert max_relative_error(gk, fd_kernel) < 1e-3
        np.testing.assert_allclose(gb, upstream.sum(axis=(0, 2, 3, 4)), rtol=1e-5)

    def test_grouped_vjp_matches_finite_differences(self):
        local = np.random.Generator(np.random.Philox(77))
        geom = ConvGeometry(kernel=(2, 2, 2), stride=(1, 1, 1), padding=(1, 0, 0), groups=2)
        x = local.uniform(0, 1, size=(1, 4, 3, 3, 3)).astype(np.float32)
        w = local.standard_normal((4, 2, 2, 2, 2), dtype=np.float32)
        upstream = local.standard_normal((1, 4) + geom.output_shape((3, 3, 3))).astype(np.float32)
        gi, gk, _ = conv3d_vjp(x, w, geom, upstream)
        fd_input = finite_difference_gradient(
            lambda xv: float((upstream * conv3d(xv, w, np.zeros(4, np.float32), geom)).sum()), x, 1e-2
        )
        fd_kernel = finite_difference_gradient(
            lambda wv: float((upstream * conv3d(x, wv, np.zeros(4, np.float32), geom)).sum()), w, 1e-2
        )
        assert max_relative_error(gi, fd_input) < 1e-3
        assert max_relative_error(gk, fd_kernel) < 1e-3

    def test_selective_outputs(self, rng):
        x, w, b, geom = _random_case(rng)
        upstream = np.ones((x.shape[0], w.shape[0]) + geom.output_shape(x.shape[2:]), dtype=np.float32)
        gi, gk, gb = conv3d_vjp(x, w, geom, upstream, need_kernel=False, need_bias=False)
        assert gk is None and gb is None and gi is not None

    def test_upstream_shape_mismatch_raises(self, rng):
        x, w, b, geom = _random_case(rng)
        with pytest.raises(ShapeError):
            conv3d_vjp(x, w, geom, np.zeros((1, 1, 1, 1, 1), dtype=np.float32))
