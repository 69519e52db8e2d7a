import numpy as np
import pytest

from edgedet.engine import (add, concat_channels, conv2d_ref, execute_float,
                            maxpool2d_ref, sigmoid, silu, upsample_nearest2x)
from edgedet.ir import GraphError


class TestScalarActivations:
    def test_sigmoid_zero(self):
        assert sigmoid(0.0) == pytest.approx(0.5)

    def test_silu_zero(self):
        assert silu(0.0) == pytest.approx(0.0)

    def test_sigmoid_two(self):
        assert sigmoid(2.0) == pytest.approx(0.8808, abs=1e-4)

    def test_saturation(self):
        assert sigmoid(1000.0) == pytest.approx(1.0)
        assert sigmoid(-1000.0) == pytest.approx(0.0)


class TestConv2dRef:
    def test_box_filter_tap_counts(self):
        x = np.ones((1, 1, 4, 4), np.float32)
        k = np.ones((1, 1, 3, 3), np.float32)
        y = conv2d_ref(x, k, None, 1, 1)[0, 0]
        assert y[1, 1] == 9 and y[1, 2] == 9
        assert y[0, 0] == 4 and y[0, 3] == 4 and y[3, 3] == 4

    def test_zero_kernel_bias_only(self):
        x = np.random.default_rng(0).normal(size=(1, 2, 5, 5)).astype(np.float32)
        k = np.zeros((3, 2, 3, 3), np.float32)
        b = np.array([1.5, -2.0, 0.0], np.float32)
        y = conv2d_ref(x, k, b, 1, 1)
        for c in range(3):
            np.testing.assert_allclose(y[0, c], b[c])

    def test_stride2_shape(self):
        x = np.zeros((1, 1, 5, 5), np.float32)
        k = np.zeros((1, 1, 3, 3), np.float32)
        assert conv2d_ref(x, k, None, 2, 1).shape == (1, 1, 3, 3)

    def test_identity_1x1(self):
        x = np.random.default_rng(1).normal(size=(1, 1, 6, 6)).astype(np.float32)
        k = np.ones((1, 1, 1, 1), np.float32)
        np.testing.assert_allclose(conv2d_ref(x, k, None, 1, 0), x)

    def test_linearity_zero_bias(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
        k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        np.testing.assert_allclose(conv2d_ref(3 * x, k, None, 1, 1),
                                   3 * conv2d_ref(x, k, None, 1, 1),
                                   rtol=1e-4, atol=1e-4)

    def test_kernel_too_large(self):
        x = np.zeros((1, 1, 2, 2), np.float32)
        k = np.zeros((1, 1, 7, 7), np.float32)
        with pytest.raises(GraphError, match="larger than"):
            conv2d_ref(x, k, None, 1, 0)

    def test_against_naive_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 6, 7)).astype(np.float32)
        k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        s, p = 2, 1
        got = conv2d_ref(x, k, b, s, p)
        ho = (6 + 2 * p - 3) // s + 1
        wo = (7 + 2 * p - 3) // s + 1
        want = np.zeros((1, 3, ho, wo))
        for o in range(3):
            for y in range(ho):
                for xx in range(wo):
                    acc = float(b[o])
                    for c in range(2):
                        for u in range(3):
                            for v in range(3):
                                yy, xv = y * s - p + u, xx * s - p + v
                                if 0 <= yy < 6 and 0 <= xv < 7:
                                    acc += x[0, c, yy, xv] * k[o, c, u, v]
                    want[0, o, y, xx] = acc
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)


class TestPoolAndFusion:
    def test_maxpool_2x2(self):
        x = np.array([[[[1, 2], [3, 4]]]], np.float32)
        assert maxpool2d_ref(x, 2, 2, 0)[0, 0, 0, 0] == 4

    def test_upsample_pattern(self):
        x = np.array([[[[1, 2], [3, 4]]]], np.float32)
        want = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(upsample_nearest2x(x)[0, 0], want)

    def test_add_identity(self):
        x = np.random.default_rng(4).normal(size=(1, 2, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(add(x, np.zeros_like(x)), x)

    def test_add_shape_mismatch(self):
        with pytest.raises(GraphError):
            add(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 4, 3)))

    def test_concat_shape_mismatch(self):
        with pytest.raises(GraphError):
            concat_channels([np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 4, 3))])

    def test_sppf_chain_equals_large_kernels(self):
        # three chained 5x5 s1 p2 maxpools == single 9x9 and 13x13 pools
        x = np.random.default_rng(5).normal(size=(1, 3, 16, 16)).astype(np.float32)
        m1 = maxpool2d_ref(x, 5, 1, 2)
        m2 = maxpool2d_ref(m1, 5, 1, 2)
        m3 = maxpool2d_ref(m2, 5, 1, 2)
        np.testing.assert_array_equal(m2, maxpool2d_ref(x, 9, 1, 4))
        np.testing.assert_array_equal(m3, maxpool2d_ref(x, 13, 1, 6))


class TestExecuteFloat:
    def test_deterministic(self, g192):
        x = np.random.default_rng(6).uniform(0, 1, (1, 3, 192, 192)).astype(np.float32)
        a, _ = execute_float(g192, x)
        b, _ = execute_float(g192, x)
        for t in g192.output_ids:
            np.testing.assert_array_equal(a[t], b[t])

    def test_no_nan_inf(self, g192):
        x = np.random.default_rng(7).uniform(0, 1, (1, 3, 192, 192)).astype(np.float32)
        out, _ = execute_float(g192, x)
        for t in g192.output_ids:
            assert np.isfinite(out[t]).all()

    def test_shape_mismatch_names_tensor(self, g192):
        with pytest.raises(GraphError, match=str(g192.input_id)):
            execute_float(g192, np.zeros((1, 3, 64, 64), np.float32))

    def test_trace_has_one_entry_per_node(self, g192):
        x = np.zeros((1, 3, 192, 192), np.float32)
        _, trace = execute_float(g192, x, want_trace=True)
        assert len(trace.micros) == len(g192.nodes)
