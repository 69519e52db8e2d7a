import numpy as np
import pytest

from edgedet.engine import execute_float
from edgedet.ir import (F32, Graph, GraphError, Node, TensorSpec, count_params,
                        infer_shapes, validate)
from edgedet.prune import channel_importance, kept_channel_count, prune_channels


def toy_chain(c_mid, seed=0, k=3):
    """input -> Conv(4->c_mid) -> SiLU -> Conv(c_mid->4) -> Detect"""
    rng = np.random.default_rng(seed)
    tensors = {i: TensorSpec(i, F32) for i in range(7)}
    tensors[0].shape = (1, 4, 8, 8)
    n1 = Node("Conv2d", [0], [1], {"k": k, "s": 1, "p": k // 2},
              {"kernel": rng.normal(0, 0.5, (c_mid, 4, k, k)).astype(np.float32),
               "bias": rng.normal(0, 0.5, c_mid).astype(np.float32)},
              region="backbone", name="c1")
    act = Node("SiLU", [1], [2], region="backbone", name="a1")
    n2 = Node("Conv2d", [2], [3], {"k": k, "s": 1, "p": k // 2},
              {"kernel": rng.normal(0, 0.5, (4, c_mid, k, k)).astype(np.float32),
               "bias": rng.normal(0, 0.5, 4).astype(np.float32)},
              region="neck", name="c2")
    det = Node("Detect", [3, 3, 3], [4, 5, 6], {}, region="head", name="d")
    return infer_shapes(Graph([n1, act, n2, det], tensors, 0, [4, 5, 6]))


def rebuild_dense(g, kept):
    """Independent dense reconstruction: slice the toy chain's weights by the
    surviving channel indices of the first conv."""
    d = g.copy()
    d.nodes[0].weights["kernel"] = d.nodes[0].weights["kernel"][kept]
    d.nodes[0].weights["bias"] = d.nodes[0].weights["bias"][kept]
    d.nodes[2].weights["kernel"] = d.nodes[2].weights["kernel"][:, kept]
    return infer_shapes(d)


class TestChannelImportance:
    def test_zero_channel(self):
        g = toy_chain(8)
        g.nodes[0].weights["kernel"][2] = 0.0
        assert channel_importance(g.nodes[0])[2] == 0.0

    def test_l1_values(self):
        g = toy_chain(2, k=1)
        g.nodes[0].weights["kernel"][:] = np.array(
            [[[[1]], [[-1]], [[0]], [[0]]], [[[2]], [[2]], [[0]], [[0]]]],
            np.float32)
        np.testing.assert_allclose(channel_importance(g.nodes[0]), [2, 4])

    def test_scaling_invariance_of_ranking(self):
        g = toy_chain(16, seed=3)
        s1 = channel_importance(g.nodes[0])
        g.nodes[0].weights["kernel"] *= 3.0
        s2 = channel_importance(g.nodes[0])
        np.testing.assert_allclose(s2, 3 * s1, rtol=1e-6)
        np.testing.assert_array_equal(np.argsort(s1), np.argsort(s2))


class TestKeptCount:
    def test_floor_of_8(self):
        assert kept_channel_count(8, 0.5) == 8
        assert kept_channel_count(10, 0.9) == 8

    def test_multiple_of_4_rounding(self):
        assert kept_channel_count(16, 0.10) == 16  # 15 rounds back up
        assert kept_channel_count(64, 0.10) == 60
        assert kept_channel_count(128, 0.10) == 116

    def test_ratio_zero(self):
        assert kept_channel_count(48, 0.0) == 48


class TestPruneChannels:
    def test_ratio_zero_identity(self, g192):
        pg, rep = prune_channels(g192, 0.0)
        assert rep.params_after == rep.params_before == count_params(g192)
        assert rep.pruned == {}

    def test_backbone_10pct_param_drop(self, g192):
        pg, rep = prune_channels(g192, 0.10)
        drop = 1 - rep.params_after / rep.params_before
        assert 0.03 <= drop <= 0.08

    def test_pruned_graph_valid_and_finite(self, g192):
        pg, _ = prune_channels(g192, 0.10)
        validate(pg)
        pg = infer_shapes(pg)
        x = np.random.default_rng(8).uniform(0, 1, (1, 3, 192, 192)).astype(np.float32)
        out, _ = execute_float(pg, x)
        assert all(np.isfinite(out[t]).all() for t in pg.output_ids)

    def test_hw_unchanged(self, g192):
        pg, _ = prune_channels(g192, 0.10)
        for tid, spec in pg.tensors.items():
            orig = g192.tensors[tid].shape
            assert (spec.shape[2], spec.shape[3]) == (orig[2], orig[3])

    def test_bad_ratio(self, g192):
        with pytest.raises(GraphError):
            prune_channels(g192, 1.0)

    def test_toy_dense_reconstruction(self):
        g = toy_chain(16, seed=11)
        pg, rep = prune_channels(g, 0.5)
        kept = np.argsort(channel_importance(g.nodes[0]), kind="stable")[8:]
        kept = np.sort(kept)
        assert pg.nodes[2].weights["kernel"].shape == (4, 8, 3, 3)
        dense = rebuild_dense(g, kept)
        x = np.random.default_rng(12).normal(size=(1, 4, 8, 8)).astype(np.float32)
        a, _ = execute_float(pg, x)
        b, _ = execute_float(dense, x)
        for ta, tb in zip(pg.output_ids, dense.output_ids):
            np.testing.assert_array_equal(a[ta], b[tb])

    def test_dense_reconstruction_many_seeds(self):
        for seed in range(20):
            c_mid = 16 + 4 * (seed % 4)
            g = toy_chain(c_mid, seed=seed)
            pg, _ = prune_channels(g, 0.5)
            removed = c_mid - kept_channel_count(c_mid, 0.5)
            kept = np.sort(np.argsort(channel_importance(g.nodes[0]),
                                      kind="stable")[removed:])
            dense = rebuild_dense(g, kept)
            x = np.random.default_rng(100 + seed).normal(
                size=(1, 4, 8, 8)).astype(np.float32)
            a, _ = execute_float(pg, x)
            b, _ = execute_float(dense, x)
            for ta, tb in zip(pg.output_ids, dense.output_ids):
                np.testing.assert_array_equal(a[ta], b[tb])

    def test_report_flash_drop(self, g192):
        _, rep = prune_channels(g192, 0.10)
        assert rep.flash_after < rep.flash_before

    def test_skips_convs_feeding_add(self, g192):
        pg, rep = prune_channels(g192, 0.10)
        # bottleneck second convs sit on residual adds and must be untouched
        for name in rep.pruned:
            assert ".m" not in name or name.endswith("cv1.conv")
