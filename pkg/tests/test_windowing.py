"""Window partition/gather/scatter: tiling, padding, zero-offset equivalence,
pointwise interpolation oracle and gradient checks."""

import numpy as np
import pytest

from iwin.core import DimensionError, Tensor
from iwin.gradcheck import grad_check
from iwin.windowing import (WindowSet, gather_windows, partition,
                            predict_offsets, scatter_windows)


def naive_conv3x3(x, w, b):
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((2, H, W))
    for o in range(2):
        for y in range(H):
            for xx in range(W):
                out[o, y, xx] = (xp[:, y:y + 3, xx:xx + 3] * w[o]).sum() + b[o]
    return out


def naive_bilinear(z, x, y):
    C, H, W = z.shape
    out = np.zeros(C)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < H and 0 <= xx < W:
                out += wy * wx * z[:, yy, xx]
    return out


class TestPredictOffsets:
    def test_zero_weights_zero_field(self, rng):
        z = Tensor(rng.standard_normal((4, 6, 6)))
        out = predict_offsets(z, Tensor(np.zeros((2, 4, 3, 3))), Tensor(np.zeros(2)))
        assert out.shape == (2, 6, 6)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_input_gives_bias(self, rng):
        w = Tensor(rng.standard_normal((2, 3, 3, 3)))
        b = Tensor(np.array([0.5, -1.25]))
        out = predict_offsets(Tensor(np.zeros((3, 4, 5))), w, b)
        np.testing.assert_allclose(out.data[0], 0.5, atol=1e-15)
        np.testing.assert_allclose(out.data[1], -1.25, atol=1e-15)

    def test_matches_naive_convolution(self, rng):
        z = rng.standard_normal((4, 5, 5))
        w = rng.standard_normal((2, 4, 3, 3))
        b = rng.standard_normal(2)
        out = predict_offsets(Tensor(z), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, naive_conv3x3(z, w, b), atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            predict_offsets(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((2, 5, 3, 3))))


class TestPartition:
    def test_exact_tiling(self):
        z = Tensor(np.zeros((1, 4, 4)))
        ws = partition(z, None, 2)
        assert ws.num_windows == 4
        assert ws.pad_spec == (0, 0)
        assert ws.valid.all()
        # all anchors integer, each cell covered once
        covered = set(zip(ws.anchors_y.reshape(-1), ws.anchors_x.reshape(-1)))
        assert covered == {(y, x) for y in range(4) for x in range(4)}
        assert np.array_equal(ws.points_x.data[0], ws.anchors_x.reshape(-1))

    def test_padding_rule(self):
        ws = partition(Tensor(np.zeros((1, 5, 5))), None, 2)
        assert ws.num_windows == 9
        assert ws.pad_spec == (1, 1)
        assert ws.valid.sum() == 25

    def test_window_count_formula(self):
        for H, W, S in [(7, 9, 3), (16, 16, 7), (4, 4, 5), (10, 3, 2)]:
            ws = partition(Tensor(np.zeros((1, H, W))), None, S)
            assert ws.num_windows == -(-H // S) * -(-W // S)

    def test_zero_offsets_equal_regular(self, rng):
        z = Tensor(rng.standard_normal((3, 6, 6)))
        f_o = Tensor(np.zeros((2, 6, 6)))
        irregular = partition(z, f_o, 2)
        regular = partition(z, None, 2)
        assert (irregular.points_x.data == regular.points_x.data).all()
        assert (irregular.points_y.data == regular.points_y.data).all()
        assert (irregular.valid == regular.valid).all()
        gi = gather_windows(z, irregular).data
        gr = gather_windows(z, regular).data
        assert (gi == gr).all()

    def test_offset_shape_validation(self, rng):
        z = Tensor(np.zeros((3, 6, 6)))
        with pytest.raises(DimensionError):
            partition(z, Tensor(np.zeros((2, 5, 6))), 2)


class TestGather:
    def test_regular_is_permutation(self, rng):
        z = rng.standard_normal((3, 4, 4))
        ws = partition(Tensor(z), None, 2)
        g = gather_windows(Tensor(z), ws).data            # (4, 4, 3)
        tokens = {tuple(z[:, y, x]) for y in range(4) for x in range(4)}
        gathered = {tuple(v) for w in g for v in w}
        assert tokens == gathered

    def test_constant_map_in_hull(self, rng):
        z = Tensor(np.full((2, 6, 6), 3.25))
        f_o = Tensor(rng.uniform(-0.9, 0.9, size=(2, 6, 6)))
        ws = partition(z, f_o, 3)
        # interior anchors stay in-hull for offsets < 1
        g = gather_windows(z, ws).data
        interior = (ws.anchors_y >= 1) & (ws.anchors_y <= 4) & \
                   (ws.anchors_x >= 1) & (ws.anchors_x <= 4)
        np.testing.assert_allclose(g[interior.reshape(4, 9)], 3.25, atol=1e-12)

    def test_matches_pointwise_oracle(self, rng):
        z = rng.standard_normal((2, 4, 4))
        f_o = rng.uniform(-1.5, 1.5, size=(2, 4, 4))
        ws = partition(Tensor(z), Tensor(f_o), 2)
        g = gather_windows(Tensor(z), ws).data
        for w in range(ws.num_windows):
            for n in range(4):
                flat = w * 4 + n
                x = ws.points_x.data[0, flat]
                y = ws.points_y.data[0, flat]
                np.testing.assert_allclose(g[w, n], naive_bilinear(z, x, y), atol=1e-12)

    def test_padded_slots_zero_and_masked(self, rng):
        z = rng.standard_normal((2, 5, 5)) + 5.0       # offset so zeros are distinctive
        ws = partition(Tensor(z), None, 3)
        g = gather_windows(Tensor(z), ws).data
        assert not ws.valid.all()
        np.testing.assert_array_equal(g[~ws.valid], 0.0)
        assert (np.abs(g[ws.valid]) > 1e-9).all()

    def test_permutation_consistency(self, rng):
        z = Tensor(rng.standard_normal((3, 6, 6)))
        ws = partition(z, None, 3)
        perm = rng.permutation(ws.num_windows)
        permuted = WindowSet(
            window_size=ws.window_size, map_hw=ws.map_hw, pad_spec=ws.pad_spec,
            grid_hw=ws.grid_hw, anchors_y=ws.anchors_y[perm], anchors_x=ws.anchors_x[perm],
            valid=ws.valid[perm],
            points_x=Tensor(ws.points_x.data.reshape(ws.num_windows, 9)[perm].reshape(1, -1)),
            points_y=Tensor(ws.points_y.data.reshape(ws.num_windows, 9)[perm].reshape(1, -1)),
            batched=False)
        g = gather_windows(z, ws).data
        gp = gather_windows(z, permuted).data
        np.testing.assert_array_equal(g[perm], gp)


class TestScatter:
    def test_bijection_with_zero_offsets(self, rng):
        z = rng.standard_normal((3, 6, 6))
        ws = partition(Tensor(z), Tensor(np.zeros((2, 6, 6))), 2)
        g = gather_windows(Tensor(z), ws)
        back = scatter_windows(g, ws).data
        np.testing.assert_array_equal(back, z)

    def test_padded_map_roundtrip(self, rng):
        z = rng.standard_normal((2, 5, 7))
        ws = partition(Tensor(z), None, 3)
        back = scatter_windows(gather_windows(Tensor(z), ws), ws).data
        np.testing.assert_array_equal(back, z)

    def test_gradient(self, rng):
        ws = partition(Tensor(np.zeros((2, 4, 4))), None, 2)
        pick = rng.standard_normal((2, 4, 4))

        def f(v):
            return (scatter_windows(v, ws) * Tensor(pick)).sum()

        assert grad_check(f, Tensor(rng.standard_normal((4, 4, 2)))) < 1e-6


class TestGatherGradients:
    def test_grad_wrt_features_and_offsets(self, rng):
        z0 = rng.standard_normal((2, 6, 6))
        w = rng.standard_normal((2, 2, 3, 3)) * 0.1
        b = rng.uniform(0.1, 0.4, size=2)          # keep points off integer seams
        pick = rng.standard_normal((4, 9, 2))

        def f_z(z):
            f_o = predict_offsets(z, Tensor(w), Tensor(b))
            ws = partition(z, f_o, 3)
            return (gather_windows(z, ws) * Tensor(pick)).sum()

        assert grad_check(f_z, Tensor(z0)) < 1e-4

        f_o0 = rng.uniform(0.05, 0.85, size=(2, 6, 6))
        zt = Tensor(z0)

        def f_offsets(f_o):
            ws = partition(zt, f_o, 3)
            return (gather_windows(zt, ws) * Tensor(pick)).sum()

        assert grad_check(f_offsets, Tensor(f_o0)) < 1e-4
