"""Bilinear sampling: kernel values, interpolation identities, gradients,
zero-extension and backend equivalence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iwin import kernels
from iwin.core import Tensor
from iwin.gradcheck import grad_check
from iwin.kernels import get_backends
from iwin.sampler import SamplePoint, batched_sample, bilinear_sample, kernel_k

Z2 = np.array([[[0.0, 1.0], [2.0, 3.0]]])  # 1 channel; rows are y, cols are x


class TestKernelK:
    def test_coincident(self):
        assert kernel_k(1.0, 1.0) == 1.0

    def test_separated(self):
        assert kernel_k(0.0, 2.0) == 0.0

    def test_fractional(self):
        assert kernel_k(2.0, 1.25) == pytest.approx(0.25, abs=1e-15)

    @given(st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=50, deadline=None)
    def test_range_and_symmetry(self, a, b):
        v = kernel_k(a, b)
        assert 0.0 <= v <= 1.0
        assert v == kernel_k(b, a)
        if abs(a - b) >= 1:
            assert v == 0.0


class TestBilinearSample:
    def test_integer_grid_point(self):
        out = bilinear_sample(Tensor(Z2), SamplePoint(0.0, 0.0))
        assert out.data[0] == 0.0

    def test_center(self):
        out = bilinear_sample(Tensor(Z2), (0.5, 0.5))
        assert out.data[0] == pytest.approx(1.5, abs=1e-15)

    def test_edge_midpoint(self):
        # x=0.5, y=1.0: average of z(x=0,y=1)=2 and z(x=1,y=1)=3
        out = bilinear_sample(Tensor(Z2), (0.5, 1.0))
        assert out.data[0] == pytest.approx(2.5, abs=1e-15)

    def test_out_of_map_returns_zero(self):
        for p in [(-2.0, 0.0), (0.0, 5.0), (-1.5, -1.5), (2.0, 2.0)]:
            out = bilinear_sample(Tensor(Z2), p)
            assert out.data[0] == 0.0

    def test_partition_of_unity(self, rng):
        """Sampling a constant map returns the constant for in-hull points."""
        z = Tensor(np.full((3, 5, 6), 2.75))
        xs = rng.uniform(0, 5, size=(1, 40))
        ys = rng.uniform(0, 4, size=(1, 40))
        out = batched_sample(z.reshape((1, 3, 5, 6)), Tensor(xs), Tensor(ys))
        np.testing.assert_allclose(out.data, 2.75, atol=1e-12)

    def test_linear_reproduction(self, rng):
        """z(q) = a*qx + b*qy + c is reproduced exactly inside the hull."""
        a, b, c = 0.7, -1.3, 0.25
        yy, xx = np.mgrid[0:6, 0:7].astype(float)
        z = (a * xx + b * yy + c)[None]
        xs = rng.uniform(0, 6, size=(1, 50))
        ys = rng.uniform(0, 5, size=(1, 50))
        out = batched_sample(Tensor(z[None]), Tensor(xs), Tensor(ys))
        np.testing.assert_allclose(out.data[0, :, 0], a * xs[0] + b * ys[0] + c, atol=1e-10)

    def test_at_most_four_source_cells(self, rng):
        z = Tensor(rng.standard_normal((1, 1, 6, 6)), requires_grad=True)
        px = Tensor(np.array([[2.3]]))
        py = Tensor(np.array([[3.7]]))
        batched_sample(z, px, py).sum().backward()
        assert np.count_nonzero(z.grad) <= 4

    def test_coordinate_gradient_vs_finite_differences(self, rng):
        z = Tensor(rng.standard_normal((1, 4, 8, 8)))
        pick = rng.standard_normal((1, 12, 4))
        base = rng.uniform(0.51, 6.49, size=(2, 1, 12))
        # keep points >= 1e-3 from integer seams
        base = np.where(np.abs(base - np.round(base)) < 5e-3, base + 0.01, base)

        def fx(px):
            return (batched_sample(z, px, Tensor(base[1])) * Tensor(pick)).sum()

        def fy(py):
            return (batched_sample(z, Tensor(base[0]), py) * Tensor(pick)).sum()

        assert grad_check(fx, Tensor(base[0].copy())) < 1e-5
        assert grad_check(fy, Tensor(base[1].copy())) < 1e-5

    def test_feature_gradient(self, rng):
        px = Tensor(rng.uniform(0.2, 4.8, size=(1, 9)))
        py = Tensor(rng.uniform(0.2, 4.8, size=(1, 9)))
        pick = rng.standard_normal((1, 9, 2))

        def f(z):
            return (batched_sample(z, px, py) * Tensor(pick)).sum()

        assert grad_check(f, Tensor(rng.standard_normal((1, 2, 5, 5)))) < 1e-5


class TestBackends:
    def test_available(self):
        assert "numpy" in get_backends()

    def test_equivalence(self, rng):
        backends = get_backends()
        if "cython" not in backends:
            pytest.skip("compiled backend not built")
        z = rng.standard_normal((2, 3, 7, 6))
        px = rng.uniform(-1.5, 7.0, size=(2, 25))
        py = rng.uniform(-1.5, 8.0, size=(2, 25))
        dout = rng.standard_normal((2, 25, 3))
        ref = backends["numpy"]
        fast = backends["cython"]
        np.testing.assert_allclose(ref.bilinear_gather(z, px, py),
                                   fast.bilinear_gather(z, px, py), atol=1e-14)
        for a, b in zip(ref.bilinear_gather_grad(z, px, py, dout),
                        fast.bilinear_gather_grad(z, px, py, dout)):
            np.testing.assert_allclose(a, b, atol=1e-13)

    def test_float32_supported(self, rng):
        z = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        px = rng.uniform(0, 3, size=(1, 5)).astype(np.float32)
        py = rng.uniform(0, 3, size=(1, 5)).astype(np.float32)
        out = kernels.bilinear_gather(z, px, py)
        assert out.dtype == np.float32
        ref = kernels.reference.bilinear_gather(z.astype(np.float64),
                                                px.astype(np.float64),
                                                py.astype(np.float64))
        np.testing.assert_allclose(out, ref, atol=1e-5)
