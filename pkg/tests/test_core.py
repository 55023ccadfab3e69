"""Tensor/autodiff core: op semantics, tape mechanics, finite-difference checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iwin import core
from iwin.core import (CheckedModeError, DimensionError, Graph, Tensor, checked,
                       concat, conv2d, layer_norm, linear, log_softmax, matmul,
                       relu, scaled_dot_attention, softmax, upsample2x)
from iwin.gradcheck import grad_check


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        out = matmul(eye, eye)
        np.testing.assert_array_equal(out.data, np.eye(2))

    def test_hand_example(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[2.0], [4.0]])

    def test_gradient_matches_central_differences(self):
        b = Tensor(np.eye(2))
        err = grad_check(lambda a: matmul(a, b).sum(), Tensor(np.ones((2, 2))))
        assert err < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_against_loop(self, rng):
        a = rng.standard_normal((4, 3, 5))
        b = rng.standard_normal((4, 5, 2))
        out = matmul(Tensor(a), Tensor(b)).data
        for i in range(4):
            np.testing.assert_allclose(out[i], a[i] @ b[i], atol=1e-13)


class TestSoftmax:
    def test_all_equal_logits(self):
        out = softmax(Tensor(np.zeros(4)), axis=-1)
        np.testing.assert_allclose(out.data, [0.25] * 4, atol=1e-15)

    def test_hand_example(self):
        out = softmax(Tensor([0.0, np.log(3.0)]), axis=-1)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-14)

    @given(st.floats(-50, 50))
    @settings(max_examples=25, deadline=None)
    def test_shift_invariance(self, c):
        x = np.array([0.3, -1.2, 2.0, 0.0])
        a = softmax(Tensor(x), axis=-1).data
        b = softmax(Tensor(x + c), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        x = rng.standard_normal((5, 7))
        out = softmax(Tensor(x), axis=1).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert (out >= 0).all()


class TestGradCheck:
    def test_quadratic(self):
        x = Tensor([3.0])
        err = grad_check(lambda t: (t * t).sum(), x)
        assert err < 1e-6
        xt = Tensor([3.0], requires_grad=True)
        loss = (xt * xt).sum()
        loss.backward()
        np.testing.assert_allclose(xt.grad, [6.0], atol=1e-12)

    def test_eps_contract(self):
        with pytest.raises(core.ContractError):
            grad_check(lambda t: t.sum(), Tensor([1.0]), eps=1e-2)

    def test_nonscalar_rejected(self):
        with pytest.raises(core.ContractError):
            grad_check(lambda t: t * 2.0, Tensor([1.0, 2.0]))


class TestTapeMechanics:
    def test_fanout_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x + x
        z = (y * y).sum()
        z.backward()
        # d/dx (2x)^2 = 8x
        np.testing.assert_allclose(x.grad, [16.0], atol=1e-12)

    def test_graph_is_topologically_ordered(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        z = y + x
        w = (z * y).sum()
        records = Graph.trace(w).records
        seen = {id(x)}
        for rec in records:
            for parent in rec.inputs:
                assert id(parent) in seen or parent._vjp is None
            seen.add(id(rec.output))
        # every op record appears exactly once
        assert len({id(r.output) for r in records}) == len(records)

    def test_forward_deterministic(self, rng):
        x = rng.standard_normal((6, 6))
        w = rng.standard_normal((6, 6))
        a = matmul(softmax(Tensor(x), -1), Tensor(w)).data
        b = matmul(softmax(Tensor(x), -1), Tensor(w)).data
        assert (a == b).all()

    def test_checked_mode_rejects_nonfinite(self):
        with checked():
            with pytest.raises(CheckedModeError):
                Tensor([np.nan, 1.0])
            with np.errstate(divide="ignore"), pytest.raises(CheckedModeError):
                Tensor([1.0]) / Tensor([0.0])
        Tensor([np.inf])  # fine outside checked mode

    def test_backward_requires_scalar(self):
        with pytest.raises(core.ContractError):
            Tensor([1.0, 2.0], requires_grad=True).backward()


class TestComposedGradients:
    """Backward of composed ops vs. finite differences on small random tensors."""

    def _check(self, f, x, tol=1e-4):
        assert x.size <= 512
        assert grad_check(f, Tensor(x)) < tol

    def test_mlp_chain(self, rng):
        w1 = Tensor(rng.standard_normal((6, 8)) * 0.5)
        b1 = Tensor(rng.standard_normal(8) * 0.1)
        w2 = Tensor(rng.standard_normal((8, 3)) * 0.5)

        def f(x):
            h = relu(linear(x, w1, b1))
            return (softmax(matmul(h, w2), -1) * Tensor(rng2)).sum()

        rng2 = rng.standard_normal((5, 3))
        self._check(f, rng.standard_normal((5, 6)))

    def test_norm_and_logsoftmax(self, rng):
        g = Tensor(rng.standard_normal(7))
        b = Tensor(rng.standard_normal(7))

        def f(x):
            return (log_softmax(layer_norm(x, g, b), -1) * Tensor(pick)).sum()

        pick = rng.standard_normal((4, 7))
        self._check(f, rng.standard_normal((4, 7)))

    def test_elementwise_zoo(self, rng):
        y = Tensor(rng.standard_normal((3, 4)))

        def f(x):
            a = core.maximum(x, y) + core.minimum(x, y) * 0.5
            return (core.abs_(a) + core.sigmoid(a) + core.exp(a * 0.1)).sum()

        self._check(f, rng.standard_normal((3, 4)) + 0.01)

    def test_reductions_and_shapes(self, rng):
        def f(x):
            a = x.reshape((2, 6)).transpose((1, 0))
            m = a.mean(axis=0, keepdims=True)
            cat = concat([a - m, core.broadcast_to(m, a.shape)], axis=1)
            return (cat * cat).sum()

        self._check(f, rng.standard_normal((3, 4)))

    def test_gather_ops(self, rng):
        idx = np.array([2, 0, 2])

        def f(x):
            picked = core.take_rows(x, idx)
            col = core.take_at(picked, np.array([1, 0, 1]))
            return (col * col).sum()

        self._check(f, rng.standard_normal((4, 3)))


class TestConv2d:
    def test_matches_naive_sliding_window(self, rng):
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        for stride, pad in [(1, 1), (2, 1), (1, 0)]:
            out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
            ref = _naive_conv(x, w, b, stride, pad)
            np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_gradients(self, rng):
        w = Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.4)
        b = Tensor(rng.standard_normal(2) * 0.1)
        pick = rng.standard_normal((1, 2, 3, 3))

        def f(x):
            return (conv2d(x, w, b, stride=2, padding=1) * Tensor(pick)).sum()

        assert grad_check(f, Tensor(rng.standard_normal((1, 3, 5, 5)))) < 1e-5

        x0 = Tensor(rng.standard_normal((1, 3, 5, 5)))

        def fw(wt):
            return (conv2d(x0, wt, b, stride=2, padding=1) * Tensor(pick)).sum()

        assert grad_check(fw, Tensor(w.data.copy())) < 1e-5


class TestFusedAttention:
    def test_matches_unfused_reference(self, rng):
        G, T, C, h = 3, 5, 8, 2
        q = rng.standard_normal((G, T, C))
        k = rng.standard_normal((G, T, C))
        v = rng.standard_normal((G, T, C))
        mask = (rng.random((G, T)) > 0.3).astype(float)
        mask[:, 0] = 1.0
        out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), h, mask=mask).data
        ref = _naive_mha(q, k, v, h, mask)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_gradients(self, rng):
        G, T, C, h = 2, 4, 6, 2
        k = Tensor(rng.standard_normal((G, T, C)))
        v = Tensor(rng.standard_normal((G, T, C)))
        pick = rng.standard_normal((G, T, C))

        def f(q):
            return (scaled_dot_attention(q, k, v, h) * Tensor(pick)).sum()

        assert grad_check(f, Tensor(rng.standard_normal((G, T, C)))) < 1e-5


class TestUpsample:
    def test_forward(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = upsample2x(x).data
        np.testing.assert_array_equal(out[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1],
                                                  [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_gradient(self, rng):
        pick = rng.standard_normal((1, 2, 4, 4))

        def f(x):
            return (upsample2x(x) * Tensor(pick)).sum()

        assert grad_check(f, Tensor(rng.standard_normal((1, 2, 2, 2)))) < 1e-6


def _naive_conv(x, w, b, stride, pad):
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for bi in range(B):
        for o in range(Cout):
            for y in range(Ho):
                for xx in range(Wo):
                    patch = xp[bi, :, y * stride:y * stride + kh, xx * stride:xx * stride + kw]
                    out[bi, o, y, xx] = (patch * w[o]).sum() + b[o]
    return out


def _naive_mha(q, k, v, h, mask=None):
    G, T, C = q.shape
    d = C // h
    out = np.zeros_like(q)
    for g in range(G):
        for head in range(h):
            sl = slice(head * d, (head + 1) * d)
            logits = q[g, :, sl] @ k[g, :, sl].T / np.sqrt(d)
            if mask is not None:
                logits = logits + np.where(mask[g] > 0, 0.0, -1e30)[None, :]
            e = np.exp(logits - logits.max(axis=-1, keepdims=True))
            a = e / e.sum(axis=-1, keepdims=True)
            out[g, :, sl] = a @ v[g, :, sl]
    return out
