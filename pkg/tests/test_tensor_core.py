"""Tensor engine tests: elementwise ops, FFTs, linear maps, convolutions,
and the tape, each against an independent oracle."""

import os
import subprocess
import sys

import numpy as np
import pytest

from mifno import autodiff as ad
from oracles import (
    finite_difference_gradient,
    finite_difference_gradient_complex,
    naive_conv2d,
    naive_conv3d,
    naive_dft,
    relative_error,
)

RNG = np.random.default_rng(1234)


def scalarize(t):
    """Reduce any tensor (real or complex) to a scalar with fixed random
    weights so gradients are generic."""
    rng = np.random.default_rng(99)
    if t.data.dtype == ad.COMPLEX:
        wr = rng.standard_normal(t.shape)
        wi = rng.standard_normal(t.shape)
        return ad.add(ad.sum_all(ad.mul(ad.real_part(t), ad.Tensor(wr))),
                      ad.sum_all(ad.mul(ad.imag_part(t), ad.Tensor(wi))))
    w = rng.standard_normal(t.shape)
    return ad.sum_all(ad.mul(t, ad.Tensor(w)))


def check_gradients(build, arrays, tol=1e-5, step=1e-6):
    """Compare tape gradients of scalarize(build(*tensors)) against central
    finite differences for every input array."""
    tensors = [ad.parameter(a.copy()) for a in arrays]
    loss = scalarize(build(*tensors))
    loss.backward()
    for idx, (t, a) in enumerate(zip(tensors, arrays)):
        def f(x, idx=idx):
            args = [ad.Tensor(arr) for arr in arrays]
            args[idx] = ad.Tensor(x)
            return float(scalarize(build(*args)).data)

        if np.iscomplexobj(a):
            fd = finite_difference_gradient_complex(f, a.copy(), step)
        else:
            fd = finite_difference_gradient(f, a.copy(), step)
        err = relative_error(t.grad, fd)
        assert err < tol, f"input {idx}: rel err {err:.3e}"


class TestElementwise:
    def test_add_identity(self):
        x = ad.Tensor(RNG.standard_normal((3, 4)))
        z = ad.elementwise("add", x, ad.Tensor(np.zeros((3, 4))))
        np.testing.assert_array_equal(z.data, x.data)

    def test_gelu_at_zero(self):
        assert ad.gelu(ad.Tensor(np.zeros(3))).data == pytest.approx(0.0)

    def test_mul_gradient_matches_finite_differences(self):
        a = ad.parameter(np.array(2.0))
        b = ad.parameter(np.array(3.0))
        ad.mul(a, b).backward()
        fd = finite_difference_gradient(lambda x: float(x * 3.0), np.array(2.0), 1e-6)
        assert abs(a.grad - 3.0) < 1e-7
        assert abs(a.grad - fd) < 1e-7
        assert abs(b.grad - 2.0) < 1e-7

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))
        with pytest.raises(ValueError):
            ad.mul(ad.Tensor(np.zeros((2, 2))), ad.Tensor(np.zeros(2)))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            ad.elementwise("pow", ad.Tensor(np.ones(2)), ad.Tensor(np.ones(2)))

    @pytest.mark.parametrize("shape", [(5,), (3, 4), (2, 3, 2)])
    def test_binary_gradients(self, shape):
        a = RNG.standard_normal(shape)
        b = RNG.standard_normal(shape)
        check_gradients(ad.add, [a, b])
        check_gradients(ad.sub, [a, b])
        check_gradients(ad.mul, [a, b])
        check_gradients(lambda t: ad.scale(t, 1.7), [a])

    @pytest.mark.parametrize("shape", [(6,), (4, 5), (2, 2, 3)])
    def test_unary_gradients(self, shape):
        x = RNG.standard_normal(shape)
        check_gradients(ad.gelu, [x])
        # keep relu/abs inputs away from their kinks
        x = np.sign(x) * (np.abs(x) + 0.2)
        check_gradients(ad.relu, [x])
        check_gradients(ad.absolute, [x])

    def test_complex_mul_gradient(self):
        a = RNG.standard_normal(4) + 1j * RNG.standard_normal(4)
        b = RNG.standard_normal(4) + 1j * RNG.standard_normal(4)
        check_gradients(ad.mul, [a, b])


class TestFFT:
    def test_delta_spectrum(self):
        out = ad.fft_axis(ad.Tensor([1.0, 0.0, 0.0, 0.0]), 0, "forward")
        np.testing.assert_allclose(out.data, np.ones(4), atol=1e-14)

    def test_round_trip(self):
        x = RNG.standard_normal(32)
        back = ad.fft_axis(ad.fft_axis(ad.Tensor(x), 0, "forward"), 0, "inverse")
        assert np.max(np.abs(back.data - x)) < 1e-12

    @pytest.mark.parametrize("n", [8, 17, 32, 320])
    def test_matches_naive_dft(self, n):
        x = RNG.standard_normal(n) + 1j * RNG.standard_normal(n)
        got = ad.fft_axis(ad.Tensor(x), 0, "forward").data
        ref = naive_dft(x)
        assert relative_error(got, ref) < 1e-10
        gotinv = ad.fft_axis(ad.Tensor(x), 0, "inverse").data
        refinv = naive_dft(x, inverse=True)
        assert relative_error(gotinv, refinv) < 1e-10

    @pytest.mark.parametrize("n", [8, 17, 32, 320])
    def test_parseval(self, n):
        x = RNG.standard_normal(n) + 1j * RNG.standard_normal(n)
        X = ad.fft_axis(ad.Tensor(x), 0, "forward").data
        lhs = np.sum(np.abs(x) ** 2)
        rhs = np.sum(np.abs(X) ** 2) / n
        assert abs(lhs - rhs) / lhs < 1e-10

    def test_axis_selection_and_errors(self):
        x = RNG.standard_normal((3, 5))
        out = ad.fft_axis(ad.Tensor(x), 1, "forward").data
        np.testing.assert_allclose(out, np.fft.fft(x, axis=1), atol=1e-12)
        with pytest.raises(ValueError):
            ad.fft_axis(ad.Tensor(x), 2, "forward")
        with pytest.raises(TypeError):
            ad.fft_axis(ad.Tensor(x), 0, "inverse")

    @pytest.mark.parametrize("shape,axis", [((8,), 0), ((4, 6), 1), ((3, 5, 4), 2)])
    def test_fft_gradients(self, shape, axis):
        x = RNG.standard_normal(shape)
        check_gradients(lambda t: ad.fft_axis(t, axis, "forward"), [x])
        z = RNG.standard_normal(shape) + 1j * RNG.standard_normal(shape)
        check_gradients(lambda t: ad.fft_axis(t, axis, "forward"), [z])
        check_gradients(lambda t: ad.fft_axis(t, axis, "inverse"), [z])


class TestPointwiseLinear:
    def test_identity(self):
        v = RNG.standard_normal((4, 5, 3))
        out = ad.pointwise_linear(ad.Tensor(v), ad.Tensor(np.eye(3)), ad.Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, v, atol=1e-14)

    def test_commutes_with_position_permutation(self):
        v = RNG.standard_normal((6, 3))
        W = RNG.standard_normal((3, 2))
        b = RNG.standard_normal(2)
        perm = RNG.permutation(6)
        a = ad.pointwise_linear(ad.Tensor(v[perm]), ad.Tensor(W), ad.Tensor(b)).data
        bb = ad.pointwise_linear(ad.Tensor(v), ad.Tensor(W), ad.Tensor(b)).data[perm]
        np.testing.assert_allclose(a, bb, atol=1e-14)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ad.pointwise_linear(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))

    def test_gradient_2x2x3(self):
        v = RNG.standard_normal((2, 2, 3))
        W = RNG.standard_normal((3, 4))
        b = RNG.standard_normal(4)
        check_gradients(ad.pointwise_linear, [v, W, b], tol=1e-6)

    @pytest.mark.parametrize("lead", [(5,), (2, 3), (2, 2, 2)])
    def test_gradients_various_shapes(self, lead):
        v = RNG.standard_normal(lead + (3,))
        W = RNG.standard_normal((3, 2))
        b = RNG.standard_normal(2)
        check_gradients(ad.pointwise_linear, [v, W, b])


class TestConv:
    def test_delta_kernel_identity(self):
        v = RNG.standard_normal((5, 6, 2))
        K = np.zeros((3, 3, 2, 2))
        K[1, 1] = np.eye(2)
        out = ad.conv2d(ad.Tensor(v), ad.Tensor(K))
        np.testing.assert_allclose(out.data, v, atol=1e-14)

    def test_zero_kernel(self):
        v = RNG.standard_normal((4, 4, 3))
        out = ad.conv2d(ad.Tensor(v), ad.Tensor(np.zeros((3, 3, 3, 2))))
        assert np.all(out.data == 0)

    def test_conv2d_matches_nested_loops(self):
        v = RNG.standard_normal((5, 5, 2))
        K = RNG.standard_normal((3, 3, 2, 3))
        got = ad.conv2d(ad.Tensor(v), ad.Tensor(K)).data
        assert np.max(np.abs(got - naive_conv2d(v, K))) < 1e-12

    def test_conv3d_matches_nested_loops(self):
        v = RNG.standard_normal((4, 3, 5, 2))
        K = RNG.standard_normal((3, 3, 3, 2, 2))
        got = ad.conv3d(ad.Tensor(v), ad.Tensor(K)).data
        assert np.max(np.abs(got - naive_conv3d(v, K))) < 1e-12

    def test_batched_matches_unbatched(self):
        v = RNG.standard_normal((2, 4, 4, 3))
        K = RNG.standard_normal((3, 3, 3, 2))
        got = ad.conv2d(ad.Tensor(v), ad.Tensor(K)).data
        for b in range(2):
            np.testing.assert_allclose(got[b], naive_conv2d(v[b], K), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ad.conv2d(ad.Tensor(np.zeros((4, 4, 3))), ad.Tensor(np.zeros((3, 3, 2, 2))))

    @pytest.mark.parametrize("shape", [(4, 5, 2), (3, 3, 1), (2, 6, 3)])
    def test_conv2d_gradients(self, shape):
        v = RNG.standard_normal(shape)
        K = RNG.standard_normal((3, 3, shape[-1], 2))
        check_gradients(ad.conv2d, [v, K])

    @pytest.mark.parametrize("shape", [(3, 4, 3, 2), (2, 2, 2, 1), (4, 2, 3, 2)])
    def test_conv3d_gradients(self, shape):
        v = RNG.standard_normal(shape)
        K = RNG.standard_normal((3, 3, 3, shape[-1], 2))
        check_gradients(ad.conv3d, [v, K])


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.parameter(RNG.standard_normal((3, 4)))
        ad.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares(self):
        x = ad.parameter(np.array([1.0, 2.0]))
        ad.sum_all(ad.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-14)

    def test_composite_chain_matches_finite_differences(self):
        v = RNG.standard_normal((4, 3))
        W1 = RNG.standard_normal((3, 5))
        b1 = RNG.standard_normal(5)
        W2 = RNG.standard_normal((5, 2))
        b2 = RNG.standard_normal(2)

        def chain(v, W1, b1, W2, b2):
            h = ad.gelu(ad.pointwise_linear(v, W1, b1))
            return ad.mean_all(ad.pointwise_linear(h, W2, b2))

        check_gradients(chain, [v, W1, b1, W2, b2], tol=1e-5, step=1e-5)

    def test_nonscalar_backward_rejected(self):
        x = ad.parameter(np.zeros(3))
        with pytest.raises(ValueError):
            ad.scale(x, 2.0).backward()

    def test_shared_subexpression_accumulates(self):
        x = ad.parameter(np.array(3.0))
        z = ad.mul(x, x)
        ad.add(z, z).backward()
        assert float(x.grad) == pytest.approx(12.0)

    def test_untouched_leaf_gets_zero(self):
        x = ad.parameter(np.ones(3), name="x")
        unused = ad.parameter(np.ones(2), name="unused")
        grads = ad.gradients(ad.sum_all(x), {"x": x, "unused": unused})
        np.testing.assert_array_equal(grads["unused"], np.zeros(2))
        np.testing.assert_array_equal(grads["x"], np.ones(3))

    def test_replay_is_deterministic(self):
        v = RNG.standard_normal((4, 3))
        W = RNG.standard_normal((3, 3))

        def run():
            p = ad.parameter(W)
            t = ad.parameter(v)
            loss = ad.sum_all(ad.gelu(ad.pointwise_linear(t, p)))
            loss.backward()
            return p.grad.copy(), t.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])

    def test_tape_visits_each_node_once(self):
        x = ad.parameter(np.array(2.0))
        z = ad.mul(x, x)
        top = ad.add(z, ad.scale(z, 1.0))
        tape = ad.GradientTape(top)
        ids = [id(n) for n in tape.nodes]
        assert len(ids) == len(set(ids))
        order = {nid: i for i, nid in enumerate(ids)}
        for node in tape.nodes:
            for p in node._parents:
                assert order[id(p)] < order[id(node)]


class TestShapePlumbing:
    def test_reshape_round_trip_gradient(self):
        x = RNG.standard_normal((2, 6))
        check_gradients(lambda t: ad.reshape(t, (3, 4)), [x])

    def test_concat_gradient(self):
        a = RNG.standard_normal((2, 3))
        b = RNG.standard_normal((2, 2))
        check_gradients(lambda u, v: ad.concat([u, v], axis=1), [a, b])

    def test_sum_axes(self):
        x = RNG.standard_normal((2, 3, 4))
        out = ad.sum_axes(ad.Tensor(x), (1, 2))
        np.testing.assert_allclose(out.data, x.sum(axis=(1, 2)), atol=1e-14)
        check_gradients(lambda t: ad.sum_axes(t, (0, 2)), [x])


class TestTensorInvariants:
    def test_dtype_coercion(self):
        assert ad.Tensor(np.arange(3)).dtype == np.float64
        assert ad.Tensor(np.arange(3, dtype=np.float32)).dtype == np.float64
        assert ad.Tensor(np.arange(3) * 1j).dtype == np.complex128

    def test_checked_mode_flags_nonfinite(self):
        code = (
            "import numpy as np; from mifno import autodiff as ad;"
            "ad.Tensor(np.array([1.0, np.nan]))"
        )
        env = dict(os.environ, MIFNO_CHECK_FINITE="1")
        proc = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
        assert proc.returncode != 0
        assert "non-finite" in proc.stderr

    def test_checked_mode_off_by_default(self):
        t = ad.Tensor(np.array([1.0, np.inf]))
        assert not np.isfinite(t.data).all()
