"""Neural-operator block tests against independent dense oracles."""
import numpy as np
import pytest

from mifno import autodiff as ad
from mifno import layers as ly

from oracles import (finite_difference_gradient, finite_difference_gradient_complex,
                     fourier_interp_reference, relative_error,
                     spectral_conv_reference)


def rng(seed=0):
    return np.random.default_rng(seed)


def random_complex(r, shape, scale=1.0):
    return scale * (r.normal(size=shape) + 1j * r.normal(size=shape))


class TestSpectralConv1d:
    def test_matches_dense_oracle_same_length(self):
        r = rng(1)
        v = r.normal(size=(8, 5, 2))
        R = random_complex(r, (3, 2, 2))
        got = ad.spectral_conv_1d(ad.Tensor(v), ad.Tensor(R), axis=0).data
        want = spectral_conv_reference(v, R, axis=0)
        assert relative_error(got, want) < 1e-10

    def test_matches_dense_oracle_growth(self):
        r = rng(2)
        v = r.normal(size=(4, 8, 2))
        R = random_complex(r, (3, 2, 3))
        got = ad.spectral_conv_1d(ad.Tensor(v), ad.Tensor(R), axis=1, out_len=12).data
        want = spectral_conv_reference(v, R, axis=1, out_len=12)
        assert got.shape == (4, 12, 3)
        assert relative_error(got, want) < 1e-10

    def test_matches_dense_oracle_shrink(self):
        r = rng(3)
        v = r.normal(size=(8, 2))
        R = random_complex(r, (3, 2, 2))
        got = ad.spectral_conv_1d(ad.Tensor(v), ad.Tensor(R), axis=0, out_len=6).data
        want = spectral_conv_reference(v, R, axis=0, out_len=6)
        assert relative_error(got, want) < 1e-10

    def test_odd_lengths_against_oracle(self):
        r = rng(4)
        v = r.normal(size=(9, 2))
        R = random_complex(r, (4, 2, 2))
        got = ad.spectral_conv_1d(ad.Tensor(v), ad.Tensor(R), axis=0, out_len=7).data
        want = spectral_conv_reference(v, R, axis=0, out_len=7)
        assert relative_error(got, want) < 1e-10

    def test_full_modes_identity_weights_reproduce_input(self):
        r = rng(5)
        n, c = 8, 3
        v = r.normal(size=(n, c))
        R = np.zeros((n // 2 + 1, c, c), dtype=np.complex128)
        for k in range(n // 2 + 1):
            R[k] = np.eye(c)
        got = ad.spectral_conv_1d(ad.Tensor(v), ad.Tensor(R), axis=0).data
        assert np.allclose(got, v, atol=1e-12)

    def test_output_is_band_limited(self):
        r = rng(6)
        v = r.normal(size=(16, 2))
        R = random_complex(r, (3, 2, 2))
        y = ad.spectral_conv_1d(ad.Tensor(v), ad.Tensor(R), axis=0).data
        spec = np.fft.rfft(y, axis=0)
        assert np.max(np.abs(spec[3:])) < 1e-12 * max(1.0, np.max(np.abs(spec)))

    def test_circular_shift_equivariance(self):
        r = rng(7)
        v = r.normal(size=(12, 2))
        R = random_complex(r, (4, 2, 2))
        y = ad.spectral_conv_1d(ad.Tensor(v), ad.Tensor(R), axis=0).data
        ys = ad.spectral_conv_1d(ad.Tensor(np.roll(v, 5, axis=0)),
                                 ad.Tensor(R), axis=0).data
        assert relative_error(ys, np.roll(y, 5, axis=0)) < 1e-9

    def test_too_many_modes_rejected(self):
        r = rng(8)
        v = r.normal(size=(8, 2))
        R = random_complex(r, (6, 2, 2))  # 8-point axis only has 5 rfft bins
        with pytest.raises(ValueError):
            ad.spectral_conv_1d(ad.Tensor(v), ad.Tensor(R), axis=0)
        with pytest.raises(ValueError):
            # legal for the input but not for a 6-point output
            ad.spectral_conv_1d(ad.Tensor(v), ad.Tensor(R[:5]), axis=0, out_len=6)

    def test_gradient_wrt_input(self):
        r = rng(9)
        v0 = r.normal(size=(6, 2))
        R = random_complex(r, (2, 2, 2), scale=0.5)
        probe = r.normal(size=(10, 2))

        def f(x):
            y = ad.spectral_conv_1d(ad.Tensor(x, requires_grad=True),
                                    ad.Tensor(R), axis=0, out_len=10)
            return float(ad.sum_all(ad.mul(y, ad.Tensor(probe))).data.real)

        vt = ad.Tensor(v0, requires_grad=True)
        loss = ad.sum_all(ad.mul(
            ad.spectral_conv_1d(vt, ad.Tensor(R), axis=0, out_len=10),
            ad.Tensor(probe)))
        loss.backward()
        fd = finite_difference_gradient(f, v0)
        assert relative_error(vt.grad, fd) < 1e-6

    def test_gradient_wrt_weights(self):
        r = rng(10)
        v = r.normal(size=(6, 2))
        R0 = random_complex(r, (3, 2, 2), scale=0.5)
        probe = r.normal(size=(6, 2))

        def f(Rz):
            y = ad.spectral_conv_1d(ad.Tensor(v), ad.Tensor(Rz, requires_grad=True),
                                    axis=0)
            return float(ad.sum_all(ad.mul(y, ad.Tensor(probe))).data.real)

        Rt = ad.Tensor(R0, requires_grad=True)
        loss = ad.sum_all(ad.mul(ad.spectral_conv_1d(ad.Tensor(v), Rt, axis=0),
                                 ad.Tensor(probe)))
        loss.backward()
        fd = finite_difference_gradient_complex(f, R0)
        assert relative_error(Rt.grad, fd) < 1e-6


class TestResampleAxis:
    def test_identity(self):
        v = rng(0).normal(size=(5, 8))
        out = ad.resample_axis(ad.Tensor(v), 1, 8).data
        assert np.array_equal(out, v)

    def test_constant_preserved_all_length_pairs(self):
        for n, N in [(8, 16), (16, 8), (7, 13), (12, 5), (6, 9)]:
            v = np.full((n,), 3.25)
            out = ad.resample_axis(ad.Tensor(v), 0, N).data
            assert np.allclose(out, 3.25, atol=1e-12), (n, N)

    def test_mode2_sinusoid_16_to_64_analytic(self):
        t = np.arange(16)
        x = np.cos(2 * np.pi * 2 * t / 16 + 0.3)
        out = ad.resample_axis(ad.Tensor(x), 0, 64).data
        tt = np.arange(64)
        want = np.cos(2 * np.pi * 2 * tt / 64 + 0.3)
        assert relative_error(out, want) < 1e-12

    def test_upsample_matches_trig_interpolation_oracle(self):
        x = rng(11).normal(size=13)
        out = ad.resample_axis(ad.Tensor(x), 0, 29).data
        want = fourier_interp_reference(x, 29)
        assert relative_error(out, want) < 1e-10

    def test_upsample_matches_scipy_resample(self):
        from scipy.signal import resample
        for n, N in [(8, 20), (16, 64), (9, 21)]:
            x = rng(12).normal(size=n)
            out = ad.resample_axis(ad.Tensor(x), 0, N).data
            assert relative_error(out, resample(x, N)) < 1e-10, (n, N)

    def test_downsample_keeps_low_modes(self):
        # a signal with only modes 0..2 survives 16 -> 8 exactly
        t = np.arange(16)
        x = 1.0 + np.cos(2 * np.pi * t / 16) - 0.5 * np.sin(2 * np.pi * 2 * t / 16)
        out = ad.resample_axis(ad.Tensor(x), 0, 8).data
        tt = np.arange(8)
        want = 1.0 + np.cos(2 * np.pi * tt / 8) - 0.5 * np.sin(2 * np.pi * 2 * tt / 8)
        assert relative_error(out, want) < 1e-12

    def test_gradient_up_and_down(self):
        r = rng(13)
        for n, N in [(6, 14), (12, 7)]:
            x0 = r.normal(size=(3, n))
            probe = r.normal(size=(3, N))

            def f(x):
                y = ad.resample_axis(ad.Tensor(x, requires_grad=True), 1, N)
                return float(ad.sum_all(ad.mul(y, ad.Tensor(probe))).data.real)

            xt = ad.Tensor(x0, requires_grad=True)
            loss = ad.sum_all(ad.mul(ad.resample_axis(xt, 1, N), ad.Tensor(probe)))
            loss.backward()
            fd = finite_difference_gradient(f, x0)
            assert relative_error(xt.grad, fd) < 1e-6, (n, N)


class TestSpectralConvFull:
    def test_matches_sum_of_axis_oracles(self):
        r = rng(14)
        v = r.normal(size=(6, 6, 8, 2))
        R1 = random_complex(r, (3, 2, 2))
        R2 = random_complex(r, (3, 2, 2))
        R3 = random_complex(r, (3, 2, 2))
        got = ly.spectral_conv(ad.Tensor(v), ad.Tensor(R1), ad.Tensor(R2),
                               ad.Tensor(R3)).data
        want = (spectral_conv_reference(v, R1, axis=0)
                + spectral_conv_reference(v, R2, axis=1)
                + spectral_conv_reference(v, R3, axis=2))
        assert relative_error(got, want) < 1e-10

    def test_growth_equals_interpolated_same_length_result(self):
        # with no content at/above the axis-3 Nyquist, growing the axis is
        # exactly trigonometric interpolation of the same-length output
        r = rng(15)
        n3 = 8
        t = np.arange(n3)
        base = r.normal(size=(4, 4, 1, 2))
        wave = (1.0 + 0.7 * np.cos(2 * np.pi * t / n3)
                - 0.2 * np.sin(2 * np.pi * 2 * t / n3))
        v = base * wave[None, None, :, None]
        R1 = random_complex(r, (2, 2, 2))
        R2 = random_complex(r, (2, 2, 2))
        R3 = random_complex(r, (3, 2, 2))
        small = ly.spectral_conv(ad.Tensor(v), ad.Tensor(R1), ad.Tensor(R2),
                                 ad.Tensor(R3), out_len3=None).data
        grown = ly.spectral_conv(ad.Tensor(v), ad.Tensor(R1), ad.Tensor(R2),
                                 ad.Tensor(R3), out_len3=16).data
        want = np.apply_along_axis(fourier_interp_reference, 2, small, 16)
        assert relative_error(grown, want) < 1e-9

    def test_batched_matches_unbatched(self):
        r = rng(16)
        v = r.normal(size=(2, 5, 5, 6, 3))
        Rs = [random_complex(r, (2, 3, 3)) for _ in range(3)]
        full = ly.spectral_conv(ad.Tensor(v), *map(ad.Tensor, Rs), out_len3=10).data
        single = ly.spectral_conv(ad.Tensor(v[1]), *map(ad.Tensor, Rs),
                                  out_len3=10).data
        assert np.allclose(full[1], single, atol=1e-12)


class TestEffectiveModes:
    def test_no_clamp_needed_returns_same_tensor(self):
        R = ad.Tensor(random_complex(rng(17), (3, 2, 2)))
        assert ly.effective_modes(R, 8, 8) is R

    def test_clamps_to_available_bins(self):
        R = ad.Tensor(random_complex(rng(18), (9, 2, 2)))
        out = ly.effective_modes(R, 8, 8)
        assert out.shape == (5, 2, 2)
        assert np.array_equal(out.data, R.data[:5])

    def test_clamp_respects_output_length(self):
        R = ad.Tensor(random_complex(rng(19), (5, 2, 2)))
        assert ly.effective_modes(R, 8, 6).shape == (4, 2, 2)

    def test_gradient_zero_padded_into_clamped_rows(self):
        R = ad.Tensor(random_complex(rng(20), (5, 1, 1)), requires_grad=True)
        v = ad.Tensor(rng(21).normal(size=(4, 1)))
        y = ad.spectral_conv_1d(v, ly.effective_modes(R, 4, 4), axis=0)
        ad.sum_all(y).backward()
        assert R.grad.shape == (5, 1, 1)
        assert np.all(R.grad[3:] == 0)
        assert np.any(R.grad[:3] != 0)


class TestFourierLayer:
    def zero_weights(self, c, m=2, hidden=3):
        zc = np.zeros((m, c, c), dtype=np.complex128)
        return {
            "R1": ad.Tensor(zc), "R2": ad.Tensor(zc), "R3": ad.Tensor(zc),
            "W1": ad.Tensor(np.zeros((c, hidden))), "b1": ad.Tensor(np.zeros(hidden)),
            "W2": ad.Tensor(np.zeros((hidden, c))), "b2": ad.Tensor(np.zeros(c)),
        }

    def random_weights(self, r, c, m=2, hidden=3):
        return {
            "R1": ad.Tensor(random_complex(r, (m, c, c), 0.3)),
            "R2": ad.Tensor(random_complex(r, (m, c, c), 0.3)),
            "R3": ad.Tensor(random_complex(r, (m, c, c), 0.3)),
            "W1": ad.Tensor(r.normal(size=(c, hidden)) * 0.3),
            "b1": ad.Tensor(r.normal(size=hidden) * 0.1),
            "W2": ad.Tensor(r.normal(size=(hidden, c)) * 0.3),
            "b2": ad.Tensor(r.normal(size=c) * 0.1),
        }

    def test_zero_weights_identity(self):
        v = rng(22).normal(size=(5, 5, 6, 2))
        out = ly.factorized_fourier_layer(ad.Tensor(v), self.zero_weights(2)).data
        assert np.allclose(out, v, atol=1e-14)

    def test_zero_weights_growth_is_pure_resampling(self):
        v = rng(23).normal(size=(5, 5, 6, 2))
        out = ly.factorized_fourier_layer(ad.Tensor(v), self.zero_weights(2),
                                          out_len3=12).data
        want = ad.resample_axis(ad.Tensor(v), 2, 12).data
        assert np.allclose(out, want, atol=1e-14)

    def test_constant_along_axis3_stays_constant_under_growth(self):
        r = rng(24)
        slab = r.normal(size=(5, 5, 1, 2))
        v = np.repeat(slab, 6, axis=2)
        out = ly.factorized_fourier_layer(ad.Tensor(v), self.random_weights(r, 2),
                                          out_len3=12).data
        assert out.shape == (5, 5, 12, 2)
        spread = np.max(np.abs(out - out[:, :, :1, :]))
        assert spread < 1e-12

    def test_gradient_through_layer_with_growth(self):
        r = rng(25)
        v0 = r.normal(size=(4, 4, 4, 2)) * 0.5
        w = self.random_weights(r, 2)
        probe = r.normal(size=(4, 4, 8, 2))

        def f(x):
            y = ly.factorized_fourier_layer(ad.Tensor(x, requires_grad=True), w,
                                            out_len3=8)
            return float(ad.sum_all(ad.mul(y, ad.Tensor(probe))).data.real)

        vt = ad.Tensor(v0, requires_grad=True)
        loss = ad.sum_all(ad.mul(ly.factorized_fourier_layer(vt, w, out_len3=8),
                                 ad.Tensor(probe)))
        loss.backward()
        fd = finite_difference_gradient(f, v0)
        assert relative_error(vt.grad, fd) < 1e-5


class TestAssemblyBlocks:
    def test_coordinate_grids_cell_centers(self):
        X, Y, Z = ly.coordinate_grids((4, 2, 8))
        assert X.shape == (4, 2, 8)
        assert X[0, 0, 0] == 0.5 / 4
        assert Y[0, 1, 0] == 1.5 / 2
        assert Z[0, 0, 7] == 7.5 / 8
        assert np.all((X > 0) & (X < 1))

    def test_stack_input_channels_layout(self):
        a = rng(26).normal(size=(4, 4, 4))
        s = ly.stack_input_channels(a)
        assert s.shape == (4, 4, 4, 4)
        assert np.array_equal(s[..., 0], a)
        X, Y, Z = ly.coordinate_grids((4, 4, 4))
        assert np.array_equal(s[..., 1], X)
        assert np.array_equal(s[..., 3], Z)

    def test_stack_input_channels_batched_with_extras(self):
        a = rng(27).normal(size=(2, 4, 4, 4))
        s = ly.stack_input_channels(a, extra_cubes=(0.7,))
        assert s.shape == (2, 4, 4, 4, 5)
        assert np.all(s[..., 4] == 0.7)

    def test_uplift_matches_manual_contraction(self):
        r = rng(28)
        a = r.normal(size=(4, 4, 4))
        W = ad.Tensor(r.normal(size=(4, 3)))
        b = ad.Tensor(r.normal(size=3))
        grids = ly.coordinate_grids((4, 4, 4))
        out = ly.uplift(a, grids, W, b).data
        want = ly.stack_input_channels(a) @ W.data + b.data
        assert np.allclose(out, want, atol=1e-13)

    def test_combine_branches_zero_source(self):
        vk = ad.Tensor(rng(29).normal(size=(3, 3, 3, 2)))
        vs = ad.Tensor(np.zeros((3, 3, 3, 2)))
        out = ly.combine_branches(vk, vs).data
        assert out.shape == (3, 3, 3, 6)
        assert np.array_equal(out[..., :2], vk.data)
        assert np.array_equal(out[..., 2:4], vk.data)
        assert np.all(out[..., 4:] == 0)

    def test_combine_branches_all_ones(self):
        ones = ad.Tensor(np.ones((2, 2, 2, 3)))
        out = ly.combine_branches(ones, ones).data
        assert np.all(out[..., :3] == 2) and np.all(out[..., 3:6] == 0)
        assert np.all(out[..., 6:] == 1)

    def test_combine_branches_shape_mismatch(self):
        with pytest.raises(ValueError):
            ly.combine_branches(ad.Tensor(np.zeros((2, 2, 2, 3))),
                                ad.Tensor(np.zeros((2, 2, 2, 4))))

    def test_project_heads_are_independent(self):
        r = rng(30)
        v = ad.Tensor(r.normal(size=(3, 3, 5, 4)))
        w = {}
        for comp in ("E", "N", "Z"):
            w[f"{comp}_W1"] = ad.Tensor(r.normal(size=(4, 6)))
            w[f"{comp}_b1"] = ad.Tensor(r.normal(size=6))
            w[f"{comp}_W2"] = ad.Tensor(r.normal(size=(6, 1)))
            w[f"{comp}_b2"] = ad.Tensor(r.normal(size=1))
        e, n, z = (t.data for t in ly.project(v, w))
        assert e.shape == (3, 3, 5)
        w2 = dict(w)
        w2["E_W1"] = ad.Tensor(np.zeros((4, 6)))
        e2, n2, z2 = (t.data for t in ly.project(v, w2))
        assert not np.allclose(e2, e)
        assert np.array_equal(n2, n) and np.array_equal(z2, z)
