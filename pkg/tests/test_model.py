"""Model assembly tests: shapes, invariances, normalization, checkpoints."""
import numpy as np
import pytest

from mifno import autodiff as ad
from mifno import model as M
from mifno.sources import SourceSpec

from oracles import relative_error


def tiny_config(**kw):
    base = dict(L=3, K=1, d_v=3, modes=(2, 2, 2), resolution=(6, 6, 6),
                out_len=10, q_hidden=5)
    base.update(kw)
    return M.ModelConfig(**base)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestConfig:
    def test_paper_configuration(self):
        cfg = M.paper_config()
        assert (cfg.L, cfg.K, cfg.d_v) == (16, 4, 16)
        assert cfg.modes == (16, 16, 32)
        assert cfg.resolution == (32, 32, 32) and cfg.out_len == 320

    def test_rejects_bad_branch_split(self):
        with pytest.raises(ValueError):
            M.ModelConfig(L=4, K=4)
        with pytest.raises(ValueError):
            M.ModelConfig(L=4, K=0)

    def test_rejects_plain_variant_mismatch(self):
        with pytest.raises(ValueError):
            M.ModelConfig(baseline="mifno", source_mode="none")
        with pytest.raises(ValueError):
            M.ModelConfig(baseline="nope")

    def test_json_round_trip(self):
        cfg = tiny_config(baseline="ffno_cubes", source_mode="moment")
        assert M.ModelConfig.from_json(cfg.to_json()) == cfg

    def test_growth_schedule_paper(self):
        sched = M.growth_schedule(M.paper_config())
        assert sched[:4] == [None] * 4
        assert sched[4:] == [56, 80, 104, 128, 152, 176, 200, 224, 248, 272, 296, 320]

    def test_growth_schedule_desk(self):
        sched = M.growth_schedule(M.desk_config())
        assert sched == [None, None, 24, 32, 40, 48, 56, 64]

    def test_growth_schedule_lands_exactly_on_out_len(self):
        cfg = tiny_config(L=4, K=2, out_len=13)
        sched = M.growth_schedule(cfg)
        assert sched[-1] == 13
        assert all(s % 2 == 0 for s in sched[2:-1])

    def test_source_branch_modes_match_paper_example(self):
        # doubled counts give the documented 32 x 32 x 32 x 1 intermediate
        assert M.source_branch_modes(M.paper_config()) == (16, 16, 16)


class TestWeights:
    def test_input_channel_counts(self):
        assert M.input_channels(tiny_config()) == 4
        assert M.input_channels(tiny_config(baseline="ffno_plain",
                                            source_mode="none")) == 4
        assert M.input_channels(tiny_config(baseline="ffno_binary")) == 5
        assert M.input_channels(tiny_config(baseline="ffno_cubes")) == 10

    def test_count_parameters_dense_example(self):
        w = {"fc/W": ad.parameter(np.zeros((3, 128))),
             "fc/b": ad.parameter(np.zeros(128))}
        assert M.count_parameters(w) == 3 * 128 + 128

    def test_count_parameters_empty(self):
        assert M.count_parameters({}) == 0

    def test_complex_arrays_count_twice(self):
        w = {"s/R": ad.parameter(np.zeros((4, 2, 2), dtype=np.complex128))}
        assert M.count_parameters(w) == 32

    def test_resolution_independence_of_parameter_count(self):
        a = M.paper_config()
        b = M.paper_config(resolution=(48, 48, 32))
        na = M.count_parameters(M.init_weights(a, 0))
        nb = M.count_parameters(M.init_weights(b, 0))
        assert na == nb

    def test_paper_parameter_count_logged(self):
        total = M.count_parameters(M.init_weights(M.paper_config(), 0))
        print(f"paper-configuration parameters: {total/1e6:.2f}M (published 3.40M)")
        assert 2e6 < total < 6e6

    def test_init_deterministic(self):
        cfg = tiny_config()
        w1 = M.init_weights(cfg, 42)
        w2 = M.init_weights(cfg, 42)
        assert all(np.array_equal(w1[k].data, w2[k].data) for k in w1)
        w3 = M.init_weights(cfg, 43)
        assert any(not np.array_equal(w1[k].data, w3[k].data) for k in w1)

    def test_spectral_weights_complex_dense_real(self):
        w = M.init_weights(tiny_config(), 0)
        assert np.iscomplexobj(w["layer00/R1"].data)
        assert not np.iscomplexobj(w["uplift/W"].data)
        assert np.all(w["uplift/b"].data == 0)


class TestNormalization:
    def spec(self, shape=(4, 4, 4)):
        mean = np.full(shape, 2000.0)
        return M.NormalizationSpec(mean_geology=mean, sigma=250.0,
                                   domain_length=9600.0)

    def test_mean_geology_maps_to_zero(self):
        spec = self.spec()
        out = M.normalize_geology(spec.mean_geology.copy(), spec)
        assert np.all(out == 0)

    def test_two_sigma_maps_to_half(self):
        spec = self.spec()
        a = spec.mean_geology + 2 * spec.sigma
        assert np.allclose(M.normalize_geology(a, spec), 0.5)

    def test_round_trip(self):
        spec = self.spec()
        a = rng(1).normal(2000.0, 300.0, size=(4, 4, 4))
        back = M.denormalize_geology(M.normalize_geology(a, spec), spec)
        assert relative_error(back, a) < 1e-12

    def test_from_training_set_statistics(self):
        g = rng(2).normal(2500.0, 400.0, size=(32, 6, 6, 6))
        spec = M.NormalizationSpec.from_training_set(g, 9600.0)
        assert spec.mean_geology.shape == (6, 6, 6)
        z = M.normalize_geology(g, spec)
        assert abs(float(np.std(z)) - 0.25) < 1e-12
        assert np.percentile(np.abs(z), 99) < 1.0

    def test_output_norm_factor_example(self):
        c = M.output_norm_factor(2000.0, -2400.0, 9600.0)
        assert relative_error(c, 2000.0 * 2400.0 * np.sqrt(2.0)) < 1e-12

    def test_output_norm_factor_zero_depth(self):
        assert M.output_norm_factor(1500.0, 0.0, 9600.0) == 1500.0 * 2400.0

    def test_output_norm_factor_monotone_in_depth(self):
        cs = [M.output_norm_factor(2000.0, -z, 9600.0) for z in (0, 100, 2000, 9000)]
        assert all(a < b for a, b in zip(cs, cs[1:]))

    def test_output_norm_factor_rejects_bad_velocity(self):
        with pytest.raises(ValueError):
            M.output_norm_factor(0.0, -100.0, 9600.0)

    def test_wavefield_normalization_round_trip(self):
        u = rng(3).normal(size=(4, 4, 10, 3))
        c = M.output_norm_factor(2200.0, -3000.0, 9600.0)
        assert np.array_equal((u / c) * c, u) or relative_error((u / c) * c, u) < 1e-15

    def test_nearest_cell_tie_breaks_low(self):
        # position exactly between cell centers 0 and 1 on an 8-cell axis
        dx = 9600.0 / 8
        idx = M.nearest_cell((dx, dx, -dx), 9600.0, (8, 8, 8))
        assert idx == (0, 0, 0)
        idx2 = M.nearest_cell((1.4 * dx, 0.0, -1.4 * dx), 9600.0, (8, 8, 8))
        assert idx2 == (1, 0, 1)

    def test_nearest_cell_clamps_out_of_range(self):
        assert M.nearest_cell((-50.0, 99999.0, -50.0), 9600.0, (8, 8, 8)) == (0, 7, 0)


class TestSourceBranch:
    def test_output_shape_and_resolution_independence(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 1)
        sv = np.array([0.5, 0.5, 0.5, 0.2, 0.6, 0.9])
        out = M.source_branch(sv, w, cfg)
        assert out.shape == (6, 6, 6, 3)
        out2 = M.source_branch(sv, w, cfg, target_resolution=(9, 7, 6))
        assert out2.shape == (9, 7, 6, 3)

    def test_all_zero_weights_give_zero_field(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 1)
        for k, t in w.items():
            if k.startswith("source/"):
                t.data[...] = 0
        out = M.source_branch(np.full(6, 0.4), w, cfg)
        assert np.all(out.data == 0)

    def test_batched_matches_single(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 2)
        sv = rng(4).uniform(0.1, 0.9, size=(3, 6))
        batch = M.source_branch(sv, w, cfg).data
        single = M.source_branch(sv[2], w, cfg).data
        assert np.allclose(batch[2], single, atol=1e-12)

    def test_vector_length_validated(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 1)
        with pytest.raises(ValueError):
            M.source_branch(np.zeros(5), w, cfg)


class TestForward:
    def test_output_shape(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 3)
        a = rng(5).normal(size=(6, 6, 6)) * 0.2
        out = M.mifno_forward(a, np.full(6, 0.5), w, cfg)
        assert out.shape == (6, 6, 10, 3)

    def test_accepts_source_spec(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 3)
        a = rng(5).normal(size=(6, 6, 6)) * 0.2
        s = SourceSpec(position=(4800.0, 4800.0, -4800.0),
                       angles=(120.0, 45.0, 10.0))
        out = M.mifno_forward(a, s, w, cfg)
        assert out.shape == (6, 6, 10, 3)

    def test_deterministic(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 3)
        a = rng(6).normal(size=(6, 6, 6)) * 0.2
        sv = np.full(6, 0.5)
        o1 = M.mifno_forward(a, sv, w, cfg).data
        o2 = M.mifno_forward(a, sv, w, cfg).data
        assert np.array_equal(o1, o2)

    def test_batched_matches_unbatched(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 4)
        r = rng(7)
        a = r.normal(size=(2, 6, 6, 6)) * 0.2
        sv = r.uniform(0.2, 0.8, size=(2, 6))
        batch = M.mifno_forward(a, sv, w, cfg).data
        for i in range(2):
            single = M.mifno_forward(a[i], sv[i], w, cfg).data
            assert np.allclose(batch[i], single, atol=1e-12), i

    def test_resolution_change_keeps_weights(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 4)
        a = rng(8).normal(size=(9, 9, 6)) * 0.2
        out = M.mifno_forward(a, np.full(6, 0.5), w, cfg)
        assert out.shape == (9, 9, 10, 3)

    def test_depth_axis_mismatch_rejected(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 4)
        a = rng(9).normal(size=(6, 6, 8))
        with pytest.raises(ValueError):
            M.mifno_forward(a, np.full(6, 0.5), w, cfg)

    def test_source_sensitivity(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 10)
        a = rng(10).normal(size=(6, 6, 6)) * 0.2
        s1 = np.array([0.5, 0.5, 0.5, 0.2, 0.6, 0.9])
        s2 = s1.copy()
        s2[0] += 0.1
        o1 = M.mifno_forward(a, s1, w, cfg).data
        o2 = M.mifno_forward(a, s2, w, cfg).data
        assert not np.allclose(o1, o2)

    def test_wrong_entry_point_rejected(self):
        cfg = tiny_config()
        w = M.init_weights(cfg, 1)
        a = np.zeros((6, 6, 6))
        with pytest.raises(ValueError):
            M.ffno_baseline_forward(a, np.full(6, 0.5), w, cfg)
        cfgb = tiny_config(baseline="ffno_plain", source_mode="none")
        wb = M.init_weights(cfgb, 1)
        with pytest.raises(ValueError):
            M.mifno_forward(a, None, wb, cfgb)


class TestBaselines:
    def test_plain_is_source_invariant(self):
        cfg = tiny_config(baseline="ffno_plain", source_mode="none")
        w = M.init_weights(cfg, 11)
        a = rng(11).normal(size=(6, 6, 6)) * 0.2
        o1 = M.ffno_baseline_forward(a, None, w, cfg).data
        o2 = M.ffno_baseline_forward(a, np.zeros(0), w, cfg).data
        assert np.array_equal(o1, o2)

    def test_binary_cube_sums_to_one(self):
        cube = M.one_hot_source_cube(np.array([0.5, 0.25, 0.8]), (8, 8, 8))
        assert cube.sum() == 1.0
        assert cube[3, 1, 6] == 1.0

    def test_binary_cube_tie_breaks_toward_lower_index(self):
        # 0.25 on an 8-cell axis sits exactly between cells 1 and 2
        cube = M.one_hot_source_cube(np.array([0.25, 0.1, 0.9]), (8, 8, 8))
        assert cube[1, 0, 7] == 1.0

    def test_binary_and_cubes_are_source_sensitive(self):
        r = rng(12)
        a = r.normal(size=(6, 6, 6)) * 0.2
        for baseline in ("ffno_binary", "ffno_cubes"):
            cfg = tiny_config(baseline=baseline)
            w = M.init_weights(cfg, 13)
            s1 = np.array([0.2, 0.5, 0.5, 0.2, 0.6, 0.9])
            s2 = s1.copy()
            s2[0] = 0.9
            o1 = M.ffno_baseline_forward(a, s1, w, cfg).data
            o2 = M.ffno_baseline_forward(a, s2, w, cfg).data
            assert not np.allclose(o1, o2), baseline

    def test_baseline_shapes(self):
        a = rng(13).normal(size=(6, 6, 6)) * 0.2
        sv = np.array([0.2, 0.5, 0.5, 0.2, 0.6, 0.9])
        for baseline in ("ffno_plain", "ffno_binary", "ffno_cubes"):
            cfg = tiny_config(baseline=baseline,
                              source_mode="none" if baseline == "ffno_plain"
                              else "angles")
            w = M.init_weights(cfg, 14)
            out = M.ffno_baseline_forward(a, sv, w, cfg)
            assert out.shape == (6, 6, 10, 3), baseline


class TestEndToEndGradients:
    def test_loss_gradients_match_finite_differences(self):
        cfg = M.ModelConfig(L=3, K=1, d_v=3, modes=(2, 2, 2), resolution=(8, 8, 8),
                            out_len=8, q_hidden=5)
        w = M.init_weights(cfg, 7)
        r = rng(14)
        a = r.normal(size=(8, 8, 8)) * 0.2
        sv = r.uniform(0.2, 0.8, size=6)
        tgt = r.normal(size=(8, 8, 8, 3))

        def loss_value():
            out = M.mifno_forward(a, sv, w, cfg)
            d = ad.sub(out, ad.Tensor(tgt))
            return float(ad.mean_all(ad.mul(d, d)).data.real)

        out = M.mifno_forward(a, sv, w, cfg)
        d = ad.sub(out, ad.Tensor(tgt))
        ad.mean_all(ad.mul(d, d)).backward()

        names = sorted(w)
        eps = 1e-5
        failures = []
        for _ in range(20):
            nm = names[r.integers(len(names))]
            t = w[nm]
            idx = tuple(r.integers(s) for s in t.data.shape)
            orig = t.data[idx]
            if np.iscomplexobj(t.data):
                t.data[idx] = orig + eps
                lp = loss_value()
                t.data[idx] = orig - eps
                lm = loss_value()
                g_fd = (lp - lm) / (2 * eps)
                t.data[idx] = orig + 1j * eps
                lp = loss_value()
                t.data[idx] = orig - 1j * eps
                lm = loss_value()
                g_fd = g_fd + 1j * (lp - lm) / (2 * eps)
            else:
                t.data[idx] = orig + eps
                lp = loss_value()
                t.data[idx] = orig - eps
                lm = loss_value()
                g_fd = (lp - lm) / (2 * eps)
            t.data[idx] = orig
            g_an = t.grad[idx]
            denom = max(abs(g_fd), abs(g_an), 1e-8)
            if abs(g_an - g_fd) / denom > 1e-4:
                failures.append((nm, idx, g_an, g_fd))
        assert not failures, failures


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config()
        w = M.init_weights(cfg, 21)
        norm = M.NormalizationSpec(mean_geology=rng(15).normal(size=(6, 6, 6)),
                                   sigma=123.0, domain_length=9600.0)
        path = tmp_path / "model.mfno"
        M.save_checkpoint(path, w, cfg, norm)
        w2, cfg2, norm2 = M.load_checkpoint(path)
        assert cfg2 == cfg
        assert set(w2) == set(w)
        assert all(np.array_equal(w[k].data, w2[k].data) for k in w)
        assert norm2.sigma == 123.0
        assert np.array_equal(norm2.mean_geology, norm.mean_geology)
        assert all(t.requires_grad for t in w2.values())

    def test_missing_parameter_detected(self, tmp_path):
        from mifno import container
        cfg = tiny_config()
        w = M.init_weights(cfg, 21)
        path = tmp_path / "model.mfno"
        M.save_checkpoint(path, w, cfg)
        data = container.read_container(path)
        del data["param/uplift/W"]
        container.write_container(path, data)
        with pytest.raises(container.ContainerError):
            M.load_checkpoint(path)

    def test_shape_mismatch_detected(self, tmp_path):
        from mifno import container
        cfg = tiny_config()
        w = M.init_weights(cfg, 21)
        path = tmp_path / "model.mfno"
        M.save_checkpoint(path, w, cfg)
        data = container.read_container(path)
        data["param/uplift/W"] = np.zeros((2, 2))
        container.write_container(path, data)
        with pytest.raises(container.ContainerError):
            M.load_checkpoint(path)
