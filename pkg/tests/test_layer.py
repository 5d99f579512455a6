import numpy as np
import pytest
from scipy import stats
from scipy.special import erf

from lssl.hippo import StructuredStateMatrix, hippo_system
from lssl.layer import (
    CheckpointError,
    LsslLayer,
    adapt_timescale,
    gelu,
    gelu_grad,
    init_layer,
    init_model,
    layer_forward,
    layer_norm,
    load_checkpoint,
    model_forward,
    save_checkpoint,
    ssm_conv,
    ssm_rec,
)


def tiny_model(**kw):
    args = dict(H=4, N=8, M=2, depth=2, dt_min=1e-2, dt_max=1e-1, seed=3)
    args.update(kw)
    return init_model(2, 3, **args)


class TestActivations:
    def test_gelu_close_to_exact(self):
        x = np.linspace(-6, 6, 241)
        exact = 0.5 * x * (1 + erf(x / np.sqrt(2)))
        np.testing.assert_allclose(gelu(x), exact, atol=1e-3)

    def test_gelu_grad(self):
        x = np.linspace(-4, 4, 81)
        h = 1e-6
        np.testing.assert_allclose(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), atol=1e-8)

    def test_layer_norm_statistics(self, rng):
        x = rng.normal(3.0, 5.0, size=(4, 7, 16))
        y, _ = layer_norm(x, np.ones(16), np.zeros(16))
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, rtol=1e-5)


class TestInit:
    def test_log_uniform_timesteps(self):
        layer = init_layer(4000, 4, dt_min=1e-3, dt_max=1e-1, seed=0)
        lo, hi = np.log(1e-3), np.log(1e-1)
        assert stats.kstest(layer.log_dt, stats.uniform(lo, hi - lo).cdf).pvalue > 0.01
        assert np.all((layer.dt >= 1e-3) & (layer.dt <= 1e-1))

    def test_state_matrix_is_negated_hippo(self):
        layer = init_layer(2, 6, family="legt", structured=False)
        hs = hippo_system("legt", 6)
        np.testing.assert_array_equal(layer.A, -hs.A)
        np.testing.assert_array_equal(layer.B, np.tile(hs.b, (2, 1)))

    def test_structured_by_default(self):
        layer = init_layer(2, 6)
        assert isinstance(layer.A, StructuredStateMatrix)
        np.testing.assert_allclose(layer.dense_A(), -hippo_system("legs", 6).A, atol=1e-12)

    def test_jacobi_falls_back_to_dense(self):
        assert isinstance(init_layer(2, 6, family="jacobi").A, np.ndarray)

    def test_shapes(self):
        layer = init_layer(5, 7, M=3)
        assert (layer.H, layer.M, layer.n_state) == (5, 3, 7)
        assert layer.C.shape == (5, 3, 7) and layer.ff_weight.shape == (5, 15)

    def test_seeded(self):
        a, b = tiny_model(), tiny_model()
        for (k, x), y in zip(a.parameters().items(), b.parameters().values()):
            np.testing.assert_array_equal(x, y, err_msg=k)

    def test_bad_timestep_range(self):
        with pytest.raises(ValueError):
            init_layer(2, 4, dt_min=0.1, dt_max=0.01)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            init_layer(2, 4, mode="train")


class TestParameters:
    def test_fixed_mode_freezes_state(self):
        layer = init_layer(2, 4, mode="fixed", structured=False)
        with pytest.raises(ValueError):
            layer.A[0, 0] = 1.0
        assert "A" not in layer.parameters(trainable_only=True)
        assert "log_dt" not in layer.parameters(trainable_only=True)

    def test_full_mode_trains_state(self):
        layer = init_layer(2, 4, mode="full")
        keys = layer.parameters(trainable_only=True)
        assert {"A.P", "A.D", "A.T.main", "log_dt"} <= set(keys)
        assert "B" not in keys

    def test_update_invalidates_cache(self):
        model = tiny_model(mode="full")
        X = np.random.default_rng(0).normal(size=(2, 10, 2))
        before = model_forward(model, X)
        model.update({"layers.0.log_dt": model.layers[0].log_dt + 0.5})
        after = model_forward(model, X)
        fresh = init_model(2, 3, H=4, N=8, M=2, depth=2, dt_min=1e-2, dt_max=1e-1, seed=3, mode="full")
        fresh.layers[0].log_dt += 0.5
        np.testing.assert_allclose(after, model_forward(fresh, X), atol=1e-12)
        assert not np.allclose(before, after)

    def test_inconsistent_shapes(self):
        layer = init_layer(2, 4)
        with pytest.raises(ValueError):
            LsslLayer(layer.dense_A(), layer.B, layer.C, layer.D[:1], layer.log_dt,
                      layer.ff_weight, layer.ff_bias, layer.norm_gain, layer.norm_bias)


class TestForward:
    @pytest.mark.parametrize("norm", ["post", "pre"])
    @pytest.mark.parametrize("structured", [True, False])
    def test_conv_equals_rec(self, rng, norm, structured):
        model = tiny_model(norm=norm, structured=structured)
        X = rng.normal(size=(3, 40, 2))
        np.testing.assert_allclose(model_forward(model, X, "conv"), model_forward(model, X, "rec"),
                                   atol=1e-10)

    def test_ssm_views(self, rng):
        layer = init_layer(3, 8, M=2, dt_min=1e-2, dt_max=1e-1)
        s = rng.normal(size=(2, 33, 3))
        np.testing.assert_allclose(ssm_conv(layer, s), ssm_rec(layer, s), atol=1e-10)

    def test_causal(self, rng):
        model = tiny_model(pooling="none")
        X = rng.normal(size=(1, 30, 2))
        Y = X.copy()
        Y[0, 20:] += 1.0
        np.testing.assert_allclose(model_forward(model, X)[0, :20], model_forward(model, Y)[0, :20],
                                   atol=1e-12)

    def test_pooling_shapes(self, rng):
        X = rng.normal(size=(5, 12, 2))
        assert model_forward(tiny_model(pooling="mean"), X).shape == (5, 3)
        assert model_forward(tiny_model(pooling="last"), X).shape == (5, 3)
        assert model_forward(tiny_model(pooling="none"), X).shape == (5, 12, 3)

    def test_last_pooling_matches_sequence(self, rng):
        X = rng.normal(size=(2, 9, 2))
        full = model_forward(tiny_model(pooling="none"), X)
        np.testing.assert_allclose(model_forward(tiny_model(pooling="last"), X), full[:, -1], atol=1e-13)

    def test_two_dim_input(self, rng):
        model = init_model(1, 2, H=4, N=4, depth=1)
        X = rng.normal(size=(3, 10))
        np.testing.assert_array_equal(model_forward(model, X), model_forward(model, X[:, :, None]))

    def test_postnorm_output_normalized(self, rng):
        layer = init_layer(6, 4)
        out = layer_forward(layer, rng.normal(size=(2, 8, 6)))
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)

    def test_rejects_wrong_width(self, rng):
        with pytest.raises(ValueError):
            layer_forward(init_layer(6, 4), rng.normal(size=(2, 8, 5)))
        with pytest.raises(ValueError):
            model_forward(tiny_model(), rng.normal(size=(2, 8, 5)), mode="fft")


class TestTimescale:
    def test_scales_timesteps(self):
        model = tiny_model()
        new = adapt_timescale(model, 2.0)
        for a, b in zip(model.layers, new.layers):
            np.testing.assert_allclose(b.dt, 2.0 * a.dt)
        assert new.layers[0].log_dt is not model.layers[0].log_dt

    def test_stays_frozen(self):
        new = adapt_timescale(tiny_model(mode="fixed"), 0.5)
        for layer in new.layers:
            assert not any(a.flags.writeable for a in layer._frozen_arrays())

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            adapt_timescale(tiny_model(), 0.0)


class TestCheckpoint:
    @pytest.mark.parametrize("mode", ["fixed", "full"])
    def test_roundtrip(self, tmp_path, rng, mode):
        model = tiny_model(mode=mode, norm="pre")
        path = tmp_path / "m.lssl"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        X = rng.normal(size=(2, 15, 2))
        np.testing.assert_allclose(model_forward(back, X), model_forward(model, X), atol=1e-12)
        assert back.mode == mode and back.layers[0].norm == "pre"

    def test_header(self, tmp_path):
        path = tmp_path / "m.lssl"
        save_checkpoint(tiny_model(), path)
        raw = path.read_bytes()
        assert raw[:8] == b"LSSL0001"
        assert np.frombuffer(raw[8:40], dtype="<u4").tolist() == [4, 8, 2, 2, 3, 2, 0, 0]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.lssl"
        path.write_bytes(b"NOTLSSL!" + bytes(32))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.lssl"
        save_checkpoint(tiny_model(), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "m.lssl"
        save_checkpoint(tiny_model(), path)
        path.write_bytes(path.read_bytes() + bytes(8))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestInvariants:
    def test_small_architecture_views_agree(self, rng):
        model = init_model(1, 10, H=128, N=128, M=1, depth=6, seed=0)
        X = rng.normal(size=(1, 256, 1))
        diff = np.abs(model_forward(model, X, "conv") - model_forward(model, X, "rec")).max()
        assert diff < 1e-5

    def test_long_input_stays_finite(self, rng):
        layer = init_layer(2, 16, dt_min=0.5, dt_max=1.0, seed=0)
        u = rng.uniform(-1, 1, size=(1, 100_000, 2))
        assert np.all(np.isfinite(layer_forward(layer, u)))

    def test_feature_permutation(self, rng):
        H, M, N = 5, 2, 6
        layer = init_layer(H, N, M=M, seed=4)
        layer.ff_bias[:] = rng.normal(size=H)
        layer.norm_gain[:] = rng.normal(size=H)
        perm = rng.permutation(H)
        cols = (perm[:, None] * M + np.arange(M)).ravel()
        permuted = LsslLayer(layer.A, layer.B[perm], layer.C[perm], layer.D[perm],
                             layer.log_dt[perm], layer.ff_weight[perm][:, cols],
                             layer.ff_bias[perm], layer.norm_gain[perm], layer.norm_bias[perm])
        u = rng.normal(size=(2, 20, H))
        np.testing.assert_allclose(layer_forward(permuted, u[..., perm]),
                                   layer_forward(layer, u)[..., perm], atol=1e-12)
