import numpy as np
import pytest

from graphvrnn import diffmath as dm
from graphvrnn.graph import ScaledLaplacian, build_grid_graph
from graphvrnn.model import (
    GraphVRNN,
    ModelConfig,
    RnnState,
    check_params,
    init_params,
    param_shapes,
)

from conftest import analytic_gradient, finite_difference, perturbed_params, rel_err


def zeros_like(model):
    return {k: np.zeros(s) for k, s in param_shapes(model.config).items()}


def random_ext(rng, count=None):
    shape = () if count is None else (count,)
    e = np.zeros(shape + (26,))
    idx = np.indices(shape) if shape else ()
    e[(*idx, rng.integers(0, 7, shape))] = 1.0
    e[..., 7] = rng.integers(0, 2, shape)
    e[(*idx, 8 + rng.integers(0, 16, shape))] = 1.0
    e[..., 24:] = rng.uniform(-1, 1, shape + (2,))
    return e


@pytest.fixture
def small_model():
    cfg = ModelConfig(n_nodes=9, channels=2, cheb_order=3, graph_features=3, latent_dim=4, hidden_dim=6)
    return GraphVRNN(cfg, ScaledLaplacian.from_graph(build_grid_graph(3, 3)))


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig(n_nodes=64)
        assert (cfg.channels, cfg.ext_dim, cfg.sigma_floor) == (2, 26, 1e-4)
        assert cfg.output_dim == 128

    @pytest.mark.parametrize("bad", [dict(latent_dim=0), dict(hidden_dim=-1), dict(sigma_floor=0.0)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(n_nodes=4, **bad)

    def test_graph_size_must_match(self):
        with pytest.raises(dm.DimensionError):
            GraphVRNN(ModelConfig(n_nodes=5), ScaledLaplacian.from_graph(build_grid_graph(2, 2)))

    def test_init_matches_shapes(self, small_model):
        params = init_params(small_model.config, 0)
        check_params(small_model.config, params)
        dh = small_model.config.hidden_dim
        np.testing.assert_array_equal(params["lstm_b"][dh : 2 * dh], 1.0)

    def test_check_params_rejects_nan(self, small_model):
        params = init_params(small_model.config, 0)
        params["z_w"][0, 0] = np.nan
        with pytest.raises(ValueError):
            check_params(small_model.config, params)


class TestExtractors:
    def test_identity_filter_flattens(self):
        cfg = ModelConfig(n_nodes=4, channels=2, cheb_order=1, graph_features=2)
        model = GraphVRNN(cfg, ScaledLaplacian.from_graph(build_grid_graph(2, 2)))
        params = init_params(cfg, 0)
        params["cheb"] = np.eye(2)[None]
        x = np.arange(8.0).reshape(4, 2)
        np.testing.assert_array_equal(model.extract_x(params, x).value, x.ravel())

    def test_zero_input(self, small_model):
        params = init_params(small_model.config, 1)
        assert not model_output_nonzero(small_model.extract_x(params, np.zeros((9, 2))).value)

    def test_one_hop_support(self):
        cfg = ModelConfig(n_nodes=9, channels=1, cheb_order=2, graph_features=1)
        g = build_grid_graph(3, 3)
        model = GraphVRNN(cfg, ScaledLaplacian.from_graph(g))
        params = init_params(cfg, 2)
        x = np.zeros((9, 1))
        x[0] = 1.0
        y = model.extract_x(params, x).value
        assert np.all(y[g.hops_from(0) > 1] == 0)
        assert np.any(y[g.hops_from(0) == 1] != 0)

    def test_signal_shape_checked(self, small_model):
        with pytest.raises(dm.DimensionError):
            small_model.extract_x(init_params(small_model.config, 0), np.zeros((8, 2)))

    def test_extract_z_zero_weights(self, small_model):
        assert not model_output_nonzero(small_model.extract_z(zeros_like(small_model), np.ones(4)).value)

    def test_extract_z_shape_and_determinism(self, small_model):
        params = init_params(small_model.config, 3)
        a = small_model.extract_z(params, np.full(4, 0.3)).value
        assert a.shape == (6,)
        np.testing.assert_array_equal(a, small_model.extract_z(params, np.full(4, 0.3)).value)
        with pytest.raises(dm.DimensionError):
            small_model.extract_z(params, np.ones(5))

    def test_extract_z_gradient(self, small_model):
        params = perturbed_params(small_model, 4)
        z = np.random.default_rng(4).standard_normal(4)
        sub = {k: params[k] for k in ("z_w", "z_b")}

        def f(p):
            return dm.sum_(dm.square(small_model.extract_z(p, z)))

        fd = finite_difference(lambda p: float(f(p).value), sub)
        an = analytic_gradient(f, sub)
        for k in sub:
            assert rel_err(an[k], fd[k], floor=1e-4).max() < 1e-4

    def test_ext_zero_weights(self, small_model):
        out = small_model.extract_ext(zeros_like(small_model), random_ext(np.random.default_rng(0))).value
        np.testing.assert_array_equal(out, 0.0)

    def test_ext_distinguishes_holiday(self, small_model):
        params = init_params(small_model.config, 5)
        e = random_ext(np.random.default_rng(5))
        e1, e2 = e.copy(), e.copy()
        e1[7], e2[7] = 0.0, 1.0
        a = small_model.extract_ext(params, e1).value
        b = small_model.extract_ext(params, e2).value
        assert a.shape == b.shape == (4,)
        assert np.abs(a - b).max() > 1e-6


def model_output_nonzero(a) -> bool:
    return bool(np.any(a != 0))


class TestDistributions:
    def test_zero_prior(self, small_model):
        prior = small_model.prior_step(zeros_like(small_model), small_model.zero_state())
        np.testing.assert_array_equal(prior.mean.value, 0.0)
        np.testing.assert_allclose(prior.std.value, np.log(2.0) + 1e-4, rtol=1e-15)
        assert prior.std.value[0] == pytest.approx(0.6933, abs=1e-4)

    def test_std_floor_random_weights(self, small_model):
        rng = np.random.default_rng(6)
        for i in range(1000):
            params = {k: 5.0 * rng.standard_normal(v.shape) for k, v in init_params(small_model.config, 0).items()}
            h = np.tanh(rng.standard_normal(6) * 5)
            prior = small_model.prior_step(params, RnnState(h, np.zeros(6)))
            assert prior.std.value.min() >= small_model.config.sigma_floor

    def test_prior_depends_on_state(self, small_model):
        params = init_params(small_model.config, 7)
        a = small_model.prior_step(params, RnnState(np.full(6, 0.5), np.zeros(6))).mean.value
        b = small_model.prior_step(params, RnnState(np.full(6, -0.5), np.zeros(6))).mean.value
        assert np.abs(a - b).max() > 1e-6

    def test_encoder_ignores_ext_when_zeroed(self, small_model):
        params = perturbed_params(small_model, 8)
        for k in ("ext_w1", "ext_b1", "ext_w2", "ext_b2"):
            params[k] = np.zeros_like(params[k])
        rng = np.random.default_rng(8)
        x = rng.random((9, 2))
        s = small_model.zero_state()
        a = small_model.encode_step(params, x, random_ext(rng), s)
        b = small_model.encode_step(params, x, random_ext(rng), s)
        np.testing.assert_array_equal(a.mean.value, b.mean.value)

    @pytest.mark.parametrize("seed", range(5))
    def test_ext_shift_is_additive(self, small_model, seed):
        params = perturbed_params(small_model, seed)
        rng = np.random.default_rng(seed)
        x = rng.random((9, 2))
        s = RnnState(np.tanh(rng.standard_normal(6)), rng.standard_normal(6))
        e1, e2 = random_ext(rng), random_ext(rng)
        q1 = small_model.encode_step(params, x, e1, s)
        q2 = small_model.encode_step(params, x, e2, s)
        shift = small_model.extract_ext(params, e1).value - small_model.extract_ext(params, e2).value
        np.testing.assert_allclose(q1.mean.value - q2.mean.value, shift, atol=1e-14)
        np.testing.assert_array_equal(q1.std.value, q2.std.value)

    def test_encoder_gradient_reaches_ext(self, tiny_model):
        params = perturbed_params(tiny_model, 9)
        rng = np.random.default_rng(9)
        x, e = rng.random((4, 1)), random_ext(rng)
        names = ("enc_w", "enc_mu_b", "ext_w2", "ext_b1")
        sub = {k: params[k] for k in names}

        def f(p):
            full = {**params, **p}
            q = tiny_model.encode_step(full, x, e, tiny_model.zero_state())
            return dm.add(dm.sum_(dm.square(q.mean)), dm.sum_(q.std))

        fd = finite_difference(lambda p: float(f(p).value), sub)
        an = analytic_gradient(f, sub)
        for k in names:
            assert np.abs(an[k]).max() > 0
            assert rel_err(an[k], fd[k], floor=1e-4).max() < 1e-4

    def test_decoder_shapes_and_floor(self, small_model):
        params = perturbed_params(small_model, 10, scale=2.0)
        dec = small_model.decode_step(params, np.ones(4), small_model.zero_state())
        assert dec.mean.shape == dec.std.shape == (18,)
        assert dec.std.value.min() >= 1e-4

    def test_zero_decoder_returns_bias(self, small_model):
        params = zeros_like(small_model)
        params["dec_mu_b"] = np.linspace(-1, 1, 18)
        params["dec_sd_b"] = np.linspace(-3, 3, 18)
        dec = small_model.decode_step(params, np.ones(4), small_model.zero_state())
        np.testing.assert_array_equal(dec.mean.value, params["dec_mu_b"])
        np.testing.assert_allclose(dec.std.value, np.log1p(np.exp(params["dec_sd_b"])) + 1e-4, rtol=1e-14)

    def test_batched_steps_match_single(self, small_model):
        params = perturbed_params(small_model, 11)
        rng = np.random.default_rng(11)
        xs, es = rng.random((3, 9, 2)), random_ext(rng, 3)
        hs = RnnState(np.tanh(rng.standard_normal((3, 6))), rng.standard_normal((3, 6)))
        batched = small_model.encode_step(params, xs, es, hs)
        for b in range(3):
            single = small_model.encode_step(params, xs[b], es[b], RnnState(hs.h[b], hs.c[b]))
            np.testing.assert_allclose(batched.mean.value[b], single.mean.value, atol=1e-14)


class TestRecurrence:
    def test_zero_weights_keep_zero_state(self, small_model):
        s = small_model.recurrence_step(zeros_like(small_model), np.zeros((9, 2)), np.zeros(4), small_model.zero_state())
        np.testing.assert_array_equal(s.h.value, 0.0)

    def test_hidden_bounded(self, small_model):
        rng = np.random.default_rng(12)
        params = perturbed_params(small_model, 12, scale=3.0)
        s = small_model.zero_state()
        for _ in range(50):
            s = small_model.recurrence_step(params, 10 * rng.standard_normal((9, 2)), 10 * rng.standard_normal(4), s)
            assert np.abs(s.h.value).max() <= 1.0
            s = RnnState(s.h.value, s.c.value)

    def test_three_step_gradient(self, tiny_model):
        base = perturbed_params(tiny_model, 13)
        rng = np.random.default_rng(13)
        xs, zs = rng.random((3, 4, 1)), rng.standard_normal((3, 2))
        names = ("lstm_w", "lstm_b", "cheb", "z_w")
        sub = {k: base[k] for k in names}

        def f(p):
            full = {**base, **p}
            s = tiny_model.zero_state()
            for t in range(3):
                s = tiny_model.recurrence_step(full, xs[t], zs[t], s)
            return dm.add(dm.sum_(s.h), dm.sum_(dm.square(s.c)))

        fd = finite_difference(lambda p: float(f(p).value), sub)
        an = analytic_gradient(f, sub)
        for k in names:
            assert rel_err(an[k], fd[k], floor=1e-4).max() < 1e-4


class TestElbo:
    def test_matched_encoder_prior_gives_reconstruction(self, tiny_model):
        # with zero input weights the encoder sees only h, like the prior
        params = perturbed_params(tiny_model, 14)
        nf = tiny_model.config.feature_dim
        params["enc_w"] = np.concatenate([np.zeros((nf, 8)), params["prior_w"]])
        for suffix in ("b", "mu_w", "mu_b", "sd_w", "sd_b"):
            params[f"enc_{suffix}"] = params[f"prior_{suffix}"].copy()
        for k in ("ext_w1", "ext_b1", "ext_w2", "ext_b2"):
            params[k] = np.zeros_like(params[k])
        rng = np.random.default_rng(14)
        x, e, noise = rng.random((4, 1)), random_ext(rng), rng.standard_normal(2)
        s = RnnState(np.tanh(rng.standard_normal(8)), rng.standard_normal(8))
        elbo, _ = tiny_model.step_elbo(params, x, e, s, noise)
        q = tiny_model.encode_step(params, x, e, s)
        dec = tiny_model.decode_step(params, dm.reparameterize(q, noise), s)
        recon = dm.gaussian_log_density(x.ravel(), dec.mean, dec.std).value
        assert elbo.value == recon

    @pytest.mark.parametrize("seed", range(10))
    def test_elbo_below_reconstruction(self, small_model, seed):
        params = perturbed_params(small_model, seed)
        rng = np.random.default_rng(seed)
        x, e, noise = rng.random((9, 2)), random_ext(rng), rng.standard_normal(4)
        s = small_model.zero_state()
        elbo, _ = small_model.step_elbo(params, x, e, s, noise)
        q = small_model.encode_step(params, x, e, s)
        dec = small_model.decode_step(params, dm.reparameterize(q, noise), s)
        recon = dm.gaussian_log_density(x.ravel(), dec.mean, dec.std).value
        assert np.isfinite(elbo.value)
        assert elbo.value <= recon + 1e-12

    def test_single_step_sequence(self, small_model):
        params = init_params(small_model.config, 15)
        rng = np.random.default_rng(15)
        xs, es = rng.random((1, 9, 2)), random_ext(rng, 1)
        noise = np.random.default_rng(99).standard_normal((1, 4))
        step, _ = small_model.step_elbo(params, xs[0], es[0], small_model.zero_state(), noise[0])
        assert small_model.sequence_elbo(params, xs, es, 99).value == pytest.approx(step.value, rel=1e-14)

    def test_sequence_deterministic(self, small_model):
        params = init_params(small_model.config, 16)
        rng = np.random.default_rng(16)
        xs, es = rng.random((6, 9, 2)), random_ext(rng, 6)
        a = small_model.sequence_elbo(params, xs, es, 3).value
        assert a == small_model.sequence_elbo(params, xs, es, 3).value

    def test_empty_sequence(self, small_model):
        with pytest.raises(ValueError):
            small_model.sequence_elbo(init_params(small_model.config, 0), np.zeros((0, 9, 2)), np.zeros((0, 26)), 0)

    @pytest.mark.parametrize("seed", range(10))
    def test_sequence_gradient(self, tiny_model, seed):
        params = perturbed_params(tiny_model, seed)
        rng = np.random.default_rng(100 + seed)
        xs, es = rng.random((3, 4, 1)), random_ext(rng, 3)

        def f(p):
            return tiny_model.sequence_elbo(p, xs, es, seed)

        fd = finite_difference(lambda p: float(f(p).value), params)
        an = analytic_gradient(f, params)
        for k in params:
            assert rel_err(an[k], fd[k], floor=1e-4).max() < 1e-4, k


class TestGenerate:
    def test_reproducible(self, small_model):
        params = init_params(small_model.config, 17)
        a = small_model.generate(params, 5, seed=1)
        assert a.shape == (5, 9, 2)
        np.testing.assert_array_equal(a, small_model.generate(params, 5, seed=1))
        assert not np.array_equal(a, small_model.generate(params, 5, seed=2))

    def test_rejects_zero_steps(self, small_model):
        with pytest.raises(ValueError):
            small_model.generate(init_params(small_model.config, 0), 0, 0)
