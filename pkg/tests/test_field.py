import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import enf_oracle, tiny_cloud, tiny_field
from enfield import autodiff as ad
from enfield.autodiff import Tensor, finite_difference_check
from enfield.errors import ConfigError, NumericError, ShapeError
from enfield.field import (
    EnfParams,
    LatentPointCloud,
    attention_weights,
    enf_forward,
    enf_forward_t,
    make_enf_params,
    pair_features,
    recon_loss_t,
    rff_encode,
    value_fn,
)


class TestRffEncode:
    def test_zero_offset_gives_ones_then_zeros(self, rng):
        fourier = rng.standard_normal((6, 2))
        out = rff_encode(np.zeros((3, 4, 2)), fourier)
        assert out.shape == (3, 4, 12)
        assert np.array_equal(out[..., :6], np.ones((3, 4, 6)))
        assert np.array_equal(out[..., 6:], np.zeros((3, 4, 6)))

    def test_pi_projection_hits_minus_one(self):
        fourier = np.array([[1.0, 0.0], [0.0, 1.0]])
        offset = np.array([[[np.pi, 0.0]]])
        out = rff_encode(offset, fourier)
        assert out[0, 0, 0] == pytest.approx(-1.0, abs=1e-12)   # cos(pi)
        assert abs(out[0, 0, 2]) < 1e-12                        # sin(pi)

    def test_entries_bounded(self, rng):
        fourier = rng.normal(0, 3.0, (8, 2))
        out = rff_encode(rng.uniform(-10, 10, (50, 4, 2)), fourier)
        assert np.all(out >= -1.0) and np.all(out <= 1.0)


class TestAttention:
    def test_single_latent_attention_is_one(self, rng):
        params = tiny_field(rng)
        z = tiny_cloud(rng, n_latents=1)
        att = attention_weights(rng.uniform(-1, 1, (6, 2)), z, params)
        assert np.allclose(att, 1.0, atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        params = tiny_field(rng)
        z = tiny_cloud(rng, n_latents=4)
        att = attention_weights(rng.uniform(-2, 2, (10, 2)), z, params)
        assert att.shape == (10, 4, 2)
        assert np.all(att >= 0)
        assert np.allclose(att.sum(axis=1), 1.0, atol=1e-6)

    def test_nearer_latent_wins_when_content_ties(self, rng):
        # Zero query projection makes all content logits equal, leaving only
        # the distance penalty.
        params = tiny_field(rng, sigma=0.7)
        params = EnfParams(
            fourier=params.fourier, w_q=np.zeros_like(params.w_q), w_k=params.w_k,
            w_v=params.w_v, w_s=params.w_s, w_b=params.w_b, w_o=params.w_o,
            sigma=0.7, heads=params.heads)
        feats = np.tile(rng.standard_normal(5), (2, 1))
        z = LatentPointCloud(np.array([[0.0, 0.0], [1.0, 0.0]]), feats)
        att = attention_weights(np.array([[0.2, 0.0]]), z, params)
        assert np.all(att[0, 0] > att[0, 1])

    def test_locality_sharpens_with_sigma(self, rng):
        import dataclasses

        feats = rng.standard_normal((2, 5))
        z = LatentPointCloud(np.array([[-0.5, 0.0], [0.5, 0.0]]), feats)
        query = np.array([[-0.3, 0.1]])
        base = tiny_field(rng, sigma=0.0)
        previous = np.zeros(base.heads)
        for sigma in (0.0, 0.5, 2.0, 8.0, 32.0, 128.0, 512.0):
            params = dataclasses.replace(base, sigma=sigma)
            nearest = attention_weights(query, z, params)[0, 0]
            assert np.all(nearest >= previous - 1e-12)
            previous = nearest
        assert np.all(previous > 1 - 1e-6)


class TestValueFn:
    def test_zero_feature_leaves_only_shift(self, rng):
        params = tiny_field(rng)
        b = rng.standard_normal(params.d_gamma)
        out = value_fn(b, np.zeros(params.feat_dim), params)
        assert np.allclose(out, params.w_b @ b, atol=1e-15)

    def test_zero_encoding_gives_zero(self, rng):
        params = tiny_field(rng)
        out = value_fn(np.zeros(params.d_gamma), rng.standard_normal(params.feat_dim), params)
        assert np.array_equal(out, np.zeros(params.w_v.shape[0]))

    def test_matches_scalar_loop(self, rng):
        params = tiny_field(rng)
        b = rng.standard_normal(params.d_gamma)
        c = rng.standard_normal(params.feat_dim)
        out = value_fn(b, c, params)
        manual = np.array([
            (params.w_v[i] @ c) * (params.w_s[i] @ b) + params.w_b[i] @ b
            for i in range(params.w_v.shape[0])
        ])
        assert np.allclose(out, manual, atol=1e-12)


class TestEnfForward:
    def test_matches_brute_force_oracle(self, rng):
        for _ in range(20):
            params = tiny_field(rng)
            z = tiny_cloud(rng, n_latents=3)
            queries = rng.uniform(-1, 1, (7, 2))
            out = enf_forward(z, queries, params)
            assert np.max(np.abs(out - enf_oracle(z, queries, params))) < 1e-10

    def test_translation_equivariance(self, rng):
        params = tiny_field(rng)
        z = tiny_cloud(rng, n_latents=4)
        queries = rng.uniform(-1, 1, (9, 2))
        base = enf_forward(z, queries, params)
        for _ in range(5):
            delta = rng.uniform(-7, 7, 2)
            shifted = enf_forward(z.shifted(delta), queries + delta, params)
            rel = np.max(np.abs(shifted - base)) / max(np.max(np.abs(base)), 1e-12)
            assert rel < 1e-10

    def test_single_latent_reduces_to_projected_value(self, rng):
        params = tiny_field(rng)
        z = tiny_cloud(rng, n_latents=1)
        queries = rng.uniform(-1, 1, (5, 2))
        out = enf_forward(z, queries, params)
        encoded, _ = pair_features(queries, z.positions, params.fourier)
        manual = np.stack([
            params.w_o @ value_fn(encoded[m, 0], z.features[0], params)
            for m in range(len(queries))
        ])
        assert np.allclose(out, manual, atol=1e-12)

    def test_output_linear_in_w_o(self, rng):
        params = tiny_field(rng)
        z = tiny_cloud(rng)
        queries = rng.uniform(-1, 1, (6, 2))
        base = enf_forward(z, queries, params)
        doubled = EnfParams(
            fourier=params.fourier, w_q=params.w_q, w_k=params.w_k, w_v=params.w_v,
            w_s=params.w_s, w_b=params.w_b, w_o=2.0 * params.w_o,
            sigma=params.sigma, heads=params.heads)
        assert np.array_equal(enf_forward(z, queries, doubled), 2.0 * base)

    def test_feature_dim_mismatch_raises(self, rng):
        params = tiny_field(rng, feat_dim=5)
        z = tiny_cloud(rng, feat_dim=4)
        with pytest.raises(ShapeError):
            enf_forward(z, rng.uniform(-1, 1, (3, 2)), params)

    def test_nonfinite_output_names_query_index(self, rng):
        params = tiny_field(rng)
        bad = EnfParams(
            fourier=params.fourier, w_q=params.w_q, w_k=params.w_k, w_v=params.w_v,
            w_s=params.w_s, w_b=params.w_b, w_o=params.w_o * np.inf,
            sigma=params.sigma, heads=params.heads)
        with pytest.raises(NumericError, match="query index"):
            enf_forward(tiny_cloud(rng), rng.uniform(-1, 1, (4, 2)), bad)

    def test_weight_gradients_pass_fd_check(self, rng):
        params = tiny_field(rng, n_out=2)
        z = tiny_cloud(rng)
        queries = rng.uniform(-1, 1, (5, 2))
        target = rng.standard_normal((5, 2))
        encoded, dist2 = pair_features(queries, z.positions, params.fourier)

        def f(p):
            pred = enf_forward_t(encoded, dist2, Tensor(z.features), p,
                                 heads=params.heads, sigma=params.sigma)
            return recon_loss_t(pred, target)

        report = finite_difference_check(f, params.weights(), h=1e-6, tol=1e-4)
        assert report.passed, str(report)

    def test_feature_gradients_pass_fd_check(self, rng):
        params = tiny_field(rng, n_out=1)
        z = tiny_cloud(rng)
        queries = rng.uniform(-1, 1, (5, 2))
        target = rng.standard_normal((5, 1))
        encoded, dist2 = pair_features(queries, z.positions, params.fourier)
        weights = params.weights()

        def f(p):
            pred = enf_forward_t(encoded, dist2, p["c"], weights,
                                 heads=params.heads, sigma=params.sigma)
            return recon_loss_t(pred, target)

        report = finite_difference_check(f, {"c": z.features}, h=1e-6, tol=1e-6)
        assert report.passed, str(report)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1),
       st.integers(min_value=1, max_value=5),
       st.floats(min_value=-5.0, max_value=5.0, allow_nan=False))
def test_equivariance_property(seed, n_latents, shift):
    rng = np.random.default_rng(seed)
    params = tiny_field(rng, heads=1, d_k=4, d_v=4, d_gamma=6)
    z = tiny_cloud(rng, n_latents=n_latents)
    queries = rng.uniform(-1, 1, (4, 2))
    delta = np.array([shift, -shift / 2])
    base = enf_forward(z, queries, params)
    moved = enf_forward(z.shifted(delta), queries + delta, params)
    assert np.max(np.abs(moved - base)) <= 1e-8 * max(1.0, np.max(np.abs(base)))


class TestValidation:
    def test_head_divisibility_enforced(self, rng):
        with pytest.raises(ConfigError):
            make_enf_params(rng, d=2, feat_dim=3, n_out=1, d_k=5, d_v=6,
                            d_gamma=8, heads=2, sigma=0.1, rff_sigma=1.0)

    def test_odd_gamma_rejected(self, rng):
        with pytest.raises(ConfigError):
            make_enf_params(rng, d=2, feat_dim=3, n_out=1, d_k=4, d_v=6,
                            d_gamma=7, heads=2, sigma=0.1, rff_sigma=1.0)

    def test_negative_sigma_rejected(self, rng):
        with pytest.raises(ConfigError):
            make_enf_params(rng, d=2, feat_dim=3, n_out=1, d_k=4, d_v=6,
                            d_gamma=8, heads=2, sigma=-0.1, rff_sigma=1.0)

    def test_queries_validated(self, rng):
        params = tiny_field(rng)
        z = tiny_cloud(rng)
        with pytest.raises(ShapeError):
            enf_forward(z, np.zeros((0, 2)), params)
        with pytest.raises(NumericError):
            enf_forward(z, np.array([[np.nan, 0.0]]), params)
