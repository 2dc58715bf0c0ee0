import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stormfield.errors import UnknownStyleError, ValidationError
from stormfield.kernels import (AdapterStack, AttentionBatch, adapter_forward, adapter_register_style,
                                attention_weights, scaled_dot_attention, self_attn, temporal_attn,
                                temporal_neighbors, tv_attn, view_attn)


def naive_attention(Q, K, V):
    """Loop-and-math.exp attention; shares no code with the vectorized kernel."""
    Q, K, V = (np.asarray(a, float).tolist() for a in (Q, K, V))
    d = len(Q[0])
    out = []
    for q in Q:
        logits = [sum(a * b for a, b in zip(q, k)) / math.sqrt(d) for k in K]
        top = max(logits)
        w = [math.exp(s - top) for s in logits]
        z = math.fsum(w)
        out.append([math.fsum(wi * v[j] for wi, v in zip(w, V)) / z for j in range(len(V[0]))])
    return np.array(out)


def make_batch(rng, n_frames=3, views=(0, 1, 2), n=5, d=4, center=1, lam=0.5, proj=False):
    grids = {(f, v): rng.normal(size=(n, d)) for f in range(n_frames) for v in views}
    kw = {}
    if proj:
        kw = {k: rng.normal(size=(d, d)) for k in ("wq", "wk", "wv")}
    return AttentionBatch(grids, center_view=center, lam=lam, **kw)


class TestScaledDotAttention:
    def test_single_key_returns_value(self, rng):
        Q = rng.normal(size=(4, 3))
        V = rng.normal(size=(1, 5))
        out = scaled_dot_attention(Q, rng.normal(size=(1, 3)), V)
        np.testing.assert_array_equal(out, np.repeat(V, 4, axis=0))

    def test_hand_case(self):
        # q.k / sqrt(2): logits 1/sqrt2 and 0
        out = scaled_dot_attention([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [[1.0], [0.0]])
        e = math.exp(1 / math.sqrt(2))
        assert out[0, 0] == pytest.approx(e / (e + 1), abs=1e-15)

    def test_equal_keys_average_values(self, rng):
        K = np.tile(rng.normal(size=(1, 3)), (2, 1))
        out = scaled_dot_attention(rng.normal(size=(2, 3)), K, [[0.0], [2.0]])
        np.testing.assert_allclose(out, 1.0, atol=1e-15)

    def test_matches_naive(self, rng):
        for _ in range(50):
            n, m, d, dv = rng.integers(1, 7, size=4)
            Q, K, V = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=(m, dv))
            np.testing.assert_allclose(scaled_dot_attention(Q, K, V), naive_attention(Q, K, V), atol=1e-12)

    def test_large_logits_stable(self):
        out = scaled_dot_attention([[1000.0]], [[1000.0], [-1000.0]], [[1.0], [0.0]])
        assert np.isfinite(out).all() and out[0, 0] == 1.0

    def test_weights_row_stochastic(self, rng):
        w = attention_weights(rng.normal(size=(6, 3)), rng.normal(size=(9, 3)))
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert w.min() >= 0

    def test_shape_errors(self, rng):
        with pytest.raises(ValidationError):
            scaled_dot_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 1)))
        with pytest.raises(ValidationError):
            scaled_dot_attention(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 1)))
        with pytest.raises(ValidationError):
            scaled_dot_attention(np.ones((0, 3)), np.ones((2, 3)), np.ones((2, 1)))
        with pytest.raises(ValidationError):
            scaled_dot_attention([[np.nan]], [[1.0]], [[1.0]])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-50, 50))
def test_softmax_shift_invariance(seed, shift):
    # adding a constant along a shared direction of every key shifts all logits equally
    rng = np.random.default_rng(seed)
    Q = np.ones((3, 2))
    Q[:, 1] = 0
    K = rng.normal(size=(4, 2))
    K2 = K.copy()
    K2[:, 1] += shift
    V = rng.normal(size=(4, 2))
    np.testing.assert_allclose(scaled_dot_attention(Q, K, V), scaled_dot_attention(Q, K2, V), atol=1e-12)


class TestBatchAttention:
    def test_self_attn_oracle(self, rng):
        b = make_batch(rng, proj=True)
        X = b.tokens(1, 2)
        np.testing.assert_allclose(self_attn(b, 1, 2), naive_attention(X @ b.wq, X @ b.wk, X @ b.wv), atol=1e-12)

    def test_view_attn_uses_center(self, rng):
        b = make_batch(rng, proj=True)
        X, C = b.tokens(2, 0), b.tokens(2, 1)
        np.testing.assert_allclose(view_attn(b, 2, 0), naive_attention(X @ b.wq, C @ b.wk, C @ b.wv), atol=1e-12)

    def test_view_attn_rejects_center(self, rng):
        with pytest.raises(ValidationError, match="side views"):
            view_attn(make_batch(rng), 0, 1)

    def test_temporal_interior_concatenates_neighbors(self, rng):
        b = make_batch(rng, proj=True)
        X = b.tokens(1, 0)
        ctx = np.vstack([b.tokens(0, 0), b.tokens(2, 0)])
        np.testing.assert_allclose(temporal_attn(b, 1, 0), naive_attention(X @ b.wq, ctx @ b.wk, ctx @ b.wv),
                                   atol=1e-12)

    def test_temporal_boundaries_clip(self, rng):
        b = make_batch(rng)
        assert temporal_neighbors(b, 0, 0) == [1]
        assert temporal_neighbors(b, 2, 0) == [1]
        np.testing.assert_allclose(temporal_attn(b, 0, 2),
                                   naive_attention(b.tokens(0, 2), b.tokens(1, 2), b.tokens(1, 2)), atol=1e-12)

    def test_temporal_single_frame_fails(self, rng):
        with pytest.raises(ValidationError, match="no temporal neighbors"):
            temporal_attn(make_batch(rng, n_frames=1), 0, 0)

    def test_tv_combination(self, rng):
        b = make_batch(rng, lam=0.3, proj=True)
        expected = 0.3 * self_attn(b, 1, 2) + 0.7 * (view_attn(b, 1, 2) + temporal_attn(b, 1, 2))
        np.testing.assert_allclose(tv_attn(b, 1, 2), expected, atol=1e-15)

    def test_tv_center_view_uses_self_for_view_term(self, rng):
        b = make_batch(rng, lam=0.25)
        s = self_attn(b, 1, 1)
        np.testing.assert_allclose(tv_attn(b, 1, 1), 0.25 * s + 0.75 * (s + temporal_attn(b, 1, 1)), atol=1e-15)

    def test_lambda_one_is_exactly_self(self, rng):
        b = make_batch(rng, lam=1.0, proj=True)
        for f in range(3):
            for v in range(3):
                assert tv_attn(b, f, v).tobytes() == self_attn(b, f, v).tobytes()

    def test_lambda_zero_drops_self(self, rng):
        b = make_batch(rng, lam=0.0)
        np.testing.assert_allclose(tv_attn(b, 1, 0), view_attn(b, 1, 0) + temporal_attn(b, 1, 0), atol=1e-15)

    def test_value_projection_scales_output(self, rng):
        b = make_batch(rng)
        b2 = AttentionBatch(b.grids, center_view=1, wv=3.0 * np.eye(4))
        np.testing.assert_allclose(tv_attn(b2, 1, 0), 3.0 * tv_attn(b, 1, 0), rtol=1e-12)

    def test_lambda_range(self, rng):
        with pytest.raises(ValidationError):
            make_batch(rng, lam=1.5)

    def test_missing_center_grid(self, rng):
        grids = {(0, 0): rng.normal(size=(3, 2)), (1, 1): rng.normal(size=(3, 2))}
        with pytest.raises(ValidationError, match="frame 0"):
            AttentionBatch(grids, center_view=1)

    def test_mismatched_grid_shapes(self, rng):
        grids = {(0, 1): rng.normal(size=(3, 2)), (0, 0): rng.normal(size=(4, 2))}
        with pytest.raises(ValidationError, match="share"):
            AttentionBatch(grids, center_view=1)

    def test_bad_projection_shape(self, rng):
        with pytest.raises(ValidationError, match="wk"):
            AttentionBatch({(0, 0): np.ones((2, 3))}, center_view=0, wk=np.eye(2))

    def test_unknown_grid(self, rng):
        with pytest.raises(ValidationError, match="frame 9"):
            self_attn(make_batch(rng), 9, 0)


class TestAdapter:
    def test_hand_case(self):
        s = adapter_register_style(AdapterStack(np.eye(2)), "rain", [[1.0], [0.0]], [[1.0, 0.0]])
        np.testing.assert_array_equal(adapter_forward(s, "rain", [3.0, 4.0]), [6.0, 4.0])

    def test_null_adapter_is_base(self, rng):
        W0 = rng.normal(size=(5, 4))
        s = adapter_register_style(AdapterStack(W0), "none", np.zeros((5, 2)), np.zeros((2, 4)))
        x = rng.normal(size=4)
        np.testing.assert_array_equal(adapter_forward(s, "none", x), W0 @ x)

    def test_matches_materialized_weight(self, rng):
        W0 = rng.normal(size=(6, 5))
        A, B = rng.normal(size=(6, 2)), rng.normal(size=(2, 5))
        s = adapter_register_style(AdapterStack(W0), "s", A, B)
        X = rng.normal(size=(7, 5))
        np.testing.assert_allclose(adapter_forward(s, "s", X), X @ (W0 + A @ B).T, atol=1e-12)
        np.testing.assert_allclose(adapter_forward(s, "s", X[0]), (W0 + A @ B) @ X[0], atol=1e-12)

    def test_update_rank(self, rng):
        s = adapter_register_style(AdapterStack(np.zeros((8, 6))), "s", rng.normal(size=(8, 3)),
                                   rng.normal(size=(3, 6)))
        sv = np.linalg.svd(s.delta("s"), compute_uv=False)
        assert np.sum(sv > 1e-10 * sv[0]) <= 3

    def test_styles_are_isolated(self, rng):
        W0 = rng.normal(size=(4, 4))
        s = AdapterStack(W0)
        s = adapter_register_style(s, "snow", rng.normal(size=(4, 2)), rng.normal(size=(2, 4)))
        x = rng.normal(size=4)
        before = adapter_forward(s, "snow", x)
        s2 = adapter_register_style(s, "fog", rng.normal(size=(4, 2)), rng.normal(size=(2, 4)))
        assert adapter_forward(s2, "snow", x).tobytes() == before.tobytes()
        assert "fog" not in s.styles

    def test_three_styles_share_one_base(self, rng):
        W0 = rng.normal(size=(4, 3))
        s = AdapterStack(W0)
        base = s.base
        for name in ("snow", "rain", "fog"):
            s = adapter_register_style(s, name, rng.normal(size=(4, 1)), rng.normal(size=(1, 3)))
            assert s.base is base
        assert len(s.styles) == 3
        assert not s.base.flags.writeable
        W0[0, 0] += 1
        assert s.base[0, 0] != W0[0, 0]

    def test_factors_are_copied(self, rng):
        A, B = rng.normal(size=(3, 1)), rng.normal(size=(1, 3))
        s = adapter_register_style(AdapterStack(np.eye(3)), "s", A, B)
        x = np.ones(3)
        before = adapter_forward(s, "s", x)
        A[:] = 0
        assert adapter_forward(s, "s", x).tobytes() == before.tobytes()

    def test_unknown_style(self):
        s = adapter_register_style(AdapterStack(np.eye(2)), "snow", np.ones((2, 1)), np.ones((1, 2)))
        with pytest.raises(UnknownStyleError, match="hail"):
            adapter_forward(s, "hail", [1.0, 1.0])
        with pytest.raises(KeyError):
            adapter_forward(s, "hail", [1.0, 1.0])

    def test_registration_errors(self, rng):
        s = adapter_register_style(AdapterStack(np.eye(3)), "a", np.ones((3, 1)), np.ones((1, 3)))
        with pytest.raises(ValidationError, match="already"):
            adapter_register_style(s, "a", np.ones((3, 1)), np.ones((1, 3)))
        with pytest.raises(ValidationError, match="share rank"):
            adapter_register_style(s, "b", np.ones((3, 2)), np.ones((2, 3)))
        with pytest.raises(ValidationError):
            adapter_register_style(s, "b", np.ones((2, 1)), np.ones((1, 3)))
        with pytest.raises(ValidationError, match="exceeds"):
            adapter_register_style(AdapterStack(np.eye(2)), "b", np.ones((2, 3)), np.ones((3, 2)))

    def test_input_dimension(self):
        s = adapter_register_style(AdapterStack(np.eye(2)), "a", np.ones((2, 1)), np.ones((1, 2)))
        with pytest.raises(ValidationError):
            adapter_forward(s, "a", [1.0, 2.0, 3.0])
