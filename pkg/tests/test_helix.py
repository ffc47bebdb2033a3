import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helixformer import tensor as T
from helixformer.errors import ConfigurationError, DimensionError
from helixformer.helix import (
    HelixLayer,
    HelixStack,
    TokenEmbedding,
    VariantKind,
    attention_scores,
    csrm,
    embed_tokens,
    from_tokens,
    helix_param_count,
    multi_head,
    rep_enhance,
    stack,
    to_tokens,
)
from helixformer.nn import count_params
from helixformer.tensor import Tensor


def maps(rng, B=None, C=4, H=2, W=2):
    shape = (C, H, W) if B is None else (B, C, H, W)
    return Tensor(rng.standard_normal(shape))


def tie_branches(layer):
    for role in "ekv":
        src, dst = getattr(layer.support, role), getattr(layer.query, role)
        dst.load_state_dict({k: v.copy() for k, v in src.state_dict().items()})
    if layer.support.rep is not None:
        layer.query.rep.load_state_dict({k: v.copy() for k, v in layer.support.rep.state_dict().items()})


# ---------------------------------------------------------------- tokens


def test_token_roundtrip_is_row_major(rng):
    f = rng.standard_normal((3, 2, 4))
    t = to_tokens(Tensor(f)).data
    assert t.shape == (8, 3)
    np.testing.assert_array_equal(t[5], f[:, 1, 1])
    np.testing.assert_array_equal(from_tokens(Tensor(t), 2, 4).data, f)


def test_embed_shapes(rng):
    layer = HelixLayer(64, rng)
    E, K, V = embed_tokens(maps(rng, C=64, H=5, W=5), layer.support)
    assert E.shape == K.shape == V.shape == (25, 64)


def test_embed_constant_input_interior_tokens_identical(rng):
    # zero padding makes border tokens differ; interior tokens see the same 3x3 window
    emb = TokenEmbedding(4, rng)
    emb.eval()
    K = emb(Tensor(np.full((1, 4, 5, 5), 0.7))).data[0].reshape(5, 5, 4)
    interior = K[1:4, 1:4].reshape(-1, 4)
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0], interior.shape), atol=1e-14)


def test_fc_embedding_constant_input_all_tokens_identical(rng):
    emb = TokenEmbedding(4, rng, mode="fc")
    K = emb(Tensor(np.full((4, 3, 3), 0.7))).data
    np.testing.assert_allclose(K, np.broadcast_to(K[0], K.shape), atol=1e-15)


def test_embed_tiny_conv_vs_direct_oracle(rng):
    emb = TokenEmbedding(2, rng)
    f = rng.standard_normal((2, 2, 2))
    expected = oracles.tokens(oracles.conv3x3_same(f, emb.conv.weight.data))
    got = to_tokens(emb.conv(Tensor(f[None]))).data[0]
    np.testing.assert_allclose(got, expected, atol=1e-12)


# ---------------------------------------------------------------- attention algebra


def test_attention_identity_and_zero():
    I = Tensor(np.eye(4))
    np.testing.assert_array_equal(attention_scores(I, I).data, np.eye(4))
    assert not attention_scores(Tensor(np.zeros((3, 4))), Tensor(np.ones((3, 4)))).data.any()


def test_attention_orientation_vs_loops(rng):
    E, K = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    A = attention_scores(Tensor(K), Tensor(E)).data
    for i in range(2):
        for j in range(2):
            assert abs(A[i, j] - sum(E[i, c] * K[j, c] for c in range(3))) < 1e-12


def test_attention_channel_mismatch():
    with pytest.raises(DimensionError):
        attention_scores(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


def test_csrm_uniform_and_saturated(rng):
    V = rng.standard_normal((4, 3))
    R = csrm(Tensor(np.zeros((2, 4))), Tensor(V), 3).data
    np.testing.assert_allclose(R, np.broadcast_to(V.mean(axis=0), (2, 3)), atol=1e-15)
    A = np.zeros((1, 4))
    A[0, 0] = 50.0 * np.sqrt(3)
    np.testing.assert_allclose(csrm(Tensor(A), Tensor(V), 3).data[0], V[0], atol=1e-3)


def test_csrm_vs_explicit_softmax(rng):
    A, V = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
    Z = A / np.sqrt(2)
    P = np.exp(Z - Z.max(1, keepdims=True))
    P /= P.sum(1, keepdims=True)
    np.testing.assert_allclose(csrm(Tensor(A), Tensor(V), 2).data, P @ V, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 4]))
def test_csrm_rows_in_value_hull(seed, heads):
    r = np.random.default_rng(seed)
    E, K, V = (Tensor(r.standard_normal((5, 4)) * 3) for _ in range(3))
    R = multi_head(E, K, V, heads).data
    lo, hi = V.data.min(axis=0), V.data.max(axis=0)
    assert (R >= lo - 1e-12).all() and (R <= hi + 1e-12).all()


def test_multi_head_single_head_is_bitwise_single_path(rng):
    E, K, V = (Tensor(rng.standard_normal((6, 4))) for _ in range(3))
    np.testing.assert_array_equal(multi_head(E, K, V, 1).data, csrm(attention_scores(K, E), V, 4).data)


def test_multi_head_two_heads_vs_half_width_runs(rng):
    E, K, V = (rng.standard_normal((3, 4)) for _ in range(3))
    halves = [csrm(attention_scores(Tensor(K[:, s]), Tensor(E[:, s])), Tensor(V[:, s]), 2).data
              for s in (slice(0, 2), slice(2, 4))]
    np.testing.assert_allclose(multi_head(Tensor(E), Tensor(K), Tensor(V), 2).data, np.concatenate(halves, 1), atol=1e-12)


def test_multi_head_indivisible_is_config_error(rng):
    with pytest.raises(ConfigurationError):
        HelixLayer(6, rng, heads=4)


# ---------------------------------------------------------------- REP


def test_rep_ones_mask_identity_mlp_gives_norm(rng):
    layer = HelixLayer(4, rng)
    rep = layer.support.rep
    for fc in (rep.fc0, rep.fc1):
        fc.weight.data = np.eye(4)
        fc.bias.data = np.zeros(4)
    f = Tensor(np.abs(rng.standard_normal((4, 2, 2))) + 0.1)
    # shift beta so the normalised tokens are non-negative and the relu is inactive
    rep.norm.beta.data = np.full(4, 10.0)
    out = rep_enhance(f, Tensor(np.ones((4, 4))), rep).data
    normed = from_tokens(T.layer_norm(to_tokens(f), rep.norm.gamma, rep.norm.beta), 2, 2).data
    np.testing.assert_allclose(out, normed, atol=1e-12)


def test_rep_zero_mask_gives_bias_image(rng):
    rep = HelixLayer(4, rng).support.rep
    rep.fc0.bias.data = rng.standard_normal(4)
    rep.fc1.bias.data = rng.standard_normal(4)
    out = rep_enhance(Tensor(rng.standard_normal((4, 2, 2))), Tensor(np.zeros((4, 4))), rep).data
    bias_image = rep.fc1.weight.data @ np.maximum(rep.fc0.bias.data, 0) + rep.fc1.bias.data
    np.testing.assert_allclose(out, np.broadcast_to(bias_image[:, None, None], (4, 2, 2)), atol=1e-12)


def test_rep_vs_composed_oracle(rng):
    rep = oracles.randomize_layer(HelixLayer(2, rng), rng).support.rep
    f, R = rng.standard_normal((2, 2, 2)), rng.standard_normal((4, 2))
    p = {"ln_gamma": rep.norm.gamma.data, "ln_beta": rep.norm.beta.data, "w0": rep.fc0.weight.data,
         "b0": rep.fc0.bias.data, "w1": rep.fc1.weight.data, "b1": rep.fc1.bias.data}
    expected = oracles.untokens(oracles.rep(oracles.tokens(f), R, p), 2, 2)
    np.testing.assert_allclose(rep_enhance(Tensor(f), Tensor(R), rep).data, expected, atol=1e-10)


# ---------------------------------------------------------------- full layer vs brute force


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("heads", [1, 2])
def test_symmetric_layer_matches_brute_force(seed, heads):
    r = np.random.default_rng(seed)
    layer = oracles.randomize_layer(HelixLayer(4, r, heads=heads), r).eval()
    f_S, f_Q = r.standard_normal((4, 2, 2)), r.standard_normal((4, 2, 2))
    out_S, out_Q = layer(Tensor(f_S), Tensor(f_Q))
    exp_S, exp_Q, _, _ = oracles.symmetric_layer(f_S, f_Q, oracles.extract_layer_params(layer), heads)
    np.testing.assert_allclose(out_S.data, exp_S, atol=1e-10)
    np.testing.assert_allclose(out_Q.data, exp_Q, atol=1e-10)


def test_rmp_tied_symmetry_and_transpose(rng):
    layer = oracles.randomize_layer(HelixLayer(4, rng), rng).eval()
    tie_branches(layer)
    f = Tensor(rng.standard_normal((4, 3, 3)))
    R_QS, R_SQ = layer.rmp_forward(f, f)
    np.testing.assert_allclose(R_QS.data, R_SQ.data, atol=1e-10)
    for branch in (layer.support, layer.query):
        branch.k.load_state_dict({k: v.copy() for k, v in branch.e.state_dict().items()})
    f_S, f_Q = Tensor(rng.standard_normal((4, 3, 3))), Tensor(rng.standard_normal((4, 3, 3)))
    A_S = attention_scores(layer.query.k(f_Q), layer.support.e(f_S)).data
    A_Q = attention_scores(layer.support.k(f_S), layer.query.e(f_Q)).data
    np.testing.assert_allclose(A_S, A_Q.T, atol=1e-10)


def test_rmp_directions_are_order_independent(rng):
    layer = oracles.randomize_layer(HelixLayer(4, rng), rng).eval()
    f_S, f_Q = maps(rng, C=4, H=3, W=3), maps(rng, C=4, H=3, W=3)
    R_QS, R_SQ = layer.rmp_forward(f_S, f_Q)
    trace = {}
    layer(f_S, f_Q, trace=trace)
    np.testing.assert_array_equal(np.asarray(trace["csrm_S"]).reshape(4, 3, 3), from_tokens(R_QS, 3, 3).data)
    np.testing.assert_array_equal(np.asarray(trace["csrm_Q"]).reshape(4, 3, 3), from_tokens(R_SQ, 3, 3).data)


def test_symmetric_is_rmp_plus_two_reps(rng):
    layer = oracles.randomize_layer(HelixLayer(4, rng), rng).eval()
    f_S, f_Q = maps(rng, C=4, H=3, W=3), maps(rng, C=4, H=3, W=3)
    R_QS, R_SQ = layer.rmp_forward(f_S, f_Q)
    out_S, out_Q = layer(f_S, f_Q)
    np.testing.assert_allclose(out_S.data, rep_enhance(f_S, R_QS, layer.support.rep).data, atol=1e-14)
    np.testing.assert_allclose(out_Q.data, rep_enhance(f_Q, R_SQ, layer.query.rep).data, atol=1e-14)


# ---------------------------------------------------------------- variants


@pytest.mark.parametrize("variant", list(VariantKind))
@pytest.mark.parametrize("heads", [1, 2, 4])
def test_shapes_preserved(rng, variant, heads):
    layer = HelixLayer(8, rng, variant=variant, heads=heads)
    f_S, f_Q = maps(rng, B=3, C=8, H=3, W=3), maps(rng, B=3, C=8, H=3, W=3)
    out_S, out_Q = layer(f_S, f_Q)
    assert out_S.shape == out_Q.shape == (3, 8, 3, 3)


def test_unidirectional_passthrough_bitwise(rng):
    f_S, f_Q = maps(rng, B=2, C=4, H=3, W=3), maps(rng, B=2, C=4, H=3, W=3)
    _, out_Q = HelixLayer(4, rng, variant="qs")(f_S, f_Q)
    np.testing.assert_array_equal(out_Q.data, f_Q.data)
    out_S, _ = HelixLayer(4, rng, variant="sq")(f_S, f_Q)
    np.testing.assert_array_equal(out_S.data, f_S.data)


def _one_way(src, variant, rng_seed):
    """A unidirectional layer carrying ``src``'s parameters for the relevant roles."""
    layer = HelixLayer(4, np.random.default_rng(rng_seed), variant=variant)
    state = src.state_dict()
    layer.load_state_dict({k: v for k, v in state.items() if k in layer.state_dict()})
    return layer.eval()


@pytest.mark.parametrize("variant,first,second", [("asym-sq", "sq", "qs"), ("asym-qs", "qs", "sq")])
def test_asymmetric_equals_sequential_composition(rng, variant, first, second):
    layer = oracles.randomize_layer(HelixLayer(4, rng, variant=variant), rng).eval()
    f_S, f_Q = maps(rng, B=2, C=4, H=3, W=3), maps(rng, B=2, C=4, H=3, W=3)
    a, b = _one_way(layer, first, 1), _one_way(layer, second, 2)
    mid_S, mid_Q = a(f_S, f_Q)
    exp_S, exp_Q = b(mid_S, mid_Q)
    out_S, out_Q = layer(f_S, f_Q)
    np.testing.assert_allclose(out_S.data, exp_S.data, atol=1e-14)
    np.testing.assert_allclose(out_Q.data, exp_Q.data, atol=1e-14)


def test_variant_parse():
    assert VariantKind.parse("asym-sq") is VariantKind.AsymSQ
    assert VariantKind.parse("Symmetric") is VariantKind.Symmetric
    with pytest.raises(ConfigurationError):
        VariantKind.parse("both")


# ---------------------------------------------------------------- stacking


def test_stack_zero_is_bitwise_identity(rng):
    f_S, f_Q = maps(rng, B=2, C=4, H=3, W=3), maps(rng, B=2, C=4, H=3, W=3)
    out_S, out_Q = HelixStack(0, 4, rng)(f_S, f_Q)
    np.testing.assert_array_equal(out_S.data, f_S.data)
    np.testing.assert_array_equal(out_Q.data, f_Q.data)


def test_stack_two_is_composition(rng):
    st2 = HelixStack(2, 4, rng)
    for layer in st2.layers:
        oracles.randomize_layer(layer, rng)
    st2.eval()
    f_S, f_Q = maps(rng, B=2, C=4, H=3, W=3), maps(rng, B=2, C=4, H=3, W=3)
    out = st2(f_S, f_Q)
    exp = st2.layer1(*st2.layer0(f_S, f_Q))
    man = stack(f_S, f_Q, st2.layers)
    for a, b, c in zip(out, exp, man):
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.data, c.data)
    assert not np.array_equal(st2.layer0.support.e.conv.weight.data, st2.layer1.support.e.conv.weight.data)


def test_gather_indices_match_explicit_pairs(rng):
    layer = oracles.randomize_layer(HelixLayer(4, rng), rng).eval()
    protos, queries = maps(rng, B=3, C=4, H=3, W=3), maps(rng, B=2, C=4, H=3, W=3)
    s_idx, q_idx = np.tile(np.arange(3), 2), np.repeat(np.arange(2), 3)
    a_S, a_Q = layer(protos, queries, s_idx, q_idx)
    b_S, b_Q = layer(T.take(protos, s_idx), T.take(queries, q_idx))
    np.testing.assert_allclose(a_S.data, b_S.data, atol=1e-14)
    np.testing.assert_allclose(a_Q.data, b_Q.data, atol=1e-14)


# ---------------------------------------------------------------- parameter accounting


@pytest.mark.parametrize("C", [4, 16, 64])
def test_helix_param_count_matches_summation(rng, C):
    assert count_params(HelixLayer(C, rng).parameters()) == helix_param_count(C) == oracles.helix_layer_param_count(C)


@pytest.mark.parametrize("variant", list(VariantKind))
@pytest.mark.parametrize("embed", ["conv", "fc"])
@pytest.mark.parametrize("rep", [True, False])
def test_helix_param_count_all_configs(rng, variant, embed, rep):
    layer = HelixLayer(8, rng, variant=variant, embed=embed, rep=rep)
    assert count_params(layer.parameters()) == helix_param_count(8, variant, embed, rep)
