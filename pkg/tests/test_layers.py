import numpy as np
import pytest
import scipy.sparse as sp

from ctp import autodiff as ad
from ctp.layers import ParamSet, attention_weights, glorot, mean_adjacency, sage_layer, typed_attention_layer
from conftest import grad_check

RNG = np.random.default_rng(7)


def dense_sage(feats, edges, w_self, w_neigh):
    """Independent dense re-implementation: relu(F Ws + (D^-1 A) F Wn)."""
    n = len(feats)
    a = np.zeros((n, n))
    for u, v in edges:
        if u != v:
            a[u, v] = a[v, u] = 1.0
    deg = a.sum(axis=1, keepdims=True)
    a_norm = np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)
    return np.maximum(feats @ w_self + a_norm @ feats @ w_neigh, 0.0)


def test_sage_layer_matches_dense_oracle(f64):
    edges = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 2), (1, 2)]
    feats = RNG.normal(size=(6, 4))
    ws, wn = RNG.normal(size=(4, 3)), RNG.normal(size=(4, 3))
    src, dst = np.array(edges).T
    out = sage_layer(feats, mean_adjacency(6, src, dst), ad.parameter(ws), ad.parameter(wn)).data
    np.testing.assert_allclose(out, dense_sage(feats, edges, ws, wn), atol=1e-6)


def test_sage_isolated_node_uses_only_self_term(f64):
    f = RNG.normal(size=(1, 3))
    w = np.eye(3)
    out = sage_layer(f, mean_adjacency(1, [], []), ad.parameter(w), ad.parameter(RNG.normal(size=(3, 3)))).data
    np.testing.assert_allclose(out, np.maximum(f, 0))


def test_sage_symmetric_nodes_get_equal_outputs():
    f = np.ones((2, 3))
    out = sage_layer(f, mean_adjacency(2, [0], [1]), ad.parameter(RNG.normal(size=(3, 2))),
                     ad.parameter(RNG.normal(size=(3, 2)))).data
    np.testing.assert_array_equal(out[0], out[1])


def test_sage_shape_errors():
    with pytest.raises(ad.ShapeError):
        sage_layer(np.ones((2, 3)), mean_adjacency(2, [0], [1]), ad.parameter(np.ones((4, 2))),
                   ad.parameter(np.ones((4, 2))))


def test_sage_gradients(f64):
    feats = RNG.normal(size=(5, 3))
    adj = mean_adjacency(5, [0, 1, 2, 3], [1, 2, 3, 4])
    ws, wn = ad.parameter(RNG.normal(size=(3, 2))), ad.parameter(RNG.normal(size=(3, 2)))
    w = RNG.normal(size=(5, 2))
    assert grad_check(lambda: ad.sum_all(ad.mul(sage_layer(feats, adj, ws, wn), w)), [ws, wn]) < 1e-6


def test_mean_adjacency_is_row_stochastic_and_collapses_duplicates():
    a = mean_adjacency(4, [0, 0, 1, 2], [1, 1, 2, 2]).toarray()
    np.testing.assert_allclose(a[0], [0, 1, 0, 0])
    np.testing.assert_allclose(a[1], [0.5, 0, 0.5, 0])
    np.testing.assert_allclose(a[3], 0.0)


def _attn_params(d=4, a=3, t=2):
    return dict(w_src=ad.parameter(RNG.normal(size=(d, a))), w_dst=ad.parameter(RNG.normal(size=(d, a))),
                w_val=ad.parameter(RNG.normal(size=(d, d))), type_emb=ad.parameter(RNG.normal(size=(3, t))),
                attn=ad.parameter(RNG.normal(size=2 * a + t)))


def test_single_incoming_edge_has_weight_one():
    p = _attn_params()
    states = RNG.normal(size=(2, 4))
    w = attention_weights(states, [0], [1], [1], p["w_src"], p["w_dst"], p["type_emb"], p["attn"])
    assert w[0] == pytest.approx(1.0)


def test_identical_incoming_edges_split_evenly():
    p = _attn_params()
    states = RNG.normal(size=(3, 4))
    states[1] = states[0]
    w = attention_weights(states, [0, 1], [2, 2], [2, 2], p["w_src"], p["w_dst"], p["type_emb"], p["attn"])
    np.testing.assert_allclose(w, [0.5, 0.5], rtol=1e-6)


def test_attention_residual_and_passthrough():
    p = _attn_params()
    states = RNG.normal(size=(3, 4)).astype(np.float32)
    out = typed_attention_layer(states, [0], [0], [1], **p).data
    np.testing.assert_array_equal(out[[0, 2]], states[[0, 2]])
    expected = states[1] + states[0] @ p["w_val"].data
    np.testing.assert_allclose(out[1], expected, rtol=1e-5)
    np.testing.assert_array_equal(typed_attention_layer(states, [], [], [], **p).data, states)


def test_attention_rejects_unknown_edge_type():
    p = _attn_params()
    with pytest.raises(ValueError, match="unknown edge type"):
        typed_attention_layer(np.ones((2, 4)), [0], [3], [1], **p)


def test_attention_gradients_including_type_embedding(f64):
    p = _attn_params()
    states = ad.parameter(RNG.normal(size=(5, 4)))
    src, et, dst = [0, 1, 2, 3, 4, 0], [0, 1, 2, 1, 0, 2], [4, 4, 4, 0, 0, 1]
    w = RNG.normal(size=(5, 4))

    def fn():
        return ad.sum_all(ad.mul(typed_attention_layer(states, src, et, dst, **p), w))

    assert grad_check(fn, [states] + list(p.values())) < 1e-6


def test_paramset_order_digest_and_duplicates():
    a = ParamSet({"b": np.ones(2), "a": np.zeros((2, 2))}, {"d": 2})
    assert list(a) == ["a", "b"]
    b = ParamSet({"a": np.zeros((2, 2)), "b": np.ones(2)})
    assert a.digest() == b.digest()
    b["b"].data[0] = 2.0
    assert a.digest() != b.digest()
    with pytest.raises(KeyError):
        a.add("a", np.ones(1))
    with pytest.raises(ad.NumericError):
        ParamSet({"x": np.array([np.nan])})


def test_paramset_copy_is_independent():
    a = ParamSet({"w": np.ones(3)})
    c = a.copy()
    c["w"].data[:] = 5
    assert a["w"].data[0] == 1.0


def test_glorot_bounds():
    w = glorot(np.random.default_rng(0), 10, 20)
    assert np.abs(w).max() <= np.sqrt(6 / 30)
