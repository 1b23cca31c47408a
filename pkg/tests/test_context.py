import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctp.context import augment, build_context, build_protection_plan
from ctp.graph import Graph, Subgraph, gen_planted_partition, khop_subgraph
from conftest import path_graph


def sub_of(n):
    return Subgraph(0, np.arange(n), np.ones(n, dtype=int), np.zeros(0, dtype=int))


def test_protection_p_zero_is_core_only():
    plan = build_protection_plan(sub_of(10), [1, 2], [3], 0.0, seed=0)
    assert plan.protect == {0, 1, 2, 3}
    assert plan.remain == set(range(4, 10))


def test_protection_p_one_is_everything():
    plan = build_protection_plan(sub_of(10), [1], [2], 1.0, seed=0)
    assert plan.protect == set(range(10))


def test_protection_fraction_arithmetic():
    plan = build_protection_plan(sub_of(20), range(1, 4), range(4, 8), 0.5, seed=3)
    assert len(plan.protect) == 8 + 6
    assert plan.protect - set(range(8)) <= plan.remain


def test_protection_errors():
    with pytest.raises(ValueError, match="not in the centroid subgraph"):
        build_protection_plan(sub_of(5), [7], [], 0.3, seed=0)
    with pytest.raises(ValueError):
        build_protection_plan(sub_of(5), [1], [], 1.3, seed=0)


def test_node_context_on_path():
    ctx = build_context(path_graph(5), 2, h=1, fanout_cap=None)
    assert sorted(ctx.nodes.tolist()) == [1, 2, 3]
    assert ctx.targets == (2,)
    assert len(ctx.src) == 2
    np.testing.assert_array_equal(ctx.features, path_graph(5).features[ctx.nodes])


def test_pair_context_is_union():
    g = path_graph(6)
    ctx = build_context(g, (2, 3), h=1, fanout_cap=None)
    assert sorted(ctx.nodes.tolist()) == [1, 2, 3, 4]
    assert ctx.targets == (2, 3)
    assert ctx.target_index.tolist() == [ctx.nodes.tolist().index(2), ctx.nodes.tolist().index(3)]


def test_isolated_context():
    g = Graph(np.ones((3, 2)), [0], [0], [1], 1)
    ctx = build_context(g, 2, h=2)
    assert ctx.nodes.tolist() == [2] and len(ctx.src) == 0


@pytest.fixture(scope="module")
def ctx_and_plan():
    g = gen_planted_partition(2, 30, 0.4, 0.05, 3, 1.0, seed=1)
    sub = khop_subgraph(g, 0, 1, None)
    ex, qu = sub.nodes[1:3].tolist(), sub.nodes[3:5].tolist()
    plan = build_protection_plan(sub, ex, qu, 0.3, seed=2)
    ctx = build_context(g, ex[0], h=2, fanout_cap=None)
    return ctx, plan


def test_no_candidates_is_identity(ctx_and_plan):
    ctx, _ = ctx_and_plan
    sub = Subgraph(int(ctx.nodes[0]), ctx.nodes, ctx.hops, np.zeros(0, int))
    plan = build_protection_plan(sub, [], [], 1.0, seed=0)
    out = augment(ctx, plan, 0.5, 0.5, seed=1)
    assert out.nodes.tolist() == ctx.nodes.tolist() and not out.dropped and not out.masked


def test_zero_rates_is_identity(ctx_and_plan):
    ctx, plan = ctx_and_plan
    out = augment(ctx, plan, 0.0, 0.0, seed=1)
    np.testing.assert_array_equal(out.features, ctx.features)
    assert out.src.tolist() == ctx.src.tolist()


def test_drop_frequency_and_protection(ctx_and_plan):
    ctx, plan = ctx_and_plan
    protected = set(plan.protect) | set(ctx.targets)
    cand = [int(v) for v in ctx.nodes if int(v) not in protected]
    assert len(cand) >= 10
    drops = 0
    for seed in range(1000):
        out = augment(ctx, plan, 0.5, 0.0, seed=seed)
        assert not (out.dropped & protected)
        assert protected & set(ctx.nodes.tolist()) <= set(out.nodes.tolist())
        drops += len(out.dropped)
    assert abs(drops / (1000 * len(cand)) - 0.5) <= 0.05


def test_masks_record_and_restore(ctx_and_plan):
    ctx, plan = ctx_and_plan
    out = augment(ctx, plan, 0.0, 0.6, seed=4)
    assert out.masked and set(out.original_masked_features) == set(out.masked)
    for i in out.masked_index:
        assert (out.features[i] == 0).all()
    np.testing.assert_array_equal(out.restored_features(), ctx.features)


def test_dropped_edges_are_removed(ctx_and_plan):
    ctx, plan = ctx_and_plan
    out = augment(ctx, plan, 0.7, 0.0, seed=9)
    assert len(out.nodes) == len(ctx.nodes) - len(out.dropped)
    gone = set(out.dropped)
    kept = {(int(ctx.nodes[s]), int(ctx.nodes[t])) for s, t in zip(ctx.src, ctx.dst)
            if int(ctx.nodes[s]) not in gone and int(ctx.nodes[t]) not in gone}
    assert {(int(out.nodes[s]), int(out.nodes[t])) for s, t in zip(out.src, out.dst)} == kept


def test_targets_always_protected_without_plan():
    ctx = build_context(path_graph(5), 2, h=2, fanout_cap=None)
    for seed in range(50):
        out = augment(ctx, None, 1.0, 0.0, seed=seed)
        assert out.nodes.tolist() == [2]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.integers(1, 2))
def test_protection_soundness(seed, p, drop, mask, h):
    g = gen_planted_partition(3, 15, 0.3, 0.05, 2, 1.0, seed=seed % 7)
    rng = np.random.default_rng(seed)
    o = int(rng.integers(g.node_count))
    sub = khop_subgraph(g, o, 1, None)
    inputs = sub.nodes[rng.permutation(len(sub.nodes))][:3].tolist()
    plan = build_protection_plan(sub, inputs[:1], inputs[1:], p, seed=seed)
    ctx = build_context(g, inputs[0], h=h, fanout_cap=None)
    out = augment(ctx, plan, drop, mask, seed=seed)
    assert not ((out.dropped | out.masked) & plan.protect)
    assert not (out.dropped & out.masked)
    assert set(out.targets) <= set(out.nodes.tolist())
    assert (out.dropped | out.masked) <= set(ctx.nodes.tolist()) - set(plan.protect)
    assert set(out.original_masked_features) == set(out.masked)
