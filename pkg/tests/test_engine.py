import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MODELS, deadlock_graph, model_case, random_graph
from oplrp import (
    COMPOSITES,
    Engine,
    Graph,
    InitMode,
    OpKind,
    aggregate_inputs,
    build_aux_graph,
    init_relevance,
    oracle_propagate,
    propagate,
)
from oplrp.errors import ContractError, UnsupportedOpError


def test_init_relevance_examples():
    out = np.array([2.0, -1.0])
    np.testing.assert_array_equal(init_relevance(out, 0), [2.0, 0.0])
    np.testing.assert_array_equal(init_relevance(out, 0, InitMode.ONE_HOT_UNIT), [1.0, 0.0])
    np.testing.assert_array_equal(init_relevance(np.zeros(2), 1), [0.0, 0.0])
    np.testing.assert_array_equal(init_relevance(np.ones((2, 2)), (1, 0), "one_hot_unit"), [[0, 0], [1, 0]])


def test_init_relevance_out_of_range():
    with pytest.raises(IndexError):
        init_relevance(np.zeros(2), 2)
    with pytest.raises(IndexError):
        init_relevance(np.zeros((2, 2)), (0, 5))


def test_aggregate_inputs_sums_per_slot():
    g = Graph()
    x = g.input(np.ones((2, 2)))
    r0, r1 = g.op(OpKind.UNBIND, x, axis=0)
    a = g.op(OpKind.ADD, r0, r1)
    b = g.op(OpKind.NEG, r0)
    g.op(OpKind.ADD, a, b)
    aux = build_aux_graph(g)
    parts = [np.full(2, float(k + 1)) for k in range(aux.indegree[r0.node])]
    slots = aggregate_inputs(g, aux, r0.node, parts)
    assert len(slots) == 2
    assert sum(s.sum() for s in slots) == pytest.approx(sum(p.sum() for p in parts))


def test_zero_r_init_gives_zero():
    m, x, out, g, _ = model_case("toy_attention", 0)
    res = Engine(g, COMPOSITES["attnlrp"]).run(np.zeros_like(out))
    assert not res.relevance.any()
    assert not oracle_propagate(g, COMPOSITES["attnlrp"], np.zeros_like(out)).any()


def test_identity_chain_passes_r_init():
    g = Graph(shadow=True)
    v = g.input(np.arange(6.0).reshape(2, 3))
    for kind in (OpKind.RELU, OpKind.CLONE, OpKind.NEG, OpKind.GELU):
        v = g.op(kind, v)
    r0 = np.arange(6.0).reshape(2, 3) + 1
    np.testing.assert_array_equal(Engine(g).run(r0).relevance, r0)
    np.testing.assert_array_equal(oracle_propagate(g, COMPOSITES["epsilon"], r0), r0)


def test_r_init_shape_checked():
    m, x, out, g, r0 = model_case("mlp", 0)
    with pytest.raises(ContractError):
        Engine(g).run(np.zeros(out.size + 1))


def test_oracle_requires_shadow():
    m, x, out, g, r0 = model_case("mlp", 0, shadow=False)
    with pytest.raises(ContractError):
        oracle_propagate(g, COMPOSITES["epsilon"], r0)


def test_explicit_target_node_for_parameters():
    m, x, out, g, r0 = model_case("mlp", 1)
    res = Engine(g, COMPOSITES["epsilon"]).run(r0)
    pid = next(iter(res.parameter_relevance(g)))
    got = Engine(g, COMPOSITES["epsilon"]).run(r0, target_node=pid)
    assert got.target == pid
    ref = oracle_propagate(g, COMPOSITES["epsilon"], r0, target_node=pid)
    np.testing.assert_array_equal(got.relevance, ref)


def _unsupported_graph(shadow=True):
    g = Graph(shadow=shadow)
    x = g.input(np.ones((1, 3)))
    w = g.param(np.eye(3))
    y = g.op(OpKind.LINEAR, x, w)
    (z,) = g.record_custom("FancyNorm", lambda t: [t * 2.0], [y])
    g.op(OpKind.SUM, z, axis=None)
    return g


def test_unsupported_op_names_node_and_kind():
    g = _unsupported_graph()
    r0 = np.ones(())
    with pytest.raises(UnsupportedOpError, match="FancyNorm") as exc:
        Engine(g).run(r0)
    assert str(3) in str(exc.value)
    with pytest.raises(UnsupportedOpError):
        oracle_propagate(g, COMPOSITES["epsilon"], r0)


def test_lenient_identity_marks_run(caplog):
    g = _unsupported_graph()
    r0 = np.ones(())
    with caplog.at_level(logging.WARNING, logger="oplrp"):
        res = Engine(g, lenient=True).run(r0)
    assert not res.conservative
    assert any("FancyNorm" in r.message for r in caplog.records)
    np.testing.assert_array_equal(res.relevance, oracle_propagate(g, COMPOSITES["epsilon"], r0, lenient=True))


@pytest.mark.parametrize("name", MODELS)
@pytest.mark.parametrize("comp", sorted(COMPOSITES))
def test_zoo_oracle_equivalence(name, comp):
    for seed in range(5):
        m, x, out, g, r0 = model_case(name, seed)
        aux = build_aux_graph(g)
        res = propagate(g, aux, COMPOSITES[comp], r0)
        ref = oracle_propagate(g, COMPOSITES[comp], r0, aux=aux)
        assert np.max(np.abs(res.relevance - ref)) <= 1e-9
        assert set(res.propagation_counts.values()) <= {1}
        assert res.runtime.all_complete()


@pytest.mark.parametrize("name", MODELS)
@pytest.mark.parametrize("comp", ["epsilon", "gamma"])
def test_conservation_bias_free(name, comp):
    for seed in range(5):
        m, x, out, g, r0 = model_case(name, seed, bias=False)
        res = Engine(g, COMPOSITES[comp]).run(r0)
        total = sum(v.sum() for v in res.terminal_relevance.values() if v is not None)
        assert abs(total - r0.sum()) <= 1e-6 * abs(r0.sum())


def test_every_reachable_node_propagated_once():
    m, x, out, g, r0 = model_case("toy_attention", 3)
    aux = build_aux_graph(g)
    res = Engine(g, COMPOSITES["attnlrp"], aux).run(r0)
    # internal chain nodes run inside a branch's backward fold, not as a propagate event
    assert set(res.propagation_counts) == set(aux.indegree)
    propagated = {e["node"] for e in res.events if e["event"] == "propagate"}
    internal = {n for b in res.runtime.branches() for n, _ in b.steps}
    assert propagated | internal == set(aux.indegree) and not propagated & internal
    assert all(c == 1 for c in res.propagation_counts.values())


def test_visit_order_respects_topology_outside_reach_ahead():
    """Every normal visit happens after all consumers of the node were visited."""
    for seed in range(30):
        g = random_graph(seed)
        aux = build_aux_graph(g)
        res = Engine(g, COMPOSITES["attnlrp"], aux).run(np.ones(g.nodes[g.root].output_shapes[0]))
        seen = set()
        for e in res.events:
            if e["event"] != "visit":
                continue
            if not e.get("reach_ahead"):
                assert all(c in seen for c, _ in aux.in_adj[e["node"]]), (seed, e)
            seen.add(e["node"])


@given(st.integers(0, 100_000), st.sampled_from(sorted(COMPOSITES)), st.integers(4, 20))
@settings(max_examples=150, deadline=None)
def test_random_dag_oracle_equivalence(seed, comp, n_ops):
    g = random_graph(seed, n_ops)
    aux = build_aux_graph(g)
    r0 = np.ones(g.nodes[g.root].output_shapes[0]) * 0.7
    cfg = COMPOSITES[comp]
    first = Engine(g, cfg, aux).run(r0)
    ref = oracle_propagate(g, cfg, r0, aux=aux)
    assert np.array_equal(first.relevance, ref)
    assert set(first.propagation_counts.values()) <= {1}
    assert first.stats.delta <= first.stats.total_nodes
    assert first.stats.max_live_promises <= first.stats.num_promises
    second = Engine(g, cfg, aux, cache=first.cache).run(r0)
    assert np.array_equal(second.relevance, first.relevance)
    assert second.visits == first.visits - first.cache.internal_nodes
    assert set(second.propagation_counts.values()) <= {1}


def test_deadlock_graph_terminates_cleanly():
    n = deadlock_graph(shadow=True)
    res = Engine(n.graph).run(np.ones(n.graph.nodes[n.graph.root].output_shapes[0]))
    assert res.runtime.all_complete()
    stalls = {e["node"] for e in res.events if e["event"] == "stall"}
    dequeued = {e["node"] for e in res.events if e["event"] == "dequeue"}
    assert stalls == dequeued
