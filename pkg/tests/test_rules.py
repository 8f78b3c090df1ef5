import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oplrp import COMPOSITES, OpAttrs, OpKind, RuleConfig, propagate_node
from oplrp.errors import ShapeError, UnsupportedOpError
from oplrp.rules import (
    RULE_REGISTRY,
    abs_ratio_rule,
    bilinear_rule,
    epsilon_rule,
    gamma_rule,
    gradient_route_rule,
    identity_rule,
    layernorm_rule,
    maxpool_route,
    needs_input_values,
    reduce_abs_ratio_rule,
    softmax_rule,
)
from oplrp.tensor import forward_eval, maxpool2d_forward, softmax_forward

seeds = st.integers(0, 2**31 - 1)


def test_epsilon_hand_example():
    r = epsilon_rule(np.array([1.0, 2.0]), np.array([[1.0], [-1.0]]), np.array([-1.0]), np.array([1.0]), 0.0)
    np.testing.assert_allclose(r, [-1.0, 2.0])
    assert r.sum() == pytest.approx(1.0)


def test_epsilon_zero_relevance_and_zero_input():
    x, w = np.array([1.0, 0.0]), np.array([[1.0], [1.0]])
    np.testing.assert_array_equal(epsilon_rule(x, w, x @ w, np.zeros(1), 1e-9), [0, 0])
    np.testing.assert_allclose(epsilon_rule(x, w, x @ w, np.array([5.0]), 0.0), [5.0, 0.0])


def test_gamma_hand_example():
    r = gamma_rule(np.array([1.0, 1.0]), np.array([[2.0], [-1.0]]), np.array([1.0]), 1.0, 0.0)
    np.testing.assert_allclose(r, [4 / 3, -1 / 3])


@given(seeds)
@settings(max_examples=50)
def test_gamma_zero_is_epsilon(seed):
    rng = np.random.default_rng(seed)
    x, w, r = rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal((3, 5))
    np.testing.assert_allclose(gamma_rule(x, w, r, 0.0, 1e-9), epsilon_rule(x, w, x @ w, r, 1e-9), atol=1e-12, rtol=0)


@given(seeds, st.floats(-5, 5), st.sampled_from([0.0, 0.25, 1.0]))
@settings(max_examples=50)
def test_gamma_linear_in_relevance(seed, alpha, gamma):
    rng = np.random.default_rng(seed)
    x, w, r = rng.standard_normal((2, 4)), rng.standard_normal((4, 3)), rng.standard_normal((2, 3))
    base = gamma_rule(x, w, r, gamma, 1e-9)
    np.testing.assert_allclose(gamma_rule(x, w, alpha * r, gamma, 1e-9), alpha * base, atol=1e-9, rtol=1e-9)


@given(seeds)
@settings(max_examples=50)
def test_epsilon_conserves_without_bias(seed):
    rng = np.random.default_rng(seed)
    x, w, r = rng.standard_normal((4,)), rng.standard_normal((4, 3)), rng.standard_normal(3)
    z = x @ w
    if np.min(np.abs(z)) < 1e-3:
        return
    got = epsilon_rule(x, w, z, r, 1e-9)
    assert abs(got.sum() - r.sum()) <= 1e-6 * (1 + np.abs(r).sum())


def test_bias_share_is_absorbed():
    x, w, b = np.array([1.0]), np.array([[1.0]]), np.array([1.0])
    r = gamma_rule(x, w, np.array([2.0]), 0.0, 0.0, bias=b)
    np.testing.assert_allclose(r, [1.0])


@pytest.mark.parametrize(
    "a, b, rc, ra, rb",
    [(1.0, -3.0, 4.0, 1.0, 3.0), (2.0, 2.0, 1.0, 0.5, 0.5), (0.0, 0.0, 1.0, 0.5, 0.5)],
)
def test_abs_ratio_examples(a, b, rc, ra, rb):
    got = abs_ratio_rule([np.array(a), np.array(b)], np.array(rc))
    assert float(got[0]) == pytest.approx(ra) and float(got[1]) == pytest.approx(rb)


def test_abs_ratio_broadcast_operand():
    a, b = np.ones((2, 3)), np.array(3.0)
    ra, rb = abs_ratio_rule([a, b], np.ones((2, 3)))
    assert ra.shape == (2, 3) and rb.shape == ()
    assert ra.sum() + rb.sum() == pytest.approx(6.0)


@given(seeds)
@settings(max_examples=50)
def test_abs_ratio_conserves_exactly(seed):
    rng = np.random.default_rng(seed)
    ops = [rng.standard_normal((2, 3)) * (rng.random((2, 3)) > 0.3) for _ in range(3)]
    r = rng.standard_normal((2, 3))
    np.testing.assert_allclose(sum(abs_ratio_rule(ops, r)), r, atol=1e-12)


def test_reduce_abs_ratio_conserves():
    x = np.array([[1.0, -3.0], [0.0, 0.0]])
    r = reduce_abs_ratio_rule(x, np.array([4.0, 2.0]), axis=1, keepdim=False)
    np.testing.assert_allclose(r, [[1.0, 3.0], [1.0, 1.0]])
    full = reduce_abs_ratio_rule(x, np.array(8.0), axis=None, keepdim=False)
    assert full.sum() == pytest.approx(8.0)


def test_bilinear_identity_matrix():
    v = np.array([[1.0, 2.0], [3.0, -4.0]])
    r = np.array([[0.5, 1.5], [-2.0, 1.0]])
    a = np.eye(2)
    ra, rv = bilinear_rule(a, v, a @ v, r, 0.0)
    assert ra.sum() == pytest.approx(r.sum() / 2)
    np.testing.assert_allclose(rv, r / 2)


def test_bilinear_scalar_and_zero():
    ra, rv = bilinear_rule(np.array([[2.0]]), np.array([[3.0]]), np.array([[6.0]]), np.array([[1.0]]), 0.0)
    assert ra.item() == pytest.approx(0.5) and rv.item() == pytest.approx(0.5)
    a, v = np.ones((2, 2)), np.ones((2, 2))
    ra, rv = bilinear_rule(a, v, a @ v, np.zeros((2, 2)), 1e-9)
    assert not ra.any() and not rv.any()


def test_bilinear_shape_error():
    with pytest.raises(ShapeError):
        bilinear_rule(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), 0.0)


@given(seeds)
@settings(max_examples=40)
def test_bilinear_conserves_at_zero_eps(seed):
    rng = np.random.default_rng(seed)
    a, v = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 3))
    o = a @ v
    if np.min(np.abs(o)) < 1e-3:
        return
    r = rng.standard_normal(o.shape)
    ra, rv = bilinear_rule(a, v, o, r, 0.0)
    assert ra.sum() + rv.sum() == pytest.approx(r.sum(), rel=1e-8, abs=1e-8)


def test_softmax_rule_examples():
    np.testing.assert_array_equal(softmax_rule(np.zeros(3), np.full(3, 1 / 3), np.ones(3)), 0)
    x = np.array([1.0, -1.0])
    got = softmax_rule(x, softmax_forward(x), np.array([1.0, 0.0]))
    np.testing.assert_allclose(got, [0.1192, 0.1192], atol=1e-3)
    np.testing.assert_array_equal(softmax_rule(np.array([2.5]), np.array([1.0]), np.array([3.0])), [0.0])


@given(seeds)
@settings(max_examples=30)
def test_softmax_rule_literal_formula(seed):
    rng = np.random.default_rng(seed)
    x, r = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    s = softmax_forward(x)
    got = softmax_rule(x, s, r)
    for i in range(3):
        for j in range(4):
            assert got[i, j] == pytest.approx(x[i, j] * (r[i, j] - s[i, j] * r[i].sum()))


def test_identity_and_layernorm():
    r = np.arange(4.0)
    assert identity_rule(r) is r
    assert layernorm_rule({}, r) is r
    assert layernorm_rule({}, None) is None


def test_layernorm_through_propagate_node_conserves():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 5))
    r = rng.standard_normal((2, 5))
    (got,) = propagate_node(OpKind.LAYERNORM, OpAttrs(), {}, [r], [(2, 5)], [(2, 5)], COMPOSITES["epsilon"])
    assert abs(got.sum() - r.sum()) <= 1e-9


@pytest.mark.parametrize(
    "kind, attrs, shape",
    [
        (OpKind.TRANSPOSE, OpAttrs(), (2, 3)),
        (OpKind.PERMUTE, OpAttrs(perm=[2, 0, 1]), (2, 3, 4)),
        (OpKind.RESHAPE, OpAttrs(shape=(6,)), (2, 3)),
        (OpKind.EXPAND, OpAttrs(shape=(4, 2, 3)), (2, 3)),
        (OpKind.EXPAND, OpAttrs(shape=(2, 3)), (2, 1)),
        (OpKind.SLICE, OpAttrs(axis=1, start=1, stop=3), (2, 4)),
    ],
)
def test_gradient_route_conserves_and_matches_shape(kind, attrs, shape):
    rng = np.random.default_rng(0)
    (out,) = forward_eval(kind, [rng.standard_normal(shape)], attrs)
    r = rng.standard_normal(out.shape)
    (back,) = gradient_route_rule(kind, attrs, [shape], [r])
    assert back.shape == shape
    assert back.sum() == pytest.approx(r.sum(), abs=1e-12)


def test_gradient_route_transpose_and_slice_values():
    r = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(gradient_route_rule(OpKind.TRANSPOSE, OpAttrs(), [(3, 2)], [r])[0], r.T)
    (s,) = gradient_route_rule(OpKind.SLICE, OpAttrs(axis=1, start=1, stop=3), [(2, 4)], [np.ones((2, 2))])
    np.testing.assert_array_equal(s, [[0, 1, 1, 0], [0, 1, 1, 0]])


def test_gradient_route_multi_output():
    parts = [np.ones(3), None]
    (back,) = gradient_route_rule(OpKind.UNBIND, OpAttrs(axis=0), [(2, 3)], parts, [(3,), (3,)])
    np.testing.assert_array_equal(back, [[1, 1, 1], [0, 0, 0]])
    (back,) = gradient_route_rule(OpKind.SPLIT, OpAttrs(axis=1, sizes=[1, 2]), [(2, 3)], [np.ones((2, 1)), np.full((2, 2), 2.0)], [(2, 1), (2, 2)])
    np.testing.assert_array_equal(back, [[1, 2, 2], [1, 2, 2]])
    assert gradient_route_rule(OpKind.SPLIT, OpAttrs(axis=0), [(2,)], [None, None], [(1,), (1,)]) == [None]


def test_cat_and_stack_routes():
    r = np.arange(10.0).reshape(2, 5)
    a, b = gradient_route_rule(OpKind.CAT, OpAttrs(axis=1), [(2, 2), (2, 3)], [r])
    np.testing.assert_array_equal(np.concatenate([a, b], axis=1), r)
    s = np.arange(6.0).reshape(2, 3)
    parts = gradient_route_rule(OpKind.STACK, OpAttrs(axis=0), [(3,), (3,)], [s])
    np.testing.assert_array_equal(parts[1], s[1])


def test_maxpool_route_example_and_bounds():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    _, idx = maxpool2d_forward(x, OpAttrs(kernel=2, stride=2))
    out = maxpool_route(idx, np.array(5.0).reshape(1, 1, 1, 1), (1, 1, 2, 2))
    np.testing.assert_array_equal(out.ravel(), [0, 0, 0, 5])
    with pytest.raises(IndexError):
        maxpool_route(np.array([[[[9]]]]), np.ones((1, 1, 1, 1)), (1, 1, 2, 2))


@given(seeds)
@settings(max_examples=30)
def test_maxpool_route_conserves(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 4))
    vals, idx = maxpool2d_forward(x, OpAttrs(kernel=2, stride=2))
    r = rng.standard_normal(vals.shape)
    assert maxpool_route(idx, r, x.shape).sum() == pytest.approx(r.sum(), abs=1e-12)


def test_conv_gamma_matches_unfolded_linear():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 1, 3, 3))
    w = rng.standard_normal((1, 1, 3, 3))
    ctx = {"x": x, "w": w, "b": None}
    r = rng.standard_normal((1, 1, 1, 1))
    (got, _) = propagate_node(OpKind.CONV2D, OpAttrs(kernel=3, stride=1), ctx, [r], [x.shape, w.shape], [r.shape], COMPOSITES["gamma"])
    ref = gamma_rule(x.reshape(1, 9), w.reshape(1, 9).T, r.reshape(1, 1), 0.25, 1e-9)
    np.testing.assert_allclose(got.reshape(1, 9), ref, atol=1e-12)


def test_softmax_skip_and_attnlrp():
    x = np.array([[1.0, -1.0]])
    s = softmax_forward(x)
    r = np.array([[1.0, 0.0]])
    skip = propagate_node(OpKind.SOFTMAX, OpAttrs(axis=-1), {"out": s}, [r], [x.shape], [x.shape], COMPOSITES["epsilon"])
    assert skip == [None]
    (got,) = propagate_node(OpKind.SOFTMAX, OpAttrs(axis=-1), {"out": s}, [r], [x.shape], [x.shape], COMPOSITES["attnlrp"], input_values=[x])
    np.testing.assert_allclose(got, [[0.1192, 0.1192]], atol=1e-3)


def test_mul_parameter_operand_gets_nothing():
    a, b = np.array([2.0, -1.0]), np.array([3.0, 3.0])
    r = np.array([1.0, 1.0])
    ra, rb = propagate_node(OpKind.MUL, OpAttrs(), {"a": a, "b": b}, [r], [(2,), (2,)], [(2,)], COMPOSITES["epsilon"],
                            producers=[OpKind.INPUT, OpKind.PARAMETER])
    assert rb is None
    np.testing.assert_allclose(ra, r, atol=1e-8)


def test_mul_bilinear_halves():
    a, b = np.array([2.0]), np.array([3.0])
    ra, rb = propagate_node(OpKind.MUL, OpAttrs(), {"a": a, "b": b}, [np.array([1.0])], [(1,), (1,)], [(1,)],
                            COMPOSITES["attnlrp"], producers=[OpKind.LINEAR, OpKind.LINEAR])
    assert ra.item() == pytest.approx(0.5) and rb.item() == pytest.approx(0.5)


def test_masked_fill_zeros_masked_positions():
    mask = np.array([True, False])
    (got,) = propagate_node(OpKind.MASKED_FILL, OpAttrs(mask=mask, fill=0.0), {"mask": mask}, [np.ones(2)], [(2,)], [(2,)],
                            COMPOSITES["epsilon"])
    np.testing.assert_array_equal(got, [0, 1])


def test_none_relevance_passes_through():
    for kind in (OpKind.RELU, OpKind.TRANSPOSE, OpKind.ADD):
        out = propagate_node(kind, OpAttrs(), {}, [None], [(2, 2)] * (2 if kind is OpKind.ADD else 1), [(2, 2)],
                             COMPOSITES["epsilon"])
        assert all(r is None for r in out)


def test_unsupported_and_lenient():
    with pytest.raises(UnsupportedOpError, match="FancyNorm"):
        propagate_node("FancyNorm", OpAttrs(), {}, [np.ones(2)], [(2,)], [(2,)], COMPOSITES["epsilon"])
    (got,) = propagate_node("FancyNorm", OpAttrs(), {}, [np.ones(2)], [(2,)], [(2,)], COMPOSITES["epsilon"], lenient=True)
    np.testing.assert_array_equal(got, [1, 1])


def test_needs_input_values():
    assert needs_input_values(OpKind.ADD, COMPOSITES["epsilon"])
    assert needs_input_values(OpKind.SOFTMAX, COMPOSITES["attnlrp"])
    assert not needs_input_values(OpKind.SOFTMAX, COMPOSITES["epsilon"])
    assert not needs_input_values(OpKind.CAT, COMPOSITES["attnlrp"])


def test_every_opkind_has_one_rule():
    assert set(OpKind) == set(RULE_REGISTRY)


def test_rule_config_json(tmp_path):
    cfg = RuleConfig(epsilon=1e-6, gamma_linear=0.1)
    path = tmp_path / "rules.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert RuleConfig.load(str(path)) == cfg
    with pytest.raises(ValueError):
        RuleConfig.from_json({"epsilon": 1e-9, "bogus": 1})
    with pytest.raises(ValueError):
        RuleConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        RuleConfig(softmax_mode="magic")
    assert cfg.key() != RuleConfig().key()
