from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from oplrp import COMPOSITES, Graph, OpKind, get_model, init_relevance, run_forward

MODELS = ["mlp", "residual", "toy_attention", "toy_cnn"]


@dataclass
class Named:
    graph: Graph
    ids: dict[str, int]

    def name(self, node_id: int) -> str:
        inv = {v: k for k, v in self.ids.items()}
        return inv.get(node_id, str(node_id))


def chain_graph(shadow: bool = False) -> Named:
    """A <- B <- C <- D <- E: only A's rule needs an activation, only E can supply it."""
    rng = np.random.default_rng(3)
    g = Graph(shadow=shadow)
    x = g.input(rng.standard_normal((2, 3)), "x")
    w = g.param(rng.standard_normal((3, 4)), "w")
    e = g.op(OpKind.LINEAR, x, w)
    d = g.op(OpKind.CLONE, e)
    c = g.op(OpKind.TRANSPOSE, d)
    b = g.op(OpKind.RESHAPE, c, shape=(8,))
    a = g.op(OpKind.SUM, b, axis=0, keepdim=True)
    return Named(g, {"x": x.node, "w": w.node, "E": e.node, "D": d.node, "C": c.node, "B": b.node, "A": a.node})


def tree_graph(shadow: bool = False) -> Named:
    """A = Add(B, C), B = Add(D, E); D, E, C are Arg nodes."""
    rng = np.random.default_rng(4)
    g = Graph(shadow=shadow)
    x = g.input(rng.standard_normal((1, 3)), "x")
    ws = [g.param(rng.standard_normal((3, 3)), f"w{i}") for i in range(3)]
    d = g.op(OpKind.LINEAR, x, ws[0])
    e = g.op(OpKind.LINEAR, x, ws[1])
    c = g.op(OpKind.LINEAR, x, ws[2])
    b = g.op(OpKind.ADD, d, e)
    a = g.op(OpKind.ADD, b, c)
    return Named(g, {"x": x.node, "D": d.node, "E": e.node, "C": c.node, "B": b.node, "A": a.node})


def deadlock_graph(shadow: bool = False) -> Named:
    """A = Add(B, D), B = Linear(C), C = ReLU(E), D = Clone(E), E = Linear(x)."""
    rng = np.random.default_rng(5)
    g = Graph(shadow=shadow)
    x = g.input(rng.standard_normal((1, 4)), "x")
    w0 = g.param(rng.standard_normal((4, 4)), "w0")
    w1 = g.param(rng.standard_normal((4, 4)), "w1")
    e = g.op(OpKind.LINEAR, x, w0)
    c = g.op(OpKind.RELU, e)
    b = g.op(OpKind.LINEAR, c, w1)
    d = g.op(OpKind.CLONE, e)
    a = g.op(OpKind.ADD, b, d)
    return Named(g, {"x": x.node, "E": e.node, "C": c.node, "B": b.node, "D": d.node, "A": a.node})


def random_graph(seed: int, n_ops: int = 12, shadow: bool = True) -> Graph:
    """Random DAG over (2, 3) activations mixing every promise pathway."""
    rng = np.random.default_rng(seed)
    g = Graph(shadow=shadow)
    pool = [g.input(rng.standard_normal((2, 3)), "x")]
    w = g.param(rng.standard_normal((3, 3)) / np.sqrt(3), "w")
    scale = g.param(rng.uniform(0.5, 1.5, size=(3,)), "s")
    mask = rng.random((2, 3)) < 0.3
    for _ in range(n_ops):
        a = pool[rng.integers(len(pool))]
        b = pool[rng.integers(len(pool))]
        op = rng.integers(15)
        if op == 0:
            out = g.op(OpKind.ADD, a, b)
        elif op == 1:
            out = g.op(OpKind.SUB, a, b)
        elif op == 2:
            out = g.op(OpKind.MUL, a, b)
        elif op == 3:
            out = g.op(OpKind.LINEAR, a, w)
        elif op == 4:
            out = g.op(OpKind.RELU, a)
        elif op == 5:
            out = g.op(OpKind.CLONE, a)
        elif op == 6:
            out = g.op(OpKind.EXPAND, g.op(OpKind.SUM, a, axis=-1, keepdim=True), shape=(2, 3))
        elif op == 7:
            left, right = g.op(OpKind.SPLIT, a, axis=-1, sizes=[1, 2])
            out = g.op(OpKind.CAT, right, left, axis=-1)
        elif op == 8:
            r0, r1 = g.op(OpKind.UNBIND, a, axis=0)
            out = g.op(OpKind.STACK, r1, r0, axis=0)
        elif op == 9:
            out = g.op(OpKind.TRANSPOSE, g.op(OpKind.TRANSPOSE, a))
        elif op == 10:
            out = g.op(OpKind.SOFTMAX, a, axis=-1)
        elif op == 11:
            out = g.op(OpKind.LAYERNORM, a)
        elif op == 12:
            out = g.op(OpKind.MASKED_FILL, a, mask=mask, fill=0.0)
        elif op == 13:
            out = g.op(OpKind.DIV, a, scale)
        else:
            out = g.op(OpKind.NEG, g.op(OpKind.GELU, a))
        pool.append(out)
    root = pool[-1]
    for v in pool[-4:-1]:
        root = g.op(OpKind.ADD, root, v)
    g.op(OpKind.MEAN, root, axis=None)
    return g


def model_case(name: str, seed: int, bias: bool = True, shadow: bool = True):
    m = get_model(name, seed=seed, bias=bias)
    x = m.sample_input(seed + 10_000)
    out, g = run_forward(m, x, shadow=shadow)
    return m, x, out, g, init_relevance(out, int(np.argmax(out)))


@pytest.fixture(params=MODELS)
def model_name(request):
    return request.param


@pytest.fixture(params=sorted(COMPOSITES))
def composite(request):
    return COMPOSITES[request.param]
