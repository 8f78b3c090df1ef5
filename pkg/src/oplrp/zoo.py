"""Small deterministic models that exercise every rule and promise pathway."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .graph import Graph, Var
from .tensor import OpKind, Tensor

Builder = Callable[[Graph, Var, dict[str, Var]], Var]


@dataclass
class ModelSpec:
    name: str
    params: dict[str, Tensor]
    input_shape: tuple[int, ...]
    build: Builder = field(repr=False)
    layers: list[str] = field(default_factory=list)

    def sample_input(self, rng: np.random.Generator | int = 0) -> Tensor:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        return rng.standard_normal(self.input_shape)

    def to_json(self, x: Tensor) -> dict[str, Any]:
        """Graph JSON fixture of one forward pass, including parameter values."""
        _, g = run_forward(self, x)
        return g.to_json(include_values=True)


def run_forward(model: ModelSpec, x: Tensor, shadow: bool = False) -> tuple[Tensor, Graph]:
    """Record one forward pass of ``model`` on ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ValueError(f"{model.name}: expected input shape {model.input_shape}, got {x.shape}")
    g = Graph(shadow=shadow)
    xv = g.input(x, "x")
    pv = {k: g.param(v, k) for k, v in model.params.items()}
    out = model.build(g, xv, pv)
    g.set_root(out)
    return out.value, g


def _gauss(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return rng.standard_normal(shape) / np.sqrt(fan_in)


def _linear(g: Graph, x: Var, p: dict[str, Var], name: str) -> Var:
    b = p.get(name + ".b")
    if b is None:
        return g.op(OpKind.LINEAR, x, p[name + ".w"])
    return g.op(OpKind.LINEAR, x, p[name + ".w"], b)


def build_mlp(widths: list[int], seed: int = 0, bias: bool = True) -> ModelSpec:
    """Linear+ReLU stack; no promise-generating kinds."""
    if len(widths) < 2:
        raise ValueError("an MLP needs at least input and output widths")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        params[f"fc{i}.w"] = _gauss(rng, (a, b), a)
        if bias:
            params[f"fc{i}.b"] = 0.1 * rng.standard_normal(b)
    n = len(widths) - 1

    def build(g: Graph, x: Var, p: dict[str, Var]) -> Var:
        h = x
        for i in range(n):
            h = _linear(g, h, p, f"fc{i}")
            if i < n - 1:
                h = g.op(OpKind.RELU, h)
        return h

    return ModelSpec("mlp", params, (1, widths[0]), build, [f"fc{i}" for i in range(n)])


def build_residual_block(
    width: int = 8,
    depth: int = 1,
    seed: int = 0,
    skip: str = "clone",
    bias: bool = True,
    head: int | None = 3,
) -> ModelSpec:
    """Input projection followed by ``depth`` residual blocks and an optional head.

    Each block computes ``Add(Linear(ReLU(h)), skip(h))``. With
    ``skip="clone"`` the skip path goes through a Clone node, which gives the
    deadlock topology (Add -> Arg -> ReLU -> h and Add -> Clone -> h). With
    ``skip="direct"`` every Add input is an Arg node or another Add, so no
    branch passes through an internal node.
    """
    if skip not in ("clone", "direct"):
        raise ValueError(f"unknown skip mode {skip!r}")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {"proj.w": _gauss(rng, (width, width), width)}
    if bias:
        params["proj.b"] = 0.1 * rng.standard_normal(width)
    for i in range(depth):
        params[f"block{i}.w"] = _gauss(rng, (width, width), width)
        if bias:
            params[f"block{i}.b"] = 0.1 * rng.standard_normal(width)
    if head:
        params["head.w"] = _gauss(rng, (width, head), width)
        if bias:
            params["head.b"] = 0.1 * rng.standard_normal(head)

    def build(g: Graph, x: Var, p: dict[str, Var]) -> Var:
        h = _linear(g, x, p, "proj")
        for i in range(depth):
            branch = _linear(g, g.op(OpKind.RELU, h), p, f"block{i}")
            s = g.op(OpKind.CLONE, h) if skip == "clone" else h
            h = g.op(OpKind.ADD, branch, s)
        if head:
            h = _linear(g, h, p, "head")
        return h

    return ModelSpec(f"residual_{skip}", params, (1, width), build)


def build_toy_attention(
    d_model: int = 8,
    seq: int = 4,
    seed: int = 0,
    heads: int = 2,
    ffn: int = 8,
    classes: int = 3,
    causal: bool = True,
    bias: bool = True,
) -> ModelSpec:
    """Pre-projection, multi-head attention, residual + LayerNorm, SwiGLU FFN, mean-pool head."""
    if d_model % heads:
        raise ValueError("d_model must be divisible by heads")
    dh = d_model // heads
    rng = np.random.default_rng(seed)
    max_seq = seq + 2
    params: dict[str, Tensor] = {
        "embed.w": _gauss(rng, (d_model, d_model), d_model),
        "pos": 0.1 * rng.standard_normal((max_seq, d_model)),
        "qkv.w": _gauss(rng, (d_model, 3 * d_model), d_model),
        "scale": np.asarray(1.0 / np.sqrt(dh)),
        "ln.gamma": 1.0 + 0.1 * rng.standard_normal(d_model),
        "ln.beta": 0.1 * rng.standard_normal(d_model),
        "ffn_in.w": _gauss(rng, (d_model, 2 * ffn), d_model),
        "ffn_out.w": _gauss(rng, (ffn, d_model), ffn),
        "head.w": _gauss(rng, (d_model, classes), d_model),
    }
    if bias:
        for k in ("embed", "qkv", "ffn_in", "ffn_out", "head"):
            params[k + ".b"] = 0.1 * rng.standard_normal(params[k + ".w"].shape[1])
    mask = np.triu(np.ones((seq, seq), dtype=bool), k=1) if causal else None

    def build(g: Graph, x: Var, p: dict[str, Var]) -> Var:
        h = _linear(g, x, p, "embed")
        pos = g.op(OpKind.SLICE, p["pos"], axis=0, start=0, stop=seq)
        h0 = g.op(OpKind.ADD, h, pos)
        qkv = _linear(g, h0, p, "qkv")
        qkv = g.op(OpKind.RESHAPE, qkv, shape=(seq, 3, heads, dh))
        qkv = g.op(OpKind.PERMUTE, qkv, perm=[1, 2, 0, 3])
        q, k, v = g.op(OpKind.UNBIND, qkv, axis=0)
        kt = g.op(OpKind.TRANSPOSE, k, dims=(-2, -1))
        s = g.op(OpKind.BMM, q, kt)
        s = g.op(OpKind.MUL, s, p["scale"])
        if mask is not None:
            s = g.op(OpKind.MASKED_FILL, s, mask=mask, fill=-1e9)
        a = g.op(OpKind.SOFTMAX, s, axis=-1)
        o = g.op(OpKind.BMM, a, v)
        per_head = g.op(OpKind.UNBIND, o, axis=0)
        cat = g.op(OpKind.CAT, *per_head, axis=-1)
        res = g.op(OpKind.ADD, cat, h0)
        ln = g.op(OpKind.LAYERNORM, res)
        y = g.op(OpKind.ADD, g.op(OpKind.MUL, ln, p["ln.gamma"]), p["ln.beta"])
        u = _linear(g, y, p, "ffn_in")
        gate, val = g.op(OpKind.SPLIT, u, axis=-1, sizes=[ffn, ffn])
        f = g.op(OpKind.MUL, g.op(OpKind.SILU, gate), val)
        y2 = g.op(OpKind.ADD, _linear(g, f, p, "ffn_out"), y)
        pooled = g.op(OpKind.MEAN, y2, axis=0)
        return _linear(g, pooled, p, "head")

    return ModelSpec("toy_attention", params, (seq, d_model), build)


def build_toy_cnn(channels: int = 4, seed: int = 0, classes: int = 4, size: int = 8, bias: bool = True) -> ModelSpec:
    """Normalize, two Conv+ReLU+MaxPool stages, flatten, Linear-GELU-Linear."""
    if size % 4:
        raise ValueError("size must be divisible by 4")
    rng = np.random.default_rng(seed)
    hidden = 16
    flat = channels * (size // 4) ** 2
    params: dict[str, Tensor] = {
        "norm.mean": np.full((1, 1, 1, 1), 0.1),
        "norm.std": np.asarray(1.5),
        "conv1.w": _gauss(rng, (channels, 1, 3, 3), 9),
        "conv2.w": _gauss(rng, (channels, channels, 3, 3), 9 * channels),
        "fc1.w": _gauss(rng, (flat, hidden), flat),
        "fc2.w": _gauss(rng, (hidden, classes), hidden),
    }
    if bias:
        for k, n in (("conv1", channels), ("conv2", channels), ("fc1", hidden), ("fc2", classes)):
            params[k + ".b"] = 0.05 * rng.standard_normal(n)

    def conv(g: Graph, x: Var, p: dict[str, Var], name: str) -> Var:
        ins = [x, p[name + ".w"]] + ([p[name + ".b"]] if name + ".b" in p else [])
        return g.op(OpKind.CONV2D, *ins, kernel=3, stride=1, padding=1)

    def build(g: Graph, x: Var, p: dict[str, Var]) -> Var:
        mean = g.op(OpKind.EXPAND, p["norm.mean"], shape=(1, 1, size, size))
        h = g.op(OpKind.DIV, g.op(OpKind.SUB, x, mean), p["norm.std"])
        for name in ("conv1", "conv2"):
            h = g.op(OpKind.RELU, conv(g, h, p, name))
            h = g.op(OpKind.MAXPOOL2D, h, kernel=2, stride=2)
        h = g.op(OpKind.RESHAPE, h, shape=(1, flat))
        h = g.op(OpKind.GELU, _linear(g, h, p, "fc1"))
        return _linear(g, h, p, "fc2")

    return ModelSpec("toy_cnn", params, (1, 1, size, size), build)


ZOO: dict[str, Callable[..., ModelSpec]] = {
    "mlp": lambda seed=0, bias=True: build_mlp([6, 8, 8, 3], seed, bias),
    "residual": lambda seed=0, bias=True: build_residual_block(8, 2, seed, "clone", bias),
    "residual_direct": lambda seed=0, bias=True: build_residual_block(8, 2, seed, "direct", bias),
    "toy_attention": lambda seed=0, bias=True: build_toy_attention(8, 4, seed, bias=bias),
    "toy_cnn": lambda seed=0, bias=True: build_toy_cnn(4, seed, bias=bias),
}


def get_model(name: str, seed: int = 0, bias: bool = True) -> ModelSpec:
    try:
        return ZOO[name](seed=seed, bias=bias)
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(ZOO)}") from None
