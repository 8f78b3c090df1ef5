"""Relevance propagation rules, one per op family.

The low-level rules (``epsilon_rule``, ``gamma_rule``, ...) are pure array
functions. :func:`propagate_node` maps a recorded node plus its output
relevance onto those rules; both engines call it, so they cannot disagree on
rule semantics.

Relevance lists use ``None`` for an all-zero tensor. Every rule is linear in
the incoming relevance, so ``None`` in gives ``None`` out.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from .errors import ShapeError, UnsupportedOpError
from .tensor import OpAttrs, OpKind, Tensor, col2im, im2col, reduce_to_shape

Relevance = Tensor | None


@dataclass(frozen=True)
class RuleConfig:
    epsilon: float = 1e-9
    gamma_linear: float = 0.0
    gamma_conv: float = 0.0
    softmax_mode: str = "attnlrp"
    bilinear_enabled: bool = True
    layernorm_mode: str = "detached-identity"

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma_linear < 0 or self.gamma_conv < 0:
            raise ValueError("gammas must be non-negative")
        if self.softmax_mode not in ("attnlrp", "skip"):
            raise ValueError(f"unknown softmax_mode {self.softmax_mode!r}")
        if self.layernorm_mode != "detached-identity":
            raise ValueError(f"unknown layernorm_mode {self.layernorm_mode!r}")

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "RuleConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown rule config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str) -> "RuleConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def key(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


COMPOSITES: dict[str, RuleConfig] = {
    "epsilon": RuleConfig(softmax_mode="skip", bilinear_enabled=False),
    "gamma": RuleConfig(gamma_linear=0.05, gamma_conv=0.25, softmax_mode="skip", bilinear_enabled=False),
    "attnlrp": RuleConfig(softmax_mode="attnlrp", bilinear_enabled=True),
}


def stabilize(z: Tensor, eps: float) -> Tensor:
    """``z + sign(z) * eps`` with ``sign(0) = +1``."""
    return z + np.where(z >= 0, eps, -eps)


def epsilon_rule(x: Tensor, w: Tensor, z: Tensor, r_out: Tensor, eps: float) -> Tensor:
    """LRP-epsilon for ``z = x @ w (+ b)``.

    ``x`` has shape ``(..., in)``, ``w`` ``(in, out)``, ``z`` and ``r_out``
    ``(..., out)``. Any bias share is absorbed and not redistributed.
    """
    s = r_out / stabilize(z, eps) if eps else r_out / z
    return x * (s @ w.T)


def gamma_rule(
    x: Tensor, w: Tensor, r_out: Tensor, gamma: float, eps: float, bias: Tensor | None = None
) -> Tensor:
    """LRP-gamma: epsilon rule on weights boosted by ``gamma * max(w, 0)``."""
    wg = w + gamma * np.maximum(w, 0.0)
    z = x @ wg
    if bias is not None:
        z = z + bias + gamma * np.maximum(bias, 0.0)
    return epsilon_rule(x, wg, z, r_out, eps)


def abs_ratio_rule(operands: Sequence[Tensor], r_out: Tensor) -> list[Tensor]:
    """Split ``r_out`` across summands in proportion to their magnitudes.

    Operands may be broadcast against ``r_out``; each share is summed back to
    its operand's shape. Where every magnitude is zero the split is uniform.
    """
    mags = [np.broadcast_to(np.abs(op), r_out.shape) for op in operands]
    denom = sum(mags)
    zero = denom == 0
    safe = np.where(zero, 1.0, denom)
    k = len(operands)
    out = []
    for op, m in zip(operands, mags):
        share = np.where(zero, 1.0 / k, m / safe)
        out.append(reduce_to_shape(r_out * share, np.shape(op)))
    return out


def reduce_abs_ratio_rule(x: Tensor, r_out: Tensor, axis: int | None, keepdim: bool) -> Tensor:
    """Abs-ratio split for Sum/Mean reductions over ``axis``."""
    mag = np.abs(x)
    denom = mag.sum(axis=axis, keepdims=True)
    n = x.size if axis is None else x.shape[axis]
    r = r_out
    if axis is None:
        r = np.reshape(r_out, (1,) * x.ndim)
    elif not keepdim:
        r = np.expand_dims(r_out, axis)
    zero = denom == 0
    share = np.where(zero, 1.0 / n, mag / np.where(zero, 1.0, denom))
    return r * share


def bilinear_rule(a: Tensor, v: Tensor, o: Tensor, r_out: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    """Uniform split for ``o = a @ v`` with both operands activations.

    Supports leading batch dims. ``eps=0`` disables stabilization.
    """
    if a.shape[-1] != v.shape[-2] or o.shape != r_out.shape or o.shape[-2:] != (a.shape[-2], v.shape[-1]):
        raise ShapeError(f"bilinear: shapes A{a.shape} V{v.shape} O{o.shape} R{r_out.shape} mismatch")
    denom = 2.0 * o
    s = r_out / (stabilize(denom, eps) if eps else denom)
    r_a = a * (s @ np.swapaxes(v, -1, -2))
    r_v = v * (np.swapaxes(a, -1, -2) @ s)
    return r_a, r_v


def softmax_rule(x: Tensor, s: Tensor, r_out: Tensor, axis: int = -1) -> Tensor:
    """AttnLRP softmax rule applied independently along ``axis``."""
    return x * (r_out - s * r_out.sum(axis=axis, keepdims=True))


def identity_rule(r_out: Tensor) -> Tensor:
    return r_out


def layernorm_rule(ctx: dict[str, Any] | None, r_out: Relevance) -> Relevance:
    """Normalization statistics are treated as constants; relevance passes through."""
    return r_out


def maxpool_route(indices: np.ndarray, r_out: Tensor, input_shape: tuple[int, ...]) -> Tensor:
    """Winner-take-all scatter of pooled relevance onto argmax positions."""
    n, c, h, w = input_shape
    if indices.shape != r_out.shape:
        raise ShapeError(f"maxpool_route: indices {indices.shape} vs relevance {r_out.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= h * w):
        raise IndexError("maxpool_route: winner index out of bounds")
    out = np.zeros((n * c, h * w), dtype=r_out.dtype)
    flat_idx = indices.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), flat_idx.shape[1])
    np.add.at(out, (rows, flat_idx.ravel()), r_out.reshape(n * c, -1).ravel())
    return out.reshape(input_shape)


def gradient_route_rule(
    kind: OpKind, attrs: OpAttrs, input_shapes: Sequence[tuple[int, ...]], r_out: Sequence[Relevance],
    output_shapes: Sequence[tuple[int, ...]] | None = None,
) -> list[Relevance]:
    """Re-index relevance exactly as the op's gradient re-indexes gradients."""
    if kind in (OpKind.UNBIND, OpKind.SPLIT):
        if all(r is None for r in r_out):
            return [None]
        assert output_shapes is not None
        parts = [np.zeros(s) if r is None else r for r, s in zip(r_out, output_shapes)]
        axis = attrs.axis or 0
        if kind is OpKind.UNBIND:
            return [np.stack(parts, axis=axis)]
        return [np.concatenate(parts, axis=axis)]
    r = r_out[0]
    if r is None:
        return [None] * len(input_shapes)
    shape = input_shapes[0]
    if kind in (OpKind.VIEW, OpKind.RESHAPE):
        return [r.reshape(shape)]
    if kind is OpKind.TRANSPOSE:
        d0, d1 = attrs.dims or (-2, -1)
        return [np.swapaxes(r, d0, d1)]
    if kind is OpKind.PERMUTE:
        return [r.transpose(np.argsort(attrs.perm))]
    if kind is OpKind.EXPAND:
        lead = r.ndim - len(shape)
        red = r.sum(axis=tuple(range(lead))) if lead else r
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and red.shape[i] != 1)
        if axes:
            red = red.sum(axis=axes, keepdims=True)
        return [red.reshape(shape)]
    if kind is OpKind.SLICE:
        out = np.zeros(shape, dtype=r.dtype)
        axis = (attrs.axis or 0) % len(shape)
        index = [slice(None)] * len(shape)
        index[axis] = slice(attrs.start, attrs.stop, attrs.step)
        out[tuple(index)] = r
        return [out]
    if kind is OpKind.CAT:
        axis = (attrs.axis or 0) % len(shape)
        bounds = np.cumsum([s[axis] for s in input_shapes])[:-1]
        return list(np.split(r, bounds, axis=axis))
    if kind is OpKind.STACK:
        axis = attrs.axis or 0
        return [np.take(r, i, axis=axis) for i in range(len(input_shapes))]
    raise UnsupportedOpError(str(kind), detail="no gradient route")


# op kind -> rule family; kinds absent here are unsupported
RULE_REGISTRY: dict[OpKind, str] = {
    OpKind.INPUT: "terminal",
    OpKind.PARAMETER: "terminal",
    OpKind.LINEAR: "epsilon/gamma",
    OpKind.CONV2D: "epsilon/gamma",
    OpKind.MATMUL: "epsilon/gamma|bilinear",
    OpKind.BMM: "epsilon/gamma|bilinear",
    OpKind.MUL: "epsilon|bilinear",
    OpKind.DIV: "epsilon",
    OpKind.ADD: "abs_ratio",
    OpKind.SUB: "abs_ratio",
    OpKind.SUM: "abs_ratio",
    OpKind.MEAN: "abs_ratio",
    OpKind.CAT: "gradient_route",
    OpKind.STACK: "gradient_route",
    OpKind.UNBIND: "gradient_route",
    OpKind.SPLIT: "gradient_route",
    OpKind.VIEW: "gradient_route",
    OpKind.RESHAPE: "gradient_route",
    OpKind.TRANSPOSE: "gradient_route",
    OpKind.PERMUTE: "gradient_route",
    OpKind.EXPAND: "gradient_route",
    OpKind.SLICE: "gradient_route",
    OpKind.MAXPOOL2D: "maxpool_route",
    OpKind.LAYERNORM: "layernorm",
    OpKind.SOFTMAX: "softmax",
    OpKind.RELU: "identity",
    OpKind.GELU: "identity",
    OpKind.SILU: "identity",
    OpKind.NEG: "identity",
    OpKind.CLONE: "identity",
    OpKind.MASKED_FILL: "identity",
}

_VALUE_KINDS = frozenset({OpKind.ADD, OpKind.SUB, OpKind.SUM, OpKind.MEAN})


def is_supported(kind: OpKind | str) -> bool:
    return isinstance(kind, OpKind) and kind in RULE_REGISTRY


def needs_input_values(kind: OpKind | str, config: RuleConfig) -> bool:
    """Whether the rule for ``kind`` reads input activations the node never caches."""
    if kind in _VALUE_KINDS:
        return True
    return kind is OpKind.SOFTMAX and config.softmax_mode == "attnlrp"


def _product_rule(
    a: Tensor, b: Tensor, o: Tensor, r: Tensor, producers: Sequence[Any], config: RuleConfig, batched: bool
) -> list[Relevance]:
    a_param = producers[0] is OpKind.PARAMETER
    b_param = producers[1] is OpKind.PARAMETER
    eps = config.epsilon
    if b_param and not a_param:
        if batched:
            s = r / stabilize(o, eps)
            return [a * (s @ np.swapaxes(b, -1, -2)), None]
        return [gamma_rule(a, b, r, config.gamma_linear, eps), None]
    if a_param and not b_param:
        s = r / stabilize(o, eps)
        return [None, b * (np.swapaxes(a, -1, -2) @ s)]
    from_softmax = producers[0] is OpKind.SOFTMAX
    if config.bilinear_enabled and not (from_softmax and config.softmax_mode == "skip"):
        r_a, r_b = bilinear_rule(a, b, o, r, eps)
        return [r_a, r_b]
    # first operand acts as constant weights; all relevance follows the second
    s = r / stabilize(o, eps)
    return [None, b * (np.swapaxes(a, -1, -2) @ s)]


def propagate_node(
    kind: OpKind | str,
    attrs: OpAttrs,
    ctx: dict[str, Any],
    r_out: Sequence[Relevance],
    input_shapes: Sequence[tuple[int, ...]],
    output_shapes: Sequence[tuple[int, ...]],
    config: RuleConfig,
    input_values: Sequence[Tensor] | None = None,
    producers: Sequence[Any] = (),
    lenient: bool = False,
) -> list[Relevance]:
    """Distribute a node's per-output relevance onto its inputs.

    Args:
        kind: op kind of the node.
        attrs, ctx: the node's static attributes and cached tensors.
        r_out: relevance per output slot (``None`` = zero).
        input_shapes, output_shapes: shape metadata recorded at forward time.
        config: active rule configuration.
        input_values: activations of the node's inputs; required only when
            :func:`needs_input_values` is true for ``kind``.
        producers: kinds of the nodes feeding each input.
        lenient: map unsupported kinds to the identity rule instead of raising.

    Returns:
        One relevance entry per input, in forward argument order.
    """
    n_in = len(input_shapes)
    if not is_supported(kind):
        if not lenient:
            raise UnsupportedOpError(str(kind))
        r = r_out[0] if r_out else None
        if r is not None and (n_in != 1 or input_shapes[0] != r.shape):
            raise UnsupportedOpError(str(kind), detail="lenient identity needs one same-shaped input")
        return [r] + [None] * (n_in - 1)
    kind = OpKind(kind)
    if kind in (OpKind.UNBIND, OpKind.SPLIT):
        return gradient_route_rule(kind, attrs, input_shapes, r_out, output_shapes)
    r = r_out[0]
    if r is None:
        return [None] * n_in
    family = RULE_REGISTRY[kind]
    eps = config.epsilon

    if family == "terminal":
        return []
    if family == "identity":
        if kind is OpKind.MASKED_FILL:
            return [np.where(np.broadcast_to(ctx["mask"], r.shape), 0.0, r)]
        return [identity_rule(r)]
    if family == "gradient_route":
        return gradient_route_rule(kind, attrs, input_shapes, [r])
    if family == "layernorm":
        return [layernorm_rule(ctx, r)]
    if family == "maxpool_route":
        return [maxpool_route(ctx["indices"], r, input_shapes[0])]
    if family == "softmax":
        if config.softmax_mode == "skip":
            return [None]
        if input_values is None:
            raise ValueError("softmax rule needs the softmax input")
        axis = -1 if attrs.axis is None else attrs.axis
        return [softmax_rule(input_values[0], ctx["out"], r, axis)]
    if family == "abs_ratio":
        if input_values is None:
            raise ValueError(f"{kind} rule needs its input activations")
        if kind in (OpKind.SUM, OpKind.MEAN):
            return [reduce_abs_ratio_rule(input_values[0], r, attrs.axis, attrs.keepdim)]
        a, b = input_values
        return abs_ratio_rule([a, -b] if kind is OpKind.SUB else [a, b], r)
    if kind is OpKind.LINEAR:
        x, w, b = ctx["x"], ctx["w"], ctx["b"]
        out = [gamma_rule(x, w, r, config.gamma_linear, eps, b), None]
        return out + [None] * (n_in - 2)
    if kind is OpKind.CONV2D:
        x, w, b = ctx["x"], ctx["w"], ctx["b"]
        k = w.shape[2]
        stride = attrs.stride or 1
        cols = im2col(x, k, stride, attrs.padding)
        wc = w.reshape(w.shape[0], -1).T
        r_cols = gamma_rule(cols, wc, r.transpose(0, 2, 3, 1), config.gamma_conv, eps, b)
        out = [col2im(r_cols, x.shape, k, stride, attrs.padding), None]
        return out + [None] * (n_in - 2)
    if kind in (OpKind.MATMUL, OpKind.BMM):
        a, b = ctx["a"], ctx["b"]
        return _product_rule(a, b, a @ b, r, producers, config, kind is OpKind.BMM)
    if kind is OpKind.MUL:
        a, b = ctx["a"], ctx["b"]
        z = a * b
        a_param = producers[0] is OpKind.PARAMETER
        b_param = producers[1] is OpKind.PARAMETER
        if a_param != b_param:
            share = reduce_to_shape(z / stabilize(z, eps) * r, (a if b_param else b).shape)
            return [share, None] if b_param else [None, share]
        if config.bilinear_enabled:
            half = z / stabilize(2.0 * z, eps) * r
            return [reduce_to_shape(half, a.shape), reduce_to_shape(half, b.shape)]
        return [None, reduce_to_shape(z / stabilize(z, eps) * r, b.shape)]
    if kind is OpKind.DIV:
        a, b = ctx["a"], ctx["b"]
        z = a / b
        return [reduce_to_shape(z / stabilize(z, eps) * r, a.shape), None]
    raise UnsupportedOpError(str(kind))  # pragma: no cover
