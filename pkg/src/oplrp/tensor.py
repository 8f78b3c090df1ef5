"""Dense tensor helpers and forward kernels for every supported op kind.

Tensors are plain :class:`numpy.ndarray` values (row-major, ``float64`` by
default). Every kernel here is pure: it never mutates its inputs and always
returns fresh arrays, so recorded values can be shared freely.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import ShapeError, UnsupportedOpError

Tensor = np.ndarray

DEFAULT_DTYPE = np.float64


class OpKind(str, enum.Enum):
    # terminals
    INPUT = "Input"
    PARAMETER = "Parameter"
    # arithmetic
    ADD = "Add"
    SUB = "Sub"
    MUL = "Mul"
    DIV = "Div"
    NEG = "Neg"
    # linear algebra
    LINEAR = "Linear"
    MATMUL = "MatMul"
    BMM = "BMM"
    CONV2D = "Conv2D"
    # aggregation
    SUM = "Sum"
    MEAN = "Mean"
    CAT = "Cat"
    STACK = "Stack"
    UNBIND = "Unbind"
    SPLIT = "Split"
    # shape
    VIEW = "View"
    RESHAPE = "Reshape"
    TRANSPOSE = "Transpose"
    PERMUTE = "Permute"
    EXPAND = "Expand"
    SLICE = "Slice"
    # pooling / normalization
    MAXPOOL2D = "MaxPool2D"
    LAYERNORM = "LayerNorm"
    # activations
    RELU = "ReLU"
    GELU = "GELU"
    SILU = "SiLU"
    SOFTMAX = "Softmax"
    # other
    MASKED_FILL = "MaskedFill"
    CLONE = "Clone"

    def __str__(self) -> str:
        return self.value


TERMINAL_KINDS = frozenset({OpKind.INPUT, OpKind.PARAMETER})
MULTI_OUTPUT_KINDS = frozenset({OpKind.UNBIND, OpKind.SPLIT})
VARIADIC_KINDS = frozenset({OpKind.CAT, OpKind.STACK})

# (min, max) number of tensor inputs
_ARITY: dict[OpKind, tuple[int, int]] = {
    OpKind.ADD: (2, 2),
    OpKind.SUB: (2, 2),
    OpKind.MUL: (2, 2),
    OpKind.DIV: (2, 2),
    OpKind.MATMUL: (2, 2),
    OpKind.BMM: (2, 2),
    OpKind.LINEAR: (2, 3),
    OpKind.CONV2D: (2, 3),
    OpKind.CAT: (1, 1 << 30),
    OpKind.STACK: (1, 1 << 30),
}


@dataclass
class OpAttrs:
    """Static (non-tensor) op parameters.

    Only the fields relevant to a given kind are read; the rest stay ``None``.
    """

    axis: int | None = None
    keepdim: bool = False
    kernel: int | None = None
    stride: int | None = None
    padding: int = 0
    sizes: list[int] | None = None
    perm: list[int] | None = None
    dims: tuple[int, int] | None = None
    shape: tuple[int, ...] | None = None
    start: int | None = None
    stop: int | None = None
    step: int = 1
    eps: float = 1e-5
    mask: np.ndarray | None = field(default=None, repr=False)
    fill: float = 0.0

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for name, default in _ATTR_DEFAULTS.items():
            val = getattr(self, name)
            if name == "mask":
                if val is not None:
                    out["mask"] = np.asarray(val, dtype=bool).tolist()
                continue
            if val is None or (val == default and name not in ("axis",)):
                continue
            out[name] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "OpAttrs":
        kw = dict(data)
        for key in ("dims", "shape"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        if kw.get("mask") is not None:
            kw["mask"] = np.asarray(kw["mask"], dtype=bool)
        return cls(**kw)


_ATTR_DEFAULTS = {f: getattr(OpAttrs(), f) for f in OpAttrs.__dataclass_fields__}


def as_tensor(value: Any, dtype: Any = DEFAULT_DTYPE) -> Tensor:
    """Convert ``value`` into a float ndarray of the requested dtype."""
    arr = np.array(value, dtype=dtype)
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dtype}")
    return arr


def _is_scalar_shape(shape: tuple[int, ...]) -> bool:
    return len(shape) == 0 or (len(shape) == 1 and shape[0] == 1)


def broadcast_shape(kind: OpKind | str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Result shape for an elementwise binary op under the restricted rules.

    Allowed: equal shapes, scalar with tensor, or one shape being a trailing
    suffix of the other.
    """
    if a == b:
        return a
    if _is_scalar_shape(b):
        return a
    if _is_scalar_shape(a):
        return b
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{kind}: cannot broadcast shapes {a} and {b}")


def reduce_to_shape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape``; the inverse of restricted broadcasting."""
    if x.shape == tuple(shape):
        return x
    if _is_scalar_shape(tuple(shape)):
        return np.asarray(x.sum()).reshape(shape)
    lead = x.ndim - len(shape)
    return x.sum(axis=tuple(range(lead))).reshape(shape)


def _norm_axis(axis: int, ndim: int, kind: OpKind | str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{kind}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax_forward(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    x = np.asarray(x)
    if np.isnan(x).any():
        raise ValueError("softmax: NaN in input")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def silu(x: Tensor) -> Tensor:
    return x / (1.0 + np.exp(-x))


def layernorm_stats(x: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return mean, 1.0 / np.sqrt(var + eps)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Unfold NCHW ``x`` into rows of receptive fields.

    Returns an array of shape ``(N, OH, OW, C*k*k)`` whose last axis is
    ordered (channel, kernel row, kernel col), matching ``w.reshape(O, -1)``.
    """
    n, c, h, w = x.shape
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"Conv2D: kernel {kernel} does not fit input {x.shape} with padding {padding}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, oh, ow, c, kernel, kernel), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, :, :, i, j] = x[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ].transpose(0, 2, 3, 1)
    return cols.reshape(n, oh, ow, c * kernel * kernel)


def col2im(
    cols: Tensor, x_shape: tuple[int, ...], kernel: int, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add receptive-field rows back."""
    n, c, h, w = x_shape
    oh, ow = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n, oh, ow, c, kernel, kernel)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d_forward(
    x: Tensor, w: Tensor, attrs: OpAttrs | None = None, bias: Tensor | None = None
) -> Tensor:
    """Cross-correlation of NCHW ``x`` with OIKK ``w``."""
    attrs = attrs or OpAttrs()
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"Conv2D: expected 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"Conv2D: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[2]
    cols = im2col(x, k, attrs.stride or 1, attrs.padding)
    out = cols @ w.reshape(w.shape[0], -1).T
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"Conv2D: bias shape {bias.shape} does not match {w.shape[0]} channels")
        out = out + bias
    return out.transpose(0, 3, 1, 2).copy()


def maxpool2d_forward(x: Tensor, attrs: OpAttrs) -> tuple[Tensor, np.ndarray]:
    """Max pooling over NCHW ``x``.

    Returns the pooled values and, for each pooled cell, the flat index of the
    winner within its ``(H, W)`` plane. Ties go to the lowest row-major index.
    """
    k = attrs.kernel or 2
    s = attrs.stride or k
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"MaxPool2D: window {k} larger than input {x.shape}")
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    cols = im2col(x.reshape(n * c, 1, h, w), k, s, 0)  # (n*c, oh, ow, k*k)
    local = cols.argmax(axis=-1)  # argmax returns the first maximum
    vals = np.take_along_axis(cols, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * s + local // k
    colsi = np.arange(ow)[None, :] * s + local % k
    idx = rows * w + colsi
    return vals.reshape(n, c, oh, ow), idx.reshape(n, c, oh, ow)


def _check_arity(kind: OpKind, inputs: Sequence[Tensor]) -> None:
    lo, hi = _ARITY.get(kind, (1, 1))
    if not lo <= len(inputs) <= hi:
        raise ShapeError(f"{kind}: expected {lo}..{hi} inputs, got {len(inputs)}")


def forward_eval(kind: OpKind | str, inputs: Sequence[Tensor], attrs: OpAttrs | None = None) -> list[Tensor]:
    """Evaluate one op and return its outputs as a list."""
    try:
        kind = OpKind(kind)
    except ValueError:
        raise UnsupportedOpError(str(kind)) from None
    attrs = attrs or OpAttrs()
    if kind in TERMINAL_KINDS:
        raise UnsupportedOpError(str(kind), detail="terminals have no forward kernel")
    _check_arity(kind, inputs)
    xs = [np.asarray(t) for t in inputs]
    x = xs[0]

    if kind in (OpKind.ADD, OpKind.SUB, OpKind.MUL, OpKind.DIV):
        broadcast_shape(kind, x.shape, xs[1].shape)
        a, b = xs
        if kind is OpKind.ADD:
            return [a + b]
        if kind is OpKind.SUB:
            return [a - b]
        if kind is OpKind.MUL:
            return [a * b]
        return [a / b]
    if kind is OpKind.NEG:
        return [-x]
    if kind is OpKind.CLONE:
        return [x.copy()]
    if kind is OpKind.RELU:
        return [np.maximum(x, 0.0)]
    if kind is OpKind.GELU:
        return [gelu(x)]
    if kind is OpKind.SILU:
        return [silu(x)]
    if kind is OpKind.SOFTMAX:
        return [softmax_forward(x, -1 if attrs.axis is None else attrs.axis)]
    if kind is OpKind.LAYERNORM:
        mean, rstd = layernorm_stats(x, attrs.eps)
        return [(x - mean) * rstd]
    if kind is OpKind.MASKED_FILL:
        if attrs.mask is None:
            raise ShapeError("MaskedFill: missing mask")
        broadcast_shape(kind, x.shape, np.shape(attrs.mask))
        return [np.where(attrs.mask, attrs.fill, x)]

    if kind is OpKind.LINEAR:
        w = xs[1]
        if x.shape[-1] != w.shape[0] or w.ndim != 2:
            raise ShapeError(f"Linear: input {x.shape} incompatible with weight {w.shape}")
        out = x @ w
        if len(xs) == 3:
            if xs[2].shape != (w.shape[1],):
                raise ShapeError(f"Linear: bias {xs[2].shape} incompatible with weight {w.shape}")
            out = out + xs[2]
        return [out]
    if kind is OpKind.MATMUL:
        b = xs[1]
        if x.ndim < 1 or b.ndim != 2 or x.shape[-1] != b.shape[0]:
            raise ShapeError(f"MatMul: shapes {x.shape} and {b.shape} do not align")
        return [x @ b]
    if kind is OpKind.BMM:
        b = xs[1]
        if x.ndim < 3 or x.shape[:-2] != b.shape[:-2] or x.shape[-1] != b.shape[-2]:
            raise ShapeError(f"BMM: shapes {x.shape} and {b.shape} do not align")
        return [x @ b]
    if kind is OpKind.CONV2D:
        return [conv2d_forward(x, xs[1], attrs, xs[2] if len(xs) == 3 else None)]
    if kind is OpKind.MAXPOOL2D:
        return [maxpool2d_forward(x, attrs)[0]]

    if kind in (OpKind.SUM, OpKind.MEAN):
        axis = None if attrs.axis is None else _norm_axis(attrs.axis, x.ndim, kind)
        fn = np.sum if kind is OpKind.SUM else np.mean
        return [np.asarray(fn(x, axis=axis, keepdims=attrs.keepdim))]
    if kind is OpKind.CAT:
        axis = _norm_axis(attrs.axis or 0, x.ndim, kind)
        for t in xs[1:]:
            if t.ndim != x.ndim or any(t.shape[d] != x.shape[d] for d in range(x.ndim) if d != axis):
                raise ShapeError(f"Cat: shapes {[t.shape for t in xs]} mismatch off axis {axis}")
        return [np.concatenate(xs, axis=axis)]
    if kind is OpKind.STACK:
        if any(t.shape != x.shape for t in xs):
            raise ShapeError(f"Stack: shapes {[t.shape for t in xs]} differ")
        return [np.stack(xs, axis=attrs.axis or 0)]
    if kind is OpKind.UNBIND:
        axis = _norm_axis(attrs.axis or 0, x.ndim, kind)
        return [np.take(x, i, axis=axis) for i in range(x.shape[axis])]
    if kind is OpKind.SPLIT:
        axis = _norm_axis(attrs.axis or 0, x.ndim, kind)
        sizes = attrs.sizes or []
        if sum(sizes) != x.shape[axis] or any(s <= 0 for s in sizes):
            raise ShapeError(f"Split: sizes {sizes} do not partition extent {x.shape[axis]}")
        return [p.copy() for p in np.split(x, np.cumsum(sizes)[:-1], axis=axis)]

    if kind in (OpKind.VIEW, OpKind.RESHAPE):
        if attrs.shape is None:
            raise ShapeError(f"{kind}: missing target shape")
        try:
            return [x.reshape(attrs.shape).copy()]
        except ValueError as exc:
            raise ShapeError(f"{kind}: cannot reshape {x.shape} to {attrs.shape}") from exc
    if kind is OpKind.TRANSPOSE:
        d0, d1 = attrs.dims or (-2, -1)
        return [np.swapaxes(x, d0, d1).copy()]
    if kind is OpKind.PERMUTE:
        if attrs.perm is None or sorted(attrs.perm) != list(range(x.ndim)):
            raise ShapeError(f"Permute: bad permutation {attrs.perm} for rank {x.ndim}")
        return [x.transpose(attrs.perm).copy()]
    if kind is OpKind.EXPAND:
        try:
            return [np.broadcast_to(x, attrs.shape).copy()]
        except (ValueError, TypeError) as exc:
            raise ShapeError(f"Expand: cannot expand {x.shape} to {attrs.shape}") from exc
    if kind is OpKind.SLICE:
        axis = _norm_axis(attrs.axis or 0, x.ndim, kind)
        index = [slice(None)] * x.ndim
        index[axis] = slice(attrs.start, attrs.stop, attrs.step)
        out = x[tuple(index)]
        if out.size == 0:
            raise ShapeError(f"Slice: empty result slicing {x.shape} on axis {axis}")
        return [out.copy()]

    raise UnsupportedOpError(str(kind))  # pragma: no cover
