"""Forward-pass recording with autodiff-style minimal context caching.

A :class:`Graph` is an append-only tape. Each recorded op becomes a
:class:`NodeRecord` whose ``ctx`` holds exactly the tensors reverse-mode
autodiff would keep for that op kind, nothing more. Edges point from a
consumer to the producers of its inputs, as in an autodiff graph, so the
model output is the unique node of in-degree zero.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, GraphError, UnsupportedOpError
from .tensor import (
    MULTI_OUTPUT_KINDS,
    OpAttrs,
    OpKind,
    Tensor,
    as_tensor,
    forward_eval,
    layernorm_stats,
    maxpool2d_forward,
)

_POLICY: dict[OpKind, tuple[str, ...]] = {
    OpKind.INPUT: ("value",),
    OpKind.PARAMETER: ("value",),
    OpKind.MUL: ("a", "b"),
    OpKind.DIV: ("a", "b"),
    OpKind.MATMUL: ("a", "b"),
    OpKind.BMM: ("a", "b"),
    OpKind.LINEAR: ("x", "w", "b"),
    OpKind.CONV2D: ("x", "w", "b"),
    OpKind.RELU: ("mask",),
    OpKind.GELU: ("x",),
    OpKind.SILU: ("x",),
    OpKind.SOFTMAX: ("out",),
    OpKind.LAYERNORM: ("mean", "rstd"),
    OpKind.MAXPOOL2D: ("indices",),
    OpKind.MASKED_FILL: ("mask",),
}

# kinds whose forward output is retrievable or recomputable from ctx
ARG_KINDS = frozenset(
    {
        OpKind.INPUT,
        OpKind.PARAMETER,
        OpKind.MUL,
        OpKind.DIV,
        OpKind.MATMUL,
        OpKind.BMM,
        OpKind.LINEAR,
        OpKind.CONV2D,
        OpKind.GELU,
        OpKind.SILU,
        OpKind.SOFTMAX,
    }
)


def caching_policy(kind: OpKind | str) -> tuple[str, ...]:
    """Names of the ctx tensors an op of ``kind`` keeps after the forward pass.

    Kinds not listed keep nothing but shape metadata.
    """
    try:
        kind = OpKind(kind)
    except ValueError:
        raise UnsupportedOpError(str(kind)) from None
    return _POLICY.get(kind, ())


@dataclass
class NodeRecord:
    id: int
    kind: OpKind | str
    inputs: list[tuple[int, int]]
    ctx: dict[str, Any]
    output_shapes: list[tuple[int, ...]]
    input_shapes: list[tuple[int, ...]]
    attrs: OpAttrs = field(default_factory=OpAttrs)
    name: str = ""
    fn: Callable[..., list[Tensor]] | None = field(default=None, repr=False)
    ctx_present: bool = True

    @property
    def out_edges(self) -> list[tuple[int, int]]:
        """Producer ``(node id, output slot)`` pairs in forward argument order."""
        return self.inputs

    @property
    def num_outputs(self) -> int:
        return len(self.output_shapes)

    @property
    def is_terminal(self) -> bool:
        return self.kind in (OpKind.INPUT, OpKind.PARAMETER)

    @property
    def is_custom(self) -> bool:
        return not isinstance(self.kind, OpKind)

    def ctx_nbytes(self) -> int:
        return sum(np.asarray(v).nbytes for v in self.ctx.values() if v is not None)


@dataclass(frozen=True)
class Var:
    """Handle to one output of a recorded node, carrying its forward value."""

    node: int
    slot: int
    value: Tensor = field(repr=False, compare=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Graph:
    """Append-only computation tape.

    With ``shadow=True`` every node's full input and output values are also
    kept in :attr:`shadow`; the oracle engine reads them, the promise engine
    never does.
    """

    def __init__(self, shadow: bool = False, dtype: Any = np.float64) -> None:
        self.nodes: list[NodeRecord] = []
        self.shadow: dict[int, tuple[list[Tensor], list[Tensor]]] | None = {} if shadow else None
        self.dtype = dtype
        self.root: int | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> NodeRecord:
        return self.nodes[node_id]

    # -- recording ---------------------------------------------------------

    def _terminal(self, kind: OpKind, value: Any, name: str) -> Var:
        arr = as_tensor(value, self.dtype)
        rec = NodeRecord(
            id=len(self.nodes),
            kind=kind,
            inputs=[],
            ctx={"value": arr},
            output_shapes=[arr.shape],
            input_shapes=[],
            name=name,
        )
        self.nodes.append(rec)
        if self.shadow is not None:
            self.shadow[rec.id] = ([], [arr])
        return Var(rec.id, 0, arr)

    def input(self, value: Any, name: str = "input") -> Var:
        return self._terminal(OpKind.INPUT, value, name)

    def param(self, value: Any, name: str = "param") -> Var:
        return self._terminal(OpKind.PARAMETER, value, name)

    def _check_inputs(self, inputs: Sequence[Var]) -> None:
        for v in inputs:
            if not isinstance(v, Var):
                raise GraphError(f"expected Var input, got {type(v).__name__}")
            if not 0 <= v.node < len(self.nodes):
                raise GraphError(f"dangling input id {v.node}")
            if not 0 <= v.slot < self.nodes[v.node].num_outputs:
                raise GraphError(f"node {v.node} has no output slot {v.slot}")

    def record_op(self, kind: OpKind | str, inputs: Sequence[Var], attrs: OpAttrs | None = None) -> list[Var]:
        """Evaluate ``kind`` on ``inputs``, append a node, and return its outputs."""
        kind = OpKind(kind)
        attrs = attrs or OpAttrs()
        self._check_inputs(inputs)
        values = [v.value for v in inputs]
        outputs = forward_eval(kind, values, attrs)
        rec = NodeRecord(
            id=len(self.nodes),
            kind=kind,
            inputs=[(v.node, v.slot) for v in inputs],
            ctx=_build_ctx(kind, values, outputs, attrs),
            output_shapes=[o.shape for o in outputs],
            input_shapes=[v.shape for v in values],
            attrs=attrs,
        )
        self.nodes.append(rec)
        if self.shadow is not None:
            self.shadow[rec.id] = (list(values), list(outputs))
        self.root = rec.id
        return [Var(rec.id, i, o) for i, o in enumerate(outputs)]

    def op(self, kind: OpKind | str, *inputs: Var, **attrs: Any) -> Any:
        """Shorthand for :meth:`record_op`; returns a tuple for multi-output kinds."""
        outs = self.record_op(kind, inputs, OpAttrs(**attrs))
        if OpKind(kind) in MULTI_OUTPUT_KINDS:
            return tuple(outs)
        return outs[0]

    def record_custom(self, kind: str, fn: Callable[..., list[Tensor]], inputs: Sequence[Var]) -> list[Var]:
        """Record a node of a kind unknown to this package.

        The node keeps its inputs in ctx so it stays replayable, but no
        relevance rule exists for it; engines treat it as unsupported.
        """
        self._check_inputs(inputs)
        values = [v.value for v in inputs]
        outputs = [np.asarray(o) for o in fn(*values)]
        rec = NodeRecord(
            id=len(self.nodes),
            kind=str(kind),
            inputs=[(v.node, v.slot) for v in inputs],
            ctx={f"in{i}": v for i, v in enumerate(values)},
            output_shapes=[o.shape for o in outputs],
            input_shapes=[v.shape for v in values],
            fn=fn,
        )
        self.nodes.append(rec)
        if self.shadow is not None:
            self.shadow[rec.id] = (list(values), list(outputs))
        self.root = rec.id
        return [Var(rec.id, i, o) for i, o in enumerate(outputs)]

    def set_root(self, var: Var | int) -> None:
        self.root = var.node if isinstance(var, Var) else int(var)

    # -- queries -----------------------------------------------------------

    def terminals(self, kind: OpKind) -> list[int]:
        return [n.id for n in self.nodes if n.kind == kind]

    def input_ids(self) -> list[int]:
        return self.terminals(OpKind.INPUT)

    def parameter_ids(self) -> list[int]:
        return self.terminals(OpKind.PARAMETER)

    def topology_hash(self, extra: str = "") -> str:
        """Order-sensitive hash over node kinds, edges, and shapes."""
        h = hashlib.sha256()
        for n in self.nodes:
            h.update(
                json.dumps([str(n.kind), n.inputs, [list(s) for s in n.output_shapes]]).encode()
            )
        h.update(f"root={self.root};{extra}".encode())
        return h.hexdigest()

    # -- JSON --------------------------------------------------------------

    def to_json(self, include_values: bool = False) -> dict[str, Any]:
        """Export topology (and optionally terminal values) as a JSON-able dict."""
        nodes = []
        for n in self.nodes:
            entry: dict[str, Any] = {
                "id": n.id,
                "kind": str(n.kind),
                "attrs": n.attrs.to_json(),
                "out_edges": [list(e) for e in n.inputs],
                "ctx_present": bool(n.ctx) and n.ctx_present,
                "output_shapes": [list(s) for s in n.output_shapes],
            }
            if n.name:
                entry["name"] = n.name
            if include_values and n.is_terminal and n.ctx_present:
                entry["value"] = np.asarray(n.ctx["value"]).tolist()
            nodes.append(entry)
        return {"nodes": nodes, "root": self.root}

    @classmethod
    def from_json(cls, data: dict[str, Any], shadow: bool = False) -> "Graph":
        """Rebuild a graph from :meth:`to_json` output.

        When every terminal carries a ``value`` and every kind has a forward
        kernel, the forward pass is replayed so the result is fully usable by
        the engines. Otherwise a topology-only skeleton (no ctx) is returned,
        which is enough for coverage reports and auxiliary-graph building.
        """
        entries = sorted(data["nodes"], key=lambda e: e["id"])
        if [e["id"] for e in entries] != list(range(len(entries))):
            raise GraphError("node ids must be dense integers starting at 0")
        replayable = all(
            ("value" in e) if e["kind"] in ("Input", "Parameter") else e["kind"] in OpKind._value2member_map_
            for e in entries
        )
        if replayable:
            g = cls(shadow=shadow)
            vars_: dict[int, list[Var]] = {}
            for e in entries:
                kind = OpKind(e["kind"])
                name = e.get("name", "")
                if kind is OpKind.INPUT:
                    vars_[e["id"]] = [g.input(e["value"], name or "input")]
                elif kind is OpKind.PARAMETER:
                    vars_[e["id"]] = [g.param(e["value"], name or "param")]
                else:
                    ins = []
                    for src, slot in e["out_edges"]:
                        if src not in vars_:
                            raise GraphError(f"node {e['id']} references later or missing node {src}")
                        ins.append(vars_[src][slot])
                    vars_[e["id"]] = g.record_op(kind, ins, OpAttrs.from_json(e.get("attrs", {})))
            g.root = data.get("root", g.root)
            return g
        g = cls()
        for e in entries:
            try:
                kind: OpKind | str = OpKind(e["kind"])
            except ValueError:
                kind = e["kind"]
            g.nodes.append(
                NodeRecord(
                    id=e["id"],
                    kind=kind,
                    inputs=[tuple(x) for x in e["out_edges"]],
                    ctx={},
                    output_shapes=[tuple(s) for s in e["output_shapes"]],
                    input_shapes=[],
                    attrs=OpAttrs.from_json(e.get("attrs", {})),
                    name=e.get("name", ""),
                    ctx_present=False,
                )
            )
        g.root = data.get("root")
        return g

    def save(self, path: str, include_values: bool = False) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(include_values), fh)

    @classmethod
    def load(cls, path: str, shadow: bool = False) -> "Graph":
        with open(path) as fh:
            return cls.from_json(json.load(fh), shadow=shadow)


def _build_ctx(kind: OpKind, inputs: list[Tensor], outputs: list[Tensor], attrs: OpAttrs) -> dict[str, Any]:
    if kind in (OpKind.MUL, OpKind.DIV, OpKind.MATMUL, OpKind.BMM):
        return {"a": inputs[0], "b": inputs[1]}
    if kind in (OpKind.LINEAR, OpKind.CONV2D):
        return {"x": inputs[0], "w": inputs[1], "b": inputs[2] if len(inputs) == 3 else None}
    if kind is OpKind.RELU:
        return {"mask": inputs[0] > 0}
    if kind in (OpKind.GELU, OpKind.SILU):
        return {"x": inputs[0]}
    if kind is OpKind.SOFTMAX:
        return {"out": outputs[0]}
    if kind is OpKind.LAYERNORM:
        mean, rstd = layernorm_stats(inputs[0], attrs.eps)
        return {"mean": mean, "rstd": rstd}
    if kind is OpKind.MAXPOOL2D:
        return {"indices": maxpool2d_forward(inputs[0], attrs)[1]}
    if kind is OpKind.MASKED_FILL:
        return {"mask": attrs.mask}
    return {}


def is_arg_node(node: NodeRecord) -> bool:
    """True iff ``node``'s forward output can be produced from its own ctx."""
    if not node.ctx_present:
        return False
    if node.is_custom:
        return node.fn is not None
    return node.kind in ARG_KINDS


def retrieve_fwd_output(node: NodeRecord) -> list[Tensor]:
    """Return all forward outputs of an Arg node, read or recomputed from ctx."""
    if not is_arg_node(node):
        raise ContractError(f"node {node.id} ({node.kind}) is not an Arg node")
    ctx = node.ctx
    if node.is_custom:
        return [np.asarray(o) for o in node.fn(*(ctx[f"in{i}"] for i in range(len(node.inputs))))]
    kind = node.kind
    if kind in (OpKind.INPUT, OpKind.PARAMETER):
        return [ctx["value"]]
    if kind is OpKind.SOFTMAX:
        return [ctx["out"]]
    if kind in (OpKind.LINEAR, OpKind.CONV2D):
        operands = [ctx["x"], ctx["w"]] + ([ctx["b"]] if ctx["b"] is not None else [])
        return forward_eval(kind, operands, node.attrs)
    if kind in (OpKind.GELU, OpKind.SILU):
        return forward_eval(kind, [ctx["x"]], node.attrs)
    return forward_eval(kind, [ctx["a"], ctx["b"]], node.attrs)


def forward_closure(node: NodeRecord, slot: int | None) -> Callable[[Tensor], Any]:
    """Closure mapping a single-input node's input activation to its output.

    ``slot=None`` returns the full list of outputs.
    """
    if len(node.inputs) != 1:
        raise ContractError(f"node {node.id} ({node.kind}) is not single-input")

    def fwd(x: Tensor) -> Any:
        if node.is_custom:
            outs = [np.asarray(o) for o in node.fn(x)]
        else:
            outs = forward_eval(node.kind, [x], node.attrs)
        return outs if slot is None else outs[slot]

    return fwd


@dataclass
class AuxGraph:
    """Traversal structures built once after recording.

    ``out_adj[v]`` lists ``(producer, slot)`` for each input of ``v`` in forward
    argument order; ``in_adj[u]`` lists ``(consumer, arg position)`` for each
    edge into ``u``. ``topo_stack`` is in DFS post-order, so popping it yields
    a topological order starting at the root.
    """

    root: int
    in_adj: dict[int, list[tuple[int, int]]]
    out_adj: dict[int, list[tuple[int, int]]]
    topo_stack: list[int]
    indegree: dict[int, int]
    edge_index: dict[tuple[int, int], int]

    @property
    def num_nodes(self) -> int:
        return len(self.topo_stack)

    @property
    def num_edges(self) -> int:
        return sum(len(v) for v in self.out_adj.values())

    def topo_order(self) -> list[int]:
        return list(reversed(self.topo_stack))


def build_aux_graph(graph: Graph, root: int | None = None) -> AuxGraph:
    """Depth-first construction of the adjacency lists and topological stack.

    Implemented iteratively; visits children in forward argument order and
    appends every edge, including edges into already-visited nodes.
    """
    if root is None:
        root = graph.root
    if root is None or not 0 <= root < len(graph.nodes):
        raise GraphError(f"invalid root {root}")
    in_adj: dict[int, list[tuple[int, int]]] = {}
    out_adj: dict[int, list[tuple[int, int]]] = {}
    topo: list[int] = []
    state: dict[int, int] = {}  # 1 = on the DFS path, 2 = finished

    def enter(v: int) -> None:
        state[v] = 1
        out_adj[v] = []
        in_adj.setdefault(v, [])

    enter(root)
    stack: list[tuple[int, int]] = [(root, 0)]
    while stack:
        v, i = stack[-1]
        inputs = graph.nodes[v].inputs
        if i < len(inputs):
            stack[-1] = (v, i + 1)
            child, slot = inputs[i]
            if not 0 <= child < len(graph.nodes):
                raise GraphError(f"node {v} has dangling input {child}")
            out_adj[v].append((child, slot))
            in_adj.setdefault(child, []).append((v, i))
            st = state.get(child)
            if st == 1:
                raise GraphError(f"cycle detected through node {child}")
            if st is None:
                enter(child)
                stack.append((child, 0))
        else:
            stack.pop()
            state[v] = 2
            topo.append(v)
    indegree = {v: len(in_adj[v]) for v in topo}
    edge_index = {}
    for u, edges in in_adj.items():
        for k, e in enumerate(edges):
            edge_index[e] = k
    return AuxGraph(root, in_adj, out_adj, topo, indegree, edge_index)


def is_valid_topological_order(aux: AuxGraph, order: Iterable[int]) -> bool:
    """Check that every consumer precedes each of its producers in ``order``."""
    pos = {v: i for i, v in enumerate(order)}
    if set(pos) != set(aux.out_adj):
        return False
    return all(pos[v] < pos[c] for v, edges in aux.out_adj.items() for c, _ in edges)


def nodes_without_arg_descendant(graph: Graph, aux: AuxGraph) -> list[int]:
    """Nodes from which no Arg node is reachable (empty when the Arg-node property holds)."""
    has_arg: dict[int, bool] = {}
    for v in aux.topo_stack:  # producers are finished before consumers
        node = graph.nodes[v]
        has_arg[v] = is_arg_node(node) or any(has_arg[c] for c, _ in aux.out_adj[v])
    return [v for v, ok in has_arg.items() if not ok]
