"""Relevance propagation over a recorded graph.

:class:`Engine` runs the promise-based traversal on a graph that holds only
autodiff-minimal context. :func:`oracle_propagate` is the reference: a plain
reverse-topological sweep over a graph recorded with ``shadow=True``. Both
call :func:`oplrp.rules.propagate_node` and aggregate per-edge relevance in
the same canonical in-edge order, so their results agree to rounding.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import ContractError, DeadlockError, GraphError, UnsupportedOpError
from .graph import AuxGraph, Graph, build_aux_graph, forward_closure, is_arg_node, retrieve_fwd_output
from .promise import (
    BranchRef,
    Promise,
    PromiseBranch,
    PromiseClass,
    PromisePathCache,
    PromiseRuntime,
    cache_paths,
    classify_promise_generating,
)
from .rules import Relevance, RuleConfig, is_supported, propagate_node
from .tensor import OpKind, Tensor, forward_eval

log = logging.getLogger(__name__)

RelevanceInput = Tensor | None | BranchRef


class InitMode(str, enum.Enum):
    TARGET_LOGIT_VALUE = "target_logit_value"
    ONE_HOT_UNIT = "one_hot_unit"


def init_relevance(output: Tensor, target: int | Sequence[int], mode: InitMode | str = InitMode.TARGET_LOGIT_VALUE) -> Tensor:
    """Zeros shaped like ``output`` except at ``target``.

    ``target`` is a flat index or a full index tuple. The target entry gets
    the output value itself or 1.0 depending on ``mode``.
    """
    output = np.asarray(output)
    mode = InitMode(mode)
    if isinstance(target, (int, np.integer)):
        if not 0 <= int(target) < output.size:
            raise IndexError(f"target {target} out of range for output of size {output.size}")
        idx = np.unravel_index(int(target), output.shape)
    else:
        idx = tuple(int(t) for t in target)
        if len(idx) != output.ndim or any(not 0 <= i < s for i, s in zip(idx, output.shape)):
            raise IndexError(f"target {idx} out of range for output of shape {output.shape}")
    r = np.zeros_like(output, dtype=np.float64 if output.dtype.kind != "f" else output.dtype)
    r[idx] = output[idx] if mode is InitMode.TARGET_LOGIT_VALUE else 1.0
    return r


def sum_relevance(parts: Sequence[Relevance]) -> Relevance:
    """Left-to-right sum skipping zeros (``None``)."""
    total = None
    for p in parts:
        if p is None:
            continue
        if total is None:
            total = p
        else:
            if p.shape != total.shape:
                raise GraphError(f"relevance shape mismatch {total.shape} vs {p.shape}")
            total = total + p
    return total


def aggregate_inputs(graph: Graph, aux: AuxGraph, node: int, parts: Sequence[Relevance]) -> list[Relevance]:
    """Sum per-in-edge relevance into one entry per output slot of ``node``.

    ``parts[k]`` belongs to in-edge ``k``. Multi-output nodes (Unbind, Split)
    keep their slots separate; their rules concatenate.
    """
    n_out = graph.nodes[node].num_outputs
    by_slot: list[list[Relevance]] = [[] for _ in range(n_out)]
    for k, (consumer, argpos) in enumerate(aux.in_adj[node]):
        slot = graph.nodes[consumer].inputs[argpos][1]
        by_slot[slot].append(parts[k])
    return [sum_relevance(p) for p in by_slot]


def _producer_kinds(graph: Graph, node_id: int) -> tuple:
    return tuple(graph.nodes[p].kind for p, _ in graph.nodes[node_id].inputs)


@dataclass
class PromiseStats:
    num_promises: int = 0
    internal_nodes: int = 0
    delta: int = 0
    rho: float = 0.0
    total_nodes: int = 0
    edges: int = 0
    aggregation_promises: int = 0
    pre_promises: int = 0
    max_live_promises: int = 0
    max_depth: int = 0
    visits: int = 0

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TraversalState:
    pending: dict[int, int]
    stack: list[tuple[int, tuple]] = field(default_factory=list)
    stall_queue: deque = field(default_factory=deque)
    node_inputs: dict[int, list[RelevanceInput]] = field(default_factory=dict)
    visit_log: list[dict] = field(default_factory=list)


@dataclass
class RunResult:
    relevance: Relevance
    target: int
    terminal_relevance: dict[int, Relevance]
    stats: PromiseStats
    events: list[dict]
    propagation_counts: dict[int, int]
    visits: int
    conservative: bool
    cache: PromisePathCache | None
    cache_hit: bool
    runtime: PromiseRuntime | None = field(default=None, repr=False)

    def input_relevance(self, graph: Graph) -> dict[int, Relevance]:
        return {k: v for k, v in self.terminal_relevance.items() if graph.nodes[k].kind is OpKind.INPUT}

    def parameter_relevance(self, graph: Graph) -> dict[int, Relevance]:
        return {k: v for k, v in self.terminal_relevance.items() if graph.nodes[k].kind is OpKind.PARAMETER}

    def events_json(self) -> str:
        return json.dumps(self.events)


def default_target(graph: Graph, aux: AuxGraph | None = None) -> int:
    ids = [i for i in graph.input_ids() if aux is None or i in aux.indegree]
    if len(ids) != 1:
        raise ContractError(f"graph has {len(ids)} reachable Input nodes; pass target_node explicitly")
    return ids[0]


def _as_relevance_list(value: Any, slot: int | None, n_out: int) -> list[Relevance]:
    if slot is None:
        return [None] * n_out if value is None else list(value)
    out: list[Relevance] = [None] * n_out
    out[slot] = value
    return out


class Engine:
    """Promise-based propagation over a minimal-context graph.

    Args:
        graph: recorded graph (shadow values are never read).
        config: rule configuration.
        aux: prebuilt auxiliary graph; built from ``graph.root`` if omitted.
        cache: path cache from an earlier run; used only when its key matches.
        lenient: treat unsupported kinds as identity instead of raising.
    """

    def __init__(
        self,
        graph: Graph,
        config: RuleConfig | None = None,
        aux: AuxGraph | None = None,
        cache: PromisePathCache | None = None,
        lenient: bool = False,
    ) -> None:
        self.graph = graph
        self.config = config or RuleConfig()
        self.aux = aux or build_aux_graph(graph)
        self.lenient = lenient
        self.cache_key = graph.topology_hash(self.config.key())
        self.cache_hit = cache is not None and cache.matches(self.cache_key)
        # empty chains need no fast-forward, so only keep the ones with steps
        self.plan = {k: v for k, v in cache.paths.items() if v} if self.cache_hit else None
        self.cache = cache if self.cache_hit else None
        if cache is not None and not self.cache_hit:
            log.info("promise path cache miss; running full traversal")

    # -- public ------------------------------------------------------------

    def run(self, r_init: Tensor, target_node: int | None = None) -> RunResult:
        g, aux = self.graph, self.aux
        target = default_target(g, aux) if target_node is None else target_node
        if target not in aux.indegree:
            raise ContractError(f"target node {target} is not reachable from the root")
        root_shape = g.nodes[aux.root].output_shapes[0]
        r_init = np.asarray(r_init, dtype=np.float64)
        if r_init.shape != root_shape:
            raise ContractError(f"R_init shape {r_init.shape} != root output shape {root_shape}")

        self.events: list[dict] = []
        self.state = TraversalState(pending=dict(aux.indegree))
        self.state.visit_log = self.events
        self.state.node_inputs = {u: [None] * aux.indegree[u] for u in aux.indegree}
        self.agg: dict[int, Promise] = {}
        self.dispatched: set[int] = set()
        self.skipped: set[int] = set()
        self.delivered: dict[int, tuple[Any, int | None]] = {}
        self.stalled: set[int] = set()
        self.counts: Counter = Counter()
        self.terminal: dict[int, Relevance] = {}
        self.visits = 0
        self.conservative = True
        self._landings: deque = deque()
        self._landing = False
        self.rt = PromiseRuntime(self._compute, self._deliver, self._count_step, self._log)

        n_out = g.nodes[aux.root].num_outputs
        self._push(aux.root, ("tensor", [r_init] + [None] * (n_out - 1)))
        while self.state.stack:
            u, payload = self.state.stack.pop()
            self._dispatch(u, payload)
            self._drain_stalled()

        self._check_termination()
        stats = self._collect_stats()
        # a hit replays the supplied chains verbatim, so its snapshot is unchanged
        cache = self.cache if self.cache_hit else cache_paths(self.cache_key, self.rt)
        zero = np.zeros(g.nodes[target].output_shapes[0])
        rel = self.terminal.get(target)
        return RunResult(
            relevance=zero if rel is None else rel,
            target=target,
            terminal_relevance=dict(self.terminal),
            stats=stats,
            events=self.events,
            propagation_counts=dict(self.counts),
            visits=self.visits,
            conservative=self.conservative,
            cache=cache,
            cache_hit=self.cache_hit,
            runtime=self.rt,
        )

    # -- logging / counters --------------------------------------------------

    def _log(self, event: dict) -> None:
        event["seq"] = len(self.events)
        self.events.append(event)

    def _count_step(self, node: int) -> None:
        self.counts[node] += 1

    # -- stack ----------------------------------------------------------------

    def _push(self, u: int, payload: tuple) -> None:
        self.state.stack.append((u, payload))

    def _drain_stalled(self) -> None:
        q = self.state.stall_queue
        if not q or not any(u in self.delivered for u in q):
            return
        ready = [u for u in q if u in self.delivered]
        self.state.stall_queue = deque(u for u in q if u not in self.delivered)
        for u in reversed(ready):
            self.stalled.discard(u)
            self._log({"event": "dequeue", "node": u})
            value, slot = self.delivered.pop(u)
            self._push(u, ("resume", value, slot))

    # -- landing relevance inputs ----------------------------------------------

    def _land(self, u: int, k: int, value: RelevanceInput) -> None:
        self._landings.append((u, k, value))
        if self._landing:
            return
        self._landing = True
        try:
            while self._landings:
                self._land_one(*self._landings.popleft())
        finally:
            self._landing = False

    def _land_children(self, v: int, outs: Sequence[RelevanceInput]) -> None:
        # reverse argument order so that the first argument is popped first
        edges = self.graph.nodes[v].inputs
        for i in reversed(range(len(edges))):
            p, _ = edges[i]
            self._land(p, self.aux.edge_index[(v, i)], outs[i])

    def _land_one(self, u: int, k: int, value: RelevanceInput) -> None:
        st = self.state
        st.node_inputs[u][k] = value
        st.pending[u] -= 1
        if st.pending[u] < 0:
            raise ContractError(f"node {u} received more inputs than its in-degree")
        if isinstance(value, BranchRef):
            if self.aux.indegree[u] == 1:
                self._advance(u, value)
                return
            A = self.agg.get(u)
            if A is None:
                pre = st.pending[u] > 0
                A = self.rt.make_aggregation_branch(u, self.aux.indegree[u], self.graph.nodes[u].kind, pre)
                self.agg[u] = A
                self.rt.add_parent(A, value, k)
                if pre:
                    self._log({"event": "reach_ahead", "node": u, "promise": A.id})
                self._advance(u, BranchRef(A.branches[0], None))
                return
            self.rt.add_parent(A, value, k)
        if st.pending[u] == 0:
            A = self.agg.get(u)
            if A is not None:
                self.rt.promote_pre_promise(A)
            else:
                parts = st.node_inputs[u]
                self._push(u, ("tensor", aggregate_inputs(self.graph, self.aux, u, parts)))

    def _advance(self, u: int, ref: BranchRef) -> None:
        """Move a branch onto node ``u``: fast-forward on a cache hit, else push."""
        b = ref.branch
        if self.plan and not b.steps and b.arg_node is None and (u, ref.slot) == b.start:
            steps = self.plan.get(b.key)
            if steps:
                for i, (node, slot) in enumerate(steps):
                    self._record(b, node, slot)
                    if i:
                        # the first step node already counted the landing that brought the branch
                        self.state.pending[node] = 0
                    self.skipped.add(node)
                last = steps[-1][0]
                p, s = self.graph.nodes[last].inputs[0]
                self._log({"event": "fast_forward", "branch": b.label, "steps": len(steps)})
                self._land(p, self.aux.edge_index[(last, 0)], BranchRef(b, s))
                return
        self._push(u, ("branch", ref))

    # -- dispatch ------------------------------------------------------------

    def _dispatch(self, u: int, payload: tuple) -> None:
        node = self.graph.nodes[u]
        what = payload[0]
        if u not in self.dispatched:
            self.dispatched.add(u)
            self.visits += 1
            ev = {"event": "visit", "node": u, "kind": str(node.kind)}
            if self.state.pending[u] > 0:
                ev["reach_ahead"] = True
            self._log(ev)
        elif what != "resume":
            raise ContractError(f"node {u} popped twice")

        if what == "branch":
            self._dispatch_branch(u, payload[1])
            return
        if what == "resume":
            r_slots = _as_relevance_list(payload[1], payload[2], node.num_outputs)
        else:
            r_slots = payload[1]
        self._dispatch_tensor(u, r_slots)

    def _dispatch_tensor(self, u: int, r_slots: list[Relevance]) -> None:
        node = self.graph.nodes[u]
        if node.is_terminal:
            self.counts[u] += 1
            self.terminal[u] = r_slots[0]
            self._log({"event": "propagate", "node": u})
            return
        if classify_promise_generating(node.kind, r_slots, self.config) is PromiseClass.STRICT:
            self._create_promise(u, rout=r_slots)
            return
        outs = self._apply_rule(u, r_slots)
        self.counts[u] += 1
        self._log({"event": "propagate", "node": u})
        self._land_children(u, outs)

    def _dispatch_branch(self, u: int, ref: BranchRef) -> None:
        node = self.graph.nodes[u]
        if is_arg_node(node):
            act = retrieve_fwd_output(node)
            val = act if ref.slot is None else act[ref.slot]
            self._log({"event": "arg_reached", "node": u, "branch": ref.branch.label})
            self.rt.set_arg(ref.branch, val, arg_node=u, arg_slot=ref.slot)
            if u in self.delivered:
                value, slot = self.delivered.pop(u)
                self._log({"event": "continue", "node": u})
                self._dispatch_tensor(u, _as_relevance_list(value, slot, node.num_outputs))
            else:
                self.stalled.add(u)
                self.state.stall_queue.append(u)
                self._log({"event": "stall", "node": u})
            return
        cls = classify_promise_generating(node.kind, [ref], self.config)
        if cls is not PromiseClass.NONE:
            self._create_promise(u, parent=ref)
            return
        if len(node.inputs) != 1:
            raise GraphError(f"node {u} ({node.kind}) is neither an Arg node nor single-input")
        if not is_supported(node.kind) and not self.lenient:
            raise UnsupportedOpError(str(node.kind), node=u)
        self._record(ref.branch, u, ref.slot)
        p, s = node.inputs[0]
        self._land(p, self.aux.edge_index[(u, 0)], BranchRef(ref.branch, s))

    def _record(self, b: PromiseBranch, u: int, slot: int | None) -> None:
        node = self.graph.nodes[u]
        fwd = forward_closure(node, slot)
        n_out = node.num_outputs

        def bwd(r: Any) -> Relevance:
            return self._apply_rule(u, _as_relevance_list(r, slot, n_out))[0]

        b.record_step(fwd, bwd, u, slot)
        self._log({"event": "record_step", "branch": b.label, "node": u})

    def _create_promise(self, u: int, rout: list[Relevance] | None = None, parent: BranchRef | None = None) -> Promise:
        node = self.graph.nodes[u]
        kind, attrs = node.kind, node.attrs
        starts = list(node.inputs)
        P = self.rt.create_promise(u, kind, starts, lambda args: forward_eval(kind, args, attrs), rout, parent)
        self._land_children(u, [BranchRef(b, s) for b, (_, s) in zip(P.branches, starts)])
        return P

    def _apply_rule(self, u: int, r_slots: list[Relevance], input_values: Sequence[Tensor] | None = None) -> list[Relevance]:
        node = self.graph.nodes[u]
        if not is_supported(node.kind):
            if not self.lenient:
                raise UnsupportedOpError(str(node.kind), node=u)
            if self.conservative:
                log.warning("node %d: unsupported kind %r propagated as identity", u, node.kind)
            self.conservative = False
        try:
            return propagate_node(
                node.kind,
                node.attrs,
                node.ctx,
                r_slots,
                node.input_shapes,
                node.output_shapes,
                self.config,
                input_values=input_values,
                producers=_producer_kinds(self.graph, u),
                lenient=self.lenient,
            )
        except UnsupportedOpError as e:
            raise UnsupportedOpError(e.kind, node=u, detail=str(e)) from None

    # -- promise runtime callbacks -------------------------------------------

    def _compute(self, p: Promise) -> list[Any]:
        if p.kind == "aggregation":
            u = p.origin
            parts = list(p.edge_parts)
            for k, v in enumerate(self.state.node_inputs[u]):
                if not isinstance(v, BranchRef):
                    parts[k] = v
            for link in p.parents:
                parts[link.edge] = link.value
            return [aggregate_inputs(self.graph, self.aux, u, parts)]
        node = self.graph.nodes[p.origin]
        if p.parents:
            link = p.parents[0]
            rout = _as_relevance_list(link.value, link.slot, node.num_outputs)
        else:
            rout = p.rout
        p.rout = rout
        self.counts[p.origin] += 1
        self._log({"event": "propagate", "node": p.origin, "promise": p.id})
        return self._apply_rule(p.origin, rout, input_values=p.args)

    def _deliver(self, b: PromiseBranch, value: Any) -> None:
        u = b.arg_node
        if u is None:
            raise ContractError(f"{b.label} delivered relevance without an Arg node")
        if u in self.delivered:
            raise ContractError(f"node {u} received relevance twice")
        self.delivered[u] = (value, b.arg_slot)
        self._log({"event": "deliver", "node": u, "branch": b.label})

    # -- end of run ---------------------------------------------------------------

    def _check_termination(self) -> None:
        if self.state.stall_queue:
            raise DeadlockError(f"stall queue not empty at termination: {list(self.state.stall_queue)}")
        left = [u for u, c in self.state.pending.items() if c > 0]
        if left:
            raise DeadlockError(f"nodes with pending inputs at termination: {left}")
        incomplete = [p.id for p in self.rt.promises if not p.complete]
        if incomplete:
            raise DeadlockError(f"incomplete promises at termination: {incomplete}")

    def _collect_stats(self) -> PromiseStats:
        return collect_stats(self.rt, self.aux, self.visits)


def _branch_extent(b: PromiseBranch, rt: PromiseRuntime) -> int:
    """Chain length from a branch's origin to its Arg node.

    Aggregation chains are charged to the branch that created them (their
    first parent) so each internal node is counted for at most one promise.
    """
    total = 0
    while True:
        total += len(b.steps)
        end = b.end
        if end is None or end[0] != "promise":
            return total
        child = rt.promises[end[1]]
        if child.kind != "aggregation" or child.parents[0].branch is not b:
            return total
        b = child.branches[0]


def collect_stats(rt: PromiseRuntime, aux: AuxGraph, visits: int = 0) -> PromiseStats:
    op = rt.op_promises()
    depths = [max((_branch_extent(b, rt) for b in p.branches), default=0) for p in op]
    n = aux.num_nodes
    return PromiseStats(
        num_promises=len(op),
        internal_nodes=sum(len(b.steps) for b in rt.branches()),
        delta=sum(depths),
        rho=len(op) / n if n else 0.0,
        total_nodes=n,
        edges=aux.num_edges,
        aggregation_promises=sum(1 for p in rt.promises if p.kind == "aggregation"),
        pre_promises=sum(1 for p in rt.promises if p.is_pre),
        max_live_promises=rt.max_live_op_promises,
        max_depth=max(depths, default=0),
        visits=visits,
    )


def propagate(
    graph: Graph,
    aux: AuxGraph | None,
    rules: RuleConfig,
    r_init: Tensor,
    target_node: int | None = None,
    cache: PromisePathCache | None = None,
    lenient: bool = False,
) -> RunResult:
    """Promise-based propagation; see :class:`Engine`."""
    return Engine(graph, rules, aux, cache, lenient).run(r_init, target_node)


def oracle_propagate(
    graph: Graph,
    rules: RuleConfig,
    r_init: Tensor,
    target_node: int | None = None,
    aux: AuxGraph | None = None,
    lenient: bool = False,
    return_all: bool = False,
) -> Any:
    """Reference sweep using the shadow full-cache of every node's inputs.

    Returns the relevance at ``target_node``, or with ``return_all`` a dict
    of every terminal's relevance.
    """
    if graph.shadow is None:
        raise ContractError("oracle needs a graph recorded with shadow=True")
    aux = aux or build_aux_graph(graph)
    target = default_target(graph, aux) if target_node is None else target_node
    r_init = np.asarray(r_init, dtype=np.float64)
    parts: dict[int, list[Relevance]] = {u: [None] * aux.indegree[u] for u in aux.indegree}
    terminal: dict[int, Relevance] = {}
    for u in aux.topo_order():
        node = graph.nodes[u]
        if u == aux.root:
            r_slots = [r_init] + [None] * (node.num_outputs - 1)
        else:
            r_slots = aggregate_inputs(graph, aux, u, parts[u])
        if node.is_terminal:
            terminal[u] = r_slots[0]
            continue
        if not is_supported(node.kind) and not lenient:
            raise UnsupportedOpError(str(node.kind), node=u)
        outs = propagate_node(
            node.kind,
            node.attrs,
            node.ctx,
            r_slots,
            node.input_shapes,
            node.output_shapes,
            rules,
            input_values=graph.shadow[u][0],
            producers=_producer_kinds(graph, u),
            lenient=lenient,
        )
        for i, (p, _) in enumerate(node.inputs):
            parts[p][aux.edge_index[(u, i)]] = outs[i]
    if return_all:
        return terminal
    rel = terminal.get(target)
    return np.zeros(graph.nodes[target].output_shapes[0]) if rel is None else rel
