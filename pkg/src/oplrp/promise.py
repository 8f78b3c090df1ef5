"""Deferred activation retrieval for relevance rules that need uncached inputs.

A :class:`Promise` is attached to an origin node whose rule needs input
activations the graph never cached. Each of its :class:`PromiseBranch`
objects walks toward an Arg node, recording a forward and a backward closure
for every node it passes. Once the Arg node's output is available it is folded
back through the forward closures; once every branch has delivered, the
origin's relevance is computed and folded down each branch's backward
closures.

Promises nest into trees through parent links (child promise -> parent
branch). Aggregation promises are single-branch promises created where
several inputs meet at one node; created before that node's inputs have all
landed they act as pre-promises, forwarding activations upward but holding
back relevance until promoted.

All recursion (set_arg cascades and bottom-up/top-down resolution) runs on
explicit work stacks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from .errors import ContractError
from .rules import Relevance, RuleConfig, needs_input_values
from .tensor import OpKind

Closure = Callable[[Any], Any]

STRICT_KINDS = frozenset({OpKind.ADD, OpKind.SUB, OpKind.SUM, OpKind.MEAN})
DEPENDENT_KINDS = frozenset({OpKind.CAT, OpKind.STACK, OpKind.UNBIND, OpKind.SPLIT})


class PromiseClass(str, enum.Enum):
    STRICT = "strict"
    DEPENDENT = "dependent"
    NONE = "none"


def classify_promise_generating(
    kind: OpKind | str, inputs: Sequence[Any] = (), config: RuleConfig | None = None
) -> PromiseClass:
    """Classify ``kind`` given the relevance inputs arriving at the node.

    Returns ``STRICT`` or ``DEPENDENT`` only when a promise must be created for
    these inputs; a dependent kind with all-tensor inputs yields ``NONE``.
    Softmax joins the strict set when the active config needs its input.
    """
    if kind in STRICT_KINDS:
        return PromiseClass.STRICT
    if kind is OpKind.SOFTMAX and config is not None and needs_input_values(kind, config):
        return PromiseClass.STRICT
    if kind in DEPENDENT_KINDS and any(isinstance(x, BranchRef) for x in inputs):
        return PromiseClass.DEPENDENT
    return PromiseClass.NONE


def is_promise_kind(kind: OpKind | str, config: RuleConfig | None = None) -> bool:
    """Membership in the promise-generating set (strict or dependent)."""
    return (
        kind in STRICT_KINDS
        or kind in DEPENDENT_KINDS
        or (kind is OpKind.SOFTMAX and config is not None and needs_input_values(kind, config))
    )


@dataclass(frozen=True)
class BranchRef:
    """A branch standing at a graph position: ``slot`` of the node's outputs.

    ``slot=None`` means the full output list of the node.
    """

    branch: "PromiseBranch"
    slot: int | None


@dataclass
class ParentLink:
    """Connection from a (child) promise to a parent branch.

    ``linked`` is the child connection seen from the branch: relevance may
    only flow down a linked parent link. ``edge`` is the in-edge index at the
    node where the link was made (aggregation promises sum in edge order).
    """

    branch: "PromiseBranch"
    slot: int | None
    edge: int = 0
    linked: bool = True
    value: Relevance | list[Relevance] | None = None
    delivered: bool = False


class PromiseBranch:
    def __init__(self, promise: "Promise", index: int, start: tuple[int, int | None]) -> None:
        self.promise = promise
        self.index = index
        self.start = start
        self.steps: list[tuple[int, int | None]] = []
        self.fwd_chain: list[Closure] = []
        self.bwd_chain: list[Closure] = []
        self.children: list[Promise] = []
        self.pre_children: list[Promise] = []
        self.arg_node: int | None = None
        self.arg_slot: int | None = None
        self.end: tuple[str, int] | None = None

    @property
    def key(self) -> tuple:
        return self.promise.branch_key(self.index)

    @property
    def label(self) -> str:
        return f"b[{self.promise.id},{self.index}]"

    def record_step(self, fwd: Closure, bwd: Closure, node: int | None = None, slot: int | None = None) -> "PromiseBranch":
        if self.arg_node is not None:
            raise ContractError(f"{self.label} already reached its Arg node")
        self.fwd_chain.append(fwd)
        self.bwd_chain.append(bwd)
        if node is not None:
            self.steps.append((node, slot))
        return self

    def fold_forward(self, value: Any) -> Any:
        # the last recorded node sits next to the Arg node, so it applies first
        for fn in reversed(self.fwd_chain):
            value = fn(value)
        return value

    def fold_backward(self, value: Any) -> Any:
        for fn in self.bwd_chain:
            value = fn(value)
        return value

    def __repr__(self) -> str:
        return f"<PromiseBranch {self.label} steps={len(self.steps)}>"


class Promise:
    """Deferred propagation record for one origin node.

    ``kind`` is ``"op"`` for promises created at promise-generating nodes and
    ``"aggregation"`` for the single-branch promises made where several
    inputs meet.
    """

    def __init__(
        self,
        pid: int,
        origin: int,
        op_kind: OpKind | str,
        starts: Sequence[tuple[int, int | None]],
        op: Callable[[list[Any]], list[Any]],
        kind: str = "op",
        rout: list[Relevance] | None = None,
        num_edges: int = 0,
    ) -> None:
        self.id = pid
        self.origin = origin
        self.op_kind = op_kind
        self.kind = kind
        self.op = op
        self.rout = rout
        self.args: list[Any] = [None] * len(starts)
        self.rins: list[Any] = [None] * len(starts)
        self._set = [False] * len(starts)
        self.branches = [PromiseBranch(self, i, s) for i, s in enumerate(starts)]
        self.parents: list[ParentLink] = []
        self.ready = False
        self.complete = False
        self.promoted = kind == "op"
        self.value: list[Any] | None = None
        self.relevance: list[Any] | None = None
        self.edge_parts: list[Any] = [None] * num_edges
        self.is_pre = False

    def branch_key(self, index: int) -> tuple:
        if self.kind == "aggregation":
            return ("agg", self.origin)
        return ("op", self.origin, index)

    @property
    def depth(self) -> int:
        return max((len(b.steps) for b in self.branches), default=0)

    def accumulate_rout(self, link: ParentLink) -> None:
        link.delivered = True

    def __repr__(self) -> str:
        state = "complete" if self.complete else "ready" if self.ready else "pending"
        return f"<Promise {self.id} {self.kind} origin={self.origin} {self.op_kind} {state}>"


class PromiseRuntime:
    """Owns every promise of one engine run and drives their state machine.

    Args:
        compute: maps a completable promise to one relevance value per branch.
        deliver: receives ``(branch, relevance)`` when a branch without child
            promise finishes its backward chain at its Arg node.
        on_step_propagated: called with each internal node id whose backward
            closure runs.
        log: event sink; receives dicts.
    """

    def __init__(
        self,
        compute: Callable[[Promise], list[Any]],
        deliver: Callable[[PromiseBranch, Any], None],
        on_step_propagated: Callable[[int], None] = lambda n: None,
        log: Callable[[dict], None] = lambda e: None,
    ) -> None:
        self.promises: list[Promise] = []
        self._compute = compute
        self._deliver = deliver
        self._on_step = on_step_propagated
        self._log = log
        self.live_op_promises = 0
        self.max_live_op_promises = 0

    # -- creation ----------------------------------------------------------

    def create_promise(
        self,
        origin: int,
        op_kind: OpKind | str,
        starts: Sequence[tuple[int, int | None]],
        op: Callable[[list[Any]], list[Any]],
        rout: list[Relevance] | None = None,
        parent: BranchRef | None = None,
    ) -> Promise:
        """Create an op promise; with ``parent`` it nests under that branch."""
        p = Promise(len(self.promises), origin, op_kind, starts, op, "op", rout)
        self.promises.append(p)
        self.live_op_promises += 1
        self.max_live_op_promises = max(self.max_live_op_promises, self.live_op_promises)
        self._log({"event": "promise_create", "promise": p.id, "origin": origin, "kind": str(op_kind),
                   "branches": len(starts), "parent": parent.branch.label if parent else None})
        if parent is not None:
            link = ParentLink(parent.branch, parent.slot)
            p.parents.append(link)
            parent.branch.children.append(p)
            parent.branch.end = ("promise", p.id)
        elif not starts:
            self._mark_ready(p)
        return p

    def make_aggregation_branch(self, node: int, num_edges: int, op_kind: OpKind | str, pre: bool) -> Promise:
        """Single-branch promise at ``node`` that merges incoming branches.

        With ``pre=True`` it is a pre-promise: parent links stay unlinked
        (no relevance flows down) until :meth:`promote_pre_promise`.
        """
        p = Promise(len(self.promises), node, op_kind, [(node, None)], lambda args: args[0], "aggregation",
                    num_edges=num_edges)
        p.promoted = not pre
        p.is_pre = pre
        self.promises.append(p)
        self._log({"event": "pre_promise" if pre else "aggregation", "promise": p.id, "node": node})
        return p

    def add_parent(self, promise: Promise, ref: BranchRef, edge: int) -> ParentLink:
        """Attach ``ref``'s branch as a parent of an aggregation promise."""
        link = ParentLink(ref.branch, ref.slot, edge, linked=promise.promoted)
        promise.parents.append(link)
        ref.branch.end = ("promise", promise.id)
        if link.linked:
            ref.branch.children.append(promise)
        else:
            ref.branch.pre_children.append(promise)
        self._log({"event": "join", "promise": promise.id, "parent": ref.branch.label, "edge": edge})
        if promise.ready:
            self.set_arg(ref.branch, _select(promise.value, ref.slot))
        return link

    # -- forward phase -----------------------------------------------------

    def set_arg(self, branch: PromiseBranch, activation: Any, arg_node: int | None = None,
                arg_slot: int | None = None) -> None:
        """Fold ``activation`` up ``branch`` and cascade through ready parents."""
        if arg_node is not None:
            branch.arg_node = arg_node
            branch.arg_slot = arg_slot
            branch.end = ("arg", arg_node)
        work: list[tuple[PromiseBranch, Any]] = [(branch, activation)]
        while work:
            b, val = work.pop()
            p = b.promise
            if p._set[b.index]:
                raise ContractError(f"{b.label}: argument already resolved")
            p.args[b.index] = b.fold_forward(val)
            p._set[b.index] = True
            self._log({"event": "set_arg", "promise": p.id, "branch": b.index})
            if all(p._set):
                self._mark_ready(p)
                for link in reversed(p.parents):
                    self._log({"event": "forward_parent", "promise": p.id, "parent": link.branch.label})
                    work.append((link.branch, _select(p.value, link.slot)))

    def _mark_ready(self, p: Promise) -> None:
        p.ready = True
        p.value = p.op(p.args) if p.parents or p.kind == "aggregation" else None
        self._log({"event": "ready", "promise": p.id})
        if self.can_complete(p):
            self.trigger_completion(p)

    # -- backward phase ----------------------------------------------------

    def can_complete(self, p: Promise) -> bool:
        return (
            not p.complete
            and p.ready
            and p.promoted
            and all(link.delivered and link.linked for link in p.parents)
        )

    def trigger_completion(self, promise: Promise) -> None:
        """Resolve ``promise`` and, depth first, every descendant it unblocks.

        Order per promise: compute its relevance, then for each branch in
        order run the backward chain and recurse into any child that became
        completable before moving on to the next branch.
        """
        if not promise.ready:
            raise ContractError(f"promise {promise.id} triggered before ready")
        if not self.can_complete(promise):
            return
        stack: list[tuple[str, Promise, int]] = [("promise", promise, -1)]
        while stack:
            what, p, i = stack.pop()
            if what == "promise":
                if not self.can_complete(p):
                    continue
                p.relevance = self._compute(p)
                p.complete = True
                if p.kind == "op":
                    self.live_op_promises -= 1
                self._log({"event": "complete", "promise": p.id, "origin": p.origin})
                for j in reversed(range(len(p.branches))):
                    stack.append(("branch", p, j))
                continue
            b = p.branches[i]
            self.exec_bwd(b, p.relevance[i])
            children = b.children + b.pre_children
            if not children:
                self._deliver(b, p.rins[i])
                continue
            for child in reversed(children):
                for link in child.parents:
                    if link.branch is b:
                        link.value = p.rins[i]
                        child.accumulate_rout(link)
                if self.can_complete(child):
                    stack.append(("promise", child, -1))

    def exec_bwd(self, branch: PromiseBranch, relevance: Any) -> None:
        """Fold ``relevance`` down ``branch``'s backward chain into ``rins``."""
        for node, _ in branch.steps:
            self._on_step(node)
        branch.promise.rins[branch.index] = branch.fold_backward(relevance)
        self._log({"event": "branch_bwd", "promise": branch.promise.id, "branch": branch.index})

    def promote_pre_promise(self, promise: Promise) -> None:
        """Link a pre-promise to its parents and resolve it if possible."""
        if promise.promoted:
            raise ContractError(f"promise {promise.id} already promoted")
        promise.promoted = True
        for link in promise.parents:
            link.linked = True
            b = link.branch
            if promise in b.pre_children:
                b.pre_children.remove(promise)
                b.children.append(promise)
        self._log({"event": "promote", "promise": promise.id, "node": promise.origin})
        if promise.ready:
            self.trigger_completion(promise)

    # -- bookkeeping -------------------------------------------------------

    def op_promises(self) -> list[Promise]:
        return [p for p in self.promises if p.kind == "op"]

    def all_complete(self) -> bool:
        return all(p.complete for p in self.promises)

    def branches(self) -> list[PromiseBranch]:
        return [b for p in self.promises for b in p.branches]


def _select(value: list[Any] | None, slot: int | None) -> Any:
    if value is None:
        raise ContractError("promise value requested before ready")
    return value if slot is None else value[slot]


@dataclass
class PromisePathCache:
    """Recorded promise chains of one graph topology and rule config.

    ``paths`` maps a branch key (``("op", origin, index)`` or
    ``("agg", node)``) to the internal ``(node, slot)`` steps that branch
    passed through on the first run.
    """

    key: str
    paths: dict[tuple, list[tuple[int, int | None]]] = field(default_factory=dict)

    @property
    def internal_nodes(self) -> int:
        return sum(len(v) for v in self.paths.values())

    def matches(self, key: str) -> bool:
        return key == self.key

    def to_json(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "paths": [{"branch": list(k), "steps": [list(s) for s in v]} for k, v in self.paths.items()],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "PromisePathCache":
        paths = {tuple(e["branch"]): [tuple(s) for s in e["steps"]] for e in data["paths"]}
        return cls(data["key"], paths)


def cache_paths(key: str, runtime: PromiseRuntime) -> PromisePathCache:
    """Snapshot every branch chain recorded by a completed run."""
    cache = PromisePathCache(key)
    for b in runtime.branches():
        cache.paths[b.key] = list(b.steps)
    return cache
