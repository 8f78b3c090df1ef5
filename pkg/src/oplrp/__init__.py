"""Operation-level relevance propagation over autodiff-style computation graphs."""

from .engine import (
    Engine,
    InitMode,
    PromiseStats,
    RunResult,
    aggregate_inputs,
    collect_stats,
    init_relevance,
    oracle_propagate,
    propagate,
)
from .errors import ContractError, DeadlockError, GraphError, LRPError, ShapeError, UnsupportedOpError
from .graph import AuxGraph, Graph, NodeRecord, Var, build_aux_graph, caching_policy, is_arg_node, retrieve_fwd_output
from .promise import PromisePathCache, classify_promise_generating
from .rules import COMPOSITES, RuleConfig, propagate_node
from .tensor import OpAttrs, OpKind, forward_eval
from .zoo import ModelSpec, get_model, run_forward

__version__ = "0.1.0"
