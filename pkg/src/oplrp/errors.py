"""Exception types shared across the package."""

from __future__ import annotations


class LRPError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LRPError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class UnsupportedOpError(LRPError):
    """An op kind has no forward kernel or no relevance rule."""

    def __init__(self, kind: str, node: int | None = None, detail: str = "") -> None:
        self.kind = kind
        self.node = node
        where = f" at node {node}" if node is not None else ""
        msg = f"unsupported op kind {kind!r}{where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class GraphError(LRPError):
    """The recorded graph is malformed (dangling ids, cycles, bad edges)."""


class ContractError(LRPError):
    """A promise or engine operation was invoked outside its precondition."""


class DeadlockError(LRPError):
    """Traversal terminated while nodes were still stalled or pending."""
