"""Grid tailoring of kernel-sequence algorithms.

A model whose operands carry subscripts describes a whole grid of problem
instances.  This module wraps a single-instance algorithm in the matching
loop nest: subscripts are propagated through the statements in one pass,
then loop-invariant statements are moved to the preheader of the loop they
do not depend on, or precomputed into indexed temporaries ahead of the nest
when they depend only on a non-adjacent loop index.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import permutations
from typing import Iterable, Mapping, Optional

from .cost import CostPoly, loop_cost
from .expr import (
    IO,
    Const,
    Expr,
    Func,
    Inverse,
    Leaf,
    Negate,
    Plus,
    Times,
    Transpose,
)
from .kernels import Statement, statement_cost
from .parser import EquationModel
from .properties import Context

# conventional trip-count symbols for the corpus index names
TRIP_LABELS: dict[str, str] = {"i": "m", "j": "t", "k": "p"}

MAX_LOOP_ORDERS = 24


def trip_label(index: str, trips: Optional[Mapping[str, str]] = None) -> str:
    table = TRIP_LABELS if trips is None else trips
    return table.get(index, f"n_{index}")


@dataclass(frozen=True)
class Loop:
    """A loop over one grid index; body items are statements or loops."""

    index: str
    trip: str
    body: tuple

    def render(self, depth: int = 0) -> str:
        pad = "    " * depth
        lines = [f"{pad}for {self.index} in 1..{self.trip}:"]
        for item in self.body:
            if isinstance(item, Loop):
                lines.append(item.render(depth + 1))
            else:
                pad2 = "    " * (depth + 1)
                lines.append(f"{pad2}{item.render()}    [{item.kernel}]")
        return "\n".join(lines)


@dataclass(frozen=True)
class LoopNest:
    """A hoisted algorithm: flat statements, precompute loops, main nest."""

    order: tuple[str, ...]
    items: tuple

    @property
    def outside(self) -> tuple[Statement, ...]:
        return tuple(x for x in self.items if not isinstance(x, Loop))

    @property
    def precomputed(self) -> tuple[Loop, ...]:
        loops = tuple(x for x in self.items if isinstance(x, Loop))
        return loops[:-1] if self.order else loops

    @property
    def main(self) -> Optional[Loop]:
        loops = [x for x in self.items if isinstance(x, Loop)]
        return loops[-1] if self.order and loops else None

    def level(self, depth: int) -> tuple[Statement, ...]:
        """Statements sitting directly inside the first `depth` loops."""
        if depth == 0:
            return self.outside
        node = self.main
        for _ in range(depth - 1):
            if node is None:
                return ()
            node = next((x for x in node.body if isinstance(x, Loop)), None)
        if node is None:
            return ()
        return tuple(x for x in node.body if not isinstance(x, Loop))

    @property
    def body(self) -> tuple[Statement, ...]:
        return self.level(len(self.order))

    def statements(self) -> tuple[Statement, ...]:
        out: list[Statement] = []

        def rec(items: Iterable) -> None:
            for item in items:
                if isinstance(item, Loop):
                    rec(item.body)
                else:
                    out.append(item)

        rec(self.items)
        return tuple(out)

    def render(self) -> str:
        lines = []
        for item in self.items:
            if isinstance(item, Loop):
                lines.append(item.render())
            else:
                lines.append(f"{item.render()}    [{item.kernel}]")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Subscript propagation


def input_subscripts(model: EquationModel) -> dict[str, tuple[str, ...]]:
    """Declared grid subscripts of the input and inout operands."""
    out: dict[str, tuple[str, ...]] = {}
    for name, op in model.operands.items():
        if op.io in (IO.INPUT, IO.INOUT) and op.subscripts:
            out[name] = tuple(sorted(op.subscripts))
    return out


def _relabel(e: Expr, sig: Mapping[str, frozenset[str]]) -> Expr:
    if isinstance(e, Leaf):
        sub = tuple(sorted(sig.get(e.op.name, frozenset())))
        return e if e.sub == sub else Leaf(e.op, sub)
    if isinstance(e, Const):
        return e
    if isinstance(e, Plus):
        return Plus(tuple(_relabel(a, sig) for a in e.args))
    if isinstance(e, Times):
        return Times(tuple(_relabel(a, sig) for a in e.args))
    if isinstance(e, Negate):
        return Negate(_relabel(e.arg, sig))
    if isinstance(e, Transpose):
        return Transpose(_relabel(e.arg, sig))
    if isinstance(e, Inverse):
        return Inverse(_relabel(e.arg, sig))
    if isinstance(e, Func):
        return Func(e.fname, tuple(_relabel(a, sig) for a in e.args))
    raise TypeError(f"not an Expr: {e!r}")


def _leaf_names(e: Expr) -> set[str]:
    if isinstance(e, Leaf):
        return {e.op.name}
    if isinstance(e, Const):
        return set()
    if isinstance(e, (Plus, Times, Func)):
        return set().union(*(_leaf_names(a) for a in e.args)) if e.args else set()
    return _leaf_names(e.arg)


def propagate_indices(stmts: Iterable[Statement],
                      sub_map: Mapping[str, tuple[str, ...]],
                      ) -> tuple[Statement, ...]:
    """Single top-to-bottom pass: each lhs gets the union of rhs indices,
    and the label follows the operand through every later use."""
    sig: dict[str, frozenset[str]] = {
        name: frozenset(sub) for name, sub in sub_map.items()}
    out: list[Statement] = []
    for st in stmts:
        rhs = _relabel(st.rhs, sig)
        union = frozenset().union(
            *(sig.get(n, frozenset()) for n in _leaf_names(rhs)))
        sub = tuple(sorted(union))
        for o in st.outs:
            sig[o.op.name] = union
        outs = tuple(Leaf(o.op, sub) for o in st.outs)
        out.append(replace(st, outs=outs, rhs=rhs))
    return tuple(out)


def statement_signature(st: Statement) -> frozenset[str]:
    return frozenset(st.outs[0].sub)


# ---------------------------------------------------------------------------
# Code motion and cross-loop hoisting


def hoist(stmts: Iterable[Statement], order: tuple[str, ...], *,
          allow_extra_storage: bool = True,
          trips: Optional[Mapping[str, str]] = None) -> LoopNest:
    """Wrap labeled statements in loops over `order` (outer to inner).

    A statement whose signature equals a prefix of `order` lands in that
    prefix's preheader.  A statement missing some enclosing index is
    precomputed into an indexed temporary ahead of the nest, provided extra
    storage is allowed and all of its reads are available there; otherwise
    it stays at the depth of its deepest index.
    """
    stmts = tuple(stmts)
    pos = {ix: k for k, ix in enumerate(order)}
    n = len(order)
    produced = {o.op.name for st in stmts for o in st.outs}
    levels: list[list[Statement]] = [[] for _ in range(n + 1)]
    pre: dict[tuple[str, ...], list[Statement]] = {}
    early: set[str] = set()  # defined before the main nest runs

    for st in stmts:
        sg = statement_signature(st)
        depth = max((pos[ix] for ix in sg), default=-1) + 1
        if sg == set(order[:depth]):
            levels[depth].append(st)
            if depth == 0:
                early.update(o.op.name for o in st.outs)
            continue
        reads = _leaf_names(st.rhs)
        feasible = all(r not in produced or r in early for r in reads)
        if allow_extra_storage and feasible:
            key = tuple(sorted(sg, key=lambda ix: pos[ix]))
            pre.setdefault(key, []).append(st)
            early.update(o.op.name for o in st.outs)
        else:
            levels[depth].append(st)

    def pre_loop(key: tuple[str, ...], body: list[Statement]) -> Loop:
        node: tuple = tuple(body)
        for ix in reversed(key):
            node = (Loop(ix, trip_label(ix, trips), node),)
        return node[0]

    items: list = list(levels[0])
    items.extend(pre_loop(k, b) for k, b in pre.items())
    if n:
        nest: tuple = ()
        for d in range(n - 1, -1, -1):
            body = tuple(levels[d + 1]) + nest
            nest = (Loop(order[d], trip_label(order[d], trips), body),)
        items.extend(nest)
    return LoopNest(order, tuple(items))


def grid_indices(stmts: Iterable[Statement]) -> tuple[str, ...]:
    return tuple(sorted({ix for st in stmts for ix in st.outs[0].sub}))


def grid_nests(model: EquationModel, stmts: Iterable[Statement], *,
               allow_extra_storage: bool = True,
               trips: Optional[Mapping[str, str]] = None,
               max_orders: int = MAX_LOOP_ORDERS) -> list[LoopNest]:
    """All loop orders for the model's grid; single-instance passes through."""
    labeled = propagate_indices(stmts, input_subscripts(model))
    indices = grid_indices(labeled)
    if not indices:
        return [LoopNest((), labeled)]
    orders = list(permutations(indices))[:max_orders]
    return [hoist(labeled, order, allow_extra_storage=allow_extra_storage,
                  trips=trips) for order in orders]


# ---------------------------------------------------------------------------
# Cost of a loop nest


def algorithm_cost(alg, ctx: Context) -> CostPoly:
    """Sum of kernel costs, each scaled by its enclosing trip counts only."""
    items = alg.items if isinstance(alg, LoopNest) else alg
    total = CostPoly.zero()
    for item in items:
        if isinstance(item, Loop):
            total = total + loop_cost(algorithm_cost(item.body, ctx), item.trip)
        else:
            if not item.kernel:
                raise ValueError(f"statement without a kernel: {item.render()}")
            total = total + statement_cost(item, ctx)
    return total
