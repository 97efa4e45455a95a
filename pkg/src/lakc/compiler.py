"""Two-phase search mapping matrix equations onto kernel call sequences.

Phase 1 eliminates inverses of anything that is not triangular or diagonal.
At each step the innermost offending inverse is treated by branching over:
factorizations of the inverted operand, exposure of the inverted expression
as a fresh operand, gram-style repeated segments inside the argument, and
factorizations of matrices appearing inside the argument.  Children that do
not strictly reduce an inverse-complexity rank are pruned, which both keeps
the search finite and discards factorizations that cancel out.

Phase 2 maps the surviving equations onto registered kernels: compound
inverse arguments and repeated two-factor segments are computed once, then
the mapper branches over every admissible (segment, kernel) choice until all
equations are bound.  Each root-to-leaf path yields one algorithm; the
family is deduplicated, cost-ranked, and capped.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cmp_to_key
from typing import Iterable, Optional

from .cost import CostPoly, compare_leading
from .expr import (
    Const,
    DimEnv,
    Equation,
    Expr,
    IO,
    Inverse,
    Kind,
    Leaf,
    Negate,
    Operand,
    Plus,
    Property,
    Times,
    Transpose,
    canonical_key,
    dims_of,
    inverse,
    is_identity,
    is_scalar,
    make_operand,
    negate,
    node_count,
    plus,
    print_expr,
    rebuild,
    substitute,
    substitute_leaf,
    times,
    transpose,
    transpose_key,
    transpose_normal,
    walk,
)
from .kernels import (
    Statement,
    apply_factorization,
    factorizations_for,
    match_kernel,
    statement_cost,
)
from .parser import EquationModel
from .properties import Context, infer
from .rewrite import inverse_mass, simplify

DEFAULT_MAX_NODES = 10_000

_RESOLVED = frozenset(
    {Property.LOWER_TRIANGULAR, Property.UPPER_TRIANGULAR, Property.DIAGONAL}
)


class CompileError(RuntimeError):
    pass


class SearchBudgetExceeded(CompileError):
    pass


def max_search_nodes() -> int:
    raw = os.environ.get("LAKC_MAX_NODES", "")
    try:
        return int(raw) if raw else DEFAULT_MAX_NODES
    except ValueError:
        return DEFAULT_MAX_NODES


@dataclass
class CompileOptions:
    max_variants: int = 128
    max_nodes: Optional[int] = None
    rank_order: tuple[str, ...] = ()  # cost-comparison variable order override


class _Budget:
    def __init__(self, limit: int) -> None:
        self.limit = limit
        self.used = 0

    def spend(self) -> None:
        self.used += 1
        if self.used > self.limit:
            raise SearchBudgetExceeded(
                f"search visited more than {self.limit} nodes"
            )


class _Namer:
    """Deterministic fresh names that avoid declared operand names."""

    def __init__(self, taken: Iterable[str]) -> None:
        self.taken = set(taken)
        self.counts: dict[str, int] = {}

    def __call__(self, base: str) -> str:
        k = self.counts.get(base, 0)
        while True:
            k += 1
            name = f"{base}{k}"
            if name not in self.taken:
                break
        self.counts[base] = k
        self.taken.add(name)
        return name


# ---------------------------------------------------------------------------
# Model preparation


def _strip_subs(e: Expr) -> Expr:
    def fix(n: Expr) -> Optional[Expr]:
        if isinstance(n, Leaf) and n.sub:
            return Leaf(n.op, ())
        return None

    return rebuild(e, fix)


def subscript_map(model: EquationModel) -> dict[str, tuple[str, ...]]:
    """Grid indices attached to each operand in the model's equations."""
    subs: dict[str, tuple[str, ...]] = {}
    for eq in model.equations:
        for side in (eq.lhs, eq.rhs):
            for node in walk(side):
                if isinstance(node, Leaf) and node.sub:
                    subs.setdefault(node.op.name, node.sub)
    return subs


def isolate_output(eq: Equation, name: str) -> Equation:
    """Rewrite an implicit equation so `name` stands alone on the left."""
    lhs, rhs = eq.lhs, eq.rhs

    def holds(e: Expr) -> bool:
        return any(isinstance(n, Leaf) and n.op.name == name for n in walk(e))

    guard = 0
    while not (isinstance(lhs, Leaf) and lhs.op.name == name):
        guard += 1
        if guard > 32:
            raise CompileError(f"cannot isolate {name} in {print_expr(eq.lhs)}")
        if isinstance(lhs, Plus):
            keep = [t for t in lhs.args if holds(t)]
            drop = [t for t in lhs.args if not holds(t)]
            if len(keep) != 1:
                raise CompileError(f"cannot isolate {name}: appears in several addends")
            lhs = keep[0]
            rhs = plus(rhs, *(negate(t) for t in drop))
        elif isinstance(lhs, Negate):
            lhs = lhs.arg
            rhs = negate(rhs)
        elif isinstance(lhs, Times):
            pos = [i for i, a in enumerate(lhs.args) if holds(a)]
            if len(pos) != 1:
                raise CompileError(f"cannot isolate {name}: appears in several factors")
            i = pos[0]
            left = [a for a in lhs.args[:i] if not is_scalar(a)]
            right = [a for a in lhs.args[i + 1 :] if not is_scalar(a)]
            scal = [a for a in list(lhs.args[:i]) + list(lhs.args[i + 1 :]) if is_scalar(a)]
            new = rhs
            if left:
                new = times(inverse(times(*left) if len(left) > 1 else left[0]), new)
            if right:
                new = times(new, inverse(times(*right) if len(right) > 1 else right[0]))
            if scal:
                new = times(inverse(times(*scal) if len(scal) > 1 else scal[0]), new)
            lhs, rhs = lhs.args[i], new
        else:
            raise CompileError(f"cannot isolate {name} in {print_expr(eq.lhs)}")
    return Equation(lhs, rhs)


def solved_equations(model: EquationModel) -> list[Equation]:
    """Model equations, outputs isolated, subscript-free, definition order."""
    eqs: list[Equation] = []
    for eq in model.equations:
        lhs = _strip_subs(eq.lhs)
        rhs = _strip_subs(eq.rhs)
        if isinstance(lhs, Leaf):
            eqs.append(Equation(lhs, rhs))
            continue
        bound = [
            op.name
            for op in model.operands.values()
            if op.io in (IO.OUTPUT, IO.INOUT, IO.INTERMEDIATE)
            and any(isinstance(n, Leaf) and n.op.name == op.name for n in walk(lhs))
        ]
        if len(bound) != 1:
            raise CompileError("implicit equation must bind exactly one operand")
        eqs.append(isolate_output(Equation(lhs, rhs), bound[0]))

    # definitions before uses (parser guarantees acyclicity)
    defined = {eq.lhs.op.name: i for i, eq in enumerate(eqs)}  # type: ignore[union-attr]
    order: list[int] = []
    placed: set[int] = set()

    def place(i: int) -> None:
        if i in placed:
            return
        placed.add(i)
        for node in walk(eqs[i].rhs):
            if isinstance(node, Leaf) and not node.op.hatted:
                j = defined.get(node.op.name)
                if j is not None and j != i:
                    place(j)
        order.append(i)

    for i in range(len(eqs)):
        place(i)
    return [eqs[i] for i in order]


# ---------------------------------------------------------------------------
# Inverse bookkeeping


def _inv_resolved(arg: Expr, ctx: Context) -> bool:
    return bool(_RESOLVED & infer(arg, ctx))


def _postorder(e: Expr):
    for child in getattr(e, "args", ()):
        yield from _postorder(child)
    for attr in ("arg",):
        child = getattr(e, attr, None)
        if isinstance(child, Expr):
            yield from _postorder(child)
    yield e


def _find_unresolved(eqs: tuple[Equation, ...], ctx: Context):
    for i, eq in enumerate(eqs):
        for node in _postorder(eq.rhs):
            if isinstance(node, Inverse) and not _inv_resolved(node.arg, ctx):
                return i, node
    return None


def _progress_rank(eqs: tuple[Equation, ...], ctx: Context) -> tuple[int, int, int]:
    unresolved = 0
    mass = 0
    nodes = 0
    for eq in eqs:
        for node in walk(eq.rhs):
            if isinstance(node, Inverse) and not _inv_resolved(node.arg, ctx):
                unresolved += 1
        mass += inverse_mass(eq.rhs)
        nodes += node_count(eq.rhs)
    return unresolved, mass, nodes


def _eqset_key(eqs: tuple[Equation, ...]) -> tuple:
    return tuple(eq.key() for eq in eqs)


def _renamer() -> tuple[dict[str, str], "callable"]:
    ren: dict[str, str] = {}

    def rn(e: Expr) -> Expr:
        def fix(n: Expr) -> Optional[Expr]:
            if isinstance(n, Leaf) and n.op.io is IO.INTERMEDIATE:
                ren.setdefault(n.op.name, f"#{len(ren)}")
                return Leaf(replace(n.op, name=ren[n.op.name]), n.sub)
            return None

        return rebuild(e, fix)

    return ren, rn


def _state_key(
    eqs: tuple[Equation, ...],
    stmts: tuple[Statement, ...],
    factored: frozenset[str] = frozenset(),
) -> tuple:
    """Search-state identity modulo internal temp naming."""
    ren, rn = _renamer()
    sparts = tuple(
        (s.kernel, tuple(canonical_key(rn(o)) for o in s.outs), canonical_key(rn(s.rhs)))
        for s in stmts
    )
    eparts = tuple(
        (canonical_key(rn(eq.lhs)), canonical_key(rn(eq.rhs))) for eq in eqs
    )
    fparts = tuple(sorted(ren.get(n, n) for n in factored))
    return sparts, eparts, fparts


# ---------------------------------------------------------------------------
# Segment (pair) machinery shared by both phases


def _atomic(e: Expr) -> bool:
    core = e
    for _ in range(2):
        if isinstance(core, (Transpose, Inverse, Negate)):
            core = core.arg
    return isinstance(core, Leaf)


def _pair_candidates(container: Expr) -> list[tuple[tuple, Expr]]:
    """(class key, sample segment) for each adjacent non-scalar pair."""
    out: list[tuple[tuple, Expr]] = []
    for node in walk(container):
        if not isinstance(node, Times):
            continue
        args = node.args
        for i in range(len(args) - 1):
            a, b = args[i], args[i + 1]
            if is_scalar(a) or is_scalar(b) or is_identity(a) or is_identity(b):
                continue
            seg = times(a, b)
            key = min(canonical_key(seg), transpose_key(seg))
            out.append((key, seg))
    return out


def _orient(seg: Expr, env: DimEnv) -> Expr:
    """Pick the segment orientation to bind: column results, then least key."""
    alt = transpose_normal(Transpose(seg))
    ka, kb = canonical_key(seg), canonical_key(alt)
    if ka == kb:
        return seg
    try:
        _, c_seg = dims_of(seg, env)
        _, c_alt = dims_of(alt, env)
        seg_col = c_seg is not None and env.find(c_seg) == env.find(env.one)
        alt_col = c_alt is not None and env.find(c_alt) == env.find(env.one)
        if seg_col != alt_col:
            return seg if seg_col else alt
    except Exception:
        pass
    return seg if ka <= kb else alt


def _replace_segment(e: Expr, core: Expr, tleaf: Leaf) -> Expr:
    """Replace every occurrence of core (modulo transpose/negation) in e."""
    core_key = canonical_key(core)
    mirror_key = transpose_key(core)

    def fix(n: Expr) -> Optional[Expr]:
        if isinstance(n, Times):
            args = list(n.args)
            out: list[Expr] = []
            i = 0
            changed = False
            while i < len(args):
                if i + 1 < len(args) and not is_scalar(args[i]) and not is_scalar(args[i + 1]):
                    seg = times(args[i], args[i + 1])
                    k = canonical_key(seg)
                    if k == core_key:
                        out.append(tleaf)
                        i += 2
                        changed = True
                        continue
                    if k == mirror_key:
                        out.append(transpose(tleaf))
                        i += 2
                        changed = True
                        continue
                out.append(args[i])
                i += 1
            if changed:
                return times(*out)
        return None

    e2 = rebuild(e, fix)
    table = {core_key: tleaf}
    if mirror_key != core_key:
        table[mirror_key] = transpose(tleaf)
    return substitute(e2, table)


def _expose_operand(rhs: Expr, base: str, ctx: Context, namer: _Namer) -> Leaf:
    rows, cols = dims_of(rhs, ctx.env)
    env = ctx.env
    if rows is not None and cols is not None and \
            env.find(rows) == env.find(env.one) and env.find(cols) == env.find(env.one):
        kind = Kind.SCALAR
    elif cols is not None and env.find(cols) == env.find(env.one):
        kind = Kind.VECTOR
    else:
        kind = Kind.MATRIX
    props = infer(rhs, ctx) if kind is Kind.MATRIX else frozenset()
    op = make_operand(env, namer(base), kind, IO.INTERMEDIATE, props, rows, cols)
    return Leaf(op)


def _insert_definition(
    eqs: tuple[Equation, ...], definition: Equation
) -> tuple[Equation, ...]:
    name = definition.lhs.op.name  # type: ignore[union-attr]
    for i, eq in enumerate(eqs):
        if any(isinstance(n, Leaf) and n.op.name == name for n in walk(eq.rhs)):
            return eqs[:i] + (definition,) + eqs[i:]
    return eqs + (definition,)


# ---------------------------------------------------------------------------
# Phase 1: inverse treatment


@dataclass(frozen=True)
class _P1Node:
    eqs: tuple[Equation, ...]
    stmts: tuple[Statement, ...]
    factored: frozenset[str]
    factor_outs: frozenset[str]
    path_keys: frozenset


def _simplify_eqs(eqs: Iterable[Equation], ctx: Context) -> tuple[Equation, ...]:
    return tuple(Equation(eq.lhs, simplify(eq.rhs, ctx)) for eq in eqs)


def _apply_everywhere(eqs: tuple[Equation, ...], fn) -> tuple[Equation, ...]:
    return tuple(Equation(eq.lhs, fn(eq.rhs)) for eq in eqs)


def _factor_operand(
    node: _P1Node,
    leaf: Leaf,
    fname: str,
    ctx: Context,
    namer: _Namer,
) -> _P1Node:
    stmt, product = apply_factorization(fname, Leaf(leaf.op, ()), ctx.env, namer)
    eqs = _apply_everywhere(node.eqs, lambda r: substitute_leaf(r, leaf.op.name, product))
    eqs = _simplify_eqs(eqs, ctx)
    return replace(
        node,
        eqs=eqs,
        stmts=node.stmts + (stmt,),
        factored=node.factored | {leaf.op.name},
        factor_outs=node.factor_outs | {o.op.name for o in stmt.outs},
    )


def _phase1_children(
    node: _P1Node, target: tuple[int, Inverse], ctx: Context, namer: _Namer
) -> list[tuple[str, _P1Node]]:
    _, inv = target
    arg = inv.arg
    children: list[tuple[str, _P1Node]] = []

    core = arg
    while isinstance(core, (Transpose, Negate)):
        core = core.arg

    if isinstance(core, Leaf):
        name = core.op.name
        if name in node.factored or name in node.factor_outs:
            return []
        for fname in factorizations_for(core.op.props):
            children.append((f"factor {fname}({name})",
                             _factor_operand(node, core, fname, ctx, namer)))
        return children

    # expose the full argument as a fresh operand
    tleaf = _expose_operand(arg, "S", ctx, namer)
    exposed = _apply_everywhere(
        node.eqs,
        lambda r: substitute(
            r,
            {canonical_key(arg): tleaf, transpose_key(arg): transpose(tleaf)}
            if transpose_key(arg) != canonical_key(arg)
            else {canonical_key(arg): tleaf},
        ),
    )
    exposed = _insert_definition(exposed, Equation(tleaf, arg))
    children.append(
        (f"expose {tleaf.op.name}", replace(node, eqs=_simplify_eqs(exposed, ctx)))
    )

    # gram-style repeated pair inside the argument, computed once
    counts: dict[tuple, Expr] = {}
    tally: dict[tuple, int] = {}
    for key, seg in _pair_candidates(arg):
        counts.setdefault(key, seg)
        tally[key] = tally.get(key, 0) + 1
    grams = sorted(
        (k for k, n in tally.items() if n >= 2),
        key=lambda k: (-tally[k], k),
    )
    for key in grams:
        seg = _orient(counts[key], ctx.env)
        wleaf = _expose_operand(seg, "W", ctx, namer)
        eqs = _apply_everywhere(node.eqs, lambda r: _replace_segment(r, seg, wleaf))
        eqs = _insert_definition(eqs, Equation(wleaf, seg))
        children.append(
            (f"segment {wleaf.op.name}", replace(node, eqs=_simplify_eqs(eqs, ctx)))
        )

    # factorize one matrix appearing inside the argument
    seen: list[str] = []
    for leaf_node in walk(arg):
        if not isinstance(leaf_node, Leaf):
            continue
        op = leaf_node.op
        if op.kind is Kind.SCALAR or is_identity(leaf_node) or op.name in seen:
            continue
        if op.name in node.factored or op.name in node.factor_outs:
            continue
        seen.append(op.name)
    for name in sorted(seen):
        holder = next(
            n for n in walk(arg) if isinstance(n, Leaf) and n.op.name == name
        )
        for fname in factorizations_for(holder.op.props):
            children.append(
                (f"factor {fname}({name})",
                 _factor_operand(node, holder, fname, ctx, namer))
            )
    return children


def _phase1(
    root_eqs: tuple[Equation, ...],
    ctx: Context,
    namer: _Namer,
    budget: _Budget,
    rejected: list[str],
) -> list[_P1Node]:
    root = _P1Node(
        eqs=_simplify_eqs(root_eqs, ctx),
        stmts=(),
        factored=frozenset(),
        factor_outs=frozenset(),
        path_keys=frozenset(),
    )
    root = replace(root, path_keys=frozenset({_eqset_key(root.eqs)}))
    frontier = deque([root])
    leaves: list[_P1Node] = []
    memo: set[tuple] = set()
    while frontier:
        budget.spend()
        node = frontier.popleft()
        target = _find_unresolved(node.eqs, ctx)
        if target is None:
            leaves.append(node)
            continue
        rank = _progress_rank(node.eqs, ctx)
        moved = False
        for label, child in _phase1_children(node, target, ctx, namer):
            key = _eqset_key(child.eqs)
            if key in node.path_keys:
                continue
            if _progress_rank(child.eqs, ctx) >= rank:
                continue
            mkey = _state_key(child.eqs, child.stmts, child.factored)
            if mkey in memo:
                continue
            memo.add(mkey)
            frontier.append(replace(child, path_keys=node.path_keys | {key}))
            moved = True
        if not moved:
            _, inv = target
            rejected.append(f"no admissible treatment for inv({print_expr(inv.arg)})")
    return leaves


# ---------------------------------------------------------------------------
# Phase 2: kernel mapping


def _name_inverse_args(
    eqs: tuple[Equation, ...], ctx: Context, namer: _Namer
) -> tuple[Equation, ...]:
    while True:
        hit = None
        for eq in eqs:
            for node in _postorder(eq.rhs):
                if isinstance(node, Inverse) and not _atomic(node.arg):
                    hit = node.arg
                    break
            if hit is not None:
                break
        if hit is None:
            return eqs
        tleaf = _expose_operand(hit, "S", ctx, namer)
        table = {canonical_key(hit): tleaf}
        if transpose_key(hit) != canonical_key(hit):
            table[transpose_key(hit)] = transpose(tleaf)
        eqs = _apply_everywhere(eqs, lambda r: substitute(r, table))
        eqs = _insert_definition(eqs, Equation(tleaf, hit))


def _shared_pairs(eqs: tuple[Equation, ...]) -> list[tuple[tuple, Expr, int]]:
    counts: dict[tuple, Expr] = {}
    tally: dict[tuple, int] = {}
    for eq in eqs:
        for key, seg in _pair_candidates(eq.rhs):
            counts.setdefault(key, seg)
            tally[key] = tally.get(key, 0) + 1
    return [(k, counts[k], n) for k, n in tally.items() if n >= 2]


def _share_segments(
    eqs: tuple[Equation, ...], ctx: Context, namer: _Namer
) -> tuple[Equation, ...]:
    while True:
        shared = _shared_pairs(eqs)
        if not shared:
            return eqs
        shared.sort(key=lambda item: (-item[2], item[0]))
        _, seg, _ = shared[0]
        core = _orient(seg, ctx.env)
        tleaf = _expose_operand(core, "t", ctx, namer)
        eqs = _apply_everywhere(eqs, lambda r: _replace_segment(r, core, tleaf))
        eqs = _insert_definition(eqs, Equation(tleaf, core))


@dataclass(frozen=True)
class _P2Node:
    eqs: tuple[Equation, ...]
    stmts: tuple[Statement, ...]


def _rename_everywhere(
    stmts: tuple[Statement, ...],
    eqs: tuple[Equation, ...],
    old: str,
    new_leaf: Leaf,
) -> tuple[tuple[Statement, ...], tuple[Equation, ...]]:
    def fix_stmt(s: Statement) -> Statement:
        outs = tuple(new_leaf if o.op.name == old else o for o in s.outs)
        return Statement(outs, s.kernel, substitute_leaf(s.rhs, old, new_leaf))

    new_stmts = tuple(fix_stmt(s) for s in stmts)
    new_eqs = tuple(
        Equation(eq.lhs, substitute_leaf(eq.rhs, old, new_leaf)) for eq in eqs
    )
    return new_stmts, new_eqs


def _out_shape(lhs: Leaf, env: DimEnv) -> tuple[str, str]:
    from .cost import dim_label

    return dim_label(env, lhs.op.rows), dim_label(env, lhs.op.cols)


def _mapping_children(
    node: _P2Node, ctx: Context, namer: _Namer, rejected: list[str]
) -> list[_P2Node]:
    eq = node.eqs[0]
    rest = node.eqs[1:]
    lhs: Leaf = eq.lhs  # type: ignore[assignment]
    rhs = eq.rhs

    if isinstance(rhs, Leaf):
        produced = {o.op.name for s in node.stmts for o in s.outs}
        if rhs.op.name in produced:
            stmts, eqs = _rename_everywhere(node.stmts, rest, rhs.op.name, lhs)
            return [_P2Node(eqs, stmts)]
        rejected.append(f"cannot bind {lhs.op.name} to bare operand {rhs.op.name}")
        return []

    candidates: list[tuple[int, int, tuple, Expr, str]] = []
    full = match_kernel(rhs, ctx, _out_shape(lhs, ctx.env))
    for m in full:
        candidates.append((m.klass, 0, canonical_key(rhs), rhs, m.kernel))

    rhs_key = canonical_key(rhs)
    seen_cores: set[tuple] = set()
    for key, seg in _pair_candidates(rhs):
        if key in seen_cores:
            continue
        seen_cores.add(key)
        core = _orient(seg, ctx.env)
        if canonical_key(core) == rhs_key or transpose_key(core) == rhs_key:
            continue
        for m in match_kernel(core, ctx):
            candidates.append((m.klass, 1, key, core, m.kernel))

    if not candidates:
        rejected.append(f"no kernel matches {print_expr(rhs)}")
        return []

    best = min(c[0] for c in candidates)
    if best < 5:
        candidates = [c for c in candidates if c[0] < 5]
    candidates.sort(key=lambda c: (c[0], c[1], c[2], c[4]))

    children: list[_P2Node] = []
    for _, is_seg, _, target, kernel in candidates:
        if not is_seg:
            stmt = Statement((lhs,), kernel, target)
            children.append(_P2Node(rest, node.stmts + (stmt,)))
        else:
            tleaf = _expose_operand(target, "t", ctx, namer)
            stmt = Statement((tleaf,), kernel, target)
            new_eqs = tuple(
                Equation(q.lhs, _replace_segment(q.rhs, target, tleaf))
                for q in node.eqs
            )
            children.append(_P2Node(new_eqs, node.stmts + (stmt,)))
    return children


def _phase2(
    leaf: _P1Node,
    ctx: Context,
    namer: _Namer,
    budget: _Budget,
    rejected: list[str],
    memo: set[tuple],
) -> list[tuple[Statement, ...]]:
    eqs = _name_inverse_args(leaf.eqs, ctx, namer)
    eqs = _share_segments(eqs, ctx, namer)
    start = _P2Node(eqs, leaf.stmts)
    skey = _state_key(start.eqs, start.stmts)
    if skey in memo:
        return []
    memo.add(skey)
    frontier = deque([start])
    done: list[tuple[Statement, ...]] = []
    while frontier:
        budget.spend()
        node = frontier.popleft()
        if not node.eqs:
            done.append(node.stmts)
            continue
        for child in _mapping_children(node, ctx, namer, rejected):
            key = _state_key(child.eqs, child.stmts)
            if key in memo:
                continue
            memo.add(key)
            frontier.append(child)
    return done


# ---------------------------------------------------------------------------
# Assembly, deduplication, ranking


def schedule(stmts: tuple[Statement, ...]) -> tuple[Statement, ...]:
    """Dependency order, earliest-emitted-first among the ready statements."""
    producer: dict[str, int] = {}
    for i, s in enumerate(stmts):
        for o in s.outs:
            if o.op.name in producer:
                raise CompileError(f"{o.op.name} assigned twice")
            producer[o.op.name] = i
    deps: list[set[int]] = []
    for s in stmts:
        need = set()
        for node in walk(s.rhs):
            if isinstance(node, Leaf) and not node.op.hatted:
                j = producer.get(node.op.name)
                if j is not None:
                    need.add(j)
        deps.append(need)
    placed: list[int] = []
    done: set[int] = set()
    while len(placed) < len(stmts):
        ready = [i for i in range(len(stmts)) if i not in done and deps[i] <= done]
        if not ready:
            raise CompileError("cyclic statement dependencies")
        nxt = min(ready)
        placed.append(nxt)
        done.add(nxt)
    return tuple(stmts[i] for i in placed)


def variant_key(stmts: tuple[Statement, ...]) -> tuple:
    """Dataflow identity: canonical topological order, temps renamed.

    Two emissions of the same statement set in different (valid) orders get
    the same key, so a variant is one algorithm, not one schedule.
    """
    producer: dict[str, int] = {}
    for i, s in enumerate(stmts):
        for o in s.outs:
            producer[o.op.name] = i
    deps: list[set[int]] = []
    for s in stmts:
        deps.append(
            {
                producer[n.op.name]
                for n in walk(s.rhs)
                if isinstance(n, Leaf) and not n.op.hatted and n.op.name in producer
            }
        )
    ren: dict[str, str] = {}

    def rn(e: Expr) -> Expr:
        def fix(n: Expr) -> Optional[Expr]:
            if isinstance(n, Leaf) and n.op.name in ren:
                return Leaf(replace(n.op, name=ren[n.op.name]), n.sub)
            return None

        return rebuild(e, fix)

    parts: list[tuple] = []
    done: set[int] = set()
    while len(parts) < len(stmts):
        ready = [i for i in range(len(stmts)) if i not in done and deps[i] <= done]
        if not ready:  # cyclic; fall back to emission order identity
            ready = [i for i in range(len(stmts)) if i not in done]
        pick = min(
            ready,
            key=lambda i: (stmts[i].kernel, canonical_key(rn(stmts[i].rhs)), i),
        )
        s = stmts[pick]
        rhs_key = canonical_key(rn(s.rhs))
        for o in s.outs:
            ren.setdefault(o.op.name, f"v{len(ren)}")
        parts.append((s.kernel, tuple(ren[o.op.name] for o in s.outs), rhs_key))
        done.add(pick)
    return tuple(parts)


@dataclass(frozen=True)
class Variant:
    name: str
    statements: tuple[Statement, ...]
    cost: CostPoly

    @property
    def kernels(self) -> tuple[str, ...]:
        return tuple(s.kernel for s in self.statements)

    def render(self) -> str:
        lines = [f"{s.render()}    [{s.kernel}]" for s in self.statements]
        return "\n".join(lines)


@dataclass
class CompileResult:
    model: EquationModel
    variants: list[Variant]
    rejected: list[str]
    nodes_used: int

    def by_kernels(self, kernels: tuple[str, ...]) -> Optional[Variant]:
        for v in self.variants:
            if v.kernels == kernels:
                return v
        return None


def _intermediate_roots(eqs: list[Equation]) -> list[tuple[Equation, ...]]:
    """Keep or inline each intermediate definition: one root per choice set."""
    inter = [
        i
        for i, eq in enumerate(eqs)
        if isinstance(eq.lhs, Leaf) and eq.lhs.op.io is IO.INTERMEDIATE
    ]
    roots: list[tuple[Equation, ...]] = []
    for mask in range(1 << len(inter)):
        current = list(eqs)
        drop: set[int] = set()
        for bit, idx in enumerate(inter):
            if not (mask >> bit) & 1:
                continue
            name = current[idx].lhs.op.name  # type: ignore[union-attr]
            body = current[idx].rhs
            for j in range(len(current)):
                if j == idx:
                    continue
                current[j] = Equation(
                    current[j].lhs, substitute_leaf(current[j].rhs, name, body)
                )
            drop.add(idx)
        roots.append(tuple(eq for i, eq in enumerate(current) if i not in drop))
    uniq: dict[tuple, tuple[Equation, ...]] = {}
    for r in roots:
        uniq.setdefault(_eqset_key(r), r)
    return list(uniq.values())


def compile_model(
    model: EquationModel, opts: Optional[CompileOptions] = None
) -> CompileResult:
    opts = opts or CompileOptions()
    limit = opts.max_nodes if opts.max_nodes is not None else max_search_nodes()
    budget = _Budget(limit)
    ctx = Context(model.env)
    namer = _Namer(model.operands)
    rejected: list[str] = []

    eqs = solved_equations(model)
    # declared properties of intermediates hold wherever their definition
    # appears, inlined or not
    for eq in eqs:
        lf = eq.lhs
        if isinstance(lf, Leaf) and lf.op.io is IO.INTERMEDIATE and lf.op.props:
            ctx.register_fact(eq.rhs, lf.op.props)
            ctx.register_fact(simplify(eq.rhs, ctx), lf.op.props)

    raw: dict[tuple, tuple[Statement, ...]] = {}
    p2_memo: set[tuple] = set()
    for root in _intermediate_roots(eqs):
        for leaf in _phase1(root, ctx, namer, budget, rejected):
            for stmts in _phase2(leaf, ctx, namer, budget, rejected, p2_memo):
                ordered = schedule(stmts)
                raw.setdefault(variant_key(ordered), ordered)

    scored = []
    for key, stmts in raw.items():
        cost = CostPoly.zero()
        for s in stmts:
            cost = cost + statement_cost(s, ctx)
        scored.append((cost, key, stmts))

    order = opts.rank_order or None

    def cmp(a, b) -> int:
        c = compare_leading(a[0], b[0], order) if order else compare_leading(a[0], b[0])
        if c:
            return c
        la, lb = len(a[2]), len(b[2])
        if la != lb:
            return -1 if la < lb else 1
        return -1 if a[1] < b[1] else (1 if a[1] > b[1] else 0)

    scored.sort(key=cmp_to_key(cmp))
    scored = scored[: opts.max_variants]
    variants = [
        Variant(f"v{i + 1:03d}", stmts, cost)
        for i, (cost, _, stmts) in enumerate(scored)
    ]
    return CompileResult(model, variants, rejected, budget.used)
