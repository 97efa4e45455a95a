"""Rule-based rewriting over expressions.

Each rule proposes local alternatives at a node; the engine lifts them to
whole-expression variants at every position.  Two bounded explorations are
offered: `apply_rules` (breadth-first closure, used when enumerating
representations) and `simplify` (best-first toward the smallest canonical
form, used when chasing cancellations that need temporary growth).

`expand` is a separate one-shot normalizer to a sum of scalar-coefficient
products with like-term collection; block-matrix flattening and tautology
checks build on it.
"""
from __future__ import annotations

import heapq
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Optional

from .expr import (
    Const,
    Deriv,
    Expr,
    Func,
    Inverse,
    Leaf,
    Negate,
    Plus,
    Property,
    Times,
    Transpose,
    canonical_key,
    deriv,
    dims_of,
    identity_leaf,
    inverse,
    is_identity,
    is_scalar,
    leaves,
    is_zero,
    negate,
    node_count,
    plus,
    times,
    transpose,
    transpose_key,
    transpose_normal,
    walk,
    zero_leaf,
)
from .properties import Context, infer

P = Property

RuleFn = Callable[[Expr, Context], Iterator[Expr]]


@dataclass(frozen=True)
class Rule:
    name: str
    fn: RuleFn


def _is_square_expr(e: Expr, ctx: Context) -> bool:
    if is_scalar(e):
        return True
    try:
        r, c = dims_of(e, ctx.env)
    except Exception:
        return False
    if r is None or c is None:
        # free dims (identity built-in) unify with anything square
        return True
    return ctx.env.same(r, c)


# ---------------------------------------------------------------------------
# Local rules


def _r_collapse(e: Expr, ctx: Context) -> Iterator[Expr]:
    if isinstance(e, Transpose) and isinstance(e.arg, Transpose):
        yield e.arg.arg
    if isinstance(e, Inverse) and isinstance(e.arg, Inverse):
        yield e.arg.arg


def _r_transpose(e: Expr, ctx: Context) -> Iterator[Expr]:
    if not isinstance(e, Transpose):
        return
    a = e.arg
    if is_scalar(a):
        yield a
        return
    if isinstance(a, Times):
        scalars = [x for x in a.args if is_scalar(x)]
        mats = [x for x in a.args if not is_scalar(x)]
        yield times(*scalars, *(transpose(x) for x in reversed(mats)))
    if isinstance(a, Plus):
        yield plus(*(transpose(x) for x in a.args))
    if isinstance(a, Negate):
        yield negate(transpose(a.arg))
    if isinstance(a, Inverse):
        yield inverse(transpose(a.arg))
    if isinstance(a, Leaf) and P.IDENTITY in a.op.props:
        yield a
    if P.SYMMETRIC in infer(a, ctx):
        yield a


def _r_transpose_collect(e: Expr, ctx: Context) -> Iterator[Expr]:
    # Aᵀ·Bᵀ → (B·A)ᵀ when every matrix factor is a transpose
    if not isinstance(e, Times):
        return
    mats = [x for x in e.args if not is_scalar(x)]
    scalars = [x for x in e.args if is_scalar(x)]
    if len(mats) >= 2 and all(isinstance(m, Transpose) for m in mats):
        inner = times(*(m.arg for m in reversed(mats)))  # type: ignore[union-attr]
        yield times(*scalars, transpose(inner))


def _r_inverse(e: Expr, ctx: Context) -> Iterator[Expr]:
    if not isinstance(e, Inverse):
        return
    a = e.arg
    if isinstance(a, Const) and a.value != 0:
        yield Const(Fraction(1) / a.value)
    if isinstance(a, Transpose):
        yield transpose(inverse(a.arg))
    if isinstance(a, Negate):
        yield negate(inverse(a.arg))
    if isinstance(a, Leaf) and P.IDENTITY in a.op.props:
        yield a
    pr = infer(a, ctx)
    if P.ORTHOGONAL in pr and P.SQUARE in pr:
        yield transpose(a)
    if isinstance(a, Times):
        args = a.args
        for cut in range(1, len(args)):
            left, right = args[:cut], args[cut:]
            le, re_ = times(*left), times(*right)
            if _is_square_expr(le, ctx) and _is_square_expr(re_, ctx):
                yield times(inverse(re_), inverse(le))


def _r_inverse_trans_back(e: Expr, ctx: Context) -> Iterator[Expr]:
    # (A⁻¹)ᵀ → (Aᵀ)⁻¹ (the other bridge direction)
    if isinstance(e, Transpose) and isinstance(e.arg, Inverse):
        yield inverse(transpose(e.arg.arg))


def _r_inverse_merge(e: Expr, ctx: Context) -> Iterator[Expr]:
    # A⁻¹·B⁻¹ → (B·A)⁻¹ for adjacent inverse factors
    if not isinstance(e, Times):
        return
    args = list(e.args)
    for i in range(len(args) - 1):
        x, y = args[i], args[i + 1]
        if isinstance(x, Inverse) and isinstance(y, Inverse):
            merged = inverse(times(y.arg, x.arg))
            yield times(*args[:i], merged, *args[i + 2:])


def _r_times_cancel(e: Expr, ctx: Context) -> Iterator[Expr]:
    if not isinstance(e, Times):
        return
    args = list(e.args)
    idx = [i for i, x in enumerate(args) if not is_scalar(x)]
    for a, b in zip(idx, idx[1:]):
        x, y = args[a], args[b]
        dropped: Optional[list[Expr]] = None
        if isinstance(x, Inverse) and canonical_key(x.arg) == canonical_key(y):
            dropped = [v for i, v in enumerate(args) if i not in (a, b)]
        elif isinstance(y, Inverse) and canonical_key(y.arg) == canonical_key(x):
            dropped = [v for i, v in enumerate(args) if i not in (a, b)]
        else:
            # orthogonal cancellations: ZᵀZ always, ZZᵀ only when square
            if isinstance(x, Transpose) and canonical_key(x.arg) == canonical_key(y) \
                    and P.ORTHOGONAL in infer(y, ctx):
                dropped = [v for i, v in enumerate(args) if i not in (a, b)]
            elif isinstance(y, Transpose) and canonical_key(y.arg) == canonical_key(x):
                pr = infer(x, ctx)
                if P.ORTHOGONAL in pr and P.SQUARE in pr:
                    dropped = [v for i, v in enumerate(args) if i not in (a, b)]
        if dropped is not None:
            if all(is_scalar(v) for v in dropped):
                yield times(*dropped, identity_leaf())
            else:
                yield times(*dropped)


def _r_identity_absorb(e: Expr, ctx: Context) -> Iterator[Expr]:
    if not isinstance(e, Times):
        return
    args = list(e.args)
    for i, x in enumerate(args):
        if is_identity(x):
            rest = args[:i] + args[i + 1:]
            if any(not is_scalar(v) for v in rest):
                yield times(*rest)


def _r_negate_bubble(e: Expr, ctx: Context) -> Iterator[Expr]:
    if not isinstance(e, Times):
        return
    for i, x in enumerate(e.args):
        if isinstance(x, Negate):
            rest = list(e.args)
            rest[i] = x.arg
            yield negate(times(*rest))
            return


def _split_term(t: Expr) -> tuple[bool, list[Expr], list[Expr]]:
    """term → (negated, scalar factors, matrix factors)."""
    neg = False
    if isinstance(t, Negate):
        neg, t = True, t.arg
    factors = list(t.args) if isinstance(t, Times) else [t]
    scalars = [f for f in factors if is_scalar(f)]
    mats = [f for f in factors if not is_scalar(f)]
    return neg, scalars, mats


def _r_factor_extract(e: Expr, ctx: Context) -> Iterator[Expr]:
    """Common left/right factor of all terms: F·A + F·B → F·(A+B).

    A bare term equal to the factor contributes an identity: W·Zᵀ + Zᵀ →
    (W + I)·Zᵀ.
    """
    if not isinstance(e, Plus) or len(e.args) < 2:
        return
    terms = [_split_term(t) for t in e.args]
    if any(not mats for _, _, mats in terms):
        return
    for side in ("left", "right"):
        pick = (lambda ms: ms[0]) if side == "left" else (lambda ms: ms[-1])
        fkey = canonical_key(pick(terms[0][2]))
        if not all(canonical_key(pick(mats)) == fkey for _, _, mats in terms):
            continue
        factor = pick(terms[0][2])
        rests = []
        for negd, scalars, mats in terms:
            inner = mats[1:] if side == "left" else mats[:-1]
            body = times(*scalars, *(inner if inner else [identity_leaf()]))
            rests.append(negate(body) if negd else body)
        if side == "left":
            yield times(factor, plus(*rests))
        else:
            yield times(plus(*rests), factor)


def _r_congruence_factor(e: Expr, ctx: Context) -> Iterator[Expr]:
    """α·Z·M·Zᵀ + β·I → Z·(α·M + β·I)·Zᵀ for square orthogonal Z."""
    if not isinstance(e, Plus) or len(e.args) < 2:
        return
    for i, t in enumerate(e.args):
        negd, scalars, mats = _split_term(t)
        if negd or len(mats) < 3:
            continue
        z, ztail = mats[0], mats[-1]
        if canonical_key(ztail) != transpose_key(z):
            continue
        zp = infer(z, ctx)
        if P.ORTHOGONAL not in zp or P.SQUARE not in zp:
            continue
        others = [e.args[j] for j in range(len(e.args)) if j != i]
        inner_terms = [times(*scalars, *mats[1:-1])]
        ok = True
        for o in others:
            oneg, oscal, omats = _split_term(o)
            if len(omats) == 1 and is_identity(omats[0]):
                body = times(*oscal, identity_leaf())
                inner_terms.append(negate(body) if oneg else body)
            else:
                ok = False
                break
        if ok:
            yield times(z, plus(*inner_terms), transpose(ztail.arg)
                        if isinstance(ztail, Transpose) else ztail)


def _r_plus_fold(e: Expr, ctx: Context) -> Iterator[Expr]:
    # t + (−t) and exact duplicates with opposite signs collapse via expand
    if isinstance(e, Plus):
        flat = expand(e)
        if canonical_key(flat) != canonical_key(e) and node_count(flat) <= node_count(e):
            yield flat


STANDARD_RULES: tuple[Rule, ...] = (
    Rule("collapse", _r_collapse),
    Rule("transpose", _r_transpose),
    Rule("transpose-collect", _r_transpose_collect),
    Rule("inverse", _r_inverse),
    Rule("inverse-transpose", _r_inverse_trans_back),
    Rule("inverse-merge", _r_inverse_merge),
    Rule("cancel", _r_times_cancel),
    Rule("identity-absorb", _r_identity_absorb),
    Rule("negate-bubble", _r_negate_bubble),
    Rule("factor-extract", _r_factor_extract),
    Rule("congruence-factor", _r_congruence_factor),
    Rule("plus-fold", _r_plus_fold),
)

# merging products under an inverse is useful when enumerating equivalent
# forms, but it works against the size-directed descent (it re-buries
# inverses that the compiler wants exposed), so simplify() leaves it out
SIMPLIFY_RULES: tuple[Rule, ...] = tuple(
    r for r in STANDARD_RULES if r.name != "inverse-merge")


# ---------------------------------------------------------------------------
# Engine


def _local_variants(e: Expr, ctx: Context, rules: Iterable[Rule]) -> Iterator[Expr]:
    for r in rules:
        yield from r.fn(e, ctx)


def neighbors(e: Expr, ctx: Context, rules: Iterable[Rule] = STANDARD_RULES) -> list[Expr]:
    """One rule application at any position; deduplicated, input excluded."""
    out: dict[tuple, Expr] = {}
    own = canonical_key(e)

    def visit(node: Expr, wrap: Callable[[Expr], Expr]) -> None:
        for v in _local_variants(node, ctx, rules):
            whole = wrap(v)
            k = canonical_key(whole)
            if k != own and k not in out:
                out[k] = whole
        if isinstance(node, (Plus, Times, Func)):
            for i, child in enumerate(node.args):
                def rebuild(v: Expr, i: int = i, node: Expr = node) -> Expr:
                    args = list(node.args)
                    args[i] = v
                    if isinstance(node, Plus):
                        return plus(*args)
                    if isinstance(node, Times):
                        return times(*args)
                    return Func(node.fname, tuple(args))
                visit(child, lambda v, f=rebuild, w=wrap: w(f(v)))
        elif isinstance(node, (Negate, Transpose, Inverse, Deriv)):
            ctor = {Negate: negate, Transpose: transpose,
                    Inverse: inverse, Deriv: deriv}[type(node)]
            visit(node.arg, lambda v, c=ctor, w=wrap: w(c(v)))

    visit(e, lambda v: v)
    return list(out.values())


DEFAULT_APPLY_BUDGET = 64
DEFAULT_SIMPLIFY_BUDGET = 256


def _budget(default: int) -> int:
    raw = os.environ.get("LAKC_MAX_NODES")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return default


def apply_rules(e: Expr, ctx: Context, rules: Iterable[Rule] = STANDARD_RULES,
                budget: Optional[int] = None) -> list[Expr]:
    """Breadth-first closure of rewrites; the input is always element 0."""
    limit = budget if budget is not None else _budget(DEFAULT_APPLY_BUDGET)
    seen: dict[tuple, Expr] = {canonical_key(e): e}
    queue = [e]
    pops = 0
    while queue and pops < limit:
        cur = queue.pop(0)
        pops += 1
        for nb in neighbors(cur, ctx, rules):
            k = canonical_key(nb)
            if k not in seen:
                seen[k] = nb
                queue.append(nb)
    return list(seen.values())


def buried_inverses(e: Expr) -> int:
    """Count inverses whose argument is still a product of matrices.

    Inverses of sums are irreducible, but an inverse of a matrix product can
    always be pushed onto the factors, so any form that keeps one is worse
    than an equal-sized form that does not.
    """
    count = 0
    for sub in walk(e):
        if isinstance(sub, Inverse) and isinstance(sub.arg, Times):
            if sum(1 for f in sub.arg.args if not is_scalar(f)) >= 2:
                count += 1
    return count


def inverse_mass(e: Expr) -> int:
    """Total matrix leaves sitting under inverse nodes.

    Scalars divide cheaply and the identity never needs inverting, so only
    genuine matrix operands count.  Nested inverses count their leaves once
    per enclosing inverse: deeper burial weighs more.
    """
    mass = 0
    for sub in walk(e):
        if isinstance(sub, Inverse):
            for leaf in leaves(sub.arg):
                if not is_scalar(leaf) and not is_identity(leaf):
                    mass += 1
    return mass


def buried_transposes(e: Expr) -> int:
    """Count transposes of anything not atomic.

    The normal form keeps transposes directly on operands; ranking them out
    stops the descent from re-collecting trans(B) * trans(A) into the
    smaller trans(A * B).
    """
    return sum(1 for sub in walk(e)
               if isinstance(sub, Transpose) and not isinstance(sub.arg, Leaf))


def simplify(e: Expr, ctx: Context, rules: Iterable[Rule] = SIMPLIFY_RULES,
             budget: Optional[int] = None) -> Expr:
    """Deterministic best-first descent to the smallest reachable form.

    Candidates are ranked by (buried inverses, inverse mass, buried
    transposes, node count, canonical key); the search keeps the global
    minimum over everything generated and restarts from it until a
    fixpoint, so results are stable and idempotent.
    """
    limit = budget if budget is not None else _budget(DEFAULT_SIMPLIFY_BUDGET)

    def rank(x: Expr) -> tuple[int, int, int, int, tuple]:
        return (buried_inverses(x), inverse_mass(x), buried_transposes(x),
                node_count(x), canonical_key(x))

    current = e
    while True:
        best = current
        best_rank = rank(best)
        # the heap orders exploration by size alone; the winner is chosen by
        # the full rank so a small form never beats a clean one
        heap: list[tuple[int, tuple, int]] = []
        store: dict[int, Expr] = {}
        counter = 0

        def push(x: Expr) -> None:
            nonlocal counter
            k = canonical_key(x)
            if k in seen_keys:
                return
            seen_keys.add(k)
            store[counter] = x
            heapq.heappush(heap, (node_count(x), k, counter))
            counter += 1

        seen_keys: set[tuple] = set()
        push(current)
        pops = 0
        while heap and pops < limit:
            _, _, idx = heapq.heappop(heap)
            cur = store.pop(idx)
            pops += 1
            r = rank(cur)
            if r < best_rank:
                best, best_rank = cur, r
            for nb in neighbors(cur, ctx, rules):
                push(nb)
        if canonical_key(best) == canonical_key(current):
            return best
        current = best


# ---------------------------------------------------------------------------
# Expansion to a sum of products with like-term collection


def _atom_factors(e: Expr) -> tuple[Fraction, list[Expr]]:
    """Flatten one product into (numeric coefficient, atomic factors)."""
    coeff = Fraction(1)
    out: list[Expr] = []

    def grab(x: Expr) -> None:
        nonlocal coeff
        if isinstance(x, Times):
            for a in x.args:
                grab(a)
        elif isinstance(x, Negate):
            coeff = -coeff
            grab(x.arg)
        elif isinstance(x, Const):
            coeff *= x.value
        else:
            out.append(x)

    grab(e)
    return coeff, out


def expand(e: Expr) -> Expr:
    """Distribute products over sums, push transposes to leaves, collect terms.

    The result is a canonical multilinear form: Σ coeff · (sorted scalar
    factors) · (matrix factor chain).  Inverses of compound expressions are
    kept as opaque atoms (their insides are expanded recursively).
    """
    e = transpose_normal(e)

    def norm(x: Expr) -> list[tuple[Fraction, list[Expr]]]:
        if isinstance(x, Plus):
            terms: list[tuple[Fraction, list[Expr]]] = []
            for a in x.args:
                terms.extend(norm(a))
            return terms
        if isinstance(x, Negate):
            return [(-c, f) for c, f in norm(x.arg)]
        if isinstance(x, Times):
            parts = [norm(a) for a in x.args]
            acc: list[tuple[Fraction, list[Expr]]] = [(Fraction(1), [])]
            for p in parts:
                acc = [(c1 * c2, f1 + f2) for c1, f1 in acc for c2, f2 in p]
            return acc
        if isinstance(x, Const):
            return [(x.value, [])]
        if isinstance(x, Inverse):
            return [(Fraction(1), [inverse(expand(x.arg))])]
        if isinstance(x, Transpose):
            return [(Fraction(1), [transpose(expand(x.arg))])]
        if isinstance(x, Deriv):
            return [(Fraction(1), [deriv(expand(x.arg))])]
        if isinstance(x, Func):
            return [(Fraction(1), [Func(x.fname, tuple(expand(a) for a in x.args))])]
        return [(Fraction(1), [x])]

    raw = norm(e)
    collected: dict[tuple, tuple[Fraction, list[Expr], list[Expr]]] = {}
    order: list[tuple] = []
    for coeff, factors in raw:
        scalars = sorted((f for f in factors if is_scalar(f)), key=canonical_key)
        mats = [f for f in factors if not is_scalar(f)]
        if any(is_zero(m) for m in mats):
            continue
        key = (tuple(canonical_key(s) for s in scalars),
               tuple(canonical_key(m) for m in mats))
        if key in collected:
            c0, s0, m0 = collected[key]
            collected[key] = (c0 + coeff, s0, m0)
        else:
            collected[key] = (coeff, scalars, mats)
            order.append(key)
    terms: list[Expr] = []
    for key in order:
        coeff, scalars, mats = collected[key]
        if coeff == 0:
            continue
        body = times(*scalars, *mats) if (scalars or mats) else Const(Fraction(1))
        if coeff == 1:
            terms.append(body)
        elif coeff == -1:
            terms.append(negate(body))
        else:
            terms.append(times(Const(coeff), body))
    if not terms:
        return zero_leaf() if not is_scalar(e) else Const(Fraction(0))
    return plus(*terms)


def equal_mod_rewrite(a: Expr, b: Expr, ctx: Context) -> bool:
    """Cheap equality: expand both; fall back to a bounded simplify."""
    if canonical_key(a) == canonical_key(b):
        return True
    ea, eb = expand(a), expand(b)
    if canonical_key(ea) == canonical_key(eb):
        return True
    return canonical_key(simplify(ea, ctx)) == canonical_key(simplify(eb, ctx))