"""Property inference over expressions.

Structural rules propagate operand properties through arithmetic: triangular
zone algebra for products and sums, congruence (K·M·Kᵀ), transpose-pairing
for symmetry, and inverse/transpose property maps.  A `Context` carries
registered empirical facts (e.g. Schur complements proved SPD elsewhere) and
per-function output properties for learned operations; facts are keyed by
canonical form so any rewriting of the same expression still hits them.
"""
from __future__ import annotations

from fractions import Fraction
from typing import Optional

from .expr import (
    Const,
    Deriv,
    DimEnv,
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
    close_properties,
    dims_of,
    is_scalar,
    transpose_key,
)

P = Property

# properties that only depend on the zero pattern and survive negation
_ZONE_PROPS = frozenset({P.SQUARE, P.DIAGONAL, P.LOWER_TRIANGULAR, P.UPPER_TRIANGULAR,
                         P.ZERO, P.COLUMN_PANEL, P.ROW_PANEL})

_TRANSPOSE_SWAP = {
    P.LOWER_TRIANGULAR: P.UPPER_TRIANGULAR,
    P.UPPER_TRIANGULAR: P.LOWER_TRIANGULAR,
    P.SYMMETRIC_LOWER: P.SYMMETRIC_UPPER,
    P.SYMMETRIC_UPPER: P.SYMMETRIC_LOWER,
    P.SPD_LOWER: P.SPD_UPPER,
    P.SPD_UPPER: P.SPD_LOWER,
    P.COLUMN_PANEL: P.ROW_PANEL,
    P.ROW_PANEL: P.COLUMN_PANEL,
}


class Context:
    """Inference context: dimensions, registered facts, learned op outputs."""

    def __init__(self, env: Optional[DimEnv] = None) -> None:
        self.env = env or DimEnv()
        self.facts: dict[tuple, frozenset[Property]] = {}
        self.func_props: dict[str, frozenset[Property]] = {}
        self._version = 0
        self._memo: dict[tuple, frozenset[Property]] = {}

    def register_fact(self, e: Expr, props: frozenset[Property] | set[Property]) -> None:
        key = canonical_key(e)
        merged = close_properties(frozenset(props) | self.facts.get(key, frozenset()))
        self.facts[key] = merged
        self._version += 1
        self._memo.clear()

    def register_func(self, fname: str, props: frozenset[Property]) -> None:
        self.func_props[fname] = props
        self._version += 1
        self._memo.clear()


def _zone(props: frozenset[Property]) -> str:
    if P.ZERO in props:
        return "z"
    if P.DIAGONAL in props:
        return "d"
    if P.LOWER_TRIANGULAR in props:
        return "l"
    if P.UPPER_TRIANGULAR in props:
        return "u"
    return "f"


_ZONE_JOIN = {  # zone of a product, both factors square
    ("z", "z"): "z", ("z", "d"): "z", ("z", "l"): "z", ("z", "u"): "z", ("z", "f"): "z",
    ("d", "z"): "z", ("l", "z"): "z", ("u", "z"): "z", ("f", "z"): "z",
    ("d", "d"): "d", ("d", "l"): "l", ("d", "u"): "u", ("d", "f"): "f",
    ("l", "d"): "l", ("u", "d"): "u", ("f", "d"): "f",
    ("l", "l"): "l", ("u", "u"): "u",
    ("l", "u"): "f", ("u", "l"): "f", ("l", "f"): "f", ("f", "l"): "f",
    ("u", "f"): "f", ("f", "u"): "f", ("f", "f"): "f",
}

_ZONE_AS_PROPS = {
    "z": frozenset({P.ZERO}),
    "d": frozenset({P.DIAGONAL}),
    "l": frozenset({P.LOWER_TRIANGULAR}),
    "u": frozenset({P.UPPER_TRIANGULAR}),
    "f": frozenset(),
}


def infer(e: Expr, ctx: Context) -> frozenset[Property]:
    """Closed property set provable for `e` (registered facts included)."""
    key = canonical_key(e)
    memo_key = (key,)
    cached = ctx._memo.get(memo_key)
    if cached is not None:
        return cached
    props = _infer(e, ctx)
    fact = ctx.facts.get(key)
    if fact:
        props = close_properties(props | fact)
    ctx._memo[memo_key] = props
    return props


def _is_square(e: Expr, ctx: Context) -> bool:
    try:
        r, c = dims_of(e, ctx.env)
    except Exception:
        return False
    if r is None or c is None:
        return False
    return ctx.env.same(r, c)


def _infer(e: Expr, ctx: Context) -> frozenset[Property]:
    if isinstance(e, Leaf):
        return e.op.props
    if isinstance(e, Const):
        out = {P.SQUARE, P.SYMMETRIC, P.DIAGONAL}
        if e.value == 0:
            return close_properties({P.ZERO, P.SQUARE})
        if e.value > 0:
            out |= {P.SPD, P.FULL_RANK}
        else:
            out |= {P.FULL_RANK}
        return close_properties(out)
    if isinstance(e, Negate):
        inner = infer(e.arg, ctx)
        out = set(inner & _ZONE_PROPS)
        if P.SYMMETRIC in inner:
            out.add(P.SYMMETRIC)
        if P.FULL_RANK in inner:
            out.add(P.FULL_RANK)
        return close_properties(out)
    if isinstance(e, Transpose):
        inner = infer(e.arg, ctx)
        out = {_TRANSPOSE_SWAP.get(p, p) for p in inner if p is not P.UNIT_DIAGONAL}
        if P.UNIT_DIAGONAL in inner:
            out.add(P.UNIT_DIAGONAL)
        return close_properties(out)
    if isinstance(e, Inverse):
        inner = infer(e.arg, ctx)
        keep = {P.SQUARE, P.DIAGONAL, P.LOWER_TRIANGULAR, P.UPPER_TRIANGULAR,
                P.UNIT_DIAGONAL, P.SYMMETRIC, P.SPD, P.IDENTITY}
        out = set(inner & keep) | {P.SQUARE, P.FULL_RANK}
        if P.ORTHOGONAL in inner and P.SQUARE in inner:
            out.add(P.ORTHOGONAL)
        return close_properties(out)
    if isinstance(e, Deriv):
        inner = infer(e.arg, ctx)
        out = set(inner & _ZONE_PROPS) - {P.ZERO}
        if P.ZERO in inner:
            out.add(P.ZERO)
        if P.SYMMETRIC in inner or P.SPD in inner:
            out.add(P.SYMMETRIC)
        return close_properties(out)
    if isinstance(e, Func):
        got = ctx.func_props.get(e.fname)
        return got if got is not None else frozenset()
    if isinstance(e, Times):
        return _infer_times(e, ctx)
    if isinstance(e, Plus):
        return _infer_plus(e, ctx)
    raise TypeError(f"not an Expr: {e!r}")


def _infer_times(e: Times, ctx: Context) -> frozenset[Property]:
    scalars = [a for a in e.args if is_scalar(a)]
    mats = [a for a in e.args if not is_scalar(a)]
    if not mats:
        return close_properties({P.SQUARE, P.SYMMETRIC, P.DIAGONAL})
    # identity factors are neutral; drop them unless nothing else remains
    nonid = [m for m in mats if P.IDENTITY not in infer(m, ctx)]
    if nonid:
        mats = nonid
    if len(mats) == 1:
        inner = infer(mats[0], ctx)
        if not scalars:
            return inner
        # unknown-sign scalar coefficient: zero pattern and symmetry survive
        out = set(inner & _ZONE_PROPS)
        if P.SYMMETRIC in inner:
            out.add(P.SYMMETRIC)
        if all(isinstance(s, Const) and s.value > 0 for s in scalars) and P.SPD in inner:
            out.add(P.SPD)
        return close_properties(out)

    mat_props = [infer(m, ctx) for m in mats]
    out: set[Property] = set()

    # congruence K1 K2 ... M ... K2ᵀ K1ᵀ (M possibly absent): symmetric; SPD
    # when every peeled layer has full row rank and M is SPD (or absent)
    lo, hi = 0, len(mats)
    layers: list[frozenset[Property]] = []
    while hi - lo >= 2 and canonical_key(mats[hi - 1]) == transpose_key(mats[lo]):
        layers.append(mat_props[lo])
        lo += 1
        hi -= 1
    if layers:
        mid = mats[lo:hi]
        mid_props = [infer(m, ctx) for m in mid]
        if all(P.SYMMETRIC in mp for mp in mid_props) and len(mid) <= 1:
            out.add(P.SYMMETRIC)
            full_row = all(
                P.FULL_RANK in fk and (P.ROW_PANEL in fk or P.SQUARE in fk)
                for fk in layers)
            if full_row and all(P.SPD in mp for mp in mid_props):
                if not any(not isinstance(s, Const) or s.value <= 0 for s in scalars):
                    out.add(P.SPD)

    if all(P.IDENTITY in mp for mp in mat_props) and not scalars:
        out.add(P.IDENTITY)
    if all(P.ORTHOGONAL in mp and P.SQUARE in mp for mp in mat_props) and not scalars:
        out.add(P.ORTHOGONAL)
    if all(P.FULL_RANK in mp and P.SQUARE in mp for mp in mat_props):
        out.add(P.FULL_RANK)
    if any(P.ZERO in mp for mp in mat_props):
        out.add(P.ZERO)

    # a run of square factors applied to one panel keeps the panel shape,
    # and invertible maps preserve its rank
    nonsquare = [i for i, mp in enumerate(mat_props) if P.SQUARE not in mp]
    if len(nonsquare) == 1:
        panel = mat_props[nonsquare[0]]
        out |= panel & {P.COLUMN_PANEL, P.ROW_PANEL}
        others = [mp for i, mp in enumerate(mat_props) if i != nonsquare[0]]
        if P.FULL_RANK in panel and all(
                P.FULL_RANK in mp and P.SQUARE in mp for mp in others):
            out.add(P.FULL_RANK)

    # triangular zone algebra over square factors
    if all(P.SQUARE in mp for mp in mat_props):
        zone = _zone(mat_props[0])
        for mp in mat_props[1:]:
            zone = _ZONE_JOIN[(zone, _zone(mp))]
        out |= set(_ZONE_AS_PROPS[zone])
        out.add(P.SQUARE)
        if zone in ("l", "u", "d") and all(P.UNIT_DIAGONAL in mp for mp in mat_props):
            out.add(P.UNIT_DIAGONAL)
    elif _is_square(e, ctx):
        out.add(P.SQUARE)

    if P.ZERO in out:
        out &= {P.ZERO, P.SQUARE}
        out |= {P.ZERO}
    return close_properties(out)


def _infer_plus(e: Plus, ctx: Context) -> frozenset[Property]:
    term_props = [infer(a, ctx) for a in e.args]
    out: set[Property] = set()

    zone = _zone(term_props[0]) if P.SQUARE in term_props[0] else "f"
    all_square = all(P.SQUARE in tp for tp in term_props)
    if all_square:
        zones = {_zone(tp) for tp in term_props}
        if zones <= {"z"}:
            zone = "z"
        elif zones <= {"z", "d"}:
            zone = "d"
        elif zones <= {"z", "d", "l"}:
            zone = "l"
        elif zones <= {"z", "d", "u"}:
            zone = "u"
        else:
            zone = "f"
        out |= set(_ZONE_AS_PROPS[zone])
        out.add(P.SQUARE)

    if all(P.SPD in tp for tp in term_props):
        out.add(P.SPD)

    # symmetry: every term symmetric, or matched with its transpose partner
    keys = [canonical_key(a) for a in e.args]
    remaining = list(range(len(e.args)))
    symmetric = True
    while remaining:
        i = remaining.pop(0)
        if P.SYMMETRIC in term_props[i]:
            continue
        tk = transpose_key(e.args[i])
        match = next((j for j in remaining if keys[j] == tk), None)
        if match is None:
            symmetric = False
            break
        remaining.remove(match)
    if symmetric and all_square:
        out.add(P.SYMMETRIC)

    if P.ZERO in out:
        out &= {P.ZERO, P.SQUARE}
    return close_properties(out)


def is_symmetric(e: Expr, ctx: Context) -> bool:
    return P.SYMMETRIC in infer(e, ctx)


def is_spd(e: Expr, ctx: Context) -> bool:
    return P.SPD in infer(e, ctx)


def is_orthogonal(e: Expr, ctx: Context) -> bool:
    return P.ORTHOGONAL in infer(e, ctx)


def is_triangular(e: Expr, ctx: Context) -> bool:
    pr = infer(e, ctx)
    return P.LOWER_TRIANGULAR in pr or P.UPPER_TRIANGULAR in pr


def is_diagonal(e: Expr, ctx: Context) -> bool:
    return P.DIAGONAL in infer(e, ctx)