"""Kernel pattern library.

Maps expression shapes to the computational kernels a statement can be
lowered to, grouped in priority classes (cheapest shape class first):

    1  scalar work: dot products, scalar arithmetic
    2  matrix-vector: gemv, trsv, axpy
    3  matrix-matrix: gemm, trsm, trmm, syrk, syr2k, scal, sc-add
    4  outer products: ger
    5  explicit triangular inversion, admissible only as a last resort

Two modes share the patterns: mapping (generic names, used when lowering a
model to calls) and tagging (most specific name, used when annotating
derived block updates).  The module also owns the property-driven
factorization table and the machinery to splice a factorization's product
form into an expression.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .cost import CostPoly, kernel_cost
from .expr import (
    IO,
    Const,
    Dim,
    DimEnv,
    Expr,
    Inverse,
    Kind,
    Leaf,
    Negate,
    Plus,
    Property,
    Times,
    Transpose,
    canonical_key,
    dims_of,
    is_identity,
    is_scalar,
    make_operand,
    print_expr,
    times,
    transpose_key,
)
from .properties import Context, infer, is_diagonal, is_triangular

CLASS_OF: dict[str, int] = {
    "dot": 1, "sc-mult": 1,
    "gemv": 2, "trsv": 2, "axpy": 2,
    "gemm": 3, "trsm": 3, "trmm": 3, "syrk": 3, "syr2k": 3,
    "scal": 3, "sc-add": 3,
    "ger": 4,
    "inv-tri": 5,
}

# tag mode prefers the most specific name for a shape
_SPECIFICITY = ("syr2k", "syrk", "scal", "trsv", "trsm", "trmm", "ger", "dot",
                "axpy", "sc-add", "sc-mult", "gemv", "gemm", "inv-tri")


@dataclass(frozen=True)
class Statement:
    """One kernel call: outs := kernel(rhs)."""

    outs: tuple[Leaf, ...]
    kernel: str
    rhs: Expr

    def render(self) -> str:
        lhs = ", ".join(print_expr(o) for o in self.outs)
        return f"{lhs} := {print_expr(self.rhs)}"


@dataclass(frozen=True)
class Match:
    kernel: str
    klass: int
    factors: tuple[Expr, ...]  # oriented multiplicative inputs
    cost: CostPoly


class MatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Shape and atom helpers


def _atom(e: Expr) -> Optional[tuple[Leaf, bool, bool]]:
    """Peel an operand reference: (leaf, transposed, inverted)."""
    t = inv = False
    x = e
    for _ in range(2):
        if isinstance(x, Transpose):
            t = not t
            x = x.arg
        elif isinstance(x, Inverse):
            inv = True
            x = x.arg
    return (x, t, inv) if isinstance(x, Leaf) else None


def _plain_atom(e: Expr) -> bool:
    a = _atom(e)
    return a is not None and not a[2]


def _shape(e: Expr, env: DimEnv) -> tuple[str, str]:
    r, c = dims_of(e, env)
    lr = env.find(r).label if r is not None else "1"
    lc = env.find(c).label if c is not None else "1"
    return lr, lc


def _is_one(env: DimEnv, d: Optional[Dim]) -> bool:
    return d is not None and env.same(d, env.one)


def shape_class(e: Expr, env: DimEnv) -> str:
    r, c = dims_of(e, env)
    if _is_one(env, r) and _is_one(env, c):
        return "scalar"
    if _is_one(env, c) or _is_one(env, r):
        return "vector"
    return "matrix"


def _product_parts(e: Expr) -> tuple[int, list[Expr], list[Expr]]:
    """(sign, scalar factors, matrix factors) of one term."""
    sign = 1
    while isinstance(e, Negate):
        sign = -sign
        e = e.arg
    if isinstance(e, Times):
        sc = [a for a in e.args if is_scalar(a)]
        mats = [a for a in e.args if not is_scalar(a)]
    elif is_scalar(e):
        sc, mats = [e], []
    else:
        sc, mats = [], [e]
    return sign, sc, mats


def _only_scalar_leaves(e: Expr) -> bool:
    from .expr import walk
    for sub in walk(e):
        if isinstance(sub, Leaf) and sub.op.kind is not Kind.SCALAR:
            return False
    return True


# ---------------------------------------------------------------------------
# Matching


def match_kernel(rhs: Expr, ctx: Context,
                 out_shape: Optional[tuple[str, str]] = None) -> list[Match]:
    """All kernels that can compute `rhs` in a single call."""
    env = ctx.env
    try:
        out = _shape(rhs, env)
    except Exception:
        out = out_shape or ("1", "1")
    if out_shape is not None and out == ("1", "1") and out_shape != out:
        out = out_shape

    found: list[Match] = []

    def add(kernel: str, factors: Iterable[Expr]) -> None:
        facs = tuple(factors)
        in_shapes = [_shape(f, env) for f in facs]
        found.append(Match(kernel, CLASS_OF[kernel], facs,
                           kernel_cost(kernel, [out], in_shapes)))

    if isinstance(rhs, Plus):
        _match_sum(rhs, ctx, add)
    else:
        _match_term(rhs, ctx, add)

    found.sort(key=lambda m: (m.klass, _SPECIFICITY.index(m.kernel)))
    return found


def _match_term(rhs: Expr, ctx: Context, add) -> None:
    env = ctx.env
    sign, scalars, mats = _product_parts(rhs)

    if not mats:
        if _only_scalar_leaves(rhs):
            add("sc-mult", ())
        return

    if len(mats) == 1:
        m = mats[0]
        a = _atom(m)
        if a is not None and a[2] and shape_class(m, env) == "matrix" and \
                is_triangular(Leaf(a[0].op, a[0].sub), ctx) and not scalars and sign > 0:
            add("inv-tri", (m,))
        if scalars and a is not None and not a[2]:
            # alpha * X: elementwise scaling
            add("scal", (m,))
        return

    if len(mats) != 2:
        return
    f0, f1 = mats
    a0, a1 = _atom(f0), _atom(f1)
    if a0 is None or a1 is None:
        return
    sc = shape_class(times(*mats), env) if len(mats) > 1 else None
    c0, c1 = shape_class(f0, env), shape_class(f1, env)

    if sc == "scalar":
        if c0 == "vector" and c1 == "vector" and not a0[2] and not a1[2]:
            add("dot", (f0, f1))
        return

    if sc == "vector":
        # one factor is the operator (matrix-shaped), the other the operand
        if c0 == "matrix":
            op, vec = f0, f1
        elif c1 == "matrix":
            op, vec = f1, f0
        else:
            return
        oa, va = _atom(op), _atom(vec)
        if va is None or va[2] or oa is None:
            return
        if oa[2]:
            if is_triangular(Leaf(oa[0].op, oa[0].sub), ctx) and not scalars and sign > 0:
                add("trsv", (op, vec))
        else:
            add("gemv", (op, vec))
        return

    # matrix-valued product of two factors
    inv0, inv1 = a0[2], a1[2]
    tri0 = is_triangular(Leaf(a0[0].op, a0[0].sub), ctx)
    tri1 = is_triangular(Leaf(a1[0].op, a1[0].sub), ctx)
    diag0 = is_diagonal(Leaf(a0[0].op, a0[0].sub), ctx)
    diag1 = is_diagonal(Leaf(a1[0].op, a1[0].sub), ctx)
    if c0 == "vector" and c1 == "vector":
        if not inv0 and not inv1:
            add("ger", (f0, f1))
        return
    if inv0 != inv1:
        invf, other = (f0, f1) if inv0 else (f1, f0)
        tri = tri0 if inv0 else tri1
        diag = diag0 if inv0 else diag1
        if diag:
            add("scal", (other,))
        if tri and _plain_atom(other):
            add("trsm", (invf, other))
        return
    if inv0 and inv1:
        return
    if diag0 or diag1:
        other = f1 if diag0 else f0
        add("scal", (other,))
    if a0[0].op.name == a1[0].op.name and a0[0].sub == a1[0].sub and \
            a0[1] != a1[1]:
        add("syrk", (f0, f1))
    add("gemm", (f0, f1))
    if (tri0 and _plain_atom(f0) and _plain_atom(f1)) or \
            (tri1 and _plain_atom(f1) and _plain_atom(f0)):
        add("trmm", (f0, f1))


def _match_sum(rhs: Plus, ctx: Context, add) -> None:
    env = ctx.env
    terms = [_product_parts(t) for t in rhs.args]
    out_class = shape_class(rhs, env)

    def atom_term(t) -> bool:
        _, _, mats = t
        if not mats:
            return True
        return len(mats) == 1 and (is_identity(mats[0]) or isinstance(mats[0], Leaf))

    if all(atom_term(t) for t in terms) and len(terms) >= 2:
        if out_class == "matrix":
            add("sc-add", ())
        elif out_class == "vector":
            add("axpy", ())
        else:
            add("sc-mult", ())
        return

    if len(terms) > 3:
        return
    products = [(i, t) for i, t in enumerate(terms) if len(t[2]) == 2]
    bares = [(i, t) for i, t in enumerate(terms)
             if len(t[2]) == 1 and _plain_atom(t[2][0])]

    if out_class == "vector" and len(terms) == 2 and len(products) == 1 and \
            len(bares) == 1:
        _, (sign, scalars, mats) = products[0]
        op, vec = mats
        if shape_class(op, env) == "vector":
            op, vec = vec, op
        oa, va = _atom(op), _atom(vec)
        if oa is not None and va is not None and not oa[2] and not va[2]:
            add("gemv", (op, vec))
        return

    if out_class != "matrix":
        return

    # syr2k: A Bᵀ + B Aᵀ (or transposed-first flavor), optional accumulate
    if len(products) == 2 and len(products) + len(bares) == len(terms):
        (_, t1), (_, t2) = products
        p1, p2 = times(*t1[2]), times(*t2[2])
        if canonical_key(p2) == transpose_key(p1) and \
                canonical_key(p1) != canonical_key(p2) and t1[0] == t2[0] and \
                not t1[1] and not t2[1]:
            add("syr2k", tuple(t1[2]))
        return

    if len(products) == 1 and len(products) + len(bares) == len(terms) and bares:
        _, (sign, scalars, mats) = products[0]
        a0, a1 = _atom(mats[0]), _atom(mats[1])
        if a0 is None or a1 is None or a0[2] or a1[2]:
            return
        c0, c1 = shape_class(mats[0], env), shape_class(mats[1], env)
        if c0 == "vector" and c1 == "vector":
            add("ger", tuple(mats))
            return
        if a0[0].op.name == a1[0].op.name and a0[0].sub == a1[0].sub and \
                a0[1] != a1[1]:
            add("syrk", tuple(mats))
        add("gemm", tuple(mats))


def annotate(rhs: Expr, ctx: Context) -> Optional[str]:
    """Most specific kernel tag for a statement-shaped expression."""
    matches = match_kernel(rhs, ctx)
    if not matches:
        return None
    return min(matches, key=lambda m: _SPECIFICITY.index(m.kernel)).kernel


def statement_cost(stmt: Statement, ctx: Context) -> CostPoly:
    env = ctx.env
    out = _shape(stmt.outs[0], env)
    if stmt.kernel in ("potrf", "geqrf", "syevr", "lu", "ldl", "gesvd", "gelqf"):
        in_shapes = [_shape(stmt.rhs, env)]
    else:
        matches = [m for m in match_kernel(stmt.rhs, ctx, out)
                   if m.kernel == stmt.kernel]
        if matches:
            return matches[0].cost
        in_shapes = []
    return kernel_cost(stmt.kernel, [out], in_shapes)


# ---------------------------------------------------------------------------
# Factorizations


@dataclass(frozen=True)
class Factorization:
    """A property-driven rewrite of one operand into a product of factors."""

    kernel: str
    # per output: (name suffix, properties builder, dims builder)
    build: Callable[[DimEnv, Leaf, Callable[[str], str]], tuple[list[Leaf], Expr]]


def _mk(env: DimEnv, name: str, props: Iterable[Property], rows: Dim,
        cols: Dim, sub: tuple[str, ...]) -> Leaf:
    op = make_operand(env, name, Kind.MATRIX, IO.INTERMEDIATE, frozenset(props),
                      rows=rows, cols=cols, subscripts=sub)
    return Leaf(op, sub)


def _build_potrf(env, leaf, namer):
    n = leaf.op.rows
    l = _mk(env, namer("L"), {Property.LOWER_TRIANGULAR, Property.FULL_RANK},
            n, n, leaf.sub)
    return [l], times(l, Transpose(l))


def _build_geqrf(env, leaf, namer):
    m, n = leaf.op.rows, leaf.op.cols
    qprops = {Property.ORTHOGONAL}
    if env.same(m, n):
        qprops.add(Property.SQUARE)
    q = _mk(env, namer("Q"), qprops, m, n, leaf.sub)
    r = _mk(env, namer("R"), {Property.UPPER_TRIANGULAR, Property.FULL_RANK},
            n, n, leaf.sub)
    return [q, r], times(q, r)


def _build_syevr(env, leaf, namer):
    n = leaf.op.rows
    z = _mk(env, namer("Z"), {Property.ORTHOGONAL, Property.SQUARE}, n, n, leaf.sub)
    lam = _mk(env, namer("Lam"), {Property.DIAGONAL, Property.FULL_RANK}, n, n,
              leaf.sub)
    return [z, lam], times(z, lam, Transpose(z))


def _build_ldl(env, leaf, namer):
    n = leaf.op.rows
    l = _mk(env, namer("L"), {Property.LOWER_TRIANGULAR, Property.UNIT_DIAGONAL,
                              Property.FULL_RANK}, n, n, leaf.sub)
    d = _mk(env, namer("D"), {Property.DIAGONAL, Property.FULL_RANK}, n, n, leaf.sub)
    return [l, d], times(l, d, Transpose(l))


def _build_lu(env, leaf, namer):
    n = leaf.op.rows
    l = _mk(env, namer("L"), {Property.LOWER_TRIANGULAR, Property.UNIT_DIAGONAL,
                              Property.FULL_RANK}, n, n, leaf.sub)
    u = _mk(env, namer("U"), {Property.UPPER_TRIANGULAR, Property.FULL_RANK},
            n, n, leaf.sub)
    return [l, u], times(l, u)


def _build_gesvd(env, leaf, namer):
    m, n = leaf.op.rows, leaf.op.cols
    k = env.fresh(namer("k"))
    u = _mk(env, namer("U"), {Property.ORTHOGONAL}, m, k, leaf.sub)
    s = _mk(env, namer("S"), {Property.DIAGONAL}, k, k, leaf.sub)
    v = _mk(env, namer("V"), {Property.ORTHOGONAL}, n, k, leaf.sub)
    return [u, s, v], times(u, s, Transpose(v))


def _build_gelqf(env, leaf, namer):
    m, n = leaf.op.rows, leaf.op.cols
    l = _mk(env, namer("L"), {Property.LOWER_TRIANGULAR, Property.FULL_RANK},
            m, m, leaf.sub)
    q = _mk(env, namer("Q"), {Property.ORTHOGONAL}, m, n, leaf.sub)
    return [l, q], times(l, q)


FACTORIZATIONS: dict[str, Factorization] = {
    "potrf": Factorization("potrf", _build_potrf),
    "geqrf": Factorization("geqrf", _build_geqrf),
    "syevr": Factorization("syevr", _build_syevr),
    "ldl": Factorization("ldl", _build_ldl),
    "lu": Factorization("lu", _build_lu),
    "gesvd": Factorization("gesvd", _build_gesvd),
    "gelqf": Factorization("gelqf", _build_gelqf),
}


def factorizations_for(props: frozenset[Property]) -> tuple[str, ...]:
    """Admissible factorizations for a matrix with the given properties."""
    if Property.SPD in props:
        return ("potrf", "geqrf", "syevr")
    if Property.SYMMETRIC in props:
        return ("ldl", "geqrf", "syevr")
    if Property.COLUMN_PANEL in props:
        if Property.FULL_RANK in props:
            return ("geqrf",)
        return ("gesvd",)
    if Property.ROW_PANEL in props:
        if Property.FULL_RANK in props:
            return ("gelqf",)
        return ("gesvd",)
    if Property.RANK_DEFICIENT in props:
        return ("gesvd",)
    return ("lu", "gesvd")


def apply_factorization(name: str, leaf: Leaf, env: DimEnv,
                        namer: Callable[[str], str]) -> tuple[Statement, Expr]:
    """Emit the factorization statement and the product replacing `leaf`."""
    fact = FACTORIZATIONS[name]
    outs, product = fact.build(env, leaf, namer)
    return Statement(tuple(outs), fact.kernel, leaf), product
