"""Kernel matching, tagging, factorization selection."""

from fractions import Fraction

from lakc.cost import CostPoly
from lakc.expr import (
    IO,
    Const,
    DimEnv,
    Kind,
    Leaf,
    Property,
    identity_leaf,
    inverse,
    make_operand,
    minus,
    negate,
    plus,
    times,
    transpose,
)
from lakc.kernels import (
    Statement,
    annotate,
    apply_factorization,
    factorizations_for,
    match_kernel,
    statement_cost,
)
from lakc.properties import Context


def _ops():
    env = DimEnv()
    n, p = env.fresh("n"), env.fresh("p")
    mk = lambda name, kind, *props, **kw: Leaf(
        make_operand(env, name, kind, IO.INPUT, props, **kw))
    o = dict(
        A=mk("A", Kind.MATRIX, Property.SQUARE, rows=n, cols=n),
        B=mk("B", Kind.MATRIX, Property.SQUARE, rows=n, cols=n),
        L=mk("L", Kind.MATRIX, Property.LOWER_TRIANGULAR, Property.FULL_RANK,
             rows=n, cols=n),
        D=mk("D", Kind.MATRIX, Property.DIAGONAL, Property.FULL_RANK,
             rows=n, cols=n),
        X=mk("X", Kind.MATRIX, Property.COLUMN_PANEL, Property.FULL_RANK,
             rows=n, cols=p),
        K=mk("K", Kind.MATRIX, rows=p, cols=n),
        x=mk("x", Kind.VECTOR, rows=n),
        y=mk("y", Kind.VECTOR, rows=n),
        alpha=mk("alpha", Kind.SCALAR),
    )
    return Context(env), env, o


def _kernels(rhs, ctx):
    return [m.kernel for m in match_kernel(rhs, ctx)]


def test_gemv_matches_matrix_vector():
    ctx, env, o = _ops()
    assert "gemv" in _kernels(times(o["A"], o["x"]), ctx)
    assert "gemv" in _kernels(times(transpose(o["X"]), o["x"]), ctx)
    # triangular operators still map to the generic kernel
    assert "gemv" in _kernels(times(o["L"], o["x"]), ctx)


def test_trsv_matches_triangular_solve():
    ctx, env, o = _ops()
    assert _kernels(times(inverse(o["L"]), o["x"]), ctx) == ["trsv"]
    assert _kernels(times(inverse(transpose(o["L"])), o["x"]), ctx) == ["trsv"]
    # a general inverse is not a kernel; it must be factored first
    assert _kernels(times(inverse(o["A"]), o["x"]), ctx) == []


def test_dot_and_scalar_mult():
    ctx, env, o = _ops()
    assert _kernels(times(transpose(o["x"]), o["y"]), ctx) == ["dot"]
    assert _kernels(times(o["alpha"], o["alpha"]), ctx) == ["sc-mult"]


def test_axpy_matches_scaled_vector_sum():
    ctx, env, o = _ops()
    e = plus(times(o["alpha"], o["x"]), o["y"])
    assert "axpy" in _kernels(e, ctx)


def test_gemm_and_trmm():
    ctx, env, o = _ops()
    ks = _kernels(times(o["A"], o["B"]), ctx)
    assert ks == ["gemm"]
    ks2 = _kernels(times(o["L"], o["B"]), ctx)
    assert "gemm" in ks2 and "trmm" in ks2
    assert annotate(times(o["L"], o["B"]), ctx) == "trmm"


def test_gemm_accumulate_form():
    ctx, env, o = _ops()
    e = plus(o["B"], negate(times(o["A"], o["B"])))
    # B appears on both sides of the accumulation; still a single gemm
    ks = _kernels(e, ctx)
    assert "gemm" in ks


def test_syrk_and_gram_products():
    ctx, env, o = _ops()
    gram = times(transpose(o["X"]), o["X"])
    ks = _kernels(gram, ctx)
    assert "syrk" in ks and "gemm" in ks
    assert annotate(gram, ctx) == "syrk"
    outer = times(o["X"], transpose(o["X"]))
    assert "syrk" in _kernels(outer, ctx)
    # different operands do not make a rank-k update
    assert "syrk" not in _kernels(times(transpose(o["A"]), o["B"]), ctx)


def test_syr2k_matches_symmetric_pair():
    ctx, env, o = _ops()
    e = plus(times(o["A"], transpose(o["B"])), times(o["B"], transpose(o["A"])))
    assert _kernels(e, ctx) == ["syr2k"]
    assert annotate(e, ctx) == "syr2k"
    e3 = plus(o["B"], negate(times(o["A"], transpose(o["B"]))),
              negate(times(o["B"], transpose(o["A"]))))
    assert "syr2k" in _kernels(e3, ctx)


def test_trsm_both_sides():
    ctx, env, o = _ops()
    assert "trsm" in _kernels(times(inverse(o["L"]), o["B"]), ctx)
    assert "trsm" in _kernels(times(o["B"], inverse(transpose(o["L"]))), ctx)


def test_scal_matches_diagonal_scaling():
    ctx, env, o = _ops()
    e = times(o["K"], inverse(o["D"]))
    ks = _kernels(e, ctx)
    assert "scal" in ks
    assert annotate(e, ctx) == "scal"
    assert "scal" in _kernels(times(o["D"], o["K"]), ctx)
    assert "scal" in _kernels(times(o["alpha"], o["B"]), ctx)


def test_sc_add_matches_scalar_coefficient_sums():
    ctx, env, o = _ops()
    h = o["alpha"]
    e = plus(times(h, o["A"]), times(plus(Const(1), negate(h)), identity_leaf()))
    assert _kernels(e, ctx) == ["sc-add"]
    e2 = plus(times(h, o["A"]), identity_leaf(), negate(times(h, identity_leaf())))
    assert _kernels(e2, ctx) == ["sc-add"]
    assert "sc-add" in _kernels(plus(o["A"], o["B"]), ctx)


def test_ger_outer_product():
    ctx, env, o = _ops()
    e = times(o["x"], transpose(o["y"]))
    assert _kernels(e, ctx) == ["ger"]
    acc = plus(o["A"], times(o["x"], transpose(o["y"])))
    assert "ger" in _kernels(acc, ctx)


def test_inv_tri_is_last_resort_class():
    ctx, env, o = _ops()
    ms = match_kernel(inverse(o["L"]), ctx)
    assert [m.kernel for m in ms] == ["inv-tri"]
    assert ms[0].klass == 5
    assert match_kernel(inverse(o["A"]), ctx) == []


def test_match_costs_are_symbolic():
    ctx, env, o = _ops()
    m = match_kernel(times(transpose(o["X"]), o["x"]), ctx)
    gemv = next(x for x in m if x.kernel == "gemv")
    assert gemv.cost == CostPoly({("n", "p"): Fraction(2)})
    s = match_kernel(times(transpose(o["X"]), o["X"]), ctx)
    syrk = next(x for x in s if x.kernel == "syrk")
    assert syrk.cost == CostPoly({("n", "p", "p"): Fraction(1)})
    gemm = next(x for x in s if x.kernel == "gemm")
    assert gemm.cost == CostPoly({("n", "p", "p"): Fraction(2)})


def test_matches_sorted_by_class():
    ctx, env, o = _ops()
    ms = match_kernel(times(o["L"], o["x"]), ctx)
    assert [m.klass for m in ms] == sorted(m.klass for m in ms)


def test_statement_cost_for_factorizations():
    ctx, env, o = _ops()
    S = Leaf(make_operand(env, "S", Kind.MATRIX, IO.INTERMEDIATE,
                          (Property.SPD,), rows=o["A"].op.rows,
                          cols=o["A"].op.rows))
    L2 = Leaf(make_operand(env, "L2", Kind.MATRIX, IO.INTERMEDIATE,
                           (Property.LOWER_TRIANGULAR,), rows=S.op.rows,
                           cols=S.op.rows))
    stmt = Statement((L2,), "potrf", S)
    assert statement_cost(stmt, ctx) == CostPoly({("n", "n", "n"): Fraction(1, 3)})


def test_factorization_selection_table():
    P = Property

    def props(*ps):
        from lakc.expr import close_properties
        return close_properties(set(ps))

    assert factorizations_for(props(P.SPD)) == ("potrf", "geqrf", "syevr")
    assert factorizations_for(props(P.SYMMETRIC)) == ("ldl", "geqrf", "syevr")
    assert factorizations_for(props(P.COLUMN_PANEL, P.FULL_RANK)) == ("geqrf",)
    assert factorizations_for(props(P.COLUMN_PANEL, P.RANK_DEFICIENT)) == ("gesvd",)
    assert factorizations_for(props(P.ROW_PANEL, P.FULL_RANK)) == ("gelqf",)
    assert factorizations_for(props(P.ROW_PANEL, P.RANK_DEFICIENT)) == ("gesvd",)
    assert factorizations_for(props(P.SQUARE, P.FULL_RANK)) == ("lu", "gesvd")


def test_apply_factorization_products():
    ctx, env, o = _ops()
    S = Leaf(make_operand(env, "S", Kind.MATRIX, IO.INTERMEDIATE,
                          (Property.SPD,), rows=o["A"].op.rows,
                          cols=o["A"].op.rows))
    names = iter(range(100))
    namer = lambda sfx: f"t{next(names)}{sfx}"

    stmt, product = apply_factorization("potrf", S, env, namer)
    assert stmt.kernel == "potrf"
    assert len(stmt.outs) == 1
    assert stmt.outs[0].op.has(Property.LOWER_TRIANGULAR)
    assert print_matches_chol(product, stmt.outs[0])

    stmt2, product2 = apply_factorization("syevr", S, env, namer)
    assert [l.op.has(Property.ORTHOGONAL) for l in stmt2.outs] == [True, False]
    assert stmt2.outs[1].op.has(Property.DIAGONAL)

    stmt3, product3 = apply_factorization("geqrf", o["X"], env, namer)
    q, r = stmt3.outs
    assert q.op.has(Property.ORTHOGONAL) and not q.op.has(Property.SQUARE)
    assert r.op.has(Property.UPPER_TRIANGULAR)
    assert env.same(r.op.rows, o["X"].op.cols)


def print_matches_chol(product, l):
    from lakc.expr import canonical_key
    return canonical_key(product) == canonical_key(times(l, transpose(l)))
