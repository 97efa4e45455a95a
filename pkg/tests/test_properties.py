"""Property inference over expressions."""

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
    negate,
    plus,
    times,
    transpose,
)
from lakc.properties import (
    Context,
    infer,
    is_diagonal,
    is_orthogonal,
    is_spd,
    is_symmetric,
    is_triangular,
)


def _ctx():
    env = DimEnv()
    n = env.fresh("n")
    ops = {}
    mk = lambda name, *props, **kw: Leaf(make_operand(env, name, Kind.MATRIX,
                                                      IO.INPUT, props, **kw))
    ops["A"] = mk("A", Property.SQUARE, rows=n, cols=n)
    ops["S"] = mk("S", Property.SPD, rows=n, cols=n)
    ops["L"] = mk("L", Property.LOWER_TRIANGULAR, Property.FULL_RANK, rows=n, cols=n)
    ops["U"] = mk("U", Property.UPPER_TRIANGULAR, Property.FULL_RANK, rows=n, cols=n)
    ops["D"] = mk("D", Property.DIAGONAL, rows=n, cols=n)
    ops["Q"] = mk("Q", Property.ORTHOGONAL, Property.SQUARE, rows=n, cols=n)
    ops["X"] = mk("X", Property.COLUMN_PANEL, Property.FULL_RANK)
    ops["v"] = Leaf(make_operand(env, "v", Kind.VECTOR, IO.INPUT, (), rows=n))
    ops["c"] = Leaf(make_operand(env, "c", Kind.SCALAR, IO.INPUT))
    return Context(env), ops


def test_leaf_properties_pass_through():
    ctx, op = _ctx()
    assert is_spd(op["S"], ctx)
    assert is_triangular(op["L"], ctx)
    assert is_orthogonal(op["Q"], ctx)


def test_transpose_swaps_triangles():
    ctx, op = _ctx()
    assert Property.UPPER_TRIANGULAR in infer(transpose(op["L"]), ctx)
    assert Property.LOWER_TRIANGULAR in infer(transpose(op["U"]), ctx)
    assert is_spd(transpose(op["S"]), ctx)


def test_inverse_keeps_structure():
    ctx, op = _ctx()
    assert Property.LOWER_TRIANGULAR in infer(inverse(op["L"]), ctx)
    assert is_spd(inverse(op["S"]), ctx)
    assert is_diagonal(inverse(op["D"]), ctx)
    assert is_orthogonal(inverse(op["Q"]), ctx)


def test_negate_drops_spd_keeps_symmetry():
    ctx, op = _ctx()
    ps = infer(negate(op["S"]), ctx)
    assert Property.SYMMETRIC in ps
    assert Property.SPD not in ps


def test_product_of_lower_triangulars_is_lower():
    ctx, op = _ctx()
    e = times(op["L"], op["L"])
    assert Property.LOWER_TRIANGULAR in infer(e, ctx)
    mixed = times(op["L"], op["U"])
    assert not is_triangular(mixed, ctx)


def test_orthogonal_product_and_identity():
    ctx, op = _ctx()
    assert is_orthogonal(times(op["Q"], op["Q"]), ctx)
    assert Property.IDENTITY in infer(times(op["Q"], transpose(op["Q"])), ctx) or \
        is_orthogonal(times(op["Q"], transpose(op["Q"])), ctx)
    assert is_symmetric(times(identity_leaf(), op["S"], identity_leaf()), ctx)


def test_congruence_preserves_symmetry_and_spd():
    ctx, op = _ctx()
    sym = times(transpose(op["X"]), op["S"], op["X"])
    ps = infer(sym, ctx)
    assert Property.SYMMETRIC in ps
    # X has full column rank, so the sandwich stays definite the other way round
    spd = times(transpose(op["X"]), op["S"], op["X"])
    assert Property.SYMMETRIC in infer(spd, ctx)
    full_row = times(op["Q"], op["S"], transpose(op["Q"]))
    assert is_spd(full_row, ctx)


def test_gram_product_is_symmetric():
    ctx, op = _ctx()
    gram = times(transpose(op["X"]), op["X"])
    assert is_symmetric(gram, ctx)


def test_scalar_coefficient_keeps_zone():
    ctx, op = _ctx()
    e = times(op["c"], op["L"])
    assert Property.LOWER_TRIANGULAR in infer(e, ctx)
    # a symbolic scalar may be negative, so definiteness does not survive
    assert not is_spd(times(op["c"], op["S"]), ctx)
    # a positive literal does keep it
    assert is_spd(times(Const(2), op["S"]), ctx)


def test_sum_symmetry_by_pairing():
    ctx, op = _ctx()
    A = op["A"]
    e = plus(times(A, transpose(A)), op["S"])
    assert is_symmetric(e, ctx)
    e2 = plus(A, transpose(A))
    assert is_symmetric(e2, ctx)
    assert not is_symmetric(plus(A, op["S"]), ctx)


def test_sum_of_spd_is_spd():
    ctx, op = _ctx()
    assert is_spd(plus(op["S"], op["S"]), ctx)
    assert is_spd(plus(op["S"], identity_leaf()), ctx)


def test_sum_zone_join():
    ctx, op = _ctx()
    assert Property.LOWER_TRIANGULAR in infer(plus(op["L"], op["D"]), ctx)
    assert not is_triangular(plus(op["L"], op["U"]), ctx)


def test_panel_propagates_through_product():
    ctx, op = _ctx()
    e = times(op["A"], op["X"])
    ps = infer(e, ctx)
    assert Property.COLUMN_PANEL in ps


def test_registered_fact_overrides():
    ctx, op = _ctx()
    A = op["A"]
    gram = times(transpose(A), A)
    assert not is_spd(gram, ctx)
    ctx.register_fact(gram, frozenset({Property.SPD}))
    assert is_spd(gram, ctx)
    # the fact applies wherever the expression occurs
    assert is_spd(inverse(gram), ctx)
