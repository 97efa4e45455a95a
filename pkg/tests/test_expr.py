"""Expression IR: smart constructors, canonical keys, printing."""

from fractions import Fraction

import pytest

from lakc.expr import (
    IO,
    Const,
    DimEnv,
    DimensionError,
    Inverse,
    Kind,
    Leaf,
    Negate,
    Plus,
    Property,
    PropertyError,
    Times,
    Transpose,
    canonical_key,
    close_properties,
    dims_of,
    identity_leaf,
    inverse,
    make_operand,
    minus,
    negate,
    node_count,
    plus,
    print_expr,
    times,
    transpose,
    transpose_normal,
    zero_leaf,
)


def _env():
    env = DimEnv()
    n = env.fresh("n")
    m = env.fresh("m")
    A = Leaf(make_operand(env, "A", Kind.MATRIX, IO.INPUT, (Property.SQUARE,),
                          rows=n, cols=n))
    B = Leaf(make_operand(env, "B", Kind.MATRIX, IO.INPUT, (Property.SQUARE,),
                          rows=n, cols=n))
    X = Leaf(make_operand(env, "X", Kind.MATRIX, IO.INPUT, (), rows=m, cols=n))
    a = Leaf(make_operand(env, "alpha", Kind.SCALAR, IO.INPUT))
    return env, A, B, X, a


def test_plus_flattens_and_drops_zero():
    env, A, B, X, a = _env()
    e = plus(plus(A, B), zero_leaf(), A)
    assert isinstance(e, Plus)
    assert len(e.args) == 3
    assert all(not isinstance(t, Plus) for t in e.args)


def test_plus_folds_constants():
    e = plus(Const(2), Const(3))
    assert e == Const(5)
    assert plus(Const(1), Const(-1)) == Const(0)


def test_times_flattens_and_short_circuits_zero():
    env, A, B, X, a = _env()
    assert times(A, zero_leaf(), B) == zero_leaf()
    e = times(times(A, B), A)
    assert isinstance(e, Times) and len(e.args) == 3


def test_times_bubbles_scalars_to_front():
    env, A, B, X, a = _env()
    e = times(A, a, B)
    assert isinstance(e, Times)
    assert e.args[0] is a


def test_times_folds_constants_and_singleton():
    env, A, B, X, a = _env()
    e = times(Const(2), Const(3), A)
    assert isinstance(e, Times) and e.args[0] == Const(6)
    assert times(Const(1), A) is A


def test_negate_collapses_double():
    env, A, B, X, a = _env()
    assert negate(negate(A)) is A
    assert negate(Const(2)) == Const(-2)


def test_transpose_collapses_double_and_scalars():
    env, A, B, X, a = _env()
    assert transpose(transpose(A)) is A
    assert transpose(a) is a
    assert transpose(Const(3)) == Const(3)
    t = transpose(X)
    assert isinstance(t, Transpose)


def test_inverse_collapses_double_and_folds_const():
    env, A, B, X, a = _env()
    assert inverse(inverse(A)) is A
    assert inverse(Const(4)) == Const(Fraction(1, 4))
    with pytest.raises(ZeroDivisionError):
        inverse(Const(0))
    assert isinstance(inverse(A), Inverse)


def test_canonical_key_distinguishes_transpose():
    env, A, B, X, a = _env()
    assert canonical_key(A) != canonical_key(transpose(X))
    assert canonical_key(times(A, B)) != canonical_key(times(B, A))
    assert canonical_key(plus(A, B)) == canonical_key(plus(B, A))


def test_node_count():
    env, A, B, X, a = _env()
    assert node_count(A) == 1
    assert node_count(times(a, A, B)) == 4
    assert node_count(inverse(plus(A, B))) == 4


def test_transpose_normal_pushes_inward():
    env, A, B, X, a = _env()
    e = transpose_normal(transpose(times(A, B)))
    assert isinstance(e, Times)
    assert [print_expr(f) for f in e.args] == ["trans(B)", "trans(A)"]
    e2 = transpose_normal(transpose(plus(A, B)))
    assert isinstance(e2, Plus)


def test_minus_builds_negated_term():
    env, A, B, X, a = _env()
    e = minus(A, B)
    assert isinstance(e, Plus)
    assert any(isinstance(t, Negate) for t in e.args)


def test_print_expr_parens_and_minus():
    env, A, B, X, a = _env()
    assert print_expr(plus(A, negate(B))) == "A - B"
    assert print_expr(times(plus(A, B), A)) == "(A + B) * A"
    assert print_expr(times(a, A)) == "alpha * A"
    assert print_expr(inverse(transpose(A))) == "inv(trans(A))"


def test_property_closure_implications():
    props = close_properties({Property.SPD})
    assert Property.SYMMETRIC in props
    assert Property.SQUARE in props
    props = close_properties({Property.IDENTITY})
    assert Property.ORTHOGONAL in props and Property.SPD in props


def test_property_closure_rejects_contradiction():
    with pytest.raises(PropertyError):
        close_properties({Property.FULL_RANK, Property.RANK_DEFICIENT})
    with pytest.raises(PropertyError):
        close_properties({Property.ZERO, Property.IDENTITY})
    with pytest.raises(PropertyError):
        close_properties({Property.COLUMN_PANEL, Property.SQUARE})
    with pytest.raises(PropertyError):
        close_properties({Property.SPD, Property.RANK_DEFICIENT})


def test_both_triangles_junction_to_diagonal():
    props = close_properties({Property.LOWER_TRIANGULAR, Property.UPPER_TRIANGULAR})
    assert Property.DIAGONAL in props
    assert Property.SYMMETRIC in props


def test_make_operand_shapes():
    env = DimEnv()
    v = make_operand(env, "x", Kind.VECTOR, IO.INPUT)
    assert env.same(v.cols, env.one)
    s = make_operand(env, "c", Kind.SCALAR, IO.INPUT)
    assert env.same(s.rows, env.one) and env.same(s.cols, env.one)
    sq = make_operand(env, "A", Kind.MATRIX, IO.INPUT, (Property.SQUARE,))
    assert env.same(sq.rows, sq.cols)


def test_panel_rows_cols_stay_distinct():
    env = DimEnv()
    cp = make_operand(env, "X", Kind.MATRIX, IO.INPUT, (Property.COLUMN_PANEL,))
    with pytest.raises(DimensionError):
        env.unify(cp.rows, cp.cols)


def test_dims_of_propagates_through_product():
    env, A, B, X, a = _env()
    r, c = dims_of(times(X, A), env)
    assert env.same(r, X.op.rows)
    assert env.same(c, A.op.cols)


def test_dims_of_rejects_panel_self_product():
    # a column panel's rows and cols are declared distinct, so X * X must fail
    env = DimEnv()
    cp = make_operand(env, "X", Kind.MATRIX, IO.INPUT, (Property.COLUMN_PANEL,))
    with pytest.raises(DimensionError):
        dims_of(times(Leaf(cp), Leaf(cp)), env)


def test_dims_of_identity_adapts():
    # the identity leaf leaves its dims free; the other factor fixes the cols
    env, A, B, X, a = _env()
    r, c = dims_of(times(identity_leaf(), X), env)
    assert r is None
    assert env.same(c, X.op.cols)
