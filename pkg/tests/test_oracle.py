"""Numeric backend: factorizations, instances, interpretation, references."""

import numpy as np
import pytest

from lakc.expr import (
    IO,
    DimEnv,
    Kind,
    Leaf,
    Property,
    inverse,
    make_operand,
    plus,
    times,
    transpose,
)
from lakc.oracle import (
    Counters,
    OracleError,
    Store,
    cholesky_lower,
    eval_expr,
    exec_statement,
    flops_for,
    householder_qr,
    jacobi_eig,
    lu_nopivot,
    random_instance,
    ref_coupled_sylvester,
    ref_gchol,
    ref_sylvester,
    rel_error,
    solve_triangular,
    verify,
)


def _op(name, kind=Kind.MATRIX, *props):
    env = DimEnv()
    return make_operand(env, name, kind, IO.INPUT, props)


def test_random_instance_is_deterministic():
    op = _op("A", Kind.MATRIX, Property.SQUARE)
    a1 = random_instance(op, 6, 6, seed=3)
    a2 = random_instance(op, 6, 6, seed=3)
    assert np.array_equal(a1, a2)
    a3 = random_instance(op, 6, 6, seed=4)
    assert not np.array_equal(a1, a3)


def test_random_instance_respects_properties():
    spd = random_instance(_op("S", Kind.MATRIX, Property.SPD), 7, 7, 0)
    assert np.allclose(spd, spd.T)
    assert np.all(np.linalg.eigvalsh(spd) > 0)

    low = random_instance(_op("L", Kind.MATRIX, Property.LOWER_TRIANGULAR), 6, 6, 0)
    assert np.allclose(low, np.tril(low))
    assert np.min(np.abs(np.diag(low))) > 0.3

    unit = random_instance(
        _op("U", Kind.MATRIX, Property.LOWER_TRIANGULAR, Property.UNIT_DIAGONAL), 5, 5, 0)
    assert np.allclose(np.diag(unit), 1.0)

    q = random_instance(_op("Q", Kind.MATRIX, Property.ORTHOGONAL, Property.SQUARE), 6, 6, 0)
    assert np.allclose(q.T @ q, np.eye(6), atol=1e-12)

    d = random_instance(_op("D", Kind.MATRIX, Property.DIAGONAL), 6, 6, 0)
    assert np.allclose(d, np.diag(np.diag(d)))

    rd = random_instance(_op("R", Kind.MATRIX, Property.RANK_DEFICIENT), 6, 6, 0)
    assert np.linalg.matrix_rank(rd) < 6

    fr = random_instance(_op("F", Kind.MATRIX, Property.SQUARE, Property.FULL_RANK), 6, 6, 0)
    lu_nopivot(fr, Counters())  # must not hit a zero pivot

    v = random_instance(_op("v", Kind.VECTOR), 6, 1, 0)
    assert v.shape == (6, 1)


def test_householder_qr_reconstructs():
    rng = np.random.default_rng(5)
    a = rng.uniform(-1, 1, size=(8, 5))
    q, r = householder_qr(a, Counters())
    assert q.shape == (8, 5) and r.shape == (5, 5)
    assert np.allclose(q @ r, a, atol=1e-12)
    assert np.allclose(q.T @ q, np.eye(5), atol=1e-12)
    assert np.allclose(r, np.triu(r))
    assert np.all(np.diag(r) > 0)


def test_jacobi_eig_reconstructs_ascending():
    rng = np.random.default_rng(7)
    m = rng.uniform(-1, 1, size=(7, 7))
    a = (m + m.T) / 2
    z, lam = jacobi_eig(a, Counters())
    assert np.allclose(z @ lam @ z.T, a, atol=1e-10)
    d = np.diag(lam)
    assert np.all(np.diff(d) >= -1e-12)
    assert np.allclose(np.sort(d), np.linalg.eigvalsh(a), atol=1e-10)


def test_cholesky_matches_numpy():
    s = random_instance(_op("S", Kind.MATRIX, Property.SPD), 8, 8, 1)
    l = cholesky_lower(s, Counters())
    assert np.allclose(l, np.linalg.cholesky(s), atol=1e-10)
    with pytest.raises(OracleError):
        cholesky_lower(-s, Counters())


def test_lu_doolittle():
    a = random_instance(_op("A", Kind.MATRIX, Property.SQUARE, Property.FULL_RANK), 7, 7, 2)
    l, u = lu_nopivot(a, Counters())
    assert np.allclose(l @ u, a, atol=1e-10)
    assert np.allclose(np.diag(l), 1.0)
    assert np.allclose(u, np.triu(u))


def test_solve_triangular_variants():
    l = random_instance(_op("L", Kind.MATRIX, Property.LOWER_TRIANGULAR), 6, 6, 3)
    b = random_instance(_op("b", Kind.VECTOR), 6, 1, 3)
    x = solve_triangular(l, b, lower=True)
    assert np.allclose(l @ x, b, atol=1e-10)
    xt = solve_triangular(l, b, lower=True, trans=True)
    assert np.allclose(l.T @ xt, b, atol=1e-10)
    u = l.T.copy()
    xu = solve_triangular(u, b, lower=False)
    assert np.allclose(u @ xu, b, atol=1e-10)


def test_eval_expr_basic_algebra():
    env = DimEnv()
    n = env.fresh("n")
    A = Leaf(make_operand(env, "A", Kind.MATRIX, IO.INPUT, (Property.SQUARE,),
                          rows=n, cols=n))
    B = Leaf(make_operand(env, "B", Kind.MATRIX, IO.INPUT, (Property.SQUARE,),
                          rows=n, cols=n))
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.0, 1.0], [1.0, 0.0]])
    store = Store({"A": a, "B": b})
    got = eval_expr(times(A, B), store)
    assert np.allclose(got, a @ b)
    got = eval_expr(plus(A, transpose(B)), store)
    assert np.allclose(got, a + b.T)
    got = eval_expr(inverse(A), store)
    assert np.allclose(got, np.linalg.inv(a))


def test_eval_expr_promotes_scalar_terms_in_sums():
    env = DimEnv()
    n = env.fresh("n")
    A = Leaf(make_operand(env, "A", Kind.MATRIX, IO.INPUT, (Property.SQUARE,),
                          rows=n, cols=n))
    c = Leaf(make_operand(env, "c", Kind.SCALAR, IO.INPUT))
    store = Store({"A": np.eye(3) * 2.0, "c": np.array([[5.0]])})
    got = eval_expr(plus(A, c), store)
    assert np.allclose(got, 2.0 * np.eye(3) + 5.0 * np.eye(3))


def test_eval_expr_counts_reads():
    env = DimEnv()
    n = env.fresh("n")
    A = Leaf(make_operand(env, "A", Kind.MATRIX, IO.INPUT, (Property.SQUARE,),
                          rows=n, cols=n))
    counters = Counters()
    store = Store({"A": np.eye(4)})
    eval_expr(times(A, A), store, None, counters)
    assert counters.reads["A"] == 32
    assert counters.read_events["A"] == 2


def test_eval_expr_subscripted_operands():
    env = DimEnv()
    n = env.fresh("n")
    op = make_operand(env, "X", Kind.MATRIX, IO.INPUT, (Property.SQUARE,),
                      rows=n, cols=n)
    X = Leaf(op, sub=("i",))
    store = Store({Store.key("X", (0,)): np.eye(2), Store.key("X", (1,)): 2 * np.eye(2)})
    got = eval_expr(X, store, {"i": 1})
    assert np.allclose(got, 2 * np.eye(2))
    with pytest.raises(OracleError):
        eval_expr(X, store, {})


def test_hatted_leaf_reads_initial_contents():
    env = DimEnv()
    n = env.fresh("n")
    op = make_operand(env, "B", Kind.MATRIX, IO.INOUT, (Property.SQUARE,),
                      rows=n, cols=n)
    store = Store({"B": np.eye(3)})
    store.freeze_initial()
    store.set("B", np.zeros((3, 3)))
    fresh = Leaf(op)
    hat = Leaf(op.hat())
    assert np.allclose(eval_expr(fresh, store), 0.0)
    assert np.allclose(eval_expr(hat, store), np.eye(3))


def test_flops_for_matches_kernel_conventions():
    assert flops_for("gemm", [(4, 5)], [(4, 7), (7, 5)]) == 2 * 4 * 5 * 7
    assert flops_for("gemv", [(4, 1)], [(4, 7), (7, 1)]) == 2 * 4 * 7
    assert flops_for("trsv", [(6, 1)], [(6, 6), (6, 1)]) == 36
    assert flops_for("trsm", [(6, 3)], [(6, 6), (6, 3)]) == 6 * 6 * 3
    assert flops_for("syrk", [(5, 5)], [(5, 9)]) == 5 * 5 * 9
    assert flops_for("potrf", [(6, 6)], [(6, 6)]) == 72.0
    assert flops_for("syevr", [(4, 4)], [(4, 4)]) == 9 * 64


def test_exec_statement_runs_factorizations():
    env = DimEnv()
    n = env.fresh("n")
    S = make_operand(env, "S", Kind.MATRIX, IO.INPUT, (Property.SPD,), rows=n, cols=n)
    L = make_operand(env, "L", Kind.MATRIX, IO.INTERMEDIATE,
                     (Property.LOWER_TRIANGULAR,), rows=n, cols=n)

    class Stmt:
        def __init__(self, outs, kernel, rhs):
            self.outs, self.kernel, self.rhs = outs, kernel, rhs

    s_val = random_instance(S, 5, 5, 0)
    store = Store({"S": s_val})
    counters = Counters()
    exec_statement(Stmt((Leaf(L),), "potrf", Leaf(S)), store, {}, counters)
    got = store.get("L")
    assert np.allclose(got @ got.T, s_val, atol=1e-10)
    assert counters.flops > 0


def test_ref_sylvester_residual():
    rng = np.random.default_rng(11)
    a = rng.uniform(-1, 1, (4, 4)) + 4 * np.eye(4)
    b = rng.uniform(-1, 1, (3, 3)) + 3 * np.eye(3)
    c = rng.uniform(-1, 1, (4, 3))
    x = ref_sylvester(a, b, c)
    assert np.allclose(a @ x + x @ b, c, atol=1e-10)


def test_ref_coupled_sylvester_residual():
    rng = np.random.default_rng(13)
    n, m = 3, 4
    a = np.tril(rng.uniform(-1, 1, (n, n))) + 3 * np.eye(n)
    d = np.tril(rng.uniform(-1, 1, (n, n))) - 3 * np.eye(n)
    b = np.triu(rng.uniform(-1, 1, (m, m))) + 3 * np.eye(m)
    e = np.triu(rng.uniform(-1, 1, (m, m))) + 1 * np.eye(m)
    c = rng.uniform(-1, 1, (n, m))
    f = rng.uniform(-1, 1, (n, m))
    x, y = ref_coupled_sylvester(a, b, c, d, e, f)
    assert np.allclose(a @ x + y @ b, c, atol=1e-9)
    assert np.allclose(d @ x + y @ e, f, atol=1e-9)


def test_ref_gchol_residual():
    env = DimEnv()
    L = _op("L", Kind.MATRIX, Property.LOWER_TRIANGULAR)
    l = random_instance(L, 5, 5, 17)
    rng = np.random.default_rng(17)
    m = rng.uniform(-1, 1, (5, 5))
    b = m + m.T
    g = ref_gchol(l, b)
    assert np.allclose(g, np.tril(g))
    assert np.allclose(g @ l.T + l @ g.T, b, atol=1e-9)


def test_verify_harness_pass_and_fail():
    def run_ok(seed):
        return {"x": np.full((3, 1), float(seed))}

    def run_bad(seed):
        return {"x": np.full((3, 1), float(seed) + 1e-3)}

    rep = verify(run_ok, run_ok, trials=4, tol=1e-9, seed=2)
    assert rep.passed and rep.trials == 4
    rep2 = verify(run_bad, run_ok, trials=4, tol=1e-9, seed=2)
    assert not rep2.passed
    assert rep2.max_error > 1e-9


def test_rel_error_normalizes():
    assert rel_error(np.ones((2, 2)), np.ones((2, 2))) == 0.0
    assert rel_error(np.zeros((2, 2)), np.ones((2, 2))) == pytest.approx(1.0)
