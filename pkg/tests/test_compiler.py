"""Two-phase compilation: inverse treatment, kernel mapping, family ranking."""

import os

import pytest

from lakc.check import verify_algorithm
from lakc.compiler import (
    CompileOptions,
    SearchBudgetExceeded,
    compile_model,
    isolate_output,
    solved_equations,
    variant_key,
)
from lakc.expr import Equation, Inverse, Leaf, Property, print_expr, walk
from lakc.parser import load_model, parse_model
from lakc.properties import Context, infer

QR_GWAS = ("sc-add", "potrf", "trsm", "geqrf", "trsv", "gemv", "trsv")
CHOL_GWAS = ("sc-add", "potrf", "trsm", "syrk", "potrf", "trsv", "gemv", "trsv", "trsv")
EIG_GWAS = ("syevr", "sc-add", "gemm", "scal", "gemm",
            "geqrf", "gemv", "gemv", "gemv", "trsv")


def _compile(path, **kw):
    model, diags = load_model(path)
    assert not diags
    return model, compile_model(model, CompileOptions(**kw) if kw else None)


def _compile_text(text, **kw):
    model = parse_model(text)
    assert not model.parse_diagnostics
    return model, compile_model(model, CompileOptions(**kw) if kw else None)


# ---------------------------------------------------------------------------
# Output isolation and equation ordering


def test_isolate_implicit_product():
    model = parse_model("""
        Equation Solve
            Matrix A <Input, SPD>;
            Matrix B <Input>;
            Matrix X <Output>;
            A * X = B;
    """)
    eq = model.equations[0]
    iso = isolate_output(Equation(eq.lhs, eq.rhs), "X")
    assert isinstance(iso.lhs, Leaf) and iso.lhs.op.name == "X"
    assert "inv(A) * B" in print_expr(iso.rhs)


def test_solved_equations_put_definitions_first():
    model, _ = _compile("models/gwas.ck", max_variants=1)
    eqs = solved_equations(model)
    assert [e.lhs.op.name for e in eqs] == ["M", "b"]


# ---------------------------------------------------------------------------
# Reference families


def test_qly_top_variant_is_two_gemvs():
    _, res = _compile("models/qly.ck")
    top = res.variants[0]
    assert top.kernels == ("gemv", "gemv")
    assert len(top.statements) == 2
    # leading cost term is quadratic
    degs = {len(m) for m in top.cost.terms}
    assert max(degs) == 2


def test_qly_gemm_first_variant_exists_but_ranks_lower():
    _, res = _compile("models/qly.ck")
    kernel_sets = [v.kernels for v in res.variants]
    assert ("gemm", "gemv") in kernel_sets
    assert kernel_sets.index(("gemm", "gemv")) > 0


def test_xtyxty_minimum_statement_count_is_two():
    _, res = _compile("models/xtyxty.ck")
    assert min(len(v.statements) for v in res.variants) == 2
    assert res.variants[0].kernels == ("dot", "sc-mult")


def test_vllu_never_inverts_a_triangular():
    _, res = _compile("models/vllu.ck")
    assert res.variants
    for v in res.variants:
        assert "inv-tri" not in v.kernels
        assert v.kernels.count("trsv") == 2
        assert v.kernels.count("dot") == 1


def test_spd_vector_solve_has_three_factorization_routes():
    _, res = _compile_text("""
        Equation SpdVec
            Matrix A <Input, SPD>;
            Vector b <Input>;
            Vector x <Output>;
            x = inv(A) * b;
    """)
    firsts = {v.statements[0].kernel for v in res.variants}
    assert {"potrf", "geqrf", "syevr"} <= firsts
    assert ("potrf", "trsv", "trsv") in [v.kernels for v in res.variants]


def test_ols_contains_normal_equations_cholesky_variant():
    _, res = _compile("models/ols.ck")
    assert ("syrk", "potrf", "gemv", "trsv", "trsv") in [v.kernels for v in res.variants]
    # QR route ranks first: the gram matrix route costs an extra np^2
    assert res.variants[0].kernels == ("geqrf", "gemv", "trsv")


# ---------------------------------------------------------------------------
# GWAS family


@pytest.fixture(scope="module")
def gwas():
    model, diags = load_model("models/gwas.ck")
    assert not diags
    return model, compile_model(model, CompileOptions(max_variants=512))


def test_gwas_family_contains_qr_listing(gwas):
    _, res = gwas
    assert res.variants[0].kernels == QR_GWAS


def test_gwas_family_contains_chol_listing(gwas):
    _, res = gwas
    assert CHOL_GWAS in [v.kernels for v in res.variants]


def test_gwas_family_contains_eig_listing(gwas):
    _, res = gwas
    assert EIG_GWAS in [v.kernels for v in res.variants]


def test_gwas_search_stays_under_node_cap(gwas):
    _, res = gwas
    assert res.nodes_used < 10_000


def test_gwas_statements_are_executable_in_order(gwas):
    model, res = gwas
    inputs = {n for n, op in model.operands.items() if op.io.name in ("INPUT", "INOUT")}
    inputs.add("I")
    for v in res.variants:
        defined = set(inputs)
        for s in v.statements:
            for node in walk(s.rhs):
                if isinstance(node, Leaf):
                    assert node.op.name in defined, f"{v.name}: {node.op.name} used before defined"
            defined |= {o.op.name for o in s.outs}


def test_gwas_no_variant_inverts_a_full_matrix(gwas):
    model, res = gwas
    ctx = Context(model.env)
    tri = {Property.LOWER_TRIANGULAR, Property.UPPER_TRIANGULAR, Property.DIAGONAL}
    for v in res.variants:
        for s in v.statements:
            for node in walk(s.rhs):
                if isinstance(node, Inverse):
                    assert tri & infer(node.arg, ctx), f"{v.name}: {s.render()}"


def test_gwas_eig_listing_verifies_numerically(gwas):
    model, res = gwas
    v = res.by_kernels(EIG_GWAS)
    rep = verify_algorithm(model, v.statements, trials=3, tol=1e-7)
    assert rep.passed, rep.errors


def test_gwas_compile_is_deterministic():
    model, diags = load_model("models/gwas.ck")
    a = compile_model(model, CompileOptions(max_variants=64))
    model2, _ = load_model("models/gwas.ck")
    b = compile_model(model2, CompileOptions(max_variants=64))
    assert [v.render() for v in a.variants] == [v.render() for v in b.variants]
    assert [str(v.cost.terms) for v in a.variants] == [str(v.cost.terms) for v in b.variants]


# ---------------------------------------------------------------------------
# Dedup, ranking, budget


def test_variant_key_ignores_emission_order_of_independent_statements():
    _, res = _compile("models/vllu.ck")
    # the u-solve/v-solve pair commutes; only one ordering survives dedup
    assert len(res.variants) == 3


def test_families_verify_numerically():
    for path in ["models/qly.ck", "models/vllu.ck", "models/spdsolve.ck"]:
        model, res = _compile(path)
        for v in res.variants:
            rep = verify_algorithm(model, v.statements, trials=2, tol=1e-9)
            assert rep.passed, (path, v.name, rep.errors)


def test_node_budget_env_override(monkeypatch):
    monkeypatch.setenv("LAKC_MAX_NODES", "3")
    model, _ = load_model("models/gwas.ck")
    with pytest.raises(SearchBudgetExceeded):
        compile_model(model)


def test_max_variants_caps_family():
    _, res = _compile("models/gwas.ck", max_variants=5)
    assert len(res.variants) == 5
    assert [v.name for v in res.variants] == ["v001", "v002", "v003", "v004", "v005"]
