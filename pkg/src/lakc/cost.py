"""Symbolic operation counts.

Costs are sparse polynomials over dimension labels with exact rational
coefficients.  The per-kernel formulas here mirror the counters in the
numeric backend one-to-one, which the tests exploit: evaluating a symbolic
cost at concrete sizes must equal the backend's flop count.
"""
from __future__ import annotations

from fractions import Fraction
from typing import Iterable, Optional

from .expr import Dim, DimEnv

Monomial = tuple[str, ...]  # variable labels, sorted, with multiplicity


class CostPoly:
    """Polynomial with Fraction coefficients over named dimensions."""

    __slots__ = ("terms",)

    def __init__(self, terms: Optional[dict[Monomial, Fraction]] = None) -> None:
        self.terms: dict[Monomial, Fraction] = {
            m: Fraction(c) for m, c in (terms or {}).items() if c != 0}

    @classmethod
    def zero(cls) -> "CostPoly":
        return cls()

    @classmethod
    def const(cls, c) -> "CostPoly":
        return cls({(): Fraction(c)})

    @classmethod
    def var(cls, name: str) -> "CostPoly":
        return cls({(name,): Fraction(1)})

    def __add__(self, other: "CostPoly") -> "CostPoly":
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, Fraction(0)) + c
        return CostPoly(out)

    def __mul__(self, other: "CostPoly") -> "CostPoly":
        out: dict[Monomial, Fraction] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = tuple(sorted(m1 + m2))
                out[m] = out.get(m, Fraction(0)) + c1 * c2
        return CostPoly(out)

    def scale(self, c) -> "CostPoly":
        return CostPoly({m: co * Fraction(c) for m, co in self.terms.items()})

    def evaluate(self, values: dict[str, float]) -> float:
        total = 0.0
        for m, c in self.terms.items():
            v = float(c)
            for name in m:
                v *= values[name]
            total += v
        return total

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CostPoly) and self.terms == other.terms

    def __hash__(self) -> int:
        return hash(frozenset(self.terms.items()))

    def __bool__(self) -> bool:
        return bool(self.terms)

    def __repr__(self) -> str:
        return f"CostPoly({format_poly(self)!r})"


def _exp_map(m: Monomial) -> dict[str, int]:
    out: dict[str, int] = {}
    for v in m:
        out[v] = out.get(v, 0) + 1
    return out


def _sort_key(m: Monomial, order: tuple[str, ...]) -> tuple:
    e = _exp_map(m)
    known = tuple(e.get(v, 0) for v in order)
    rest = tuple(sorted((v, k) for v, k in e.items() if v not in order))
    # labels outside the regime list still rank by growth before spelling
    rest_degree = sum(k for _, k in rest)
    return known + (rest_degree, rest)


def format_poly(poly: CostPoly, order: tuple[str, ...] = ()) -> str:
    """Deterministic plain-text form, largest monomial first."""
    if not poly.terms:
        return "0"
    names = order or tuple(sorted({v for m in poly.terms for v in m}))
    items = sorted(poly.terms.items(), key=lambda kv: _sort_key(kv[0], names),
                   reverse=True)
    out = ""
    for m, c in items:
        e = _exp_map(m)
        factors = [v if k == 1 else f"{v}^{k}" for v, k in sorted(e.items())]
        mag = abs(c)
        words = ([str(mag)] if (mag != 1 or not factors) else []) + factors
        body = " ".join(words)
        if not out:
            out = ("-" if c < 0 else "") + body
        else:
            out += (" - " if c < 0 else " + ") + body
    return out


# ---------------------------------------------------------------------------
# Asymptotic dominance

# regime: grid trip counts grow independently of each other and of the
# operand sizes; among operand sizes the later names are lower order
# (a GWAS-style problem has p far below n)
GRID_VARS: tuple[str, ...] = ("m", "t")
SIZE_ORDER: tuple[str, ...] = ("n", "p")


def _classify(m: Monomial, grid: tuple[str, ...], sizes: tuple[str, ...]):
    e = _exp_map(m)
    grid_exp = tuple(e.get(v, 0) for v in grid)
    size_exp = tuple(e.get(v, 0) for v in sizes)
    other = tuple(sorted((v, k) for v, k in e.items()
                         if v not in grid and v not in sizes))
    return grid_exp, size_exp, other


def _dominates(a: Monomial, b: Monomial, grid: tuple[str, ...],
               sizes: tuple[str, ...]) -> bool:
    """True when monomial b grows at least as fast as a on every admissible
    path, so a can be dropped from a leading-term set containing b.

    Grid trip counts are independent, so they compare componentwise.  At
    equal grid exponents, size variables are ordered big to small (each
    later one is lower order, down to possibly constant), which makes
    dominance a prefix-sum condition: writing p = n^theta with theta in
    [0, 1), the degree a1 + theta*a2 must stay at or below b1 + theta*b2
    for every theta, i.e. at both endpoints.  Across grid levels, strictly
    more loop multiplicity absorbs any strictly smaller total size-degree:
    each grid axis sweeps a problem axis of commensurate extent.
    """
    if a == b:
        return False
    ga, sa, oa = _classify(a, grid, sizes)
    gb, sb, ob = _classify(b, grid, sizes)
    if oa != ob:
        return False
    if any(x > y for x, y in zip(ga, gb)):
        return False
    run_a = run_b = 0
    prefix_ok = True
    for xa, xb in zip(sa, sb):
        run_a += xa
        run_b += xb
        if run_a > run_b:
            prefix_ok = False
    if prefix_ok:
        return True
    return any(x < y for x, y in zip(ga, gb)) and sum(sa) < sum(sb)


def leading_terms(poly: CostPoly, grid: tuple[str, ...] = GRID_VARS,
                  sizes: tuple[str, ...] = SIZE_ORDER) -> CostPoly:
    """Keep only monomials not dominated by another monomial of the poly."""
    monos = list(poly.terms)
    kept = {m: c for m, c in poly.terms.items()
            if not any(_dominates(m, other, grid, sizes) for other in monos)}
    return CostPoly(kept)


def compare_leading(a: CostPoly, b: CostPoly,
                    order: tuple[str, ...] = SIZE_ORDER + GRID_VARS) -> int:
    """Rank two costs by their sorted monomials (regime order), then
    coefficients; -1 when a is cheaper."""

    def profile(p: CostPoly):
        return sorted(((_sort_key(m, order), c) for m, c in p.terms.items()),
                      reverse=True)

    pa, pb = profile(a), profile(b)
    for (ka, ca), (kb, cb) in zip(pa, pb):
        if ka != kb:
            return -1 if ka < kb else 1
        if ca != cb:
            return -1 if ca < cb else 1
    if len(pa) != len(pb):
        return -1 if len(pa) < len(pb) else 1
    return 0


# ---------------------------------------------------------------------------
# Kernel costs


def dim_label(env: DimEnv, d: Optional[Dim]) -> str:
    if d is None:
        raise ValueError("cannot cost an unbound dimension")
    return env.find(d).label


def _v(label: str) -> CostPoly:
    return CostPoly.const(1) if label == "1" else CostPoly.var(label)


def kernel_cost(kernel: str, out_shapes: list[tuple[str, str]],
                in_shapes: list[tuple[str, str]]) -> CostPoly:
    """Symbolic twin of the backend flop counter; shapes are label pairs."""

    def rc(shapes: list[tuple[str, str]], i: int) -> tuple[str, str]:
        return shapes[i] if i < len(shapes) else ("1", "1")

    r, c = rc(out_shapes, 0)

    def inner(i: int) -> str:
        s = rc(in_shapes, i)
        return s[1] if s[0] == r else s[0]

    two = CostPoly.const(2)
    if kernel == "gemm":
        k = inner(0) if in_shapes else r
        return two * _v(r) * _v(c) * _v(k)
    if kernel in ("gemv", "ger"):
        m, n = rc(in_shapes, 0)
        return two * _v(m) * _v(n)
    if kernel in ("dot", "axpy"):
        m, n = rc(in_shapes, 0)
        length = n if m == "1" else m
        return two * _v(length)
    if kernel == "scal":
        return _v(r) * _v(c)
    if kernel == "sc-mult":
        return CostPoly.const(1)
    if kernel == "trsv":
        n = rc(in_shapes, 0)[0]
        return _v(n) * _v(n)
    if kernel in ("trsm", "trmm"):
        n = rc(in_shapes, 0)[0]
        return _v(n) * _v(r) * _v(c)
    if kernel == "syrk":
        return _v(r) * _v(r) * _v(inner(0))
    if kernel == "syr2k":
        k = rc(in_shapes, 0)[1]
        return two * _v(r) * _v(r) * _v(k)
    if kernel == "potrf":
        return (_v(r) * _v(r) * _v(r)).scale(Fraction(1, 3))
    if kernel == "geqrf":
        m, n = rc(in_shapes, 0)
        n3 = _v(n) * _v(n) * _v(n)
        return two * _v(m) * _v(n) * _v(n) + n3.scale(Fraction(-2, 3))
    if kernel == "syevr":
        return (_v(r) * _v(r) * _v(r)).scale(9)
    if kernel == "sc-add":
        return two * _v(r) * _v(c)
    if kernel == "inv-tri":
        return (_v(r) * _v(r) * _v(r)).scale(Fraction(1, 3))
    if kernel in ("lu", "getrf", "ldl"):
        return (_v(r) * _v(r) * _v(r)).scale(Fraction(2, 3))
    if kernel == "gelqf":
        m, n = rc(in_shapes, 0)
        m3 = _v(m) * _v(m) * _v(m)
        return two * _v(n) * _v(m) * _v(m) + m3.scale(Fraction(-2, 3))
    if kernel == "gesvd":
        m, n = rc(in_shapes, 0)
        return (_v(m) * _v(n) * _v(n)).scale(14)
    return _v(r) * _v(c)


def loop_cost(body: CostPoly, trip: str) -> CostPoly:
    return body * _v(trip)
