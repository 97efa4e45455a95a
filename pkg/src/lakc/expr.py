"""Algebraic IR shared by both pipelines.

Operands carry a kind, an I/O role, a closed property set and symbolic
dimensions; expressions are immutable trees over them.  Plus nodes keep their
children sorted by canonical key, Times preserves order (matrix products do
not commute), and scalar constants are exact rationals.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterator, Optional, Union


class Kind(Enum):
    SCALAR = "Scalar"
    VECTOR = "Vector"
    MATRIX = "Matrix"


class IO(Enum):
    INPUT = "Input"
    OUTPUT = "Output"
    INOUT = "InOut"
    INTERMEDIATE = "Intermediate"


class Property(Enum):
    SQUARE = "Square"
    COLUMN_PANEL = "ColumnPanel"
    ROW_PANEL = "RowPanel"
    DIAGONAL = "Diagonal"
    LOWER_TRIANGULAR = "LowerTriangular"
    UPPER_TRIANGULAR = "UpperTriangular"
    UNIT_DIAGONAL = "UnitDiagonal"
    SYMMETRIC = "Symmetric"
    SYMMETRIC_LOWER = "SymmetricLower"
    SYMMETRIC_UPPER = "SymmetricUpper"
    SPD = "SPD"
    SPD_LOWER = "SPDLower"
    SPD_UPPER = "SPDUpper"
    ORTHOGONAL = "Orthogonal"
    FULL_RANK = "FullRank"
    RANK_DEFICIENT = "RankDeficient"
    IDENTITY = "Identity"
    ZERO = "Zero"


P = Property

# Closure: each property implies the listed ones.
_IMPLIES: dict[Property, frozenset[Property]] = {
    P.SPD: frozenset({P.SYMMETRIC, P.SQUARE}),
    P.SPD_LOWER: frozenset({P.SPD}),
    P.SPD_UPPER: frozenset({P.SPD}),
    P.SYMMETRIC_LOWER: frozenset({P.SYMMETRIC}),
    P.SYMMETRIC_UPPER: frozenset({P.SYMMETRIC}),
    P.SYMMETRIC: frozenset({P.SQUARE}),
    P.DIAGONAL: frozenset({P.LOWER_TRIANGULAR, P.UPPER_TRIANGULAR, P.SYMMETRIC}),
    P.LOWER_TRIANGULAR: frozenset({P.SQUARE}),
    P.UPPER_TRIANGULAR: frozenset({P.SQUARE}),
    P.IDENTITY: frozenset({P.DIAGONAL, P.SPD, P.ORTHOGONAL, P.UNIT_DIAGONAL}),
    P.ORTHOGONAL: frozenset({P.FULL_RANK}),
}

# Closure: holding all of the key set adds the value.
_JUNCTIONS: tuple[tuple[frozenset[Property], Property], ...] = (
    (frozenset({P.LOWER_TRIANGULAR, P.UPPER_TRIANGULAR}), P.DIAGONAL),
)

_CONTRADICTIONS: tuple[frozenset[Property], ...] = tuple(
    frozenset(pair)
    for pair in [
        (P.FULL_RANK, P.RANK_DEFICIENT),
        (P.COLUMN_PANEL, P.ROW_PANEL),
        (P.COLUMN_PANEL, P.SQUARE),
        (P.ROW_PANEL, P.SQUARE),
        (P.ZERO, P.FULL_RANK),
        (P.ZERO, P.SPD),
        (P.ZERO, P.UNIT_DIAGONAL),
        (P.ZERO, P.ORTHOGONAL),
        (P.ZERO, P.IDENTITY),
        (P.SPD, P.RANK_DEFICIENT),
    ]
)


class PropertyError(ValueError):
    """Raised when a declared property set is internally inconsistent."""


def close_properties(props: frozenset[Property] | set[Property]) -> frozenset[Property]:
    out = set(props)
    changed = True
    while changed:
        changed = False
        for prop in tuple(out):
            extra = _IMPLIES.get(prop)
            if extra and not extra <= out:
                out |= extra
                changed = True
        for needed, added in _JUNCTIONS:
            if needed <= out and added not in out:
                out.add(added)
                changed = True
    for pair in _CONTRADICTIONS:
        if pair <= out:
            a, b = sorted(pr.value for pr in pair)
            raise PropertyError(f"contradictory properties: {a} conflicts with {b}")
    return frozenset(out)


# ---------------------------------------------------------------------------
# Symbolic dimensions


@dataclass(frozen=True)
class Dim:
    id: int
    label: str

    def __repr__(self) -> str:
        return f"Dim({self.label}#{self.id})"


class DimEnv:
    """Union-find over symbolic dimensions for one compilation session."""

    def __init__(self) -> None:
        self._parent: dict[int, int] = {}
        self._dims: dict[int, Dim] = {}
        self._distinct: list[tuple[Dim, Dim]] = []
        self._next = 0
        self.one = self.fresh("1")

    def fresh(self, label: str) -> Dim:
        d = Dim(self._next, label)
        self._parent[d.id] = d.id
        self._dims[d.id] = d
        self._next += 1
        return d

    def find(self, d: Dim) -> Dim:
        root = d.id
        while self._parent[root] != root:
            root = self._parent[root]
        # path compression
        cur = d.id
        while self._parent[cur] != root:
            self._parent[cur], cur = root, self._parent[cur]
        return self._dims[root]

    def assert_distinct(self, a: Dim, b: Dim) -> None:
        """Record that two dims may never unify (e.g. panel rows vs cols)."""
        self._distinct.append((a, b))
        self._check_distinct()

    def _check_distinct(self) -> None:
        for a, b in self._distinct:
            if self.find(a).id == self.find(b).id:
                raise DimensionError(
                    f"dimensions {a.label} and {b.label} are declared distinct but forced equal")

    def unify(self, a: Dim, b: Dim) -> Dim:
        ra, rb = self.find(a), self.find(b)
        if ra.id == rb.id:
            return ra
        # keep the older root so labels stay stable ("n" survives a fresh temp)
        keep, drop = (ra, rb) if ra.id < rb.id else (rb, ra)
        self._parent[drop.id] = keep.id
        self._check_distinct()
        return keep

    def same(self, a: Dim, b: Dim) -> bool:
        return self.find(a).id == self.find(b).id


class DimensionError(ValueError):
    """Incompatible dimensions during unification."""


# ---------------------------------------------------------------------------
# Operands


@dataclass(frozen=True)
class Operand:
    name: str
    kind: Kind
    io: IO
    props: frozenset[Property]
    rows: Optional[Dim]
    cols: Optional[Dim]
    subscripts: tuple[str, ...] = ()
    hatted: bool = False
    deriv_of: Optional[str] = None  # set for declared derivative operands dv(x)

    def has(self, prop: Property) -> bool:
        return prop in self.props

    def with_io(self, io: IO) -> "Operand":
        return Operand(self.name, self.kind, io, self.props, self.rows, self.cols,
                       self.subscripts, self.hatted, self.deriv_of)

    def with_props(self, props: frozenset[Property] | set[Property]) -> "Operand":
        return Operand(self.name, self.kind, self.io, close_properties(props), self.rows,
                       self.cols, self.subscripts, self.hatted, self.deriv_of)

    def hat(self) -> "Operand":
        if self.io not in (IO.INOUT, IO.OUTPUT, IO.INTERMEDIATE):
            raise ValueError(f"hatted operand {self.name} must be overwritable")
        return Operand(self.name, self.kind, self.io, self.props, self.rows, self.cols,
                       self.subscripts, True, self.deriv_of)

    def __repr__(self) -> str:
        hat = "^" if self.hatted else ""
        return f"<{self.name}{hat}>"


def make_operand(
    env: Optional[DimEnv],
    name: str,
    kind: Kind,
    io: IO,
    props: frozenset[Property] | set[Property] = frozenset(),
    rows: Optional[Dim] = None,
    cols: Optional[Dim] = None,
    subscripts: tuple[str, ...] = (),
    deriv_of: Optional[str] = None,
) -> Operand:
    closed = close_properties(props)
    if kind is Kind.SCALAR:
        rows = cols = env.one if env else None
    elif kind is Kind.VECTOR:
        if rows is None and env is not None:
            rows = env.fresh(name + "_r")
        cols = env.one if env else None
    else:
        if env is not None:
            if rows is None:
                rows = env.fresh(name + "_r")
            if cols is None:
                cols = env.fresh(name + "_c")
        if P.SQUARE in closed and env is not None and rows is not None and cols is not None:
            env.unify(rows, cols)
        # panels are strictly rectangular: the two dims may never merge
        if env is not None and rows is not None and cols is not None and (
                P.COLUMN_PANEL in closed or P.ROW_PANEL in closed):
            env.assert_distinct(rows, cols)
    return Operand(name, kind, io, closed, rows, cols, subscripts, False, deriv_of)


def identity_leaf() -> "Leaf":
    """The built-in identity matrix; dimensions stay free until unified."""
    return Leaf(Operand("I", Kind.MATRIX, IO.INPUT, close_properties({P.IDENTITY}), None, None))


def zero_leaf(kind: Kind = Kind.MATRIX) -> "Leaf":
    return Leaf(Operand("0", kind, IO.INPUT, close_properties({P.ZERO}), None, None))


# ---------------------------------------------------------------------------
# Expressions


class Expr:
    __slots__ = ()


@dataclass(frozen=True)
class Leaf(Expr):
    op: Operand
    sub: tuple[str, ...] = ()


@dataclass(frozen=True)
class Const(Expr):
    value: Fraction


@dataclass(frozen=True)
class Plus(Expr):
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class Times(Expr):
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class Negate(Expr):
    arg: Expr


@dataclass(frozen=True)
class Transpose(Expr):
    arg: Expr


@dataclass(frozen=True)
class Inverse(Expr):
    arg: Expr


@dataclass(frozen=True)
class Deriv(Expr):
    arg: Expr


@dataclass(frozen=True)
class Func(Expr):
    fname: str
    args: tuple[Expr, ...]


def is_zero(e: Expr) -> bool:
    if isinstance(e, Leaf):
        return P.ZERO in e.op.props
    if isinstance(e, Const):
        return e.value == 0
    if isinstance(e, (Negate, Transpose)):
        return is_zero(e.arg)
    return False


def is_identity(e: Expr) -> bool:
    return isinstance(e, Leaf) and P.IDENTITY in e.op.props


def is_scalar(e: Expr) -> bool:
    """Structural scalar check (no dimension environment needed)."""
    if isinstance(e, Const):
        return True
    if isinstance(e, Leaf):
        return e.op.kind is Kind.SCALAR
    if isinstance(e, (Negate, Transpose, Inverse, Deriv)):
        return is_scalar(e.arg)
    if isinstance(e, (Plus, Times)):
        return all(is_scalar(a) for a in e.args)
    return False


def plus(*args: Expr) -> Expr:
    flat: list[Expr] = []
    const = Fraction(0)
    saw_const = False
    for a in args:
        if isinstance(a, Plus):
            flat.extend(a.args)
        elif isinstance(a, Const):
            const += a.value
            saw_const = True
        elif is_zero(a):
            continue
        else:
            flat.append(a)
    if saw_const and const != 0:
        flat.append(Const(const))
    if not flat:
        return Const(const) if saw_const else zero_leaf()
    if len(flat) == 1:
        return flat[0]
    flat.sort(key=canonical_key)
    return Plus(tuple(flat))


def times(*args: Expr) -> Expr:
    flat: list[Expr] = []
    const = Fraction(1)
    saw_const = False
    for a in args:
        if isinstance(a, Times):
            flat.extend(a.args)
        elif isinstance(a, Const):
            const *= a.value
            saw_const = True
        else:
            flat.append(a)
    if any(is_zero(a) for a in flat):
        return zero_leaf() if not all(is_scalar(a) for a in flat) else Const(0)
    if saw_const and const == 0:
        return Const(0) if all(is_scalar(a) for a in flat) else zero_leaf()
    if saw_const and const != 1:
        flat.insert(0, Const(const))
    if not flat:
        return Const(const if saw_const else Fraction(1))
    if len(flat) == 1:
        return flat[0]
    # scalar factors commute: bubble them to the front (stable)
    flat = [a for a in flat if is_scalar(a)] + [a for a in flat if not is_scalar(a)]
    return Times(tuple(flat))


def negate(a: Expr) -> Expr:
    if isinstance(a, Negate):
        return a.arg
    if isinstance(a, Const):
        return Const(-a.value)
    if is_zero(a):
        return a
    return Negate(a)


def transpose(a: Expr) -> Expr:
    if isinstance(a, Transpose):
        return a.arg
    if isinstance(a, Const) or is_scalar(a):
        return a
    return Transpose(a)


def inverse(a: Expr) -> Expr:
    if isinstance(a, Inverse):
        return a.arg
    if isinstance(a, Const):
        if a.value == 0:
            raise ZeroDivisionError("inverse of a zero constant")
        return Const(Fraction(1) / a.value)
    return Inverse(a)


def deriv(a: Expr) -> Expr:
    return Deriv(a)


def minus(a: Expr, b: Expr) -> Expr:
    return plus(a, negate(b))


# ---------------------------------------------------------------------------
# Canonical keys


def canonical_key(e: Expr) -> tuple:
    """Structural key; collapses double transpose/inverse/negation.

    Plus commutativity is canonical because Plus children are sorted at
    construction; Times order is significant.  Tag strings order node types
    (constants, then products, leaves, sums, with negated terms last) so that
    the sorted Plus order matches conventional math layout.
    """
    if isinstance(e, Leaf):
        key = ("2l", e.op.name, e.op.hatted, e.sub)
    elif isinstance(e, Const):
        key = ("0c", str(e.value))
    elif isinstance(e, Plus):
        key = ("3p",) + tuple(sorted(canonical_key(a) for a in e.args))
    elif isinstance(e, Times):
        key = ("1t",) + tuple(canonical_key(a) for a in e.args)
    elif isinstance(e, Negate):
        if isinstance(e.arg, Negate):
            key = canonical_key(e.arg.arg)
        else:
            key = ("9n", canonical_key(e.arg))
    elif isinstance(e, Transpose):
        if isinstance(e.arg, Transpose):
            key = canonical_key(e.arg.arg)
        else:
            key = ("5x", canonical_key(e.arg))
    elif isinstance(e, Inverse):
        if isinstance(e.arg, Inverse):
            key = canonical_key(e.arg.arg)
        else:
            key = ("4v", canonical_key(e.arg))
    elif isinstance(e, Deriv):
        key = ("7d", canonical_key(e.arg))
    elif isinstance(e, Func):
        key = ("6f", e.fname) + tuple(canonical_key(a) for a in e.args)
    else:  # pragma: no cover
        raise TypeError(f"not an Expr: {e!r}")
    return key


def node_count(e: Expr) -> int:
    if isinstance(e, (Leaf, Const)):
        return 1
    if isinstance(e, (Plus, Times, Func)):
        return 1 + sum(node_count(a) for a in e.args)
    return 1 + node_count(e.arg)  # type: ignore[union-attr]


def walk(e: Expr) -> Iterator[Expr]:
    yield e
    if isinstance(e, (Plus, Times, Func)):
        for a in e.args:
            yield from walk(a)
    elif isinstance(e, (Negate, Transpose, Inverse, Deriv)):
        yield from walk(e.arg)


def leaves(e: Expr) -> Iterator[Leaf]:
    for n in walk(e):
        if isinstance(n, Leaf):
            yield n


def rebuild(e: Expr, f: Callable[[Expr], Optional[Expr]]) -> Expr:
    """Bottom-up rebuild; f may replace any node (None keeps it)."""
    if isinstance(e, (Plus, Times, Func)):
        new_args = tuple(rebuild(a, f) for a in e.args)
        if isinstance(e, Plus):
            e2: Expr = plus(*new_args)
        elif isinstance(e, Times):
            e2 = times(*new_args)
        else:
            e2 = Func(e.fname, new_args)
    elif isinstance(e, Negate):
        e2 = negate(rebuild(e.arg, f))
    elif isinstance(e, Transpose):
        e2 = transpose(rebuild(e.arg, f))
    elif isinstance(e, Inverse):
        e2 = inverse(rebuild(e.arg, f))
    elif isinstance(e, Deriv):
        e2 = deriv(rebuild(e.arg, f))
    else:
        e2 = e
    out = f(e2)
    return e2 if out is None else out


def substitute(e: Expr, table: dict[tuple, Expr]) -> Expr:
    """Replace every subexpression whose canonical key is in `table`."""

    def repl(n: Expr) -> Optional[Expr]:
        return table.get(canonical_key(n))

    return rebuild(e, repl)


def substitute_leaf(e: Expr, name: str, replacement: Expr) -> Expr:
    def repl(n: Expr) -> Optional[Expr]:
        if isinstance(n, Leaf) and n.op.name == name and not n.op.hatted:
            return replacement
        return None

    return rebuild(e, repl)


def transpose_normal(e: Expr) -> Expr:
    """Push transposes down to the leaves; collapse doubles.

    Purely structural (property-blind): used to detect transpose-modulo
    common segments, not as a simplifier.
    """
    if isinstance(e, Transpose):
        a = e.arg
        if isinstance(a, Transpose):
            return transpose_normal(a.arg)
        if isinstance(a, Times):
            return times(*(transpose_normal(Transpose(x)) for x in reversed(a.args)))
        if isinstance(a, Plus):
            return plus(*(transpose_normal(Transpose(x)) for x in a.args))
        if isinstance(a, Negate):
            return negate(transpose_normal(Transpose(a.arg)))
        if isinstance(a, Inverse):
            return inverse(transpose_normal(Transpose(a.arg)))
        if isinstance(a, Deriv):
            return deriv(transpose_normal(Transpose(a.arg)))
        if isinstance(a, Const) or is_scalar(a):
            return transpose_normal(a)
        return Transpose(transpose_normal(a))
    if isinstance(e, (Plus, Times, Func)):
        parts = tuple(transpose_normal(x) for x in e.args)
        if isinstance(e, Plus):
            return plus(*parts)
        if isinstance(e, Times):
            return times(*parts)
        return Func(e.fname, parts)
    if isinstance(e, Negate):
        return negate(transpose_normal(e.arg))
    if isinstance(e, Inverse):
        return inverse(transpose_normal(e.arg))
    if isinstance(e, Deriv):
        return deriv(transpose_normal(e.arg))
    return e


def transpose_key(e: Expr) -> tuple:
    """Key of the fully transpose-distributed form of eᵀ."""
    return canonical_key(transpose_normal(Transpose(e)))


# ---------------------------------------------------------------------------
# Dimensions of expressions


def dims_of(e: Expr, env: DimEnv) -> tuple[Optional[Dim], Optional[Dim]]:
    """Result dims per standard matrix arithmetic; unifies as a side effect."""

    def merge(a: Optional[Dim], b: Optional[Dim], what: str) -> Optional[Dim]:
        if a is None:
            return b
        if b is None:
            return a
        return env.unify(a, b)

    if isinstance(e, Leaf):
        return e.op.rows, e.op.cols
    if isinstance(e, Const):
        return env.one, env.one
    if isinstance(e, Plus):
        r: Optional[Dim] = None
        c: Optional[Dim] = None
        for a in e.args:
            ar, ac = dims_of(a, env)
            r = merge(r, ar, "rows")
            c = merge(c, ac, "cols")
        return r, c
    if isinstance(e, Times):
        chain = [a for a in e.args if not is_scalar(a)]
        for a in e.args:
            if is_scalar(a):
                dims_of(a, env)
        if not chain:
            return env.one, env.one
        r0, c0 = dims_of(chain[0], env)
        for a in chain[1:]:
            ar, ac = dims_of(a, env)
            inner = merge(c0, ar, "inner")
            c0 = ac
        return r0, c0
    if isinstance(e, Negate) or isinstance(e, Deriv):
        return dims_of(e.arg, env)
    if isinstance(e, Transpose):
        r, c = dims_of(e.arg, env)
        return c, r
    if isinstance(e, Inverse):
        r, c = dims_of(e.arg, env)
        rc = merge(r, c, "square")
        return rc, rc
    if isinstance(e, Func):
        # implicit operation call: dims of its first argument by convention
        return dims_of(e.args[0], env)
    raise TypeError(f"not an Expr: {e!r}")


# ---------------------------------------------------------------------------
# Equations and predicates


@dataclass(frozen=True)
class Equation:
    lhs: Expr
    rhs: Expr

    def key(self) -> tuple:
        return (canonical_key(self.lhs), canonical_key(self.rhs))


Predicate = tuple[Equation, ...]


# ---------------------------------------------------------------------------
# Printing (DSL round-trip syntax)


def _print_sub(sub: tuple[str, ...]) -> str:
    return "{" + "".join(sub) + "}" if sub else ""


def format_const(v: Fraction) -> str:
    if v.denominator == 1:
        return str(v.numerator)
    f = float(v)
    text = repr(f)
    return text


def print_expr(e: Expr, parent: str = "") -> str:
    if isinstance(e, Leaf):
        if e.op.deriv_of is not None:
            base = f"dv({e.op.deriv_of}{_print_sub(e.sub)})"
        else:
            base = f"{e.op.name}{_print_sub(e.sub)}"
        return f"init({base})" if e.op.hatted else base
    if isinstance(e, Const):
        return format_const(e.value)
    if isinstance(e, Plus):
        parts: list[str] = []
        for i, a in enumerate(e.args):
            if isinstance(a, Negate) and i > 0:
                parts.append("- " + print_expr(a.arg, "+"))
            elif i > 0:
                parts.append("+ " + print_expr(a, "+"))
            else:
                parts.append(print_expr(a, "+"))
        text = " ".join(parts)
        return f"({text})" if parent in ("*", "u", "-") else text
    if isinstance(e, Times):
        text = " * ".join(print_expr(a, "*") for a in e.args)
        return f"({text})" if parent in ("u", "-") else text
    if isinstance(e, Negate):
        inner = print_expr(e.arg, "-")
        return f"-{inner}"
    if isinstance(e, Transpose):
        return f"trans({print_expr(e.arg)})"
    if isinstance(e, Inverse):
        return f"inv({print_expr(e.arg)})"
    if isinstance(e, Deriv):
        return f"dv({print_expr(e.arg)})"
    if isinstance(e, Func):
        inner = ", ".join(print_expr(a) for a in e.args)
        return f"{e.fname}({inner})"
    raise TypeError(f"not an Expr: {e!r}")


def print_equation(eq: Equation) -> str:
    return f"{print_expr(eq.lhs)} = {print_expr(eq.rhs)}"
