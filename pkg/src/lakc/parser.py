"""Lexer, parser and semantic checks for equation models and operation specs.

Two text formats share one lexical layer:

* ``.ck`` equation models: ``Equation <name>``, operand declarations, then
  the target equations.
* ``.fl`` operation specs: ``Operation <name>``, operand declarations, one or
  more ``post: <equation>;`` lines, and optional ``store X over A;`` storage
  annotations for in-place algorithms.

Lex and syntax errors raise; everything semantic is collected as diagnostics
rendered ``file:line:col: code: message``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from decimal import Decimal
from fractions import Fraction
from typing import Optional

from .expr import (
    IO,
    Const,
    DimensionError,
    DimEnv,
    Equation,
    Expr,
    Deriv,
    Kind,
    Leaf,
    Operand,
    Property,
    PropertyError,
    deriv,
    dims_of,
    identity_leaf,
    inverse,
    leaves,
    make_operand,
    negate,
    plus,
    print_equation,
    rebuild,
    times,
    transpose,
)

_ID_RE = re.compile(r"[a-zA-Z][a-zA-Z0-9_]*")
_NUMBER_RE = re.compile(r"[0-9]+(?:\.[0-9]+)?(?:[Ee][+-]?[0-9]+)?")
_SUBSCRIPT_RE = re.compile(r"\{[a-z](?:,?[a-z])*\}")

_OPTYPES = {k.value: k for k in Kind}
_IOTYPES = {io.value: io for io in IO}
_PROPERTIES = {p.value: p for p in Property}
_UNARY = {"trans", "inv"}


@dataclass(frozen=True)
class Diagnostic:
    line: int
    col: int
    code: str
    message: str

    def render(self, filename: str = "<input>") -> str:
        return f"{filename}:{self.line}:{self.col}: {self.code}: {self.message}"


class LakcSyntaxError(ValueError):
    """Lexical or grammatical error; parsing cannot continue."""

    def __init__(self, diag: Diagnostic) -> None:
        super().__init__(diag.render())
        self.diag = diag


@dataclass(frozen=True)
class Token:
    cat: str
    lexeme: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    toks: list[Token] = []
    line, col, i = 1, 1, 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch == "{":
            m = _SUBSCRIPT_RE.match(text, i)
            if not m:
                raise LakcSyntaxError(Diagnostic(line, col, "lex", "malformed subscript"))
            lex = m.group(0)
            toks.append(Token("subscript", lex, line, col))
        elif ch.isdigit():
            m = _NUMBER_RE.match(text, i)
            lex = m.group(0)
            toks.append(Token("number", lex, line, col))
        elif ch.isalpha():
            m = _ID_RE.match(text, i)
            lex = m.group(0)
            if lex in _OPTYPES:
                cat = "optype"
            elif lex in _IOTYPES:
                cat = "iotype"
            elif lex in _PROPERTIES:
                cat = "property"
            elif lex in _UNARY:
                cat = "unary"
            elif lex == "init":
                cat = "init"
            elif lex == "dv":
                cat = "dv"
            else:
                cat = "id"
            toks.append(Token(cat, lex, line, col))
        elif ch == "=":
            lex = "="
            toks.append(Token("opeq", lex, line, col))
        elif ch in "+-":
            lex = ch
            toks.append(Token("opadd", lex, line, col))
        elif ch == "*":
            lex = ch
            toks.append(Token("opmul", lex, line, col))
        elif ch in "()<>,;:":
            lex = ch
            toks.append(Token("punct", lex, line, col))
        else:
            raise LakcSyntaxError(
                Diagnostic(line, col, "lex", f"unrecognized character {ch!r}"))
        col += len(lex)
        i += len(lex)
    return toks


# ---------------------------------------------------------------------------
# Parsed structures


@dataclass
class Declaration:
    kind: Kind
    name: str
    io: IO
    props_src: tuple[Property, ...]
    token: Token
    deriv_of: Optional[str] = None

    def render(self) -> str:
        inner = ", ".join([self.io.value] + [p.value for p in self.props_src])
        shown = f"dv({self.deriv_of})" if self.deriv_of else self.name
        return f"{self.kind.value} {shown} <{inner}>;"


@dataclass
class EquationModel:
    name: str
    env: DimEnv
    operands: dict[str, Operand]
    decls: list[Declaration]
    equations: list[Equation]
    eq_tokens: list[Token] = field(default_factory=list)
    parse_diagnostics: list[Diagnostic] = field(default_factory=list)

    def operand(self, name: str) -> Operand:
        return self.operands[name]


@dataclass
class OperationSpec:
    name: str
    env: DimEnv
    operands: dict[str, Operand]
    decls: list[Declaration]
    posts: tuple[Equation, ...]
    storage: dict[str, str] = field(default_factory=dict)
    eq_tokens: list[Token] = field(default_factory=list)
    parse_diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def outputs(self) -> list[Operand]:
        return [op for op in self.operands.values() if op.io in (IO.OUTPUT, IO.INOUT)]

    def operand(self, name: str) -> Operand:
        return self.operands[name]


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, toks: list[Token]) -> None:
        self.toks = toks
        self.pos = 0
        self.env = DimEnv()
        self.operands: dict[str, Operand] = {}
        self.decls: list[Declaration] = []
        self.diags: list[Diagnostic] = []

    # token plumbing -------------------------------------------------------

    def peek(self, ahead: int = 0) -> Optional[Token]:
        i = self.pos + ahead
        return self.toks[i] if i < len(self.toks) else None

    def advance(self) -> Token:
        t = self.peek()
        if t is None:
            last = self.toks[-1] if self.toks else Token("", "", 1, 1)
            raise LakcSyntaxError(
                Diagnostic(last.line, last.col, "syntax", "unexpected end of input"))
        self.pos += 1
        return t

    def expect(self, cat: str, lexeme: Optional[str] = None) -> Token:
        t = self.peek()
        want = lexeme if lexeme is not None else cat
        if t is None or t.cat != cat or (lexeme is not None and t.lexeme != lexeme):
            found = t.lexeme if t else "end of input"
            where = t if t else (self.toks[-1] if self.toks else Token("", "", 1, 1))
            raise LakcSyntaxError(
                Diagnostic(where.line, where.col, "syntax",
                           f"expected {want}, found {found!r}"))
        return self.advance()

    def at(self, cat: str, lexeme: Optional[str] = None) -> bool:
        t = self.peek()
        return t is not None and t.cat == cat and (lexeme is None or t.lexeme == lexeme)

    # declarations ---------------------------------------------------------

    def parse_decl(self) -> None:
        t_kind = self.expect("optype")
        kind = _OPTYPES[t_kind.lexeme]
        deriv_of: Optional[str] = None
        if self.at("dv"):
            self.advance()
            self.expect("punct", "(")
            base = self.expect("id").lexeme
            self.expect("punct", ")")
            deriv_of = base
            name = f"dv({base})"
        else:
            name = self.expect("id").lexeme
        self.expect("punct", "<")
        io = _IOTYPES[self.expect("iotype").lexeme]
        props: list[Property] = []
        while self.at("punct", ","):
            self.advance()
            props.append(_PROPERTIES[self.expect("property").lexeme])
        self.expect("punct", ">")
        self.expect("punct", ";")
        if name in self.operands:
            self.diags.append(Diagnostic(t_kind.line, t_kind.col, "duplicate-declaration",
                                         f"operand {name} is declared twice"))
            return
        rows = cols = None
        if deriv_of is not None:
            base_op = self.operands.get(deriv_of)
            if base_op is None:
                self.diags.append(Diagnostic(
                    t_kind.line, t_kind.col, "undeclared-operand",
                    f"derivative of undeclared operand {deriv_of}"))
            else:
                rows, cols = base_op.rows, base_op.cols
        try:
            op = make_operand(self.env, name, kind, io, frozenset(props), rows, cols,
                              deriv_of=deriv_of)
        except (PropertyError, DimensionError) as exc:
            self.diags.append(Diagnostic(t_kind.line, t_kind.col,
                                         "contradictory-properties", str(exc)))
            op = make_operand(self.env, name, kind, io, frozenset(), deriv_of=deriv_of)
        self.operands[name] = op
        self.decls.append(Declaration(kind, name, io, tuple(props), t_kind, deriv_of))

    # expressions ----------------------------------------------------------

    def resolve(self, t: Token, name: str, sub: tuple[str, ...], hatted: bool) -> Leaf:
        if name == "I" and "I" not in self.operands:
            return identity_leaf()
        op = self.operands.get(name)
        if op is None:
            self.diags.append(Diagnostic(t.line, t.col, "undeclared-operand",
                                         f"operand {name} is not declared"))
            op = make_operand(self.env, name, Kind.MATRIX, IO.INPUT)
            self.operands[name] = op
        if hatted:
            if op.io is not IO.INOUT:
                self.diags.append(Diagnostic(t.line, t.col, "init-non-inout",
                                             f"init({name}) requires an InOut operand"))
            else:
                op = op.hat()
        return Leaf(op, sub)

    def parse_subscript_opt(self) -> tuple[str, ...]:
        if self.at("subscript"):
            lex = self.advance().lexeme
            return tuple(lex[1:-1].replace(",", ""))
        return ()

    def parse_factor(self) -> Expr:
        t = self.peek()
        if t is None:
            raise LakcSyntaxError(Diagnostic(1, 1, "syntax", "unexpected end of input"))
        if t.cat == "opadd":
            flips = 0
            while self.at("opadd"):
                if self.advance().lexeme == "-":
                    flips += 1
            inner = self.parse_factor()
            return negate(inner) if flips % 2 else inner
        if t.cat == "number":
            self.advance()
            return Const(Fraction(Decimal(t.lexeme)))
        if t.cat == "id":
            self.advance()
            sub = self.parse_subscript_opt()
            return self.resolve(t, t.lexeme, sub, hatted=False)
        if t.cat == "unary":
            self.advance()
            self.expect("punct", "(")
            inner = self.parse_expression()
            self.expect("punct", ")")
            return transpose(inner) if t.lexeme == "trans" else inverse(inner)
        if t.cat == "init":
            self.advance()
            self.expect("punct", "(")
            if self.at("dv"):
                self.advance()
                self.expect("punct", "(")
                base = self.expect("id")
                sub = self.parse_subscript_opt()
                self.expect("punct", ")")
                self.expect("punct", ")")
                return self.resolve(base, f"dv({base.lexeme})", sub, hatted=True)
            base = self.expect("id")
            sub = self.parse_subscript_opt()
            self.expect("punct", ")")
            return self.resolve(base, base.lexeme, sub, hatted=True)
        if t.cat == "dv":
            self.advance()
            self.expect("punct", "(")
            inner = self.parse_expression()
            self.expect("punct", ")")
            if isinstance(inner, Leaf) and not inner.op.hatted and \
                    f"dv({inner.op.name})" in self.operands:
                return self.resolve(t, f"dv({inner.op.name})", inner.sub, hatted=False)
            return deriv(inner)
        if t.cat == "punct" and t.lexeme == "(":
            self.advance()
            inner = self.parse_expression()
            self.expect("punct", ")")
            return inner
        raise LakcSyntaxError(Diagnostic(t.line, t.col, "syntax",
                                         f"expected an expression, found {t.lexeme!r}"))

    def parse_term(self) -> Expr:
        factors = [self.parse_factor()]
        while self.at("opmul"):
            self.advance()
            factors.append(self.parse_factor())
        return times(*factors) if len(factors) > 1 else factors[0]

    def parse_expression(self) -> Expr:
        terms = [self.parse_term()]
        while self.at("opadd"):
            op = self.advance().lexeme
            nxt = self.parse_term()
            terms.append(negate(nxt) if op == "-" else nxt)
        return plus(*terms) if len(terms) > 1 else terms[0]

    def parse_equation(self) -> tuple[Equation, Token]:
        start = self.peek()
        assert start is not None
        lhs = self.parse_expression()
        self.expect("opeq")
        rhs = self.parse_expression()
        self.expect("punct", ";")
        return Equation(lhs, rhs), start


def parse_model(text: str) -> EquationModel:
    """Parse a .ck model; raises on lex/syntax errors, collects the rest."""
    p = _Parser(tokenize(text))
    p.expect("id", "Equation")
    name = p.expect("id").lexeme
    while p.at("optype"):
        p.parse_decl()
    if not p.decls:
        t = p.peek() or Token("", "", 1, 1)
        raise LakcSyntaxError(Diagnostic(t.line, t.col, "syntax",
                                         "expected at least one operand declaration"))
    equations: list[Equation] = []
    eq_tokens: list[Token] = []
    while p.peek() is not None:
        eq, tok = p.parse_equation()
        equations.append(eq)
        eq_tokens.append(tok)
    if not equations:
        t = p.toks[-1] if p.toks else Token("", "", 1, 1)
        raise LakcSyntaxError(Diagnostic(t.line, t.col, "syntax",
                                         "expected at least one equation"))
    model = EquationModel(name, p.env, p.operands, p.decls, equations, eq_tokens, p.diags)
    _attach_subscripts(model)
    return model


def parse_flame_spec(text: str) -> OperationSpec:
    """Parse a .fl operation spec."""
    p = _Parser(tokenize(text))
    p.expect("id", "Operation")
    name = p.expect("id").lexeme
    while p.at("optype"):
        p.parse_decl()
    posts: list[Equation] = []
    eq_tokens: list[Token] = []
    storage: dict[str, str] = {}
    while p.peek() is not None:
        if p.at("id", "post"):
            p.advance()
            p.expect("punct", ":")
            eq, tok = p.parse_equation()
            posts.append(eq)
            eq_tokens.append(tok)
        elif p.at("id", "store"):
            t = p.advance()
            out = p.expect("id").lexeme
            p.expect("id", "over")
            over = p.expect("id").lexeme
            p.expect("punct", ";")
            for nm in (out, over):
                if nm not in p.operands:
                    p.diags.append(Diagnostic(t.line, t.col, "undeclared-operand",
                                              f"operand {nm} is not declared"))
            storage[out] = over
        else:
            t = p.peek()
            assert t is not None
            raise LakcSyntaxError(Diagnostic(t.line, t.col, "syntax",
                                             f"expected 'post' or 'store', found {t.lexeme!r}"))
    if not posts:
        t = p.toks[-1] if p.toks else Token("", "", 1, 1)
        raise LakcSyntaxError(Diagnostic(t.line, t.col, "syntax",
                                         "expected at least one postcondition"))
    return OperationSpec(name, p.env, p.operands, p.decls, tuple(posts), storage,
                         eq_tokens, p.diags)


def _attach_subscripts(model: EquationModel) -> None:
    """Record each operand's subscript signature (first use wins)."""
    usage: dict[str, tuple[str, ...]] = {}
    for eq in model.equations:
        for side in (eq.lhs, eq.rhs):
            for lf in leaves(side):
                usage.setdefault(lf.op.name, lf.sub)
    new_ops = {}
    for nm, op in model.operands.items():
        subs = usage.get(nm, ())
        new_ops[nm] = replace(op, subscripts=subs) if subs else op
    model.operands = new_ops

    def fix(e: Expr) -> Expr:
        def repl(n: Expr) -> Optional[Expr]:
            if isinstance(n, Leaf) and n.op.name in new_ops:
                op = new_ops[n.op.name]
                return Leaf(op.hat() if n.op.hatted else op, n.sub)
            return None
        return rebuild(e, repl)

    model.equations = [Equation(fix(eq.lhs), fix(eq.rhs)) for eq in model.equations]


# ---------------------------------------------------------------------------
# Semantic checks


def _unknowns_in(e: Expr) -> list[Leaf]:
    return [lf for lf in leaves(e)
            if lf.op.io in (IO.OUTPUT, IO.INTERMEDIATE, IO.INOUT) and not lf.op.hatted]


def semantic_check(model: EquationModel) -> list[Diagnostic]:
    diags = list(model.parse_diagnostics)
    defined: dict[str, int] = {}
    eq_unknowns: list[Optional[str]] = []

    for eq, tok in zip(model.equations, model.eq_tokens):
        lhs_unknowns = {lf.op.name for lf in _unknowns_in(eq.lhs)}
        rhs_unknowns = _unknowns_in(eq.rhs)
        if not lhs_unknowns:
            diags.append(Diagnostic(tok.line, tok.col, "no-output-on-lhs",
                                    "left-hand side defines no output operand"))
            eq_unknowns.append(None)
        elif len(lhs_unknowns) > 1:
            diags.append(Diagnostic(tok.line, tok.col, "multiple-unknowns",
                                    f"equation defines several operands: "
                                    f"{', '.join(sorted(lhs_unknowns))}"))
            eq_unknowns.append(None)
        else:
            unk = next(iter(lhs_unknowns))
            eq_unknowns.append(unk)
            if unk in defined:
                diags.append(Diagnostic(tok.line, tok.col, "multiple-definitions",
                                        f"operand {unk} is defined twice"))
            defined[unk] = len(eq_unknowns) - 1
        for lf in rhs_unknowns:
            if lf.op.io is IO.OUTPUT:
                diags.append(Diagnostic(tok.line, tok.col, "output-on-rhs",
                                        f"output operand {lf.op.name} used on a right-hand side"))
            elif lf.op.io is IO.INOUT:
                diags.append(Diagnostic(tok.line, tok.col, "inout-needs-init",
                                        f"InOut operand {lf.op.name} must be read as "
                                        f"init({lf.op.name})"))

    # every Intermediate that is used must have a defining equation
    used = {lf.op.name for eq in model.equations for lf in leaves(eq.rhs)}
    for nm, op in model.operands.items():
        if op.io is IO.INTERMEDIATE and nm in used and nm not in defined:
            diags.append(Diagnostic(1, 1, "undefined-intermediate",
                                    f"intermediate operand {nm} is never defined"))
        if op.io is IO.OUTPUT and nm not in defined:
            diags.append(Diagnostic(1, 1, "undefined-output",
                                    f"output operand {nm} is never defined"))

    # acyclic definitions (an intermediate may be defined after its use)
    order = {nm: i for i, nm in enumerate(defined)}
    seen: set[tuple[str, str]] = set()
    for i, eq in enumerate(model.equations):
        unk = eq_unknowns[i]
        if unk is None:
            continue
        for lf in leaves(eq.rhs):
            dep = lf.op.name
            if dep in order and dep != unk and (unk, dep) not in seen:
                seen.add((unk, dep))
    if _has_cycle(seen, set(order)):
        diags.append(Diagnostic(1, 1, "cyclic-definition",
                                "operand definitions form a cycle"))

    # subscript discipline
    usage: dict[str, tuple[tuple[str, ...], Token]] = {}
    for eq, tok in zip(model.equations, model.eq_tokens):
        lhs_letters: set[str] = set()
        rhs_letters: set[str] = set()
        for side, letters in ((eq.lhs, lhs_letters), (eq.rhs, rhs_letters)):
            for lf in leaves(side):
                letters.update(lf.sub)
                prev = usage.get(lf.op.name)
                if prev is None:
                    usage[lf.op.name] = (lf.sub, tok)
                elif prev[0] != lf.sub:
                    diags.append(Diagnostic(tok.line, tok.col, "subscript-mismatch",
                                            f"operand {lf.op.name} used with subscripts "
                                            f"{{{''.join(lf.sub)}}} and {{{''.join(prev[0])}}}"))
        for letter in sorted(rhs_letters - lhs_letters):
            diags.append(Diagnostic(tok.line, tok.col, "subscript-unbound",
                                    f"subscript {letter} does not appear on the left-hand side"))
        for letter in sorted(lhs_letters - rhs_letters):
            diags.append(Diagnostic(tok.line, tok.col, "subscript-unused",
                                    f"subscript {letter} never appears on the right-hand side"))

    # declared but never used
    for decl in model.decls:
        if decl.name not in usage:
            diags.append(Diagnostic(decl.token.line, decl.token.col, "unused-operand",
                                    f"operand {decl.name} is declared but never used"))

    # dimensions
    for eq, tok in zip(model.equations, model.eq_tokens):
        try:
            lr, lc = dims_of(eq.lhs, model.env)
            rr, rc = dims_of(eq.rhs, model.env)
            if lr is not None and rr is not None:
                model.env.unify(lr, rr)
            if lc is not None and rc is not None:
                model.env.unify(lc, rc)
        except DimensionError as exc:
            diags.append(Diagnostic(tok.line, tok.col, "dimension-mismatch", str(exc)))
    return diags


def semantic_check_spec(spec: OperationSpec) -> list[Diagnostic]:
    diags = list(spec.parse_diagnostics)
    if not any(op.io in (IO.OUTPUT, IO.INOUT) for op in spec.operands.values()):
        diags.append(Diagnostic(1, 1, "no-output", "operation declares no output operand"))
    used: set[str] = set()
    for eq, tok in zip(spec.posts, spec.eq_tokens):
        for side in (eq.lhs, eq.rhs):
            used |= {lf.op.name for lf in leaves(side)}
        try:
            lr, lc = dims_of(eq.lhs, spec.env)
            rr, rc = dims_of(eq.rhs, spec.env)
            if lr is not None and rr is not None:
                spec.env.unify(lr, rr)
            if lc is not None and rc is not None:
                spec.env.unify(lc, rc)
        except DimensionError as exc:
            diags.append(Diagnostic(tok.line, tok.col, "dimension-mismatch", str(exc)))
    for decl in spec.decls:
        if decl.name not in used:
            diags.append(Diagnostic(decl.token.line, decl.token.col, "unused-operand",
                                    f"operand {decl.name} is declared but never used"))
    for out, over in spec.storage.items():
        op = spec.operands.get(out)
        if op is not None and op.io not in (IO.OUTPUT, IO.INOUT):
            diags.append(Diagnostic(1, 1, "bad-storage",
                                    f"store target {out} is not an output"))
        if out == over:
            diags.append(Diagnostic(1, 1, "bad-storage",
                                    f"operand {out} cannot be stored over itself"))
    return diags


def _has_cycle(edges: set[tuple[str, str]], nodes: set[str]) -> bool:
    adj: dict[str, list[str]] = {n: [] for n in nodes}
    for a, b in edges:
        if a in adj and b in nodes:
            adj[a].append(b)
    state: dict[str, int] = {}

    def visit(n: str) -> bool:
        if state.get(n) == 1:
            return True
        if state.get(n) == 2:
            return False
        state[n] = 1
        if any(visit(m) for m in adj[n]):
            return True
        state[n] = 2
        return False

    return any(visit(n) for n in nodes)


# ---------------------------------------------------------------------------
# Printing


def print_model(model: EquationModel) -> str:
    lines = [f"Equation {model.name}"]
    for decl in model.decls:
        lines.append(f"    {decl.render()}")
    lines.append("")
    for eq in model.equations:
        lines.append(f"    {print_equation(eq)};")
    return "\n".join(lines) + "\n"


def print_flame_spec(spec: OperationSpec) -> str:
    lines = [f"Operation {spec.name}"]
    for decl in spec.decls:
        lines.append(f"    {decl.render()}")
    lines.append("")
    for eq in spec.posts:
        lines.append(f"    post: {print_equation(eq)};")
    for out, over in spec.storage.items():
        lines.append(f"    store {out} over {over};")
    return "\n".join(lines) + "\n"


def load_model(path: str) -> tuple[EquationModel, list[Diagnostic]]:
    with open(path, encoding="utf-8") as fh:
        model = parse_model(fh.read())
    return model, semantic_check(model)


def load_flame_spec(path: str) -> tuple[OperationSpec, list[Diagnostic]]:
    with open(path, encoding="utf-8") as fh:
        spec = parse_flame_spec(fh.read())
    return spec, semantic_check_spec(spec)
