"""Concrete dense-arithmetic backend.

Generates property-respecting random instances, interprets kernel-sequence
algorithms, grid loop nests and worksheets (with flop and access counters),
and computes brute-force references for verification.

Everything here is deterministic per seed: eigendecomposition uses a cyclic
Jacobi sweep and QR a Householder reduction with a fixed sign convention, so
two runs produce bit-identical results.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Optional

import numpy as np

from .expr import (
    IO,
    Const,
    Deriv,
    Equation,
    Expr,
    Func,
    Inverse,
    Kind,
    Leaf,
    Negate,
    Operand,
    Plus,
    Property,
    Times,
    Transpose,
    walk,
)

SINGULAR_TOL = 1e-13


class OracleError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Random instances


def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0x7FFFFFFF, zlib.crc32(name.encode())])


def random_instance(op: Operand, rows: int, cols: int, seed: int) -> np.ndarray:
    """Dense instance respecting every declared property of `op`."""
    rng = _rng_for(seed, op.name)
    p = op.props
    if op.kind is Kind.SCALAR:
        return np.array([[rng.uniform(0.15, 0.85)]])
    if op.kind is Kind.VECTOR:
        cols = 1
    if Property.IDENTITY in p:
        return np.eye(rows, cols)
    if Property.ZERO in p:
        return np.zeros((rows, cols))
    m = rng.uniform(-1.0, 1.0, size=(rows, cols))
    if Property.RANK_DEFICIENT in p:
        k = max(1, min(rows, cols) - 1)
        m = rng.uniform(-1.0, 1.0, size=(rows, k)) @ rng.uniform(-1.0, 1.0, size=(k, cols))
    if Property.ORTHOGONAL in p:
        base = rng.uniform(-1.0, 1.0, size=(rows, rows))
        q, _ = householder_qr(base, Counters())
        return q[:, :cols].copy()
    if Property.SPD in p:
        m = m.T @ m + rows * np.eye(rows)
    elif Property.SYMMETRIC in p:
        m = (m + m.T) / 2.0
    if Property.DIAGONAL in p:
        m = np.diag(np.diag(m)).copy()
        if Property.SPD in p:
            m = np.abs(m) + np.eye(rows)
    elif Property.LOWER_TRIANGULAR in p:
        m = np.tril(m)
    elif Property.UPPER_TRIANGULAR in p:
        m = np.triu(m)
    if Property.LOWER_TRIANGULAR in p or Property.UPPER_TRIANGULAR in p:
        if Property.UNIT_DIAGONAL in p:
            np.fill_diagonal(m, 1.0)
        elif Property.ZERO not in p and Property.IDENTITY not in p:
            # keep triangular solves well conditioned
            d = np.diag(m).copy()
            d = np.where(np.abs(d) < 0.35, np.sign(d + 0.5) * (np.abs(d) + 1.0), d)
            np.fill_diagonal(m, d)
    if Property.FULL_RANK in p and rows == cols and Property.SPD not in p and \
            Property.LOWER_TRIANGULAR not in p and Property.UPPER_TRIANGULAR not in p and \
            Property.ORTHOGONAL not in p:
        m = m + rows * 0.5 * np.eye(rows)  # diagonally dominant-ish: invertible, has an LU
    return m


# ---------------------------------------------------------------------------
# Counters


@dataclass
class Counters:
    flops: float = 0.0
    reads: dict[str, int] = field(default_factory=dict)
    writes: dict[str, int] = field(default_factory=dict)
    read_events: dict[str, int] = field(default_factory=dict)

    def read(self, name: str, size: int) -> None:
        self.reads[name] = self.reads.get(name, 0) + size
        self.read_events[name] = self.read_events.get(name, 0) + 1

    def write(self, name: str, size: int) -> None:
        self.writes[name] = self.writes.get(name, 0) + size


# ---------------------------------------------------------------------------
# Deterministic factorization kernels


def householder_qr(a: np.ndarray, counters: Counters) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR with R's diagonal forced positive (deterministic signs)."""
    m, n = a.shape
    r = a.astype(float).copy()
    q = np.eye(m)
    for k in range(min(m - 1, n)):
        x = r[k:, k].copy()
        norm = float(np.linalg.norm(x))
        if norm < SINGULAR_TOL:
            continue
        v = x.copy()
        v[0] += np.sign(x[0]) * norm if x[0] != 0 else norm
        v /= np.linalg.norm(v)
        r[k:, :] -= 2.0 * np.outer(v, v @ r[k:, :])
        q[:, k:] -= 2.0 * np.outer(q[:, k:] @ v, v)
    counters.flops += 2.0 * m * n * n - (2.0 / 3.0) * n ** 3
    q = q[:, :n].copy()
    r = np.triu(r[:n, :])
    sign = np.sign(np.diag(r))
    sign[sign == 0] = 1.0
    q *= sign
    r *= sign[:, None]
    return q, r


def jacobi_eig(a: np.ndarray, counters: Counters) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi for symmetric matrices; eigenvalues ascending."""
    n = a.shape[0]
    w = a.astype(float).copy()
    z = np.eye(n)
    scale = max(float(np.max(np.abs(w))), 1.0)
    for _ in range(60):
        off = np.sqrt(np.sum(np.tril(w, -1) ** 2))
        if off <= 1e-14 * scale:
            break
        for p_i in range(n - 1):
            for q_i in range(p_i + 1, n):
                apq = w[p_i, q_i]
                if abs(apq) <= 1e-16 * scale:
                    continue
                theta = (w[q_i, q_i] - w[p_i, p_i]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p_i, p_i] = c
                rot[q_i, q_i] = c
                rot[p_i, q_i] = s
                rot[q_i, p_i] = -s
                w = rot.T @ w @ rot
                z = z @ rot
    counters.flops += 9.0 * n ** 3
    lam = np.diag(w).copy()
    order = np.argsort(lam, kind="stable")
    lam = lam[order]
    z = z[:, order]
    for j in range(n):
        col = z[:, j]
        i = int(np.argmax(np.abs(col)))
        if col[i] < 0:
            z[:, j] = -col
    return z, np.diag(lam)


def cholesky_lower(a: np.ndarray, counters: Counters) -> np.ndarray:
    n = a.shape[0]
    l = np.zeros_like(a, dtype=float)
    for j in range(n):
        d = a[j, j] - l[j, :j] @ l[j, :j]
        if d <= 0:
            raise OracleError("potrf: input not positive definite")
        l[j, j] = np.sqrt(d)
        l[j + 1:, j] = (a[j + 1:, j] - l[j + 1:, :j] @ l[j, :j]) / l[j, j]
    counters.flops += a.shape[0] ** 3 / 3.0
    return l


def lu_nopivot(a: np.ndarray, counters: Counters) -> tuple[np.ndarray, np.ndarray]:
    n = a.shape[0]
    u = a.astype(float).copy()
    l = np.eye(n)
    for k in range(n):
        if abs(u[k, k]) < SINGULAR_TOL:
            raise OracleError("lu: zero pivot")
        l[k + 1:, k] = u[k + 1:, k] / u[k, k]
        u[k + 1:, k:] -= np.outer(l[k + 1:, k], u[k, k:])
        u[k + 1:, k] = 0.0
    counters.flops += (2.0 / 3.0) * n ** 3
    return l, np.triu(u)


def solve_triangular(t: np.ndarray, b: np.ndarray, lower: bool, trans: bool = False,
                     unit: bool = False) -> np.ndarray:
    """Forward/back substitution (left solve)."""
    a = t.T if trans else t
    low = (not lower) if trans else lower
    n = a.shape[0]
    x = b.astype(float).copy()
    order = range(n) if low else range(n - 1, -1, -1)
    for i in order:
        if not unit:
            d = a[i, i]
            if abs(d) < SINGULAR_TOL:
                raise OracleError("singular triangular solve")
        ahead = a[i, :i] if low else a[i, i + 1:]
        seg = x[:i] if low else x[i + 1:]
        x[i] = x[i] - ahead @ seg
        if not unit:
            x[i] = x[i] / a[i, i]
    return x


# ---------------------------------------------------------------------------
# Expression evaluation


class Store:
    """Named array bindings; subscripted operands are keyed per instance."""

    def __init__(self, arrays: Optional[dict[str, np.ndarray]] = None) -> None:
        self.arrays: dict[str, np.ndarray] = dict(arrays or {})
        self.initial: dict[str, np.ndarray] = {}

    @staticmethod
    def key(name: str, idx: tuple[int, ...]) -> str:
        return name if not idx else name + "@" + ",".join(str(i) for i in idx)

    def freeze_initial(self) -> None:
        self.initial = {k: v.copy() for k, v in self.arrays.items()}

    def get(self, name: str, idx: tuple[int, ...] = (), hatted: bool = False) -> np.ndarray:
        k = self.key(name, idx)
        src = self.initial if hatted else self.arrays
        if k not in src:
            if hatted and k in self.arrays:
                raise OracleError(f"initial contents of {k} were not frozen")
            raise OracleError(f"unbound operand {k}" + (" (initial)" if hatted else ""))
        return src[k]

    def set(self, name: str, value: np.ndarray, idx: tuple[int, ...] = ()) -> None:
        self.arrays[self.key(name, idx)] = value

    def copy(self) -> "Store":
        s = Store({k: v.copy() for k, v in self.arrays.items()})
        s.initial = {k: v.copy() for k, v in self.initial.items()}
        return s


FuncSolver = Callable[..., tuple[np.ndarray, ...]]
_FUNC_SOLVERS: dict[str, FuncSolver] = {}


def register_func_solver(name: str, solver: FuncSolver) -> None:
    _FUNC_SOLVERS[name] = solver


def _idx_values(sub: tuple[str, ...], idxmap: dict[str, int]) -> tuple[int, ...]:
    try:
        return tuple(idxmap[s] for s in sub)
    except KeyError as exc:
        raise OracleError(f"loop index {exc} not bound") from exc


def eval_expr(e: Expr, store: Store, idxmap: Optional[dict[str, int]] = None,
              counters: Optional[Counters] = None) -> np.ndarray:
    idxmap = idxmap or {}
    counters = counters or Counters()

    def ev(x: Expr) -> np.ndarray:
        if isinstance(x, Leaf):
            arr = store.get(x.op.name, _idx_values(x.sub, idxmap), x.op.hatted)
            counters.read(x.op.name, int(arr.size))
            return arr
        if isinstance(x, Const):
            return np.array([[float(x.value)]])
        if isinstance(x, Plus):
            vals = [ev(a) for a in x.args]
            shape = next((v.shape for v in vals if v.size != 1), vals[0].shape)
            out = np.zeros(shape)
            for v in vals:
                out = out + (v if v.shape == shape else float(v[0, 0]) * np.eye(*shape))
            return out
        if isinstance(x, Times):
            scalar = 1.0
            mats: list[np.ndarray] = []
            for a in x.args:
                v = ev(a)
                if v.size == 1 and not (isinstance(a, Leaf) and a.op.kind is not Kind.SCALAR):
                    scalar *= float(v[0, 0])
                else:
                    mats.append(v)
            if not mats:
                return np.array([[scalar]])
            out = mats[0]
            for m_ in mats[1:]:
                out = out @ m_
            return scalar * out
        if isinstance(x, Negate):
            return -ev(x.arg)
        if isinstance(x, Transpose):
            return ev(x.arg).T.copy()
        if isinstance(x, Inverse):
            v = ev(x.arg)
            if v.size == 1:
                if abs(v[0, 0]) < SINGULAR_TOL:
                    raise OracleError("scalar inverse of ~0")
                return np.array([[1.0 / v[0, 0]]])
            return np.linalg.inv(v)
        if isinstance(x, Deriv):
            raise OracleError("cannot evaluate an unresolved derivative operator")
        if isinstance(x, Func):
            solver = _FUNC_SOLVERS.get(x.fname)
            if solver is None:
                raise OracleError(f"no solver registered for function {x.fname}")
            args = [ev(a) for a in x.args]
            outs = solver(*args)
            return outs[0] if isinstance(outs, tuple) else outs
        raise OracleError(f"cannot evaluate {x!r}")

    return ev(e)


# identity leaves evaluate via Plus shape-promotion above; bare I in a product
# needs a shape, which callers avoid by simplifying first.


# ---------------------------------------------------------------------------
# Kernel flop conventions (validated against symbolic costs in tests)


def flops_for(kernel: str, out_shapes: list[tuple[int, int]],
              in_shapes: list[tuple[int, int]]) -> float:
    def rc(shapes: list[tuple[int, int]], i: int) -> tuple[int, int]:
        return shapes[i] if i < len(shapes) else (1, 1)

    r, c = rc(out_shapes, 0)

    def inner(i: int) -> int:
        s = rc(in_shapes, i)
        return s[1] if s[0] == r else s[0]

    if kernel == "gemm":
        return 2.0 * r * c * (inner(0) if in_shapes else r)
    if kernel in ("gemv", "ger"):
        m, n = rc(in_shapes, 0)
        return 2.0 * m * n
    if kernel in ("dot", "axpy"):
        n = max(rc(in_shapes, 0))
        return 2.0 * n
    if kernel == "scal":
        return float(r * c)
    if kernel == "trsv":
        n = rc(in_shapes, 0)[0]
        return float(n * n)
    if kernel in ("trsm", "trmm"):
        n = rc(in_shapes, 0)[0]
        return float(n * r * c)
    if kernel == "syrk":
        return float(r * r * inner(0))
    if kernel == "syr2k":
        k = rc(in_shapes, 0)[1]
        return 2.0 * r * r * k
    if kernel == "potrf":
        return r * r * r / 3.0
    if kernel == "geqrf":
        m, n = rc(in_shapes, 0)
        return 2.0 * m * n * n - (2.0 / 3.0) * n ** 3
    if kernel == "syevr":
        return 9.0 * r ** 3
    if kernel == "sc-add":
        return 2.0 * r * c
    if kernel == "inv-tri":
        return r * r * r / 3.0
    if kernel == "lu":
        return (2.0 / 3.0) * r ** 3
    return float(r * c)  # copies, scalar ops, unknown learned ops


# ---------------------------------------------------------------------------
# Program execution (duck-typed over compiler/grid/flame structures)


def exec_statement(stmt, store: Store, idxmap: dict[str, int], counters: Counters) -> None:
    kernel = stmt.kernel
    rhs = stmt.rhs
    outs: tuple[Leaf, ...] = stmt.outs
    if kernel == "potrf":
        a = eval_expr(rhs, store, idxmap, counters)
        val = cholesky_lower(a, counters)
        results = [val]
    elif kernel == "geqrf":
        a = eval_expr(rhs, store, idxmap, counters)
        q, r = householder_qr(a, counters)
        results = [q, r]
    elif kernel == "syevr":
        a = eval_expr(rhs, store, idxmap, counters)
        z, lam = jacobi_eig(a, counters)
        results = [z, lam]
    elif kernel == "lu":
        a = eval_expr(rhs, store, idxmap, counters)
        l, u = lu_nopivot(a, counters)
        results = [l, u]
    elif kernel == "ldl":
        a = eval_expr(rhs, store, idxmap, counters)
        l, u = lu_nopivot(a, counters)
        d = np.diag(np.diag(u)).copy()
        results = [l, d]
    elif kernel == "gesvd":
        a = eval_expr(rhs, store, idxmap, counters)
        u, s, vh = np.linalg.svd(a, full_matrices=False)
        counters.flops += 14.0 * a.shape[0] * a.shape[1] ** 2
        results = [u, np.diag(s).copy(), vh.T.copy()]
    elif kernel == "gelqf":
        a = eval_expr(rhs, store, idxmap, counters)
        q0, r0 = householder_qr(a.T.copy(), counters)
        results = [r0.T.copy(), q0.T.copy()]
    else:
        val = eval_expr(rhs, store, idxmap, counters)
        in_shapes = []
        for node in walk(rhs):
            if isinstance(node, Leaf) and node.op.kind is not Kind.SCALAR:
                try:
                    in_shapes.append(store.get(node.op.name, _idx_values(node.sub, idxmap),
                                               node.op.hatted).shape)
                except OracleError:
                    pass
        results = [val]
        counters.flops += flops_for(kernel, [np.asarray(val).shape], in_shapes)
    if len(results) < len(outs):
        raise OracleError(f"kernel {kernel} produced {len(results)} outputs, expected {len(outs)}")
    for leaf, val in zip(outs, results):
        idx = _idx_values(leaf.sub, idxmap)
        store.set(leaf.op.name, np.asarray(val, dtype=float), idx)
        counters.write(leaf.op.name, int(np.asarray(val).size))


def exec_algorithm(stmts: Iterable, store: Store, counters: Optional[Counters] = None,
                   idxmap: Optional[dict[str, int]] = None,
                   trip_sizes: Optional[dict[str, int]] = None) -> Counters:
    """Execute a flat statement list or a loop nest (items with .index/.body)."""
    counters = counters if counters is not None else Counters()
    idxmap = dict(idxmap or {})
    trip_sizes = trip_sizes or {}
    for item in stmts:
        if hasattr(item, "body"):  # loop
            trip = trip_sizes.get(item.index)
            if trip is None:
                raise OracleError(f"no trip count bound for loop index {item.index}")
            for v in range(trip):
                idxmap[item.index] = v
                exec_algorithm(item.body, store, counters, idxmap, trip_sizes)
            idxmap.pop(item.index, None)
        else:
            exec_statement(item, store, idxmap, counters)
    return counters


# ---------------------------------------------------------------------------
# Brute-force references


def solve_linear_entries(apply_map: Callable[[list[np.ndarray]], list[np.ndarray]],
                         shapes: list[tuple[int, int]],
                         masks: list[np.ndarray]) -> list[np.ndarray]:
    """Solve F(X...) = 0 for F affine in the unknowns, probing free entries."""
    zeros = [np.zeros(s) for s in shapes]
    base = apply_map(zeros)
    rhs = -np.concatenate([b.ravel() for b in base])
    cols = []
    coords: list[tuple[int, int, int]] = []
    for ui, (shape, mask) in enumerate(zip(shapes, masks)):
        for i in range(shape[0]):
            for j in range(shape[1]):
                if not mask[i, j]:
                    continue
                probe = [np.zeros(s) for s in shapes]
                probe[ui][i, j] = 1.0
                out = apply_map(probe)
                col = np.concatenate([(o - b).ravel() for o, b in zip(out, base)])
                cols.append(col)
                coords.append((ui, i, j))
    a = np.stack(cols, axis=1)
    sol, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    resid = a @ sol - rhs
    if np.linalg.norm(resid) > 1e-8 * max(1.0, np.linalg.norm(rhs)):
        raise OracleError("reference linear system inconsistent")
    outs = [np.zeros(s) for s in shapes]
    for val, (ui, i, j) in zip(sol, coords):
        outs[ui][i, j] = val
    return outs


def ref_sylvester(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """AX + XB = C via Kronecker vectorization (column-major vec)."""
    n, m = c.shape
    k = np.kron(np.eye(m), a) + np.kron(b.T, np.eye(n))
    x = np.linalg.solve(k, c.flatten(order="F"))
    return x.reshape((n, m), order="F")


def ref_coupled_sylvester(a, b, c, d, e, f) -> tuple[np.ndarray, np.ndarray]:
    """AX + YB = C and DX + YE = F."""
    n, m = c.shape
    i_m, i_n = np.eye(m), np.eye(n)
    top = np.hstack([np.kron(i_m, a), np.kron(b.T, i_n)])
    bot = np.hstack([np.kron(i_m, d), np.kron(e.T, i_n)])
    k = np.vstack([top, bot])
    rhs = np.concatenate([c.flatten(order="F"), f.flatten(order="F")])
    sol = np.linalg.solve(k, rhs)
    x = sol[: n * m].reshape((n, m), order="F")
    y = sol[n * m:].reshape((n, m), order="F")
    return x, y


def ref_gchol(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve G·Lᵀ + L·Gᵀ = B for lower-triangular G."""
    n = l.shape[0]
    mask = np.tril(np.ones((n, n), dtype=bool))

    def apply_map(unknowns: list[np.ndarray]) -> list[np.ndarray]:
        g = unknowns[0]
        return [g @ l.T + l @ g.T - b]

    return solve_linear_entries(apply_map, [(n, n)], [mask])[0]


def rel_error(got: np.ndarray, want: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(want)), 1e-30)
    return float(np.linalg.norm(np.asarray(got) - np.asarray(want)) / denom)


@dataclass
class VerifyReport:
    trials: int
    tol: float
    errors: list[float]
    flops: list[float]
    passed: bool

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def verify(run_program: Callable[[int], dict[str, np.ndarray]],
           run_reference: Callable[[int], dict[str, np.ndarray]],
           trials: int = 5, tol: float = 1e-9, seed: int = 0) -> VerifyReport:
    """Compare program vs reference over seeded trials (relative Frobenius)."""
    errors: list[float] = []
    flops: list[float] = []
    for k in range(trials):
        s = seed + k
        got = run_program(s)
        want = run_reference(s)
        worst = 0.0
        for name, ref in want.items():
            if name not in got:
                raise OracleError(f"program produced no output {name}")
            worst = max(worst, rel_error(got[name], ref))
        errors.append(worst)
        flops.append(float(got.get("__flops__", np.zeros(1)).ravel()[0]) if "__flops__" in got else 0.0)
    return VerifyReport(trials, tol, errors, flops, all(e <= tol for e in errors))
