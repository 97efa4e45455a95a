"""Numeric checks for compiled output.

Runs a compiled algorithm on random property-respecting instances and
compares every model output against direct evaluation of the source
equations (matrix inverses and all).  The two routes share nothing but the
input arrays: the algorithm goes through kernel semantics and the in-house
factorizations, the reference through plain dense arithmetic.
"""

from __future__ import annotations

import zlib
from typing import Iterable, Optional

import numpy as np

from .compiler import solved_equations
from .expr import IO, Equation, Kind, Leaf, Operand, Property
from .oracle import (
    OracleError,
    Store,
    VerifyReport,
    eval_expr,
    exec_algorithm,
    random_instance,
    verify,
)
from .parser import EquationModel

# small prime-ish spread of admissible sizes; verification stays dense-exact
SIZE_PALETTE = (7, 4, 9, 5, 11, 6, 8, 3, 10, 12)
PANEL_NARROW = 3  # panels stay strictly rectangular and skinny


def _rep_label(env, d) -> str:
    return env.find(d).label


def assign_sizes(model: EquationModel, seed: int = 0) -> dict[str, int]:
    """Concrete size per dimension class; panel minor dims kept narrow."""
    env = model.env
    labels: list[str] = []
    for _, op in sorted(model.operands.items()):
        for d in (op.rows, op.cols):
            if d is None:
                continue
            lab = _rep_label(env, d)
            if lab not in labels:
                labels.append(lab)
    one = _rep_label(env, env.one)
    sizes: dict[str, int] = {one: 1}
    for i, lab in enumerate(sorted(labels)):
        if lab not in sizes:
            sizes[lab] = SIZE_PALETTE[(i + seed) % len(SIZE_PALETTE)]
    for _, op in sorted(model.operands.items()):
        narrow = None
        if Property.COLUMN_PANEL in op.props:
            narrow = op.cols
        elif Property.ROW_PANEL in op.props:
            narrow = op.rows
        if narrow is None:
            continue
        wide = op.rows if narrow is op.cols else op.cols
        w = sizes[_rep_label(env, wide)]
        n = PANEL_NARROW + (seed % PANEL_NARROW)
        if n >= w:
            n = max(1, w - 1)
        sizes[_rep_label(env, narrow)] = n
    return sizes


def operand_shape(op: Operand, env, sizes: dict[str, int]) -> tuple[int, int]:
    if op.rows is None or op.cols is None:
        raise OracleError(f"operand {op.name} has unbound dimensions")
    return sizes[_rep_label(env, op.rows)], sizes[_rep_label(env, op.cols)]


def _op_seed(seed: int, name: str) -> int:
    return (seed * 9973 + zlib.crc32(name.encode())) % (2**31 - 1)


def build_store(model: EquationModel, sizes: dict[str, int], seed: int) -> Store:
    store = Store()
    for name, op in sorted(model.operands.items()):
        if op.io not in (IO.INPUT, IO.INOUT):
            continue
        r, c = operand_shape(op, model.env, sizes)
        store.set(name, random_instance(op, r, c, _op_seed(seed, name)))
    store.set("I", np.array([[1.0]]))
    store.freeze_initial()
    return store


def _props_hold(val: np.ndarray, props: frozenset[Property]) -> bool:
    if val.shape[0] != val.shape[1]:
        return True
    if Property.SYMMETRIC in props or Property.SPD in props:
        if not np.allclose(val, val.T, atol=1e-10):
            return False
    if Property.SPD in props:
        if np.linalg.eigvalsh((val + val.T) / 2).min() <= 1e-8:
            return False
    if Property.FULL_RANK in props:
        if np.linalg.matrix_rank(val) < val.shape[0]:
            return False
    return True


def model_inputs(model: EquationModel, seed: int) -> Store:
    """Random inputs under which every declared intermediate property holds."""
    eqs = solved_equations(model)
    for attempt in range(64):
        s = seed + 1013 * attempt
        store = build_store(model, assign_sizes(model, s), s)
        probe = store.copy()
        ok = True
        for eq in eqs:
            lf = eq.lhs
            assert isinstance(lf, Leaf)
            try:
                val = eval_expr(eq.rhs, probe)
            except (OracleError, np.linalg.LinAlgError):
                ok = False
                break
            probe.set(lf.op.name, val)
            if lf.op.io is IO.INTERMEDIATE and not _props_hold(val, lf.op.props):
                ok = False
                break
        if ok:
            return store
    raise OracleError(f"no admissible instance for {model.name} near seed {seed}")


def reference_outputs(model: EquationModel, store: Store) -> dict[str, np.ndarray]:
    s = store.copy()
    out: dict[str, np.ndarray] = {}
    for eq in solved_equations(model):
        lf = eq.lhs
        assert isinstance(lf, Leaf)
        val = eval_expr(eq.rhs, s)
        s.set(lf.op.name, val)
        if lf.op.io in (IO.OUTPUT, IO.INOUT):
            out[lf.op.name] = val
    return out


def run_algorithm(model: EquationModel, stmts: Iterable, store: Store,
                  idxmap: Optional[dict[str, int]] = None,
                  trip_sizes: Optional[dict[str, int]] = None) -> dict[str, np.ndarray]:
    s = store.copy()
    exec_algorithm(stmts, s, idxmap=idxmap, trip_sizes=trip_sizes)
    out: dict[str, np.ndarray] = {}
    for name, op in model.operands.items():
        if op.io in (IO.OUTPUT, IO.INOUT):
            out[name] = s.get(name)
    return out


def verify_algorithm(model: EquationModel, stmts: Iterable,
                     trials: int = 5, tol: float = 1e-9,
                     seed: int = 0) -> VerifyReport:
    def run_prog(s: int) -> dict[str, np.ndarray]:
        return run_algorithm(model, stmts, model_inputs(model, s))

    def run_ref(s: int) -> dict[str, np.ndarray]:
        return reference_outputs(model, model_inputs(model, s))

    return verify(run_prog, run_ref, trials=trials, tol=tol, seed=seed)


# ---------------------------------------------------------------------------
# Grids of problem instances


def declared_subs(model: EquationModel) -> dict[str, tuple[str, ...]]:
    return {name: tuple(sorted(op.subscripts))
            for name, op in model.operands.items() if op.subscripts}


def _cells(indices: Iterable[str], trips: dict[str, int]):
    indices = tuple(indices)
    for vals in np.ndindex(*(trips[ix] for ix in indices)):
        yield dict(zip(indices, (int(v) for v in vals)))


def build_grid_store(model: EquationModel, sizes: dict[str, int],
                     trips: dict[str, int], seed: int) -> Store:
    """One array per declared instance: subscripted inputs get a full grid."""
    subs = declared_subs(model)
    store = Store()
    for name, op in sorted(model.operands.items()):
        if op.io not in (IO.INPUT, IO.INOUT):
            continue
        r, c = operand_shape(op, model.env, sizes)
        for cell in _cells(subs.get(name, ()), trips):
            idx = tuple(cell[ix] for ix in subs.get(name, ()))
            key = Store.key(name, idx)
            store.set(name, random_instance(op, r, c, _op_seed(seed, key)), idx)
    store.set("I", np.array([[1.0]]))
    store.freeze_initial()
    return store


def cell_store(model: EquationModel, grid: Store, cell: dict[str, int]) -> Store:
    """Single-instance view of one grid cell (plain operand names)."""
    subs = declared_subs(model)
    store = Store()
    for name, op in model.operands.items():
        if op.io not in (IO.INPUT, IO.INOUT):
            continue
        idx = tuple(cell[ix] for ix in subs.get(name, ()))
        store.set(name, grid.get(name, idx).copy())
    store.set("I", np.array([[1.0]]))
    store.freeze_initial()
    return store


def _grid_admissible(model: EquationModel, grid: Store,
                     trips: dict[str, int]) -> bool:
    eqs = solved_equations(model)
    indices = sorted({ix for s in declared_subs(model).values() for ix in s})
    for cell in _cells(indices, trips):
        probe = cell_store(model, grid, cell)
        for eq in eqs:
            lf = eq.lhs
            assert isinstance(lf, Leaf)
            try:
                val = eval_expr(eq.rhs, probe)
            except (OracleError, np.linalg.LinAlgError):
                return False
            probe.set(lf.op.name, val)
            if lf.op.io is IO.INTERMEDIATE and not _props_hold(val, lf.op.props):
                return False
    return True


def grid_inputs(model: EquationModel, trips: dict[str, int], seed: int) -> Store:
    for attempt in range(64):
        s = seed + 1013 * attempt
        grid = build_grid_store(model, assign_sizes(model, s), trips, s)
        if _grid_admissible(model, grid, trips):
            return grid
    raise OracleError(f"no admissible grid instance for {model.name} near seed {seed}")


def _output_subs(model: EquationModel, nest) -> dict[str, tuple[str, ...]]:
    """Grid subscripts each output carries in the hoisted nest."""
    out = {name: () for name, op in model.operands.items()
           if op.io in (IO.OUTPUT, IO.INOUT)}
    for st in nest.statements():
        for o in st.outs:
            if o.op.name in out:
                out[o.op.name] = o.sub
    return out


def run_nest(model: EquationModel, nest, store: Store,
             trips: dict[str, int]) -> dict[str, np.ndarray]:
    s = store.copy()
    exec_algorithm(nest.items, s, trip_sizes=trips)
    out: dict[str, np.ndarray] = {}
    for name, sub in _output_subs(model, nest).items():
        for cell in _cells(sub, trips):
            idx = tuple(cell[ix] for ix in sub)
            out[Store.key(name, idx)] = s.get(name, idx)
    return out


def _per_cell(model: EquationModel, store: Store, trips: dict[str, int],
              out_subs: dict[str, tuple[str, ...]],
              run_one) -> dict[str, np.ndarray]:
    indices = sorted({ix for s in out_subs.values() for ix in s}
                     | {ix for s in declared_subs(model).values() for ix in s})
    out: dict[str, np.ndarray] = {}
    for cell in _cells(indices, trips):
        res = run_one(cell_store(model, store, cell))
        for name, val in res.items():
            idx = tuple(cell[ix] for ix in out_subs.get(name, ()))
            out[Store.key(name, idx)] = val
    return out


def grid_reference(model: EquationModel, store: Store, trips: dict[str, int],
                   out_subs: dict[str, tuple[str, ...]]) -> dict[str, np.ndarray]:
    """Brute-force per-cell evaluation of the source equations."""
    return _per_cell(model, store, trips, out_subs,
                     lambda cs: reference_outputs(model, cs))


def verify_nest(model: EquationModel, nest, trips: dict[str, int],
                trials: int = 5, tol: float = 1e-9,
                seed: int = 0) -> VerifyReport:
    out_subs = _output_subs(model, nest)

    def run_prog(s: int) -> dict[str, np.ndarray]:
        return run_nest(model, nest, grid_inputs(model, trips, s), trips)

    def run_ref(s: int) -> dict[str, np.ndarray]:
        return grid_reference(model, grid_inputs(model, trips, s), trips, out_subs)

    return verify(run_prog, run_ref, trials=trials, tol=tol, seed=seed)


def nest_matches_cells(model: EquationModel, nest, stmts: Iterable,
                       trips: dict[str, int], trials: int = 3,
                       tol: float = 1e-9, seed: int = 0) -> VerifyReport:
    """Hoisted-nest execution vs the single-instance algorithm per cell."""
    out_subs = _output_subs(model, nest)

    def run_prog(s: int) -> dict[str, np.ndarray]:
        return run_nest(model, nest, grid_inputs(model, trips, s), trips)

    def run_cells(s: int) -> dict[str, np.ndarray]:
        return _per_cell(model, grid_inputs(model, trips, s), trips, out_subs,
                         lambda cs: run_algorithm(model, stmts, cs))

    return verify(run_prog, run_cells, trials=trials, tol=tol, seed=seed)
