"""Minimal LP/SOCP abstraction compiled to the Clarabel interior-point solver.

A :class:`ConicProgram` holds a linear objective, variable bounds, sparse
linear (in)equalities and second-order cones ``||G x + h|| <= c.x + d``.  LPs
are simply programs without cones.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

from .errors import SolverFailure

DEFAULT_TOL = 1e-8
RELAXED_TOL = 1e-4
FEAS_TOL = 1e-6


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class Solution:
    status: Status
    x: np.ndarray | None
    objective: float | None
    iterations: int = 0
    solve_time: float = 0.0
    primal_residual: float = float("nan")
    gap: float = float("nan")
    tolerance: float = DEFAULT_TOL

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL

    def value(self, idx) -> np.ndarray:
        return self.x[np.asarray(idx)]


def _as_coo(A, ncols=None):
    if sp.issparse(A):
        A = A.tocoo()
    else:
        A = sp.coo_matrix(np.atleast_2d(np.asarray(A, float)))
    return A


@dataclass
class _Block:
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    rhs: np.ndarray


@dataclass
class ConicProgram:
    sense: str = "min"
    n: int = 0
    c: list = field(default_factory=list)
    lb: list = field(default_factory=list)
    ub: list = field(default_factory=list)
    eq: list = field(default_factory=list)
    le: list = field(default_factory=list)
    cones: list = field(default_factory=list)
    objective_offset: float = 0.0

    def __post_init__(self):
        if self.sense not in ("min", "max"):
            raise ValueError(f"sense must be 'min' or 'max', got {self.sense!r}")

    # --- variables and objective ---------------------------------------
    def add_variables(self, shape, lb=-np.inf, ub=np.inf) -> np.ndarray:
        count = int(np.prod(shape))
        idx = np.arange(self.n, self.n + count)
        self.n += count
        self.c.append(np.zeros(count))
        self.lb.append(np.broadcast_to(np.asarray(lb, float), (count,)).copy()
                       if np.ndim(lb) == 0 else np.asarray(lb, float).reshape(count))
        self.ub.append(np.broadcast_to(np.asarray(ub, float), (count,)).copy()
                       if np.ndim(ub) == 0 else np.asarray(ub, float).reshape(count))
        return idx.reshape(shape)

    def add_objective(self, idx, coef):
        idx = np.asarray(idx).ravel()
        coef = np.broadcast_to(np.asarray(coef, float), idx.shape)
        c = self._flat(self.c)
        np.add.at(c, idx, coef)
        self.c = [c]

    @staticmethod
    def _flat(parts):
        return np.concatenate(parts) if parts else np.zeros(0)

    # --- constraints ---------------------------------------------------
    def _block(self, rows, cols, vals, rhs):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, float).ravel()
        rhs = np.atleast_1d(np.asarray(rhs, float)).ravel()
        if cols.size and cols.max() >= self.n:
            raise IndexError("constraint references an unknown variable")
        if rows.size and rows.max() >= rhs.size:
            raise IndexError("constraint row index exceeds right-hand side length")
        return _Block(rows, cols, vals, rhs)

    def add_eq(self, rows, cols, vals, rhs):
        """sum_j vals * x[cols] == rhs, grouped by local row index."""
        self.eq.append(self._block(rows, cols, vals, rhs))

    def add_le(self, rows, cols, vals, rhs):
        self.le.append(self._block(rows, cols, vals, rhs))

    def add_eq_matrix(self, A, idx, rhs):
        A = _as_coo(A)
        idx = np.asarray(idx).ravel()
        self.add_eq(A.row, idx[A.col], A.data, rhs)

    def add_le_matrix(self, A, idx, rhs):
        A = _as_coo(A)
        idx = np.asarray(idx).ravel()
        self.add_le(A.row, idx[A.col], A.data, rhs)

    def add_soc(self, G_rows, G_cols, G_vals, h, c_cols, c_vals, d):
        """||G x + h||_2 <= c.x + d with G given as triplets."""
        h = np.atleast_1d(np.asarray(h, float))
        G = self._block(G_rows, G_cols, G_vals, h)
        c_cols = np.asarray(c_cols, dtype=np.int64).ravel()
        if c_cols.size and c_cols.max() >= self.n:
            raise IndexError("cone scalar references an unknown variable")
        self.cones.append((G, c_cols, np.asarray(c_vals, float).ravel(), float(d)))

    @property
    def num_cones(self) -> int:
        return len(self.cones)

    # --- compilation ---------------------------------------------------
    def _stack(self, blocks):
        rows, cols, vals, rhs, off = [], [], [], [], 0
        for b in blocks:
            rows.append(b.rows + off)
            cols.append(b.cols)
            vals.append(b.vals)
            rhs.append(b.rhs)
            off += b.rhs.size
        if not blocks:
            return sp.csr_matrix((0, self.n)), np.zeros(0)
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(off, self.n))
        return A, np.concatenate(rhs)

    def compile(self):
        """Clarabel standard form: A x + s = b, s in K."""
        lb, ub = self._flat(self.lb), self._flat(self.ub)
        A_eq, b_eq = self._stack(self.eq)
        A_le, b_le = self._stack(self.le)
        eye = sp.identity(self.n, format="csr")
        has_ub, has_lb = np.isfinite(ub), np.isfinite(lb)
        A_nn = sp.vstack([A_le, eye[has_ub], -eye[has_lb]], format="csr")
        b_nn = np.concatenate([b_le, ub[has_ub], -lb[has_lb]])
        mats, rhs, cones = [A_eq, A_nn], [b_eq, b_nn], []
        if A_eq.shape[0]:
            cones.append(clarabel.ZeroConeT(A_eq.shape[0]))
        if A_nn.shape[0]:
            cones.append(clarabel.NonnegativeConeT(A_nn.shape[0]))
        for G, c_cols, c_vals, d in self.cones:
            m = G.rhs.size
            Gm = sp.csr_matrix((G.vals, (G.rows, G.cols)), shape=(m, self.n))
            cvec = sp.csr_matrix((c_vals, (np.zeros_like(c_cols), c_cols)), shape=(1, self.n))
            # s = b - A x = [d + c.x; h + G x] must lie in the cone
            mats.append(sp.vstack([-cvec, -Gm]))
            rhs.append(np.concatenate([[d], G.rhs]))
            cones.append(clarabel.SecondOrderConeT(m + 1))
        A = sp.vstack(mats, format="csc")
        b = np.concatenate(rhs)
        c = self._flat(self.c)
        if self.sense == "max":
            c = -c
        return c, A, b, cones

    # --- diagnostics ---------------------------------------------------
    def max_residual(self, x) -> float:
        """Largest row-scaled primal violation over all constraints."""
        worst = 0.0
        for blocks, kind in ((self.eq, "eq"), (self.le, "le")):
            A, b = self._stack(blocks)
            if not A.shape[0]:
                continue
            r = A @ x - b
            r = np.abs(r) if kind == "eq" else np.maximum(r, 0.0)
            scale = np.maximum(1.0, np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel()))
            worst = max(worst, float(np.max(r / scale)))
        lb, ub = self._flat(self.lb), self._flat(self.ub)
        if self.n:
            worst = max(worst, float(np.max(np.maximum(lb - x, 0.0), initial=0.0)),
                        float(np.max(np.maximum(x - ub, 0.0), initial=0.0)))
        for G, c_cols, c_vals, d in self.cones:
            m = G.rhs.size
            Gm = sp.csr_matrix((G.vals, (G.rows, G.cols)), shape=(m, self.n))
            lhs = np.linalg.norm(Gm @ x + G.rhs)
            rhs = float(c_vals @ x[c_cols]) + d
            scale = max(1.0, float(np.sqrt(np.linalg.norm(c_vals) ** 2 + sp.linalg.norm(Gm) ** 2)))
            worst = max(worst, max(lhs - rhs, 0.0) / scale)
        return worst

    def objective_value(self, x) -> float:
        return float(self._flat(self.c) @ x) + self.objective_offset


_STATUS = {
    "Solved": Status.OPTIMAL,
    "PrimalInfeasible": Status.INFEASIBLE,
    "AlmostPrimalInfeasible": Status.INFEASIBLE,
    "DualInfeasible": Status.UNBOUNDED,
    "AlmostDualInfeasible": Status.UNBOUNDED,
}


def _solve_once(program: ConicProgram, tol: float, max_iter: int) -> Solution:
    c, A, b, cones = program.compile()
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_threads = 1
    settings.max_iter = max_iter
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_ktratio = min(1e-6, tol * 100)
    P = sp.csc_matrix((program.n, program.n))
    start = time.perf_counter()
    raw = clarabel.DefaultSolver(P, c, A, b, cones, settings).solve()
    elapsed = time.perf_counter() - start
    status = _STATUS.get(str(raw.status), Status.NUMERICAL_FAILURE)
    if status is not Status.OPTIMAL:
        return Solution(status, None, None, raw.iterations, elapsed, tolerance=tol)
    # interior-point iterates sit marginally outside tight bounds; fixed variables become exact
    x = np.clip(np.asarray(raw.x, float), program._flat(program.lb), program._flat(program.ub))
    resid = program.max_residual(x)
    gap = abs(raw.obj_val - raw.obj_val_dual) / max(1.0, abs(raw.obj_val))
    if resid > max(FEAS_TOL, tol) or gap > max(FEAS_TOL, tol):
        status = Status.NUMERICAL_FAILURE
        return Solution(status, None, None, raw.iterations, elapsed, resid, gap, tol)
    return Solution(status, x, program.objective_value(x), raw.iterations, elapsed, resid, gap, tol)


def solve(program: ConicProgram, tol: float = DEFAULT_TOL, max_iter: int = 200,
          retry: bool = True) -> Solution:
    """Solve ``program``; one retry at the relaxed tolerance on numerical failure."""
    sol = _solve_once(program, tol, max_iter)
    if sol.status is Status.NUMERICAL_FAILURE and retry and tol < RELAXED_TOL:
        sol = _solve_once(program, RELAXED_TOL, max_iter)
    return sol


def solve_or_raise(program: ConicProgram, what: str = "program", **kwargs) -> Solution:
    sol = solve(program, **kwargs)
    if not sol.ok:
        raise SolverFailure(f"{what}: solver returned {sol.status.value}", sol.status)
    return sol


def to_lp_format(program: ConicProgram) -> str:
    """CPLEX LP text of a cone-free program, for cross-checking elsewhere."""
    if program.cones:
        raise ValueError("LP text export supports programs without cones only")
    c = ConicProgram._flat(program.c)
    lb, ub = ConicProgram._flat(program.lb), ConicProgram._flat(program.ub)

    def expr(coefs):
        terms = [f"{'+' if v >= 0 else '-'} {abs(v):.17g} x{j}" for j, v in coefs if v != 0]
        return " ".join(terms) if terms else "0 x0"

    lines = ["Maximize" if program.sense == "max" else "Minimize",
             " obj: " + expr(enumerate(c)), "Subject To"]
    for blocks, op, tag in ((program.eq, "=", "e"), (program.le, "<=", "l")):
        A, b = program._stack(blocks)
        A = A.tocsr()
        for r in range(A.shape[0]):
            row = A.getrow(r)
            lines.append(f" {tag}{r}: {expr(zip(row.indices, row.data))} {op} {b[r]:.17g}")
    lines.append("Bounds")
    for j in range(program.n):
        lo = "-inf" if not np.isfinite(lb[j]) else f"{lb[j]:.17g}"
        hi = "+inf" if not np.isfinite(ub[j]) else f"{ub[j]:.17g}"
        lines.append(f" {lo} <= x{j} <= {hi}")
    lines.append("End")
    return "\n".join(lines) + "\n"
