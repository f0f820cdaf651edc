"""Sparse LP container and solvers returning primal and dual solutions.

Everything downstream (grid OPF, storage scheduling, the planning master)
is written against the small contract in this module:

* :class:`LpProblem`   -- min c'x s.t. A_in x {<=,>=} b_in, A_eq x = b_eq,
                          lb <= x <= ub, with optional row/column names.
* :func:`solve_lp`     -- solve with the in-repo bounded-variable revised
                          simplex or the HiGHS backend; both return duals
                          in the dJ*/db convention per row.
* :func:`check_solution` -- independent optimality certificate (primal
                          feasibility, dual feasibility, complementary
                          slackness, strong duality).
* :func:`dump_lp`      -- write a fixed-format LP text file for
                          cross-checking against external solvers.

Dual sign convention (minimization): a "<=" row has dual <= 0, a ">=" row
has dual >= 0, and equality duals are unrestricted; in every case the dual
equals the sensitivity dJ*/db of the optimal objective to that row's
right-hand side.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, lu_factor, lu_solve

__all__ = [
    "LpStatus",
    "LpProblem",
    "LpSolution",
    "SolverConfig",
    "CertificateReport",
    "NumericalBreakdown",
    "solve_lp",
    "check_solution",
    "dump_lp",
]


class NumericalBreakdown(RuntimeError):
    """Basis factorization failed beyond the configured refactorization retries."""


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


LE = "<="
GE = ">="


@dataclass
class LpProblem:
    """min c'x subject to row-wise ineq/eq constraints and variable bounds.

    Args:
        c: cost vector, one entry per column.
        a_in: inequality matrix (scipy sparse or dense); may have 0 rows.
        b_in: inequality right-hand sides.
        senses: per-row sense, each "<=" or ">=" (stored explicitly).
        a_eq: equality matrix; may have 0 rows.
        b_eq: equality right-hand sides.
        lb, ub: per-variable bounds, -inf/+inf allowed.
        col_names / row_names_in / row_names_eq: optional labels used in
            diagnostics and the LP-file dump.
    """

    c: np.ndarray
    a_in: sp.csr_matrix
    b_in: np.ndarray
    senses: list
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    col_names: Optional[Sequence[str]] = None
    row_names_in: Optional[Sequence[str]] = None
    row_names_eq: Optional[Sequence[str]] = None

    @classmethod
    def build(cls, c, a_in=None, b_in=None, senses=None, a_eq=None, b_eq=None,
              lb=None, ub=None, col_names=None, row_names_in=None, row_names_eq=None):
        """Normalize plain arrays/lists into a validated LpProblem."""
        c = np.asarray(c, dtype=float).ravel()
        n = c.size
        if a_in is None:
            a_in = sp.csr_matrix((0, n))
            b_in = np.zeros(0)
            senses = []
        else:
            a_in = sp.csr_matrix(a_in, dtype=float)
            b_in = np.asarray(b_in, dtype=float).ravel()
            senses = list(senses)
        if a_eq is None:
            a_eq = sp.csr_matrix((0, n))
            b_eq = np.zeros(0)
        else:
            a_eq = sp.csr_matrix(a_eq, dtype=float)
            b_eq = np.asarray(b_eq, dtype=float).ravel()
        lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float).ravel()
        ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float).ravel()
        prob = cls(c, a_in, b_in, senses, a_eq, b_eq, lb, ub,
                   col_names, row_names_in, row_names_eq)
        prob.validate()
        return prob

    @property
    def n_cols(self) -> int:
        return self.c.size

    @property
    def n_rows(self) -> int:
        return self.a_in.shape[0] + self.a_eq.shape[0]

    def validate(self):
        n = self.n_cols
        if self.a_in.shape[1] != n or self.a_eq.shape[1] != n:
            raise ValueError(
                f"column mismatch: c has {n}, A_in has {self.a_in.shape[1]}, "
                f"A_eq has {self.a_eq.shape[1]}")
        if self.a_in.shape[0] != self.b_in.size or len(self.senses) != self.b_in.size:
            raise ValueError("inequality row count mismatch between A_in, b_in, senses")
        if self.a_eq.shape[0] != self.b_eq.size:
            raise ValueError("equality row count mismatch between A_eq and b_eq")
        for s in self.senses:
            if s not in (LE, GE):
                raise ValueError(f"unknown row sense {s!r}")
        for name, arr in (("c", self.c), ("b_in", self.b_in), ("b_eq", self.b_eq)):
            if arr.size and not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
        for name, mat in (("A_in", self.a_in), ("A_eq", self.a_eq)):
            if mat.nnz and not np.all(np.isfinite(mat.data)):
                raise ValueError(f"non-finite entries in {name}")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bound length mismatch")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise ValueError("NaN in bounds")
        if np.any(self.lb > self.ub):
            j = int(np.argmax(self.lb > self.ub))
            raise ValueError(f"lb > ub for column {j}")


@dataclass
class LpSolution:
    status: LpStatus
    primal: Optional[np.ndarray] = None
    duals_in: Optional[np.ndarray] = None      # one per inequality row, dJ*/db
    duals_eq: Optional[np.ndarray] = None      # one per equality row, dJ*/db
    objective_value: float = float("nan")
    iterations: int = 0
    backend: str = ""


@dataclass
class SolverConfig:
    backend: str = "auto"          # "auto" | "simplex" | "highs"
    feas_tol: float = 1e-7
    opt_tol: float = 1e-6
    pivot_tol: float = 1e-9
    max_iter: int = 50000
    bland_threshold: int = 50      # consecutive degenerate pivots before Bland's rule
    refactor_every: int = 64
    # problems at or below these sizes run on the in-repo simplex under "auto"
    auto_simplex_cols: int = 200
    auto_simplex_rows: int = 400


@dataclass
class CertificateReport:
    max_primal_residual: float
    max_dual_residual: float
    max_complementarity: float
    duality_gap: float
    passed: bool


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def solve_lp(problem: LpProblem, config: Optional[SolverConfig] = None) -> LpSolution:
    """Solve an LP, returning primal values and per-row duals.

    Backend selection: "simplex" is the in-repo bounded-variable revised
    simplex (exact vertex solutions, deterministic pivot path), "highs"
    delegates to scipy's HiGHS wrapper for large instances, and "auto"
    picks the simplex for small problems and HiGHS beyond the size
    thresholds in the config.
    """
    config = config or SolverConfig()
    problem.validate()
    backend = config.backend
    if backend == "auto":
        small = (problem.n_cols <= config.auto_simplex_cols
                 and problem.n_rows <= config.auto_simplex_rows)
        backend = "simplex" if small else "highs"
    if backend == "simplex":
        return _RevisedSimplex(problem, config).solve()
    if backend == "highs":
        return _solve_highs(problem, config)
    raise ValueError(f"unknown backend {config.backend!r}")


def check_solution(problem: LpProblem, solution: LpSolution,
                   feas_tol: float = 1e-7, dual_tol: float = 1e-6,
                   comp_tol: float = 1e-6) -> CertificateReport:
    """Certify an Optimal solution: feasibility, dual signs, slackness, gap.

    Report-only; never raises on a failed certificate.
    """
    x = solution.primal
    lam_in = solution.duals_in if solution.duals_in is not None else np.zeros(0)
    lam_eq = solution.duals_eq if solution.duals_eq is not None else np.zeros(0)

    # primal residuals
    res = [0.0]
    if problem.a_eq.shape[0]:
        res.append(float(np.max(np.abs(problem.a_eq @ x - problem.b_eq))))
    slack = np.zeros(0)
    if problem.a_in.shape[0]:
        ax = problem.a_in @ x
        sgn = np.array([1.0 if s == LE else -1.0 for s in problem.senses])
        # violation is positive when the row is broken, slack >= 0 when satisfied
        slack = sgn * (problem.b_in - ax)
        res.append(float(np.max(np.maximum(-slack, 0.0), initial=0.0)))
    res.append(float(np.max(np.maximum(problem.lb - x, 0.0), initial=0.0)))
    res.append(float(np.max(np.maximum(x - problem.ub, 0.0), initial=0.0)))
    max_primal = max(res)

    # dual feasibility: reduced costs and sign conventions
    d = problem.c.copy()
    if problem.a_in.shape[0]:
        d -= problem.a_in.T @ lam_in
    if problem.a_eq.shape[0]:
        d -= problem.a_eq.T @ lam_eq
    dual_res = 0.0
    for i, s in enumerate(problem.senses):
        # dJ/db <= 0 for "<=" rows, >= 0 for ">=" rows in a minimization
        bad = lam_in[i] if s == LE else -lam_in[i]
        dual_res = max(dual_res, float(bad))
    at_lb = x <= problem.lb + feas_tol * (1 + np.abs(problem.lb.clip(-1e300, 1e300)))
    at_ub = x >= problem.ub - feas_tol * (1 + np.abs(problem.ub.clip(-1e300, 1e300)))
    interior = ~(at_lb | at_ub)
    if np.any(interior):
        dual_res = max(dual_res, float(np.max(np.abs(d[interior]))))
    if np.any(at_lb & ~at_ub):
        dual_res = max(dual_res, float(np.max(-d[at_lb & ~at_ub])))
    if np.any(at_ub & ~at_lb):
        dual_res = max(dual_res, float(np.max(d[at_ub & ~at_lb])))

    # complementary slackness on inequality rows
    comp = 0.0
    if slack.size:
        comp = float(np.max(np.abs(lam_in * slack)))

    # strong duality: c'x versus b'lambda plus bound terms
    primal_obj = float(problem.c @ x)
    dual_obj = float(problem.b_in @ lam_in) + float(problem.b_eq @ lam_eq)
    # Reduced cost > 0 pins x at its lower bound, < 0 at its upper bound.
    # Terms on infinite bounds are dropped: a genuinely nonzero reduced cost
    # there is a dual-feasibility violation already captured above, while a
    # round-off residual would otherwise turn the gap into inf * eps.
    pos = (d > 0) & np.isfinite(problem.lb)
    neg = (d < 0) & np.isfinite(problem.ub)
    dual_obj += float(np.sum(problem.lb[pos] * d[pos])) + float(np.sum(problem.ub[neg] * d[neg]))
    gap = abs(primal_obj - dual_obj)

    scale = 1.0 + abs(primal_obj)
    passed = (max_primal <= feas_tol * scale
              and dual_res <= dual_tol * scale
              and comp <= comp_tol * scale
              and gap <= dual_tol * scale)
    return CertificateReport(max_primal, dual_res, comp, gap, passed)


def dump_lp(problem: LpProblem, path):
    """Write the problem as a fixed-format LP text file (external cross-checks)."""
    n = problem.n_cols
    cn = list(problem.col_names) if problem.col_names else [f"x{j}" for j in range(n)]

    def terms(row):
        parts = []
        for j, v in zip(row.indices, row.data):
            parts.append(f"{'+' if v >= 0 else '-'} {abs(v):.17g} {cn[j]}")
        return " ".join(parts) if parts else "0 " + cn[0]

    lines = ["Minimize", " obj: " + terms(sp.csr_matrix(problem.c)), "Subject To"]
    rn_in = (list(problem.row_names_in) if problem.row_names_in
             else [f"r{i}" for i in range(problem.a_in.shape[0])])
    rn_eq = (list(problem.row_names_eq) if problem.row_names_eq
             else [f"e{i}" for i in range(problem.a_eq.shape[0])])
    for i in range(problem.a_in.shape[0]):
        op = "<=" if problem.senses[i] == LE else ">="
        lines.append(f" {rn_in[i]}: {terms(problem.a_in.getrow(i))} {op} {problem.b_in[i]:.17g}")
    for i in range(problem.a_eq.shape[0]):
        lines.append(f" {rn_eq[i]}: {terms(problem.a_eq.getrow(i))} = {problem.b_eq[i]:.17g}")
    lines.append("Bounds")
    for j in range(n):
        lo, hi = problem.lb[j], problem.ub[j]
        if lo == -np.inf and hi == np.inf:
            lines.append(f" {cn[j]} free")
        else:
            lo_s = "-inf" if lo == -np.inf else f"{lo:.17g}"
            hi_s = "+inf" if hi == np.inf else f"{hi:.17g}"
            lines.append(f" {lo_s} <= {cn[j]} <= {hi_s}")
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# HiGHS backend
# ---------------------------------------------------------------------------

def _solve_highs(problem: LpProblem, config: SolverConfig) -> LpSolution:
    from scipy.optimize import linprog

    n_in = problem.a_in.shape[0]
    a_ub = None
    b_ub = None
    if n_in:
        flip = np.array([1.0 if s == LE else -1.0 for s in problem.senses])
        a_ub = sp.diags(flip) @ problem.a_in
        b_ub = flip * problem.b_in
    a_eq = problem.a_eq if problem.a_eq.shape[0] else None
    b_eq = problem.b_eq if problem.a_eq.shape[0] else None
    bounds = np.column_stack([problem.lb, problem.ub])
    res = linprog(problem.c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                  bounds=bounds, method="highs",
                  options={"presolve": True})
    if res.status == 2:
        return LpSolution(LpStatus.INFEASIBLE, backend="highs")
    if res.status == 3:
        return LpSolution(LpStatus.UNBOUNDED, backend="highs")
    if res.status == 1:
        return LpSolution(LpStatus.ITERATION_LIMIT, backend="highs")
    if res.status != 0:
        raise NumericalBreakdown(f"HiGHS reported status {res.status}: {res.message}")

    duals_in = np.zeros(n_in)
    if n_in:
        # marginals follow dJ/db of the flipped (<=) rows; undo the flip
        duals_in = flip * res.ineqlin.marginals
    duals_eq = res.eqlin.marginals if a_eq is not None else np.zeros(0)
    return LpSolution(LpStatus.OPTIMAL, np.asarray(res.x, dtype=float),
                      duals_in, np.asarray(duals_eq, dtype=float),
                      float(res.fun), int(res.nit), "highs")


# ---------------------------------------------------------------------------
# in-repo bounded-variable revised simplex
# ---------------------------------------------------------------------------

_BASIC, _AT_LOWER, _AT_UPPER, _FREE = 0, 1, 2, 3


class _Factorization:
    """LU factors of the basis plus a product-form eta file.

    The basis matrix is refactorized from scratch every ``refactor_every``
    pivots; in between, pivots append eta vectors so solves stay O(m^2).
    """

    def __init__(self, a_full: np.ndarray, refactor_every: int):
        self._a = a_full
        self._every = refactor_every
        self._lu = None
        self._etas = []  # list of (pivot position, w = B^-1 a_enter)

    def refactor(self, basis: np.ndarray):
        mat = self._a[:, basis]
        try:
            self._lu = lu_factor(mat)
        except LinAlgError as exc:  # singular basis
            raise NumericalBreakdown("singular basis during refactorization") from exc
        if not np.all(np.isfinite(self._lu[0])):
            raise NumericalBreakdown("non-finite basis factorization")
        self._etas = []

    @property
    def needs_refactor(self) -> bool:
        return len(self._etas) >= self._every

    def ftran(self, rhs: np.ndarray) -> np.ndarray:
        """Solve B w = rhs."""
        w = lu_solve(self._lu, rhs)
        for p, eta in self._etas:
            wp = w[p] / eta[p]
            w -= eta * wp
            w[p] = wp
        return w

    def btran(self, rhs: np.ndarray) -> np.ndarray:
        """Solve B' y = rhs."""
        y = rhs.astype(float, copy=True)
        for p, eta in reversed(self._etas):
            yp = (y[p] - (eta @ y - eta[p] * y[p])) / eta[p]
            y[p] = yp
        return lu_solve(self._lu, y, trans=1)

    def update(self, pos: int, w: np.ndarray):
        self._etas.append((pos, w.copy()))


class _RevisedSimplex:
    """Two-phase bounded-variable revised simplex on the equality form.

    Inequalities receive one slack each (nonnegative for "<=", nonpositive
    for ">="), so the duals of the equality system are directly the dJ*/db
    sensitivities of the original rows. Dantzig pricing with lowest-index
    tie-breaks keeps the pivot path deterministic; a stall of degenerate
    pivots switches to Bland's rule until progress resumes.
    """

    def __init__(self, problem: LpProblem, config: SolverConfig):
        self.cfg = config
        self.prob = problem
        n = problem.n_cols
        m_in = problem.a_in.shape[0]
        m_eq = problem.a_eq.shape[0]
        self.m = m_in + m_eq
        self.n_struct = n
        self.m_in = m_in

        a = np.zeros((self.m, n + m_in))
        if m_in:
            a[:m_in, :n] = problem.a_in.toarray()
            a[:m_in, n:] = np.eye(m_in)
        if m_eq:
            a[m_in:, :n] = problem.a_eq.toarray()
        self.a = a
        self.b = np.concatenate([problem.b_in, problem.b_eq])

        lo = np.concatenate([problem.lb, np.zeros(m_in)])
        hi = np.concatenate([problem.ub, np.zeros(m_in)])
        for i, s in enumerate(problem.senses):
            if s == LE:
                hi[n + i] = np.inf
            else:
                lo[n + i] = -np.inf
        self.lo = lo
        self.hi = hi
        self.c = np.concatenate([problem.c, np.zeros(m_in)])
        self.n_total = n + m_in
        self.iterations = 0

    # -- setup ------------------------------------------------------------

    def _initial_point(self):
        x = np.zeros(self.n_total)
        status = np.full(self.n_total, _FREE, dtype=np.int8)
        for j in range(self.n_total):
            if np.isfinite(self.lo[j]):
                x[j] = self.lo[j]
                status[j] = _AT_LOWER
            elif np.isfinite(self.hi[j]):
                x[j] = self.hi[j]
                status[j] = _AT_UPPER
        return x, status

    def solve(self) -> LpSolution:
        x, status = self._initial_point()
        resid = self.b - self.a @ x

        # phase 1: artificial columns with sign matching the residual
        n_art = self.m
        a_full = np.hstack([self.a, np.zeros((self.m, n_art))])
        art_sign = np.where(resid >= 0, 1.0, -1.0)
        for i in range(self.m):
            a_full[i, self.n_total + i] = art_sign[i]
        x_full = np.concatenate([x, np.abs(resid)])
        status_full = np.concatenate([status, np.full(n_art, _BASIC, dtype=np.int8)])
        lo_full = np.concatenate([self.lo, np.zeros(n_art)])
        hi_full = np.concatenate([self.hi, np.full(n_art, np.inf)])
        basis = np.arange(self.n_total, self.n_total + n_art)

        c1 = np.zeros(self.n_total + n_art)
        c1[self.n_total:] = 1.0
        fac = _Factorization(a_full, self.cfg.refactor_every)
        fac.refactor(basis)

        st = self._iterate(a_full, c1, lo_full, hi_full, x_full, status_full, basis, fac,
                           phase=1)
        if st is not None:
            return st
        if float(c1 @ x_full) > self.cfg.feas_tol * (1.0 + float(np.abs(self.b).max(initial=0.0))):
            return LpSolution(LpStatus.INFEASIBLE, iterations=self.iterations,
                              backend="simplex")

        # lock any artificials still in the basis at zero and zero their cost
        lo_full[self.n_total:] = 0.0
        hi_full[self.n_total:] = 0.0
        for j in range(self.n_total, self.n_total + n_art):
            if status_full[j] != _BASIC:
                status_full[j] = _AT_LOWER
                x_full[j] = 0.0

        c2 = np.concatenate([self.c, np.zeros(n_art)])
        st = self._iterate(a_full, c2, lo_full, hi_full, x_full, status_full, basis, fac,
                           phase=2)
        if st is not None:
            return st

        # clean the basic values against a fresh factorization before reporting
        fac.refactor(basis)
        nb_mask = status_full != _BASIC
        rhs = self.b - a_full[:, nb_mask] @ x_full[nb_mask]
        x_full[basis] = fac.ftran(rhs)

        y = fac.btran(c2[basis])
        duals_in = y[:self.m_in].copy()
        duals_eq = y[self.m_in:].copy()
        primal = x_full[:self.n_struct].copy()
        obj = float(self.prob.c @ primal)
        return LpSolution(LpStatus.OPTIMAL, primal, duals_in, duals_eq, obj,
                          self.iterations, "simplex")

    # -- main loop ---------------------------------------------------------

    def _iterate(self, a, c, lo, hi, x, status, basis, fac, phase):
        cfg = self.cfg
        degenerate_run = 0
        n_all = a.shape[1]
        cols = np.arange(n_all)
        while True:
            if self.iterations >= cfg.max_iter:
                return LpSolution(LpStatus.ITERATION_LIMIT, iterations=self.iterations,
                                  backend="simplex")
            if fac.needs_refactor:
                fac.refactor(basis)

            y = fac.btran(c[basis])
            d = c - a.T @ y
            use_bland = degenerate_run >= cfg.bland_threshold

            nb = status != _BASIC
            score = np.zeros(n_all)
            lower_mask = nb & (status == _AT_LOWER) & (d < -cfg.opt_tol)
            upper_mask = nb & (status == _AT_UPPER) & (d > cfg.opt_tol)
            free_mask = nb & (status == _FREE) & (np.abs(d) > cfg.opt_tol)
            score[lower_mask] = -d[lower_mask]
            score[upper_mask] = d[upper_mask]
            score[free_mask] = np.abs(d[free_mask])
            candidates = cols[score > 0]
            if candidates.size == 0:
                return None  # optimal for this phase
            if use_bland:
                j_enter = int(candidates[0])
            else:
                j_enter = int(candidates[np.argmax(score[candidates])])

            direction = 1.0
            if status[j_enter] == _AT_UPPER or (status[j_enter] == _FREE and d[j_enter] > 0):
                direction = -1.0

            w = fac.ftran(a[:, j_enter])

            # ratio test over basic variables plus the entering bound span
            t_best = hi[j_enter] - lo[j_enter] if np.isfinite(hi[j_enter] - lo[j_enter]) else np.inf
            leave_pos = -1
            leave_at = _AT_LOWER
            delta = w * direction
            xb = x[basis]
            for i in range(self.m):
                di = delta[i]
                if di > cfg.pivot_tol:
                    ti = (xb[i] - lo[basis[i]]) / di
                    at = _AT_LOWER
                elif di < -cfg.pivot_tol:
                    ti = (hi[basis[i]] - xb[i]) / (-di)
                    at = _AT_UPPER
                else:
                    continue
                if not np.isfinite(ti):
                    continue
                if ti < t_best - 1e-12 or (np.isfinite(t_best) and abs(ti - t_best) <= 1e-12
                                           and (leave_pos < 0 or abs(di) > abs(delta[leave_pos]))):
                    t_best, leave_pos, leave_at = ti, i, at
            if not np.isfinite(t_best):
                if phase == 1:
                    raise NumericalBreakdown("phase-1 subproblem reported unbounded")
                return LpSolution(LpStatus.UNBOUNDED, iterations=self.iterations,
                                  backend="simplex")

            t_best = max(t_best, 0.0)
            degenerate_run = degenerate_run + 1 if t_best <= 1e-12 else 0
            self.iterations += 1

            x[basis] = xb - delta * t_best
            x[j_enter] = x[j_enter] + direction * t_best

            if leave_pos < 0:
                # bound flip: entering variable runs to its opposite bound
                status[j_enter] = _AT_UPPER if direction > 0 else _AT_LOWER
                continue

            j_leave = int(basis[leave_pos])
            x[j_leave] = lo[j_leave] if leave_at == _AT_LOWER else hi[j_leave]
            status[j_leave] = leave_at
            status[j_enter] = _BASIC
            basis[leave_pos] = j_enter
            if abs(w[leave_pos]) < cfg.pivot_tol:
                fac.refactor(basis)
            else:
                fac.update(leave_pos, w)
