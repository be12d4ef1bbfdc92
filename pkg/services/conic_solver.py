"""Conic program container and the solver contract behind it."""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from config import SOLVER, TOL_FEAS, TOL_GAP
from services.errors import SolverError

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERIC_FAILURE = "numeric_failure"

_STATUS_MAP = {
    cp.OPTIMAL: OPTIMAL,
    cp.INFEASIBLE: INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: INFEASIBLE,
    cp.UNBOUNDED: UNBOUNDED,
    cp.UNBOUNDED_INACCURATE: UNBOUNDED,
}


@dataclass(frozen=True)
class RotatedCone:
    """x_v · x_l ≥ Σ x_k² with x_v, x_l ≥ 0."""
    v: int
    l: int
    xs: Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class UncertainRows:
    """Per-row coefficients of the node-level uncertain injections ξ_p, ξ_q.

    Row r reads A[r]·x + Σ_i (coef_p[r, i]·ξ_p,i + coef_q[r, i]·ξ_q,i) (=, ≤) b[r]
    with ξ_p,i = level·w_i·p_halfwidth[i]. Propagated inequality rows carry a
    first-order estimate of how deviations travel through the network; they
    are tightened for robustness but left to the physics when a realization
    is evaluated.
    """
    node_ids: Tuple[str, ...]
    eq_coef_p: np.ndarray
    eq_coef_q: np.ndarray
    ub_coef_p: np.ndarray
    ub_coef_q: np.ndarray
    propagated: np.ndarray
    p_halfwidth: np.ndarray
    q_halfwidth: np.ndarray
    level: float = 0.0
    budget: float = 0.0
    tightening: Optional[np.ndarray] = None

    def eq_deviation(self, w: np.ndarray) -> np.ndarray:
        """Equality-row shift for realization w."""
        return self.level * (self.eq_coef_p @ (w * self.p_halfwidth) + self.eq_coef_q @ (w * self.q_halfwidth))

    def ub_deviation(self, w: np.ndarray) -> np.ndarray:
        return self.level * (self.ub_coef_p @ (w * self.p_halfwidth) + self.ub_coef_q @ (w * self.q_halfwidth))

    def row_weights(self) -> np.ndarray:
        """Per inequality row and node: effect of a unit w_i before the level factor."""
        return self.ub_coef_p * self.p_halfwidth + self.ub_coef_q * self.q_halfwidth


@dataclass(frozen=True, eq=False)
class ConicProgram:
    """min c·x s.t. A_eq x = b_eq, A_ub x ≤ b_ub, lb ≤ x ≤ ub, rotated cones."""
    names: Tuple[str, ...]
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    cones: Tuple[RotatedCone, ...] = ()
    eq_labels: Tuple[str, ...] = ()
    ub_labels: Tuple[str, ...] = ()
    uncertainty: Optional[UncertainRows] = None
    constant: float = 0.0
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_vars(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def validate(self):
        """Reject malformed programs before any iteration."""
        n = self.n_vars
        if len(set(self.names)) != n:
            raise SolverError("malformed program: duplicate variable names")
        if self.c.shape != (n,) or self.lb.shape != (n,) or self.ub.shape != (n,):
            raise SolverError("malformed program: objective or bound vectors do not match the variable count")
        for label, a, b in (("equality", self.A_eq, self.b_eq), ("inequality", self.A_ub, self.b_ub)):
            if a.ndim != 2 or a.shape[1] != n or a.shape[0] != b.shape[0]:
                raise SolverError(f"malformed program: {label} block has shape {a.shape} with rhs {b.shape}")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise SolverError(f"malformed program: non-finite {label} data")
        if not np.all(np.isfinite(self.c)):
            raise SolverError("malformed program: non-finite objective")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)) or np.any(self.lb > self.ub):
            bad = [self.names[k] for k in np.flatnonzero(~(self.lb <= self.ub))]
            raise SolverError(f"malformed program: inconsistent bounds on {bad}")
        seen = set()
        for cone in self.cones:
            members = (cone.v, cone.l, *cone.xs)
            if any(not 0 <= k < n for k in members):
                raise SolverError(f"malformed program: cone {cone} references an unknown variable")
            if len(set(members)) != len(members):
                raise SolverError(f"malformed program: cone {cone} repeats a variable")
            key = (cone.v, cone.l, tuple(sorted(cone.xs)))
            if key in seen:
                raise SolverError(f"malformed program: duplicate cone {cone}")
            seen.add(key)


@dataclass(frozen=True, eq=False)
class SolveResult:
    status: str
    x: Optional[np.ndarray]
    objective: Optional[float]
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def value(self, prog: ConicProgram, name: str) -> float:
        return float(self.x[prog.index(name)])


def primal_residual(prog: ConicProgram, x: np.ndarray) -> float:
    """Largest constraint violation, relative to the data and iterate scale."""
    violations = [0.0]
    if len(prog.b_eq):
        violations.append(float(np.max(np.abs(prog.A_eq @ x - prog.b_eq))))
    if len(prog.b_ub):
        violations.append(float(np.max(prog.A_ub @ x - prog.b_ub)))
    if len(x):
        violations.append(float(np.max(prog.lb - x)))
        violations.append(float(np.max(x - prog.ub)))
    for cone in prog.cones:
        xv, xl = x[cone.v], x[cone.l]
        violations.append(float(np.sum(x[list(cone.xs)] ** 2) - xv * xl))
        violations.append(float(-min(xv, xl)))
    scale = 1.0 + max(
        [float(np.max(np.abs(b))) for b in (prog.b_eq, prog.b_ub) if len(b)] + [float(np.max(np.abs(x))) if len(x) else 0.0]
    )
    return max(violations) / scale


def _solve_empty(prog: ConicProgram, tol_feas: float) -> SolveResult:
    x = np.zeros(0)
    residual = primal_residual(prog, x)
    if residual > tol_feas:
        return SolveResult(status=INFEASIBLE, x=None, objective=None, residuals={"primal": residual})
    return SolveResult(status=OPTIMAL, x=x, objective=prog.constant, residuals={"primal": residual, "gap": 0.0})


def _solver_options(solver: str, tol_feas: float, tol_gap: float) -> Dict[str, float]:
    # Internal targets one decade tighter so the unscaled re-check passes
    if solver == cp.CLARABEL:
        return {"tol_feas": tol_feas * 0.1, "tol_gap_abs": tol_gap * 0.1, "tol_gap_rel": tol_gap * 0.1, "max_iter": 200}
    return {}


def _duality_gap(problem: cp.Problem) -> float:
    stats = getattr(problem.solver_stats, "extra_stats", None)
    primal = getattr(stats, "obj_val", None)
    dual = getattr(stats, "obj_val_dual", None)
    if primal is None or dual is None:
        return 0.0
    return abs(primal - dual) / max(1.0, min(abs(primal), abs(dual)))


def solve(
    prog: ConicProgram,
    tol_feas: float = TOL_FEAS,
    tol_gap: float = TOL_GAP,
    solver: str = SOLVER,
) -> SolveResult:
    """Solve with an embedded interior-point solver and re-verify the primal by substitution."""
    prog.validate()
    if prog.n_vars == 0:
        return _solve_empty(prog, tol_feas)

    # Rows touching only fixed variables are checked here, not passed on
    fixed = prog.lb == prog.ub
    x_fixed = np.where(fixed, prog.lb, 0.0)
    keep_eq = np.any(prog.A_eq[:, ~fixed] != 0, axis=1)
    keep_ub = np.any(prog.A_ub[:, ~fixed] != 0, axis=1)
    eq_gap = np.abs(prog.A_eq[~keep_eq] @ x_fixed - prog.b_eq[~keep_eq]) - tol_feas * (1 + np.abs(prog.b_eq[~keep_eq]))
    ub_gap = prog.A_ub[~keep_ub] @ x_fixed - prog.b_ub[~keep_ub] - tol_feas * (1 + np.abs(prog.b_ub[~keep_ub]))
    if np.any(eq_gap > 0) or np.any(ub_gap > 0):
        labels = [prog.ub_labels[r] for r in np.flatnonzero(~keep_ub)[ub_gap > 0] if r < len(prog.ub_labels)]
        logger.info(f"Fixed variables violate rows {labels}")
        return SolveResult(status=INFEASIBLE, x=None, objective=None, residuals={"fixed_rows": float(max(
            [0.0, *eq_gap, *ub_gap]))})

    x = cp.Variable(prog.n_vars)
    constraints = []
    if np.any(keep_eq):
        constraints.append(prog.A_eq[keep_eq] @ x == prog.b_eq[keep_eq])
    if np.any(keep_ub):
        constraints.append(prog.A_ub[keep_ub] @ x <= prog.b_ub[keep_ub])
    low = np.flatnonzero(np.isfinite(prog.lb))
    high = np.flatnonzero(np.isfinite(prog.ub))
    if len(low):
        constraints.append(x[low] >= prog.lb[low])
    if len(high):
        constraints.append(x[high] <= prog.ub[high])
    for cone in prog.cones:
        # ‖(2x, v − l)‖ ≤ v + l  ⇔  Σx² ≤ v·l with v, l ≥ 0
        constraints.append(cp.SOC(
            x[cone.v] + x[cone.l],
            cp.hstack([2 * x[k] for k in cone.xs] + [x[cone.v] - x[cone.l]]),
        ))
    problem = cp.Problem(cp.Minimize(prog.c @ x + prog.constant), constraints)

    try:
        problem.solve(solver=solver, **_solver_options(solver, tol_feas, tol_gap))
    except cp.error.SolverError as e:
        logger.error(f"Solver {solver} failed: {e}")
        return SolveResult(status=NUMERIC_FAILURE, x=None, objective=None, residuals={"message": str(e)})

    status = _STATUS_MAP.get(problem.status, NUMERIC_FAILURE)
    if problem.status == cp.OPTIMAL_INACCURATE:
        status = OPTIMAL
    if status != OPTIMAL or x.value is None:
        logger.info(f"Solver {solver} finished with status {problem.status}")
        return SolveResult(status=status if status != OPTIMAL else NUMERIC_FAILURE, x=None, objective=None,
                           residuals={"solver_status": problem.status})

    values = np.asarray(x.value, dtype=float)
    residuals = {"primal": primal_residual(prog, values), "gap": _duality_gap(problem)}
    if residuals["primal"] > tol_feas or residuals["gap"] > tol_gap:
        logger.warning(f"Re-verification failed for solver status {problem.status}: {residuals}")
        return SolveResult(status=NUMERIC_FAILURE, x=values, objective=float(problem.value), residuals=residuals)
    return SolveResult(status=OPTIMAL, x=values, objective=float(prog.c @ values + prog.constant), residuals=residuals)


def stack_rows(rows: Sequence[Tuple[Dict[int, float], float]], n_vars: int) -> Tuple[np.ndarray, np.ndarray]:
    """Dense matrix and rhs from sparse row dictionaries."""
    a = np.zeros((len(rows), n_vars))
    b = np.zeros(len(rows))
    for r, (coefs, rhs) in enumerate(rows):
        for k, value in coefs.items():
            a[r, k] += value
        b[r] = rhs
    return a, b


def with_bounds(prog: ConicProgram, fixed: Dict[str, float]) -> ConicProgram:
    """Copy of prog with the named variables fixed."""
    lb = prog.lb.copy()
    ub = prog.ub.copy()
    for name, value in fixed.items():
        k = prog.index(name)
        lb[k] = ub[k] = value
    return replace(prog, lb=lb, ub=ub)
