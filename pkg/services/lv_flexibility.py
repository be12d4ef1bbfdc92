"""LV flexibility area from sensitivity-linearized OPF sweeps."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services import polygon
from services.conic_solver import (
    INFEASIBLE,
    ConicProgram,
    SolveResult,
    solve,
    stack_rows,
)
from services.errors import InputError, SolverError
from services.grid_model import GridModel
from services.polygon import HalfPlane, Point
from services.power_flow import OperatingPoint, SensitivityMatrices
from services.sensitivity import predict_state
from services.uncertainty import UncertaintyModel, worst_case_realization

logger = logging.getLogger(__name__)

TIE_TOL = 1e-9


@dataclass(frozen=True)
class DirectionWeights:
    """Objective weights on the transfer change (Δp_sl, Δq_sl)."""
    alpha_dir: float
    beta_dir: float

    def __post_init__(self):
        if self.alpha_dir == 0 and self.beta_dir == 0:
            raise InputError("direction weights must not both be zero")

    @classmethod
    def from_angle(cls, theta: float) -> "DirectionWeights":
        """(cos θ, sin θ) rescaled so the larger magnitude is one."""
        a, b = math.cos(theta), math.sin(theta)
        scale = max(abs(a), abs(b))
        a, b = a / scale, b / scale

        def snap(x: float) -> float:
            for target in (-1.0, 0.0, 1.0):
                if abs(x - target) < 1e-12:
                    return target
            return x

        return cls(snap(a), snap(b))

    @property
    def degrees(self) -> float:
        return math.degrees(math.atan2(self.beta_dir, self.alpha_dir)) % 360.0


@dataclass(frozen=True, eq=False)
class LvOpfProblem:
    """One direction of the linearized LV OPF, in delta variables per flexible bus."""
    bus_ids: Tuple[str, ...]
    direction: DirectionWeights
    program: ConicProgram
    transfer_p: np.ndarray   # Δp_sl as a linear form of the variables
    transfer_q: np.ndarray
    base_point: Point
    base_violations: Tuple[str, ...] = ()

    @property
    def n_flexible(self) -> int:
        return len(self.bus_ids)


@dataclass(frozen=True)
class SupportPoint:
    direction_deg: float
    p: float
    q: float
    dp: Dict[str, float] = field(default_factory=dict)
    dq: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class FlexibilityArea:
    """Convex set of transformer transfers (LV import) reachable within limits."""
    vertices: Tuple[Point, ...]
    base: Point
    half_planes: Tuple[HalfPlane, ...]
    supports: Tuple[SupportPoint, ...] = ()
    diagnostic: Optional[str] = None

    @classmethod
    def from_points(cls, points: Sequence[Point], base: Point, supports=(), diagnostic=None) -> "FlexibilityArea":
        vertices = tuple(polygon.convex_hull(points))
        return cls(
            vertices=vertices,
            base=base,
            half_planes=tuple(polygon.halfplanes(vertices)),
            supports=tuple(supports),
            diagnostic=diagnostic,
        )

    @property
    def area(self) -> float:
        return polygon.polygon_area(self.vertices)

    @property
    def is_degenerate(self) -> bool:
        return len(self.vertices) <= 2

    def contains(self, point: Point, tol: float = 1e-9) -> bool:
        return polygon.contains(self.half_planes, point, tol)

    def rescaled(self, factor: float) -> "FlexibilityArea":
        """Same area with every power value multiplied by factor (> 0)."""
        if factor <= 0:
            raise InputError("rescale factor must be positive")
        return FlexibilityArea(
            vertices=tuple((p * factor, q * factor) for p, q in self.vertices),
            base=(self.base[0] * factor, self.base[1] * factor),
            half_planes=tuple((a, b, c * factor) for a, b, c in self.half_planes),
            supports=tuple(
                SupportPoint(
                    direction_deg=s.direction_deg,
                    p=s.p * factor,
                    q=s.q * factor,
                    dp={k: v * factor for k, v in s.dp.items()},
                    dq={k: v * factor for k, v in s.dq.items()},
                )
                for s in self.supports
            ),
            diagnostic=self.diagnostic,
        )


def _der_boxes(model: GridModel, columns: Sequence[str]) -> Dict[str, Tuple[float, float, float, float]]:
    """Aggregated (dp_lo, dp_hi, dq_lo, dq_hi) per measured DER bus."""
    boxes: Dict[str, List[float]] = {}
    for der in model.ders:
        if der.bus not in columns:
            logger.warning(f"DER {der.id} sits on unmeasured bus {der.bus}; excluded from flexibility")
            continue
        box = boxes.setdefault(der.bus, [0.0, 0.0, 0.0, 0.0])
        box[0] -= min(der.curtailable_fraction * der.p_max, der.p_forecast)
        box[2] += der.q_min - der.q_forecast
        box[3] += der.q_max - der.q_forecast
    return {bus: tuple(box) for bus, box in boxes.items()}


def _align(base: OperatingPoint, ids: Sequence[str], values: np.ndarray, base_ids: Sequence[str]) -> np.ndarray:
    position = {e: k for k, e in enumerate(base_ids)}
    try:
        return np.array([values[position[e]] for e in ids])
    except KeyError as e:
        raise InputError(f"base operating point lacks element {e}") from None


def build_direction_lp(
    model: GridModel,
    sens: SensitivityMatrices,
    base: OperatingPoint,
    direction: DirectionWeights,
) -> LvOpfProblem:
    """Linear program maximizing the weighted transfer change for one direction."""
    columns = list(sens.injection_ids)
    boxes = _der_boxes(model, columns)
    flex = [bus for bus in columns if bus in boxes]
    cols = [columns.index(bus) for bus in flex]
    m = len(flex)
    n = 2 * m
    names = tuple(f"dP[{b}]" for b in flex) + tuple(f"dQ[{b}]" for b in flex)
    lb = np.array([boxes[b][0] for b in flex] + [boxes[b][2] for b in flex])
    ub = np.array([boxes[b][1] for b in flex] + [boxes[b][3] for b in flex])

    transfer_p = np.concatenate([sens.k_sp[0, cols], sens.k_sq[0, cols]]) if m else np.zeros(0)
    transfer_q = np.concatenate([sens.k_sp[1, cols], sens.k_sq[1, cols]]) if m else np.zeros(0)

    slack_id = model.slack.id
    v0 = _align(base, sens.bus_ids, base.v, base.bus_ids)
    i0 = _align(base, sens.branch_ids, base.i, base.branch_ids)
    rows = []
    labels = []
    violations = []
    for r, bus_id in enumerate(sens.bus_ids):
        if bus_id == slack_id:
            continue
        bus = model.bus(bus_id)
        grad = {k: sens.k_vp[r, c] for k, c in enumerate(cols)}
        grad.update({m + k: sens.k_vq[r, c] for k, c in enumerate(cols)})
        rows.append((grad, bus.v_max - v0[r]))
        labels.append(f"v_max[{bus_id}]")
        rows.append(({k: -a for k, a in grad.items()}, v0[r] - bus.v_min))
        labels.append(f"v_min[{bus_id}]")
        if not bus.v_min <= v0[r] <= bus.v_max:
            violations.append(f"voltage at {bus_id} ({v0[r]:.4f} pu)")
    for r, branch_id in enumerate(sens.branch_ids):
        branch = model.branch(branch_id)
        grad = {k: sens.k_ip[r, c] for k, c in enumerate(cols)}
        grad.update({m + k: sens.k_iq[r, c] for k, c in enumerate(cols)})
        rows.append((grad, branch.i_max - i0[r]))
        labels.append(f"i_max[{branch_id}]")
        rows.append(({k: -a for k, a in grad.items()}, branch.i_max + i0[r]))
        labels.append(f"i_min[{branch_id}]")
        if i0[r] > branch.i_max:
            violations.append(f"current in {branch_id} ({i0[r]:.4f} pu)")
    if violations:
        logger.warning(f"Base operating point outside limits: {violations}")

    a_ub, b_ub = stack_rows(rows, n)
    c = -(direction.alpha_dir * transfer_p + direction.beta_dir * transfer_q)
    program = ConicProgram(
        names=names,
        c=c,
        A_eq=np.zeros((0, n)),
        b_eq=np.zeros(0),
        A_ub=a_ub,
        b_ub=b_ub,
        lb=lb,
        ub=ub,
        ub_labels=tuple(labels),
    )
    return LvOpfProblem(
        bus_ids=tuple(flex),
        direction=direction,
        program=program,
        transfer_p=transfer_p,
        transfer_q=transfer_q,
        base_point=(base.p_slack, base.q_slack),
        base_violations=tuple(violations),
    )


def _tie_break(problem: LvOpfProblem, first: SolveResult) -> SolveResult:
    """Among optimal points take the most counter-clockwise one."""
    prog = problem.program
    d = problem.direction
    target = -first.objective
    level = d.alpha_dir * problem.transfer_p + d.beta_dir * problem.transfer_q
    second = replace(
        prog,
        c=-(-d.beta_dir * problem.transfer_p + d.alpha_dir * problem.transfer_q),
        A_ub=np.vstack([prog.A_ub, -level]),
        b_ub=np.append(prog.b_ub, -(target - TIE_TOL * max(1.0, abs(target)))),
        ub_labels=prog.ub_labels + ("optimality",),
    )
    result = solve(second)
    return result if result.optimal else first


def solve_direction(problem: LvOpfProblem) -> Tuple[str, Optional[SupportPoint]]:
    """Solve one direction; returns the solver status and the support point when optimal."""
    p0, q0 = problem.base_point
    if problem.n_flexible == 0:
        return "optimal", SupportPoint(problem.direction.degrees, p0, q0)
    result = solve(problem.program)
    if not result.optimal:
        return result.status, None
    result = _tie_break(problem, result)
    x = result.x
    m = problem.n_flexible
    return "optimal", SupportPoint(
        direction_deg=problem.direction.degrees,
        p=p0 + float(problem.transfer_p @ x),
        q=q0 + float(problem.transfer_q @ x),
        dp={bus: float(x[k]) for k, bus in enumerate(problem.bus_ids)},
        dq={bus: float(x[m + k]) for k, bus in enumerate(problem.bus_ids)},
    )


def sweep_directions(n_directions: int) -> List[DirectionWeights]:
    return [DirectionWeights.from_angle(2 * math.pi * k / n_directions) for k in range(n_directions)]


def sweep_flexibility_area(
    model: GridModel,
    sens: SensitivityMatrices,
    base: Optional[OperatingPoint] = None,
    n_directions: int = 8,
) -> FlexibilityArea:
    """Convex hull of the transfer points reached in n uniformly spaced directions."""
    if n_directions < 4:
        raise InputError(f"at least 4 search directions are needed, got {n_directions}")
    base = sens.base if base is None else base
    base_point = (base.p_slack, base.q_slack)

    points: List[Point] = []
    supports: List[SupportPoint] = []
    base_feasible = True
    for direction in sweep_directions(n_directions):
        problem = build_direction_lp(model, sens, base, direction)
        base_feasible = not problem.base_violations
        if problem.n_flexible == 0:
            logger.info("No flexible resources; flexibility area is the base point")
            return FlexibilityArea.from_points([base_point], base_point, diagnostic="no flexible resources")
        status, support = solve_direction(problem)
        if status == INFEASIBLE:
            message = f"direction {direction.degrees:.1f} deg infeasible; area collapsed to base point"
            logger.warning(message)
            return FlexibilityArea.from_points([base_point], base_point, diagnostic=message)
        if support is None:
            logger.error(f"LV flexibility LP failed in direction {direction.degrees:.1f} deg: {status}")
            raise SolverError(f"flexibility LP in direction {direction.degrees:.1f} deg ended with status {status}")
        supports.append(support)
        points.append((support.p, support.q))

    if base_feasible:
        points.append(base_point)
    area = FlexibilityArea.from_points(points, base_point, supports)
    logger.info(f"Flexibility area with {len(area.vertices)} vertices, area {area.area:.6g} pu^2")
    return area


def apply_worst_case_shift(
    base: OperatingPoint,
    sens: SensitivityMatrices,
    unc: UncertaintyModel,
    sign: int,
) -> OperatingPoint:
    """Operating point after the budget-worst forecast deviation in direction sign."""
    if unc.level == 0 or unc.budget == 0 or sign == 0:
        return base
    missing = [node for node in unc.node_ids if node not in sens.injection_ids]
    if missing:
        raise InputError(f"uncertain buses {missing} have no sensitivity column")
    w = worst_case_realization(unc, sign)
    dp = np.zeros(len(sens.injection_ids))
    dq = np.zeros(len(sens.injection_ids))
    for k, node in enumerate(unc.node_ids):
        col = sens.injection_ids.index(node)
        dp[col] += unc.level * w[k] * unc.p_halfwidth[k]
        dq[col] += unc.level * w[k] * unc.q_halfwidth[k]
    state = predict_state(sens, base, dp, dq)

    v = base.v.copy()
    i = base.i.copy()
    for k, bus_id in enumerate(state.bus_ids):
        v[base.bus_ids.index(bus_id)] = state.v[k]
    for k, branch_id in enumerate(state.branch_ids):
        i[base.branch_ids.index(branch_id)] = state.i[k]
    return replace(base, v=v, i=i, p_slack=state.p_slack, q_slack=state.q_slack)


def polygon_to_halfplanes(area: FlexibilityArea) -> List[HalfPlane]:
    """Half-plane form a·p + b·q ≤ c; equality pairs for points and segments."""
    if not area.vertices:
        raise InputError("flexibility area has no vertices")
    return polygon.halfplanes(area.vertices)


def intersect_areas(first: FlexibilityArea, second: FlexibilityArea) -> Optional[FlexibilityArea]:
    """Common part of two areas, or None when they do not overlap."""
    vertices = polygon.intersect(first.vertices, second.vertices)
    if not vertices:
        return None
    return FlexibilityArea(
        vertices=tuple(vertices),
        base=first.base,
        half_planes=tuple(polygon.halfplanes(vertices)),
        diagnostic="intersection",
    )
