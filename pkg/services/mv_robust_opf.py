"""Robust branch-flow SOCP for the MV grid with flexibility-area coupling."""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import TOL_FEAS, VIOLATION_RATE_CHF
from services.conic_solver import (
    OPTIMAL,
    INFEASIBLE,
    ConicProgram,
    RotatedCone,
    UncertainRows,
    solve,
    stack_rows,
    with_bounds,
)
from services.errors import InfeasibleError, InputError, SolverError
from services.grid_model import GridModel
from services.lv_flexibility import FlexibilityArea, polygon_to_halfplanes
from services.uncertainty import UncertaintyModel, budget_dual_norm, is_admissible

logger = logging.getLogger(__name__)

# Violation slacks below this are solver noise and reported as zero
SLACK_FLOOR = 1e-7

TERMS = ("losses", "voltage", "current", "p_slack", "q_slack")


@dataclass(frozen=True)
class ObjectiveWeights:
    w_l: float = 1.0
    w_v: float = 100.0
    w_lim: float = 100.0
    w_p: float = 0.01
    w_q: float = 0.01

    def __post_init__(self):
        negative = [name for name, value in vars(self).items() if value < 0]
        if negative:
            raise InputError(f"objective weights must be non-negative: {negative}")


@dataclass(frozen=True)
class NodeForecast:
    """Interval forecast at one MV bus, per-unit on the MV base."""
    p_gen_mid: float = 0.0
    q_gen_mid: float = 0.0
    p_gen_halfwidth: float = 0.0
    q_gen_halfwidth: float = 0.0
    p_load: float = 0.0
    q_load: float = 0.0

    def __post_init__(self):
        if self.p_gen_halfwidth < 0 or self.q_gen_halfwidth < 0:
            raise InputError("forecast half-widths must be non-negative")


@dataclass(frozen=True, eq=False)
class MvOpfSolution:
    status: str
    objective: Optional[float] = None
    terms: Dict[str, float] = field(default_factory=dict)
    P: Dict[str, float] = field(default_factory=dict)
    Q: Dict[str, float] = field(default_factory=dict)
    l: Dict[str, float] = field(default_factory=dict)
    v: Dict[str, float] = field(default_factory=dict)
    V_dev: Dict[str, float] = field(default_factory=dict)
    I_dev: Dict[str, float] = field(default_factory=dict)
    p_der: Dict[str, float] = field(default_factory=dict)
    q_der: Dict[str, float] = field(default_factory=dict)
    p_transfer: Dict[str, float] = field(default_factory=dict)
    q_transfer: Dict[str, float] = field(default_factory=dict)
    p_sl: float = 0.0
    q_sl: float = 0.0
    losses_pu: float = 0.0
    realization: Optional[Tuple[float, ...]] = None
    residuals: Dict[str, float] = field(default_factory=dict)
    branch_upstream: Dict[str, str] = field(default_factory=dict)
    x: Optional[np.ndarray] = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def require_optimal(self, stage: str) -> "MvOpfSolution":
        if self.status == INFEASIBLE:
            raise InfeasibleError(f"{stage}: MV OPF infeasible")
        if not self.optimal:
            raise SolverError(f"{stage}: MV OPF ended with status {self.status} {self.residuals}")
        return self

    def voltage_pu(self, bus_id: str) -> float:
        return float(np.sqrt(max(self.v[bus_id], 0.0)))


@dataclass(frozen=True)
class SocGapReport:
    gaps: Dict[str, float]
    flagged: Tuple[str, ...]
    tol: float

    @property
    def tight(self) -> bool:
        return not self.flagged


def _common_path(topo, first: str, second: str) -> List[str]:
    up = set(topo.path_to_root(first))
    return [b for b in topo.path_to_root(second) if b in up]


def build_socp(
    model: GridModel,
    forecasts: Mapping[str, NodeForecast],
    areas: Mapping[str, FlexibilityArea],
    weights: ObjectiveWeights = ObjectiveWeights(),
) -> ConicProgram:
    """Deterministic branch-flow SOCP with soft voltage/current limits."""
    unknown = sorted(set(forecasts) - set(model.bus_ids))
    if unknown:
        raise InputError(f"forecasts reference unknown buses {unknown}")
    coupled = [bus_id for bus_id in model.bus_ids if bus_id in model.lv_grid_paths or bus_id in areas]
    missing = [bus_id for bus_id in coupled if bus_id not in areas]
    if missing:
        raise InputError(f"no flexibility area for coupled buses {missing}")

    topo = model.topology
    slack_id = model.slack.id
    fc = {bus_id: forecasts.get(bus_id, NodeForecast()) for bus_id in model.bus_ids}
    der_buses = [bus_id for bus_id in model.bus_ids if model.ders_at(bus_id) and bus_id != slack_id]

    names: List[str] = []
    lb: List[float] = []
    ub: List[float] = []

    def var(name: str, low: float = -np.inf, high: float = np.inf) -> int:
        names.append(name)
        lb.append(low)
        ub.append(high)
        return len(names) - 1

    P = {b.id: var(f"P[{b.id}]") for b in model.branches}
    Q = {b.id: var(f"Q[{b.id}]") for b in model.branches}
    L = {b.id: var(f"l[{b.id}]", 0.0) for b in model.branches}
    IDEV = {b.id: var(f"I_dev[{b.id}]", 0.0) for b in model.branches}
    V = {bus_id: var(f"v[{bus_id}]", 0.0) for bus_id in model.bus_ids}
    VDEV = {bus_id: var(f"V_dev[{bus_id}]", 0.0) for bus_id in model.bus_ids if bus_id != slack_id}
    PG, QG = {}, {}
    for bus_id in der_buses:
        ders = model.ders_at(bus_id)
        mid = fc[bus_id].p_gen_mid
        curtail = min(sum(d.curtailable_fraction * d.p_max for d in ders), mid)
        PG[bus_id] = var(f"pg[{bus_id}]", mid - curtail, mid)
        QG[bus_id] = var(f"qg[{bus_id}]")
    PT = {bus_id: var(f"pt[{bus_id}]") for bus_id in coupled}
    QT = {bus_id: var(f"qt[{bus_id}]") for bus_id in coupled}
    PSL = var("p_sl")
    QSL = var("q_sl")
    lb[V[slack_id]] = ub[V[slack_id]] = 1.0
    n = len(names)

    uncertain = [
        bus_id for bus_id in model.bus_ids
        if bus_id != slack_id and (fc[bus_id].p_gen_halfwidth > 0 or fc[bus_id].q_gen_halfwidth > 0)
    ]
    node_col = {bus_id: k for k, bus_id in enumerate(uncertain)}

    eq_rows, eq_labels, eq_xi = [], [], []
    for bus_id in model.bus_ids:
        f = fc[bus_id]
        fixed_p = 0.0 if bus_id in PG else f.p_gen_mid
        fixed_q = 0.0 if bus_id in QG else f.q_gen_mid
        for kind, flow, loss_coef, gen, transfer, fixed, load, slack_var in (
            ("p", P, lambda b: model.branch(b).r, PG, PT, fixed_p, f.p_load, PSL),
            ("q", Q, lambda b: model.branch(b).x, QG, QT, fixed_q, f.q_load, QSL),
        ):
            row: Dict[int, float] = {}
            if bus_id == slack_id:
                row[slack_var] = 1.0
            else:
                parent = topo.parent[bus_id]
                row[flow[parent]] = 1.0
                row[L[parent]] = -loss_coef(parent)
            for child in topo.children[bus_id]:
                row[flow[child]] = row.get(flow[child], 0.0) - 1.0
            if bus_id in gen:
                row[gen[bus_id]] = 1.0
            if bus_id in transfer:
                row[transfer[bus_id]] = -1.0
            eq_rows.append((row, load - fixed))
            eq_labels.append(f"balance_{kind}[{bus_id}]")
            eq_xi.append((kind, node_col.get(bus_id)))

    for branch in model.branches:
        up, down = topo.upstream[branch.id], topo.downstream[branch.id]
        eq_rows.append(({
            V[down]: 1.0,
            V[up]: -1.0,
            P[branch.id]: 2 * branch.r,
            Q[branch.id]: 2 * branch.x,
            L[branch.id]: -(branch.r ** 2 + branch.x ** 2),
        }, 0.0))
        eq_labels.append(f"voltage_drop[{branch.id}]")
        eq_xi.append((None, None))

    ub_rows, ub_labels = [], []
    ub_p, ub_q, propagated = [], [], []
    m_nodes = len(uncertain)

    def add_ub(row, rhs, label, coef_p=None, coef_q=None, prop=False):
        ub_rows.append((row, rhs))
        ub_labels.append(label)
        ub_p.append(np.zeros(m_nodes) if coef_p is None else coef_p)
        ub_q.append(np.zeros(m_nodes) if coef_q is None else coef_q)
        propagated.append(prop)

    for bus_id in model.bus_ids:
        if bus_id == slack_id:
            continue
        bus = model.bus(bus_id)
        cp_ = np.array([2 * sum(model.branch(b).r for b in _common_path(topo, bus_id, k)) for k in uncertain])
        cq_ = np.array([2 * sum(model.branch(b).x for b in _common_path(topo, bus_id, k)) for k in uncertain])
        add_ub({V[bus_id]: 1.0, VDEV[bus_id]: -1.0}, bus.v_max ** 2, f"v_max[{bus_id}]", cp_, cq_, True)
        add_ub({V[bus_id]: -1.0, VDEV[bus_id]: -1.0}, -bus.v_min ** 2, f"v_min[{bus_id}]", -cp_, -cq_, True)

    for branch in model.branches:
        down = topo.downstream[branch.id]
        kappa = 2 * branch.i_max / model.bus(down).v_min
        fed = set(topo.subtree(down))
        coef = np.array([kappa if k in fed else 0.0 for k in uncertain])
        add_ub({L[branch.id]: 1.0, IDEV[branch.id]: -1.0}, branch.i_max ** 2, f"i_max[{branch.id}]", coef, coef.copy(), True)

    for bus_id in der_buses:
        ders = model.ders_at(bus_id)
        p_max = sum(d.p_max for d in ders)
        q_min = sum(d.q_min for d in ders)
        q_max = sum(d.q_max for d in ders)
        unit = np.array([1.0 if k == bus_id else 0.0 for k in uncertain])
        zero = np.zeros(m_nodes)
        add_ub({PG[bus_id]: 1.0}, p_max, f"der_p_max[{bus_id}]", unit, zero)
        add_ub({PG[bus_id]: -1.0}, 0.0, f"der_p_min[{bus_id}]", -unit, zero)
        add_ub({QG[bus_id]: 1.0}, q_max, f"der_q_max[{bus_id}]", zero, unit)
        add_ub({QG[bus_id]: -1.0}, -q_min, f"der_q_min[{bus_id}]", zero, -unit)

    for bus_id in coupled:
        for k, (a, b, c) in enumerate(polygon_to_halfplanes(areas[bus_id])):
            row = {}
            if a != 0.0:
                row[PT[bus_id]] = a
            if b != 0.0:
                row[QT[bus_id]] = b
            add_ub(row, c, f"area[{bus_id}]#{k}")

    A_eq, b_eq = stack_rows(eq_rows, n)
    A_ub, b_ub = stack_rows(ub_rows, n)
    eq_coef_p = np.zeros((len(eq_rows), m_nodes))
    eq_coef_q = np.zeros((len(eq_rows), m_nodes))
    for r, (kind, col) in enumerate(eq_xi):
        if col is None:
            continue
        (eq_coef_p if kind == "p" else eq_coef_q)[r, col] = 1.0

    c = np.zeros(n)
    for branch in model.branches:
        c[L[branch.id]] += weights.w_l * branch.r
        c[IDEV[branch.id]] += weights.w_lim
    for k in VDEV.values():
        c[k] += weights.w_v
    c[PSL] += weights.w_p
    c[QSL] += weights.w_q

    cones = tuple(
        RotatedCone(v=V[topo.upstream[b.id]], l=L[b.id], xs=(P[b.id], Q[b.id])) for b in model.branches
    )
    rows = UncertainRows(
        node_ids=tuple(uncertain),
        eq_coef_p=eq_coef_p,
        eq_coef_q=eq_coef_q,
        ub_coef_p=np.array(ub_p).reshape(len(ub_rows), m_nodes),
        ub_coef_q=np.array(ub_q).reshape(len(ub_rows), m_nodes),
        propagated=np.array(propagated, dtype=bool),
        p_halfwidth=np.array([fc[k].p_gen_halfwidth for k in uncertain]),
        q_halfwidth=np.array([fc[k].q_gen_halfwidth for k in uncertain]),
    )
    meta = {
        "bus_ids": model.bus_ids,
        "branch_ids": model.branch_ids,
        "slack_id": slack_id,
        "upstream": dict(topo.upstream),
        "downstream": dict(topo.downstream),
        "order": topo.order,
        "parent": dict(topo.parent),
        "r": {b.id: b.r for b in model.branches},
        "x": {b.id: b.x for b in model.branches},
        "der_buses": tuple(der_buses),
        "coupled_buses": tuple(coupled),
        "weights": weights,
        "s_base": model.s_base,
    }
    logger.info(f"Built MV SOCP with {n} variables, {len(eq_rows)} equalities, {len(ub_rows)} inequalities, {len(cones)} cones")
    return ConicProgram(
        names=tuple(names),
        c=c,
        A_eq=A_eq,
        b_eq=b_eq,
        A_ub=A_ub,
        b_ub=b_ub,
        lb=np.array(lb),
        ub=np.array(ub),
        cones=cones,
        eq_labels=tuple(eq_labels),
        ub_labels=tuple(ub_labels),
        uncertainty=rows,
        meta=meta,
    )


def robustify(prog: ConicProgram, unc: UncertaintyModel) -> ConicProgram:
    """Replace each uncertain inequality by its worst case over the budget set."""
    if unc.budget < 0:
        raise InputError(f"uncertainty budget must be non-negative, got {unc.budget}")
    rows = prog.uncertainty
    if rows is None:
        if unc.is_trivial:
            return prog
        raise InputError("program carries no uncertain rows to robustify")
    stray = [node for node in unc.node_ids if node not in rows.node_ids]
    if stray:
        raise InputError(f"uncertainty defined on buses {stray} that carry no uncertain rows")

    if unc.node_ids:
        hp, hq = unc.halfwidths_for(rows.node_ids)
    else:
        hp, hq = rows.p_halfwidth, rows.q_halfwidth
    if unc.is_trivial:
        tightened = replace(rows, level=unc.level, budget=unc.budget, p_halfwidth=hp, q_halfwidth=hq,
                            tightening=np.zeros(len(prog.b_ub)))
        return replace(prog, uncertainty=tightened)

    rows = replace(rows, level=unc.level, budget=unc.budget, p_halfwidth=hp, q_halfwidth=hq)
    weights = rows.row_weights()
    tightening = np.array([abs(unc.level) * budget_dual_norm(weights[r], unc.budget) for r in range(len(prog.b_ub))])
    logger.info(f"Robustified {int(np.count_nonzero(tightening))} inequalities (level {unc.level}, budget {unc.budget})")
    return replace(prog, b_ub=prog.b_ub - tightening, uncertainty=replace(rows, tightening=tightening))


def _realized(prog: ConicProgram, w: np.ndarray) -> ConicProgram:
    """Nominal data with the realization substituted into equalities and direct rows."""
    rows = prog.uncertainty
    b_ub = prog.b_ub if rows.tightening is None else prog.b_ub + rows.tightening
    direct = ~rows.propagated
    b_ub = b_ub - np.where(direct, rows.ub_deviation(w), 0.0)
    b_eq = prog.b_eq - rows.eq_deviation(w)
    return replace(prog, b_eq=b_eq, b_ub=b_ub, uncertainty=replace(rows, tightening=None))


def _values(prog: ConicProgram, x: np.ndarray, prefix: str, ids: Sequence[str], floor: bool = False) -> Dict[str, float]:
    out = {}
    for element in ids:
        name = f"{prefix}[{element}]"
        if name in prog.names:
            value = float(x[prog.index(name)])
            out[element] = 0.0 if floor and value < SLACK_FLOOR else value
    return out


def solve_mv_opf(
    prog: ConicProgram,
    scenario_w: Optional[Sequence[float]] = None,
    tol_feas: float = TOL_FEAS,
) -> MvOpfSolution:
    """Solve the program, optionally at a fixed realization of the uncertain injections."""
    realization = None
    if scenario_w is not None:
        rows = prog.uncertainty
        w = np.asarray(scenario_w, dtype=float)
        if rows is None or w.shape != (len(rows.node_ids),):
            raise InputError("realization does not match the uncertain buses of the program")
        if not is_admissible(w, rows.budget):
            raise InputError(f"realization {w.tolist()} outside the uncertainty set (budget {rows.budget})")
        prog = _realized(prog, w)
        realization = tuple(float(x) for x in w)

    result = solve(prog, tol_feas=tol_feas)
    if not result.optimal:
        logger.warning(f"MV OPF ended with status {result.status}")
        return MvOpfSolution(status=result.status, realization=realization, residuals=dict(result.residuals))

    meta = prog.meta
    x = result.x
    bus_ids, branch_ids = meta["bus_ids"], meta["branch_ids"]
    l = {b: max(v, 0.0) for b, v in _values(prog, x, "l", branch_ids).items()}
    V_dev = _values(prog, x, "V_dev", bus_ids, floor=True)
    I_dev = _values(prog, x, "I_dev", branch_ids, floor=True)
    weights: ObjectiveWeights = meta["weights"]
    p_sl = float(x[prog.index("p_sl")])
    q_sl = float(x[prog.index("q_sl")])
    losses_pu = float(sum(meta["r"][b] * l[b] for b in branch_ids))
    terms = {
        "losses": weights.w_l * losses_pu,
        "voltage": weights.w_v * sum(V_dev.values()),
        "current": weights.w_lim * sum(I_dev.values()),
        "p_slack": weights.w_p * p_sl,
        "q_slack": weights.w_q * q_sl,
    }
    residuals = dict(result.residuals)
    residuals["solver_objective"] = result.objective
    return MvOpfSolution(
        status=OPTIMAL,
        objective=float(sum(terms[t] for t in TERMS)),
        terms=terms,
        P=_values(prog, x, "P", branch_ids),
        Q=_values(prog, x, "Q", branch_ids),
        l=l,
        v=_values(prog, x, "v", bus_ids),
        V_dev=V_dev,
        I_dev=I_dev,
        p_der=_values(prog, x, "pg", meta["der_buses"]),
        q_der=_values(prog, x, "qg", meta["der_buses"]),
        p_transfer=_values(prog, x, "pt", meta["coupled_buses"]),
        q_transfer=_values(prog, x, "qt", meta["coupled_buses"]),
        p_sl=p_sl,
        q_sl=q_sl,
        losses_pu=losses_pu,
        realization=realization,
        residuals=residuals,
        branch_upstream=dict(meta["upstream"]),
        x=x,
    )


def pin_setpoints(prog: ConicProgram, solution: MvOpfSolution) -> ConicProgram:
    """Fix DER and transfer setpoints at the values of solution."""
    solution.require_optimal("pin setpoints")
    fixed = {}
    for prefix, values in (("pg", solution.p_der), ("qg", solution.q_der),
                           ("pt", solution.p_transfer), ("qt", solution.q_transfer)):
        fixed.update({f"{prefix}[{bus_id}]": value for bus_id, value in values.items()})
    return with_bounds(prog, fixed)


def violation_cost(solution: MvOpfSolution, rate: float = VIOLATION_RATE_CHF) -> float:
    """rate · (Σ V_dev + Σ I_dev)."""
    return rate * (sum(solution.V_dev.values()) + sum(solution.I_dev.values()))


def check_soc_tightness(solution: MvOpfSolution, tol: float = 1e-6) -> SocGapReport:
    """Per-branch gap v_i·l_ij − (P² + Q²) of the relaxed cone."""
    gaps = {}
    for branch_id, up in solution.branch_upstream.items():
        gaps[branch_id] = solution.v[up] * solution.l[branch_id] - (solution.P[branch_id] ** 2 + solution.Q[branch_id] ** 2)
    flagged = tuple(b for b, gap in gaps.items() if gap > tol)
    if flagged:
        logger.warning(f"Cone relaxation not tight on branches {list(flagged)}")
    return SocGapReport(gaps=gaps, flagged=flagged, tol=tol)


def telescoped_voltages(prog: ConicProgram, solution: MvOpfSolution) -> Dict[str, float]:
    """Squared voltages rebuilt root-first by chaining the voltage-drop relation."""
    meta = prog.meta
    v = {meta["slack_id"]: solution.v[meta["slack_id"]]}
    for bus_id in meta["order"][1:]:
        b = meta["parent"][bus_id]
        r, x = meta["r"][b], meta["x"][b]
        v[bus_id] = (v[meta["upstream"][b]] - 2 * r * solution.P[b] - 2 * x * solution.Q[b]
                     + (r ** 2 + x ** 2) * solution.l[b])
    return v
