"""End-to-end scenario: LV flexibility sweeps, then the robust MV OPF."""

import asyncio
import logging
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import APP_NAME, APP_VERSION, REPORT_SCHEMA_VERSION
from services.errors import GridFlexError, InputError
from services.grid_model import GridModel, add_uniform_load, load_network_file
from services.lv_flexibility import (
    FlexibilityArea,
    apply_worst_case_shift,
    intersect_areas,
    sweep_flexibility_area,
)
from services.mv_robust_opf import (
    MvOpfSolution,
    NodeForecast,
    build_socp,
    check_soc_tightness,
    pin_setpoints,
    robustify,
    solve_mv_opf,
    violation_cost,
)
from services.conic_solver import ConicProgram
from services.power_flow import InjectionSet, energy_kwh
from services.scenario_config import ScenarioConfig
from services.sensitivity import estimate_from_measurements, read_measurements_csv, simulate_measurements
from services.uncertainty import UncertaintyModel, worst_case_realization

logger = logging.getLogger(__name__)

REALIZATIONS = (("lower", -1), ("expected", 0), ("upper", 1))
FORECAST_COLUMNS = [
    "bus_id", "p_gen_mid_kw", "q_gen_mid_kvar", "p_gen_halfwidth_kw",
    "q_gen_halfwidth_kvar", "p_load_kw", "q_load_kvar",
]


@dataclass(frozen=True)
class LvGridResult:
    """Flexibility of one LV grid as seen from its MV bus, in MV per-unit."""
    bus_id: str
    grid: str
    areas: Dict[str, FlexibilityArea]
    coupling: str
    p_halfwidth: float
    q_halfwidth: float
    max_residual: float = 0.0

    @property
    def coupling_area(self) -> FlexibilityArea:
        return self.areas[self.coupling]


@dataclass(frozen=True)
class RealizationResult:
    label: str
    w: Dict[str, float]
    solution: MvOpfSolution
    losses_kwh: float
    violation_cost_chf: float
    slack_sum: float
    soc_max_gap: float
    soc_flagged: Tuple[str, ...]


@dataclass(frozen=True)
class ScenarioReport:
    label: str
    config_hash: str
    versions: Dict[str, str]
    level: float
    budget: float
    violation_rate_chf: float
    horizon_hours: float
    s_base: float
    lv_grids: List[LvGridResult]
    robust: MvOpfSolution
    nominal_objective: float
    tightened_rows: int
    realizations: List[RealizationResult] = field(default_factory=list)
    v_limits: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    program: Optional[ConicProgram] = None

    def realization(self, label: str) -> RealizationResult:
        return next(r for r in self.realizations if r.label == label)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready report; every derived number recomputes from the fields beside it."""
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "label": self.label,
            "config_hash": self.config_hash,
            "versions": self.versions,
            "uncertainty": {"level": self.level, "budget": self.budget},
            "horizon_hours": self.horizon_hours,
            "s_base_mva": self.s_base,
            "violation_rate_chf": self.violation_rate_chf,
            "areas": [area_summary(g) for g in self.lv_grids],
            "robust": {
                "objective": self.robust.objective,
                "nominal_objective": self.nominal_objective,
                "terms": self.robust.terms,
                "tightened_rows": self.tightened_rows,
                "setpoints": {
                    "p_der": self.robust.p_der,
                    "q_der": self.robust.q_der,
                    "p_transfer": self.robust.p_transfer,
                    "q_transfer": self.robust.q_transfer,
                },
            },
            "realizations": [self._realization_dict(r) for r in self.realizations],
            "summary": {
                "losses_kwh": {r.label: r.losses_kwh for r in self.realizations},
                "violation_cost_chf": {r.label: r.violation_cost_chf for r in self.realizations},
            },
        }

    def _realization_dict(self, result: RealizationResult) -> Dict[str, Any]:
        sol = result.solution
        voltages = {bus: sol.voltage_pu(bus) for bus in sol.v}
        deviation_pu = {}
        for bus, value in voltages.items():
            low, high = self.v_limits.get(bus, (0.0, float("inf")))
            deviation_pu[bus] = max(value - high, low - value, 0.0)
        return {
            "label": result.label,
            "w": result.w,
            "objective": sol.objective,
            "terms": sol.terms,
            "losses_pu": sol.losses_pu,
            "losses_kwh": result.losses_kwh,
            "slack_sum_pu": result.slack_sum,
            "violation_cost_chf": result.violation_cost_chf,
            "v_dev_pu2": sol.V_dev,
            "v_dev_pu": deviation_pu,
            "i_dev_pu2": sol.I_dev,
            "v_squared": sol.v,
            "voltages_pu": voltages,
            "flows": {
                b: {"P": sol.P[b], "Q": sol.Q[b], "l": sol.l[b]} for b in sol.P
            },
            "p_sl": sol.p_sl,
            "q_sl": sol.q_sl,
            "soc_max_gap": result.soc_max_gap,
            "soc_flagged": list(result.soc_flagged),
        }


def area_summary(grid: LvGridResult) -> Dict[str, Any]:
    return {
        "bus_id": grid.bus_id,
        "grid": grid.grid,
        "coupling": grid.coupling,
        "p_halfwidth_pu": grid.p_halfwidth,
        "q_halfwidth_pu": grid.q_halfwidth,
        "max_residual": grid.max_residual,
        "realizations": {
            label: {
                "vertices": [list(v) for v in area.vertices],
                "base": list(area.base),
                "half_planes": [list(h) for h in area.half_planes],
                "area": area.area,
                "diagnostic": area.diagnostic,
            }
            for label, area in area_items(grid)
        },
    }


def area_items(grid: LvGridResult) -> List[Tuple[str, FlexibilityArea]]:
    order = [label for label, _ in REALIZATIONS] + ["robust"]
    return [(label, grid.areas[label]) for label in order if label in grid.areas]


def package_versions() -> Dict[str, str]:
    versions = {APP_NAME: APP_VERSION}
    for package in ("numpy", "pandas", "networkx", "cvxpy", "clarabel"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def load_forecasts(path: Optional[Path], model: GridModel) -> Dict[str, NodeForecast]:
    """Per-bus interval forecasts in MV per-unit; defaults come from the network's own DERs and loads."""
    forecasts = {}
    for bus_id in model.bus_ids:
        ders = model.ders_at(bus_id)
        loads = [l for l in model.loads if l.bus == bus_id]
        forecasts[bus_id] = NodeForecast(
            p_gen_mid=sum(d.p_forecast for d in ders),
            q_gen_mid=sum(d.q_forecast for d in ders),
            p_gen_halfwidth=sum(d.p_halfwidth for d in ders),
            q_gen_halfwidth=sum(d.q_halfwidth for d in ders),
            p_load=sum(l.p for l in loads),
            q_load=sum(l.q for l in loads),
        )
    if path is None:
        return forecasts
    try:
        table = pd.read_csv(path, dtype={"bus_id": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot read forecast table {path}: {e}") from e
    missing = [c for c in FORECAST_COLUMNS if c not in table.columns]
    if missing:
        raise InputError(f"forecast table lacks columns {missing}")
    if table[FORECAST_COLUMNS[1:]].isna().any().any():
        raise InputError("forecast table has empty cells")
    scale = 1.0 / (1000.0 * model.s_base)
    for row in table.itertuples(index=False):
        if row.bus_id not in model.bus_index:
            raise InputError(f"forecast table references unknown bus '{row.bus_id}'")
        forecasts[row.bus_id] = NodeForecast(
            p_gen_mid=row.p_gen_mid_kw * scale,
            q_gen_mid=row.q_gen_mid_kvar * scale,
            p_gen_halfwidth=row.p_gen_halfwidth_kw * scale,
            q_gen_halfwidth=row.q_gen_halfwidth_kvar * scale,
            p_load=row.p_load_kw * scale,
            q_load=row.q_load_kvar * scale,
        )
    return forecasts


def resolve_lv_grids(config: ScenarioConfig, mv: GridModel) -> Dict[str, Path]:
    base = config.mv_network.parent
    return {bus_id: (base / path).resolve() for bus_id, path in mv.attached_lv_grids}


def lv_uncertainty(lv: GridModel, level: float, budget: float, columns) -> UncertaintyModel:
    """Forecast half-widths of the LV DERs, aggregated per measured bus."""
    nodes: Dict[str, List[float]] = {}
    for der in lv.ders:
        if der.bus in columns and (der.p_halfwidth > 0 or der.q_halfwidth > 0):
            entry = nodes.setdefault(der.bus, [0.0, 0.0])
            entry[0] += der.p_halfwidth
            entry[1] += der.q_halfwidth
    ids = tuple(nodes)
    return UncertaintyModel(
        level=level,
        budget=budget,
        node_ids=ids,
        p_halfwidth=np.array([nodes[n][0] for n in ids]),
        q_halfwidth=np.array([nodes[n][1] for n in ids]),
    )


def estimate_lv_flexibility(
    bus_id: str,
    grid_path: Path,
    config: ScenarioConfig,
    mv_s_base: float,
    seed: int,
) -> LvGridResult:
    """Part one for a single LV grid: estimate sensitivities, sweep expected and worst-case areas."""
    stage = f"LV grid at {bus_id}"
    try:
        lv = load_network_file(grid_path)
        lv = add_uniform_load(lv, config.future_load_kw / 1000.0 / lv.s_base)
        if config.measurement_mode == "csv":
            if bus_id not in config.measurement_paths:
                raise InputError(f"no measurement file configured for LV grid at {bus_id}")
            series = read_measurements_csv(config.measurement_paths[bus_id], lv.slack.id)
        else:
            series = simulate_measurements(
                lv, InjectionSet.from_model(lv), config.samples, config.jitter_pu, seed
            )
        sens = estimate_from_measurements(series, config.window, config.ridge)
        unc = lv_uncertainty(lv, config.level, config.budget, sens.injection_ids)

        expected = sweep_flexibility_area(lv, sens, sens.base, config.directions)
        areas = {"expected": expected}
        if not unc.is_trivial:
            for label, sign in (("lower", -1), ("upper", 1)):
                shifted = apply_worst_case_shift(sens.base, sens, unc, sign)
                areas[label] = sweep_flexibility_area(lv, sens, shifted, config.directions)
    except GridFlexError as e:
        raise type(e)(f"{stage}: {e}") from e

    factor = lv.s_base / mv_s_base
    areas = {label: area.rescaled(factor) for label, area in areas.items()}
    coupling = "expected"
    if config.coupling == "robust" and len(areas) > 1:
        common = areas["expected"]
        for label in ("lower", "upper"):
            common = intersect_areas(common, areas[label]) if common is not None else None
        if common is None:
            logger.warning(f"{stage}: worst-case areas do not overlap; coupling with the expected area")
        else:
            areas["robust"] = common
            coupling = "robust"
    residual = max(sens.residuals.values()) if sens.residuals else 0.0
    logger.info(f"{stage}: {len(areas)} flexibility areas, expected area {areas['expected'].area:.3e} pu^2")
    return LvGridResult(
        bus_id=bus_id,
        grid=str(grid_path.name),
        areas=areas,
        coupling=coupling,
        p_halfwidth=float(unc.p_halfwidth.sum()) * factor,
        q_halfwidth=float(unc.q_halfwidth.sum()) * factor,
        max_residual=float(residual),
    )


async def run_flexibility(config: ScenarioConfig, mv: Optional[GridModel] = None) -> List[LvGridResult]:
    """Part one for every attached LV grid, concurrently."""
    mv = mv or load_network_file(config.mv_network)
    grids = resolve_lv_grids(config, mv)
    logger.info(f"Estimating flexibility for {len(grids)} LV grids")
    jobs = [
        asyncio.to_thread(estimate_lv_flexibility, bus_id, path, config, mv.s_base, config.seed + k)
        for k, (bus_id, path) in enumerate(sorted(grids.items()))
    ]
    return list(await asyncio.gather(*jobs))


def _evaluate(label: str, w: np.ndarray, node_ids, pinned, config: ScenarioConfig, s_base: float) -> RealizationResult:
    sol = solve_mv_opf(pinned, w).require_optimal(f"realization {label}")
    slack_sum = sum(sol.V_dev.values()) + sum(sol.I_dev.values())
    gaps = check_soc_tightness(sol)
    return RealizationResult(
        label=label,
        w={node: float(x) for node, x in zip(node_ids, w)},
        solution=sol,
        losses_kwh=energy_kwh(sol.losses_pu, s_base, config.horizon_hours),
        violation_cost_chf=violation_cost(sol, config.violation_rate_chf),
        slack_sum=slack_sum,
        soc_max_gap=max(gaps.gaps.values(), default=0.0),
        soc_flagged=gaps.flagged,
    )


def run_opf(config: ScenarioConfig, lv_results: List[LvGridResult], mv: Optional[GridModel] = None) -> ScenarioReport:
    """Part two: robust MV OPF coupled to the LV areas, evaluated at lower/expected/upper realizations."""
    mv = mv or load_network_file(config.mv_network)
    forecasts = load_forecasts(config.forecasts, mv)
    areas = {}
    for grid in lv_results:
        if grid.bus_id not in mv.bus_index:
            raise InputError(f"flexibility area for unknown MV bus '{grid.bus_id}'")
        f = forecasts[grid.bus_id]
        forecasts[grid.bus_id] = NodeForecast(
            p_gen_mid=f.p_gen_mid,
            q_gen_mid=f.q_gen_mid,
            p_gen_halfwidth=f.p_gen_halfwidth + grid.p_halfwidth,
            q_gen_halfwidth=f.q_gen_halfwidth + grid.q_halfwidth,
            p_load=f.p_load,
            q_load=f.q_load,
        )
        areas[grid.bus_id] = grid.coupling_area

    prog = build_socp(mv, forecasts, areas, config.weights)
    rows = prog.uncertainty
    unc = UncertaintyModel(
        level=config.level,
        budget=config.budget,
        node_ids=rows.node_ids,
        p_halfwidth=rows.p_halfwidth,
        q_halfwidth=rows.q_halfwidth,
    )
    nominal = solve_mv_opf(prog).require_optimal("deterministic MV OPF")
    robust_prog = robustify(prog, unc)
    robust = solve_mv_opf(robust_prog).require_optimal("robust MV OPF")
    pinned = pin_setpoints(robust_prog, robust)

    if unc.is_trivial:
        plan = [("expected", np.zeros(len(rows.node_ids)))]
    else:
        plan = [(label, worst_case_realization(unc, sign)) for label, sign in REALIZATIONS]
    realizations = [_evaluate(label, w, rows.node_ids, pinned, config, mv.s_base) for label, w in plan]

    tightening = robust_prog.uncertainty.tightening
    return ScenarioReport(
        label=config.label,
        config_hash=config.config_hash(),
        versions=package_versions(),
        level=config.level,
        budget=config.budget,
        violation_rate_chf=config.violation_rate_chf,
        horizon_hours=config.horizon_hours,
        s_base=mv.s_base,
        lv_grids=lv_results,
        robust=robust,
        nominal_objective=nominal.objective,
        tightened_rows=int(np.count_nonzero(tightening)) if tightening is not None else 0,
        realizations=realizations,
        v_limits={b.id: (b.v_min, b.v_max) for b in mv.buses},
        program=robust_prog,
    )


async def run_scenario(config: ScenarioConfig) -> ScenarioReport:
    """Flexibility sweep per LV grid, then the robust MV OPF."""
    mv = load_network_file(config.mv_network)
    lv_results = await run_flexibility(config, mv)
    report = await asyncio.to_thread(run_opf, config, lv_results, mv)
    for r in report.realizations:
        logger.info(
            f"{config.label}/{r.label}: losses {r.losses_kwh:.3f} kWh, violation cost {r.violation_cost_chf:.3f} CHF"
        )
    return report
