"""Format terminal output for gridflex."""

from typing import List

from services.scenario import LvGridResult, ScenarioReport, area_items


def format_area_line(grid: LvGridResult) -> str:
    parts = []
    for label, area in area_items(grid):
        marker = "*" if label == grid.coupling else " "
        parts.append(f"{marker}{label}: {len(area.vertices)} vertices, {area.area:.4e} pu^2")
    line = f"  • {grid.bus_id} ({grid.grid}) " + "; ".join(parts)
    diagnostics = sorted({a.diagnostic for _, a in area_items(grid) if a.diagnostic and a.diagnostic != "intersection"})
    if diagnostics:
        line += f"\n      ⚠️ {'; '.join(diagnostics)}"
    return line


def format_sweep_summary(grids: List[LvGridResult]) -> str:
    """Format the flexibility areas of every LV grid."""
    if not grids:
        return "📭 No LV grids attached to the MV network."
    lines = ["🔷 Flexibility areas (MV pu, * = coupled to MV OPF):"]
    lines.extend(format_area_line(g) for g in grids)
    return "\n".join(lines)


def format_scenario_summary(report: ScenarioReport) -> str:
    """Format losses and violation costs per realization."""
    lines = [
        f"📊 Scenario '{report.label}' (level {report.level}, budget {report.budget})",
        f"Robust objective: {report.robust.objective:.6g} (deterministic {report.nominal_objective:.6g}), "
        f"{report.tightened_rows} rows tightened",
        "",
        f"{'realization':<12}{'losses kWh':>14}{'violation CHF':>16}",
    ]
    for r in report.realizations:
        lines.append(f"{r.label:<12}{r.losses_kwh:>14.3f}{r.violation_cost_chf:>16.3f}")
    flagged = sorted({b for r in report.realizations for b in r.soc_flagged})
    if flagged:
        lines.append(f"⚠️ Cone relaxation not tight on {', '.join(flagged)}")
    if report.lv_grids:
        lines.append("")
        lines.append(format_sweep_summary(report.lv_grids))
    return "\n".join(lines)


def format_error_message(error: Exception) -> str:
    """Format error message."""
    return f"❌ Error ({type(error).__name__}): {error}"


def format_success_message(message: str) -> str:
    """Format success message."""
    return f"✅ {message}"
