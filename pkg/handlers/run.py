"""Run command handler: flexibility sweep followed by the robust MV OPF."""

import logging
from argparse import Namespace
from pathlib import Path

from config import OUTPUT_DIR
from services.area_store import AreaStore
from services.errors import GridFlexError
from services.file_manager import ReportWriter
from services.program_dump import ProgramDumper
from services.scenario import run_scenario
from services.scenario_config import ScenarioConfigParser
from utils.formatters import format_error_message, format_scenario_summary, format_success_message

logger = logging.getLogger(__name__)


def output_dir(args: Namespace, label: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else OUTPUT_DIR / label


async def handler(args: Namespace) -> int:
    """Handle `gridflex run`."""
    try:
        config = ScenarioConfigParser().parse(args.config, vars(args))
        report = await run_scenario(config)

        writer = ReportWriter(output_dir(args, config.label))
        if report.lv_grids:
            await writer.emit_polygon_csv({g.bus_id: g.areas for g in report.lv_grids})
            await AreaStore(writer.out_dir / "areas.json").save(report.lv_grids, report.s_base, report.config_hash)
        path = await writer.emit_report_json(report.to_dict())
        if getattr(args, "dump_program", False) and report.program is not None:
            dump = ProgramDumper().render(report.program, f"robust MV OPF, scenario {config.label}")
            await writer.write_file(writer.out_dir / "program.txt", dump)

        print(format_scenario_summary(report))
        print(format_success_message(f"Report written to {path}"))
        return 0
    except GridFlexError as e:
        logger.error(f"run failed: {e}")
        print(format_error_message(e))
        return e.exit_code
