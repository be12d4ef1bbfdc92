"""Opf command handler: robust MV OPF on precomputed areas."""

import asyncio
import logging
from argparse import Namespace

from handlers.run import output_dir
from services.area_store import AreaStore
from services.errors import GridFlexError
from services.file_manager import ReportWriter
from services.grid_model import load_network_file
from services.scenario import run_opf
from services.scenario_config import ScenarioConfigParser
from utils.formatters import format_error_message, format_scenario_summary, format_success_message

logger = logging.getLogger(__name__)


async def handler(args: Namespace) -> int:
    """Handle `gridflex opf --areas areas.json`."""
    try:
        config = ScenarioConfigParser().parse(args.config, vars(args))
        mv = load_network_file(config.mv_network)
        grids = await AreaStore(args.areas).load(mv.s_base)
        report = await asyncio.to_thread(run_opf, config, grids, mv)

        writer = ReportWriter(output_dir(args, config.label))
        path = await writer.emit_report_json(report.to_dict())

        print(format_scenario_summary(report))
        print(format_success_message(f"Report written to {path}"))
        return 0
    except GridFlexError as e:
        logger.error(f"opf failed: {e}")
        print(format_error_message(e))
        return e.exit_code
