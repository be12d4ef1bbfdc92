"""Sweep command handler: LV flexibility areas only."""

import logging
from argparse import Namespace

from handlers.run import output_dir
from services.area_store import AreaStore
from services.errors import GridFlexError
from services.file_manager import ReportWriter
from services.grid_model import load_network_file
from services.scenario import run_flexibility
from services.scenario_config import ScenarioConfigParser
from utils.formatters import format_error_message, format_success_message, format_sweep_summary

logger = logging.getLogger(__name__)


async def handler(args: Namespace) -> int:
    """Handle `gridflex sweep`."""
    try:
        config = ScenarioConfigParser().parse(args.config, vars(args))
        mv = load_network_file(config.mv_network)
        grids = await run_flexibility(config, mv)

        writer = ReportWriter(output_dir(args, config.label))
        if grids:
            await writer.emit_polygon_csv({g.bus_id: g.areas for g in grids})
        path = await AreaStore(writer.out_dir / "areas.json").save(grids, mv.s_base, config.config_hash())

        print(format_sweep_summary(grids))
        print(format_success_message(f"Areas written to {path}"))
        return 0
    except GridFlexError as e:
        logger.error(f"sweep failed: {e}")
        print(format_error_message(e))
        return e.exit_code
