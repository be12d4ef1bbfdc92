"""Main entry point for the gridflex command line."""

import argparse
import asyncio
import logging
import sys
from typing import List, Optional

from config import APP_NAME, APP_VERSION, LOG_LEVEL
from handlers import opf, run as run_handler, sweep

# Configure logging
logging.basicConfig(
    level=LOG_LEVEL,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

HANDLERS = {
    "run": run_handler.handler,
    "sweep": sweep.handler,
    "opf": opf.handler,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=APP_NAME,
        description="LV flexibility areas and robust MV optimal power flow",
    )
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION}")
    commands = parser.add_subparsers(dest="command", required=True)

    def scenario_command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="scenario TOML or JSON file")
        sub.add_argument("--alpha", type=float, help="uncertainty level in [-1, 1]")
        sub.add_argument("--gamma", type=float, help="uncertainty budget (>= 0)")
        sub.add_argument("--directions", type=int, help="number of search directions (>= 4)")
        sub.add_argument("--future-load-kw", dest="future_load_kw", type=float,
                         help="uniform load increment per LV grid in kW")
        sub.add_argument("--out", help="output directory (default: <GRIDFLEX_OUTPUT_DIR>/<label>)")
        return sub

    run = scenario_command("run", "flexibility sweep and robust MV OPF")
    run.add_argument("--dump-program", dest="dump_program", action="store_true",
                     help="also write the robust program as text")
    scenario_command("sweep", "LV flexibility areas only")
    opf_cmd = scenario_command("opf", "robust MV OPF on precomputed areas")
    opf_cmd.add_argument("--areas", required=True, help="areas.json written by the sweep command")
    return parser


async def main(argv: Optional[List[str]] = None) -> int:
    """Dispatch one command."""
    args = build_parser().parse_args(argv)
    logger.info(f"Starting {APP_NAME} {args.command}...")
    code = await HANDLERS[args.command](args)
    logger.info(f"{APP_NAME} {args.command} finished with exit code {code}")
    return code


def run():
    sys.exit(asyncio.run(main()))


if __name__ == "__main__":
    run()
