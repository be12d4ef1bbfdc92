"""File system management for scenario reports and polygons."""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import aiofiles
import pandas as pd

from config import OUTPUT_DIR
from services.errors import InputError
from services.lv_flexibility import FlexibilityArea

logger = logging.getLogger(__name__)

POLYGON_COLUMNS = ["direction_deg", "p_pu", "q_pu"]
VERTEX_TOL = 1e-10


def vertex_directions(area: FlexibilityArea) -> List[Optional[float]]:
    """Search direction that produced each vertex; None for the base point or clipped corners."""
    directions = []
    for p, q in area.vertices:
        match = next(
            (s.direction_deg for s in area.supports if abs(s.p - p) <= VERTEX_TOL and abs(s.q - q) <= VERTEX_TOL),
            None,
        )
        directions.append(match)
    return directions


def polygon_frame(area: FlexibilityArea) -> pd.DataFrame:
    rows = [
        {"direction_deg": d, "p_pu": p, "q_pu": q}
        for d, (p, q) in zip(vertex_directions(area), area.vertices)
    ]
    return pd.DataFrame(rows, columns=POLYGON_COLUMNS)


def read_polygon_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def dumps_report(report: Dict[str, Any]) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


class ReportWriter:
    """Writes polygons and reports under one output directory."""

    def __init__(self, out_dir: Optional[Path] = None):
        self.out_dir = Path(out_dir) if out_dir is not None else OUTPUT_DIR
        self.out_dir.mkdir(parents=True, exist_ok=True)

    async def write_file(self, file_path: Path, content: str):
        """Write content to a file."""
        file_path.parent.mkdir(parents=True, exist_ok=True)
        async with aiofiles.open(file_path, "w", encoding="utf-8") as f:
            await f.write(content)

    async def emit_polygon_csv(self, areas: Dict[str, Dict[str, FlexibilityArea]]) -> List[Path]:
        """One CSV per LV bus and realization: areas/<bus>_<realization>.csv."""
        if not areas:
            raise InputError("no flexibility areas to write")
        written = []
        for bus_id, by_label in sorted(areas.items()):
            for label, area in by_label.items():
                path = self.out_dir / "areas" / f"{bus_id}_{label}.csv"
                frame = polygon_frame(area)
                await self.write_file(path, frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))
                written.append(path)
        logger.info(f"Wrote {len(written)} polygon files to {self.out_dir / 'areas'}")
        return written

    async def emit_report_json(self, report: Dict[str, Any], name: str = "report.json") -> Path:
        """report.json is deterministic; the generation time goes to a sidecar."""
        path = self.out_dir / name
        await self.write_file(path, dumps_report(report))
        meta = {
            "generated_at": datetime.now().isoformat(),
            "report": name,
            "config_hash": report.get("config_hash"),
        }
        await self.write_file(path.with_suffix(".meta.json"), json.dumps(meta, indent=2) + "\n")
        logger.info(f"Wrote report to {path}")
        return path
