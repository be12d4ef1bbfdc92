"""Store of flexibility areas shared between the sweep and opf commands."""

import json
from datetime import datetime
from pathlib import Path
from typing import Dict, List

import aiofiles

from config import REPORT_SCHEMA_VERSION
from services.errors import InputError
from services.lv_flexibility import FlexibilityArea
from services.scenario import LvGridResult, area_summary


class AreaStore:
    """Reads and writes areas.json."""

    def __init__(self, path: Path):
        self.path = Path(path)

    async def save(self, grids: List[LvGridResult], s_base: float, config_hash: str) -> Path:
        """Save the areas of every LV grid, in MV per-unit."""
        document = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config_hash": config_hash,
            "s_base_mva": s_base,
            "grids": [area_summary(g) for g in grids],
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        async with aiofiles.open(self.path, "w", encoding="utf-8") as f:
            await f.write(json.dumps(document, indent=2, sort_keys=True) + "\n")
        async with aiofiles.open(self.path.with_suffix(".meta.json"), "w", encoding="utf-8") as f:
            await f.write(json.dumps({"saved_at": datetime.now().isoformat()}, indent=2) + "\n")
        return self.path

    async def load(self, s_base: float) -> List[LvGridResult]:
        """Load areas, checking they were computed on the same MV base."""
        try:
            async with aiofiles.open(self.path, "r", encoding="utf-8") as f:
                content = await f.read()
        except OSError as e:
            raise InputError(f"cannot read area file {self.path}: {e}") from e
        try:
            document = json.loads(content)
        except json.JSONDecodeError as e:
            raise InputError(f"area file {self.path.name} is malformed: {e}") from e
        if document.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise InputError(f"area file {self.path.name} has unsupported schema {document.get('schema_version')}")
        if abs(float(document.get("s_base_mva", 0.0)) - s_base) > 1e-12:
            raise InputError(
                f"area file was computed for s_base {document.get('s_base_mva')} MVA, network uses {s_base} MVA"
            )
        try:
            return [self._grid(entry) for entry in document["grids"]]
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"area file {self.path.name} lacks field {e}") from e

    def _grid(self, entry: Dict) -> LvGridResult:
        areas = {}
        for label, data in entry["realizations"].items():
            vertices = tuple((float(p), float(q)) for p, q in data["vertices"])
            if not vertices:
                raise InputError(f"area '{label}' of bus {entry['bus_id']} has no vertices")
            areas[label] = FlexibilityArea(
                vertices=vertices,
                base=(float(data["base"][0]), float(data["base"][1])),
                half_planes=tuple((float(a), float(b), float(c)) for a, b, c in data["half_planes"]),
                diagnostic=data.get("diagnostic"),
            )
        if entry["coupling"] not in areas:
            raise InputError(f"coupling area '{entry['coupling']}' missing for bus {entry['bus_id']}")
        return LvGridResult(
            bus_id=str(entry["bus_id"]),
            grid=str(entry["grid"]),
            areas=areas,
            coupling=str(entry["coupling"]),
            p_halfwidth=float(entry["p_halfwidth_pu"]),
            q_halfwidth=float(entry["q_halfwidth_pu"]),
            max_residual=float(entry.get("max_residual", 0.0)),
        )
