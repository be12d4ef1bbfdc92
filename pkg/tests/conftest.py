"""Shared pytest fixtures."""

import json
from pathlib import Path

import pytest

from services.grid_model import GridModel, load_network, load_network_file

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def line_feeder(n_buses: int, r: float = 0.01, x: float = 0.02, i_max: float = 5.0, ders=(), loads=()) -> dict:
    """Per-unit document for a line 0-1-...-(n-1) with the slack at bus 0."""
    return {
        "s_base_mva": 1.0,
        "units": {"power": "pu", "impedance": "pu", "current": "pu"},
        "buses": [
            {"id": str(k), "kind": "slack" if k == 0 else "pq", "v_min": 0.9, "v_max": 1.1, "base_kv": 20.0}
            for k in range(n_buses)
        ],
        "branches": [
            {"from_bus": str(k), "to_bus": str(k + 1), "r": r, "x": x, "i_max": i_max}
            for k in range(n_buses - 1)
        ],
        "ders": list(ders),
        "loads": list(loads),
    }


def build(document: dict) -> GridModel:
    return load_network(json.dumps(document))


@pytest.fixture
def two_bus() -> GridModel:
    return load_network_file(FIXTURES / "two_bus.json")


@pytest.fixture
def lv_grid() -> GridModel:
    return load_network_file(FIXTURES / "lv_grid_a.json")


@pytest.fixture
def mv_feeder() -> GridModel:
    return load_network_file(FIXTURES / "mv_feeder.json")


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES
