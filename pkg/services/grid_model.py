"""Radial network data model, document ingestion and per-unit normalization."""

import json
import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import networkx as nx

from services.errors import InputError, TopologyError

logger = logging.getLogger(__name__)

BUS_KINDS = ("slack", "pq")

POWER_UNITS = {"pu": None, "kW": 1e-3, "MW": 1.0}
IMPEDANCE_UNITS = ("pu", "ohm")
CURRENT_UNITS = ("pu", "A")


@dataclass(frozen=True)
class Bus:
    """Network node with per-unit voltage magnitude bounds."""
    id: str
    kind: str
    v_min: float
    v_max: float
    base_kv: float


@dataclass(frozen=True)
class Branch:
    """Series branch; r, x and i_max in per-unit."""
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    i_max: float


@dataclass(frozen=True)
class DerUnit:
    """Controllable resource with its capability box and forecast interval."""
    id: str
    bus: str
    p_max: float
    q_min: float
    q_max: float
    curtailable_fraction: float
    p_forecast: float
    q_forecast: float = 0.0
    p_halfwidth: float = 0.0
    q_halfwidth: float = 0.0


@dataclass(frozen=True)
class Load:
    """Uncontrolled consumption at a bus, positive when consuming."""
    bus: str
    p: float
    q: float


@dataclass(frozen=True)
class TopologyReport:
    """Root-first ordering of a radial network."""
    order: Tuple[str, ...]
    parent: Dict[str, str]          # bus id -> parent branch id
    upstream: Dict[str, str]        # branch id -> bus id closer to the slack
    downstream: Dict[str, str]      # branch id -> bus id farther from the slack
    children: Dict[str, Tuple[str, ...]]  # bus id -> child branch ids
    depth: Dict[str, int]

    def path_to_root(self, bus_id: str) -> List[str]:
        """Branch ids from bus_id up to the slack."""
        path = []
        while bus_id in self.parent:
            branch_id = self.parent[bus_id]
            path.append(branch_id)
            bus_id = self.upstream[branch_id]
        return path

    def subtree(self, bus_id: str) -> List[str]:
        """Bus ids fed through bus_id, itself included."""
        buses = [bus_id]
        stack = [bus_id]
        while stack:
            for branch_id in self.children[stack.pop()]:
                child = self.downstream[branch_id]
                buses.append(child)
                stack.append(child)
        return buses


@dataclass(frozen=True)
class GridModel:
    """One radial MV or LV network in per-unit on s_base (MVA)."""
    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    ders: Tuple[DerUnit, ...]
    loads: Tuple[Load, ...]
    s_base: float
    attached_lv_grids: Tuple[Tuple[str, str], ...] = ()

    @cached_property
    def slack(self) -> Bus:
        return next(bus for bus in self.buses if bus.kind == "slack")

    @cached_property
    def bus_ids(self) -> Tuple[str, ...]:
        return tuple(bus.id for bus in self.buses)

    @cached_property
    def branch_ids(self) -> Tuple[str, ...]:
        return tuple(branch.id for branch in self.branches)

    @cached_property
    def non_slack_ids(self) -> Tuple[str, ...]:
        return tuple(bus.id for bus in self.buses if bus.kind != "slack")

    @cached_property
    def bus_index(self) -> Dict[str, int]:
        return {bus_id: k for k, bus_id in enumerate(self.bus_ids)}

    @cached_property
    def branch_index(self) -> Dict[str, int]:
        return {branch_id: k for k, branch_id in enumerate(self.branch_ids)}

    @cached_property
    def topology(self) -> TopologyReport:
        return validate_radial(self)

    @property
    def lv_grid_paths(self) -> Dict[str, str]:
        return dict(self.attached_lv_grids)

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    def branch(self, branch_id: str) -> Branch:
        return self.branches[self.branch_index[branch_id]]

    def ders_at(self, bus_id: str) -> List[DerUnit]:
        return [der for der in self.ders if der.bus == bus_id]


def _require(record: Mapping, key: str, element: str):
    try:
        return record[key]
    except KeyError:
        raise InputError(f"{element}: missing field '{key}'") from None


def _number(record: Mapping, key: str, element: str, default: Optional[float] = None) -> float:
    value = record.get(key, default) if default is not None else _require(record, key, element)
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise InputError(f"{element}: field '{key}' is not a number: {value!r}") from None
    if not math.isfinite(value):
        raise InputError(f"{element}: field '{key}' is not finite")
    return value


class _UnitConverter:
    """Physical-to-per-unit conversion driven by the document's units header."""

    def __init__(self, units: Mapping[str, str], s_base: float):
        self.power = units.get("power", "kW")
        self.impedance = units.get("impedance", "ohm")
        self.current = units.get("current", "A")
        if self.power not in POWER_UNITS:
            raise InputError(f"units: unsupported power unit '{self.power}'")
        if self.impedance not in IMPEDANCE_UNITS:
            raise InputError(f"units: unsupported impedance unit '{self.impedance}'")
        if self.current not in CURRENT_UNITS:
            raise InputError(f"units: unsupported current unit '{self.current}'")
        self.s_base = s_base

    def power_pu(self, value: float) -> float:
        scale = POWER_UNITS[self.power]
        return value if scale is None else value * scale / self.s_base

    def impedance_pu(self, value: float, base_kv: float) -> float:
        if self.impedance == "pu":
            return value
        return value / (base_kv ** 2 / self.s_base)

    def current_pu(self, value: float, base_kv: float) -> float:
        if self.current == "pu":
            return value
        return value / (self.s_base * 1000.0 / (math.sqrt(3.0) * base_kv))


def load_network(text: str) -> GridModel:
    """Parse a network document, convert it to per-unit and validate it."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"network document is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise InputError("network document must be a JSON object")

    s_base = _number(doc, "s_base_mva", "network")
    if s_base <= 0:
        raise InputError("network: s_base_mva must be positive")
    conv = _UnitConverter(doc.get("units", {}), s_base)

    buses = []
    seen = set()
    for record in _require(doc, "buses", "network"):
        bus_id = str(_require(record, "id", "bus"))
        element = f"bus {bus_id}"
        if bus_id in seen:
            raise TopologyError(f"duplicate bus id '{bus_id}'")
        seen.add(bus_id)
        kind = record.get("kind", "pq")
        if kind not in BUS_KINDS:
            raise InputError(f"{element}: unknown kind '{kind}'")
        bus = Bus(
            id=bus_id,
            kind=kind,
            v_min=_number(record, "v_min", element),
            v_max=_number(record, "v_max", element),
            base_kv=_number(record, "base_kv", element),
        )
        if not 0 < bus.v_min < bus.v_max:
            raise InputError(f"{element}: voltage bounds must satisfy 0 < v_min < v_max")
        if bus.base_kv <= 0:
            raise InputError(f"{element}: base_kv must be positive")
        buses.append(bus)

    slacks = [bus.id for bus in buses if bus.kind == "slack"]
    if len(slacks) != 1:
        raise TopologyError(f"network must have exactly one slack bus, found {len(slacks)}: {slacks}")
    base_kv = {bus.id: bus.base_kv for bus in buses}

    def known_bus(ref, element: str) -> str:
        ref = str(ref)
        if ref not in base_kv:
            raise TopologyError(f"{element}: unknown bus '{ref}'")
        return ref

    branches = []
    for record in _require(doc, "branches", "network"):
        from_bus = str(_require(record, "from_bus", "branch"))
        to_bus = str(_require(record, "to_bus", "branch"))
        branch_id = str(record.get("id", f"{from_bus}-{to_bus}"))
        element = f"branch {branch_id}"
        known_bus(from_bus, element)
        known_bus(to_bus, element)
        kv = base_kv[from_bus]
        branch = Branch(
            id=branch_id,
            from_bus=from_bus,
            to_bus=to_bus,
            r=conv.impedance_pu(_number(record, "r", element), kv),
            x=conv.impedance_pu(_number(record, "x", element), kv),
            i_max=conv.current_pu(_number(record, "i_max", element), kv),
        )
        if branch.r < 0:
            raise InputError(f"{element}: resistance must be non-negative")
        if branch.i_max <= 0:
            raise InputError(f"{element}: i_max must be positive")
        branches.append(branch)
    if len({branch.id for branch in branches}) != len(branches):
        raise TopologyError("duplicate branch ids")

    ders = []
    for k, record in enumerate(doc.get("ders", [])):
        bus_id = str(_require(record, "bus", "der"))
        der_id = str(record.get("id", f"{bus_id}:der{k}"))
        element = f"der {der_id}"
        known_bus(bus_id, element)
        p_max = conv.power_pu(_number(record, "p_max", element))
        der = DerUnit(
            id=der_id,
            bus=bus_id,
            p_max=p_max,
            q_min=conv.power_pu(_number(record, "q_min", element)),
            q_max=conv.power_pu(_number(record, "q_max", element)),
            curtailable_fraction=_number(record, "curtailable_fraction", element, 0.0),
            p_forecast=conv.power_pu(_number(record, "p_forecast", element)) if "p_forecast" in record else p_max,
            q_forecast=conv.power_pu(_number(record, "q_forecast", element, 0.0)),
            p_halfwidth=conv.power_pu(_number(record, "p_halfwidth", element, 0.0)),
            q_halfwidth=conv.power_pu(_number(record, "q_halfwidth", element, 0.0)),
        )
        if der.p_max < 0:
            raise InputError(f"{element}: p_max must be non-negative")
        if der.q_min > der.q_max:
            raise InputError(f"{element}: q_min exceeds q_max")
        if not 0.0 <= der.curtailable_fraction <= 1.0:
            raise InputError(f"{element}: curtailable_fraction must lie in [0, 1]")
        if not 0.0 <= der.p_forecast <= der.p_max or not der.q_min <= der.q_forecast <= der.q_max:
            raise InputError(f"{element}: forecast lies outside the capability box")
        if der.p_halfwidth < 0 or der.q_halfwidth < 0:
            raise InputError(f"{element}: forecast half-widths must be non-negative")
        ders.append(der)

    loads = []
    for record in doc.get("loads", []):
        bus_id = known_bus(_require(record, "bus", "load"), "load")
        element = f"load at {bus_id}"
        loads.append(Load(
            bus=bus_id,
            p=conv.power_pu(_number(record, "p", element)),
            q=conv.power_pu(_number(record, "q", element, 0.0)),
        ))

    attached = []
    for bus_id, path in sorted(doc.get("attached_lv_grids", {}).items()):
        known_bus(bus_id, "attached_lv_grids")
        attached.append((str(bus_id), str(path)))

    model = GridModel(
        buses=tuple(buses),
        branches=tuple(branches),
        ders=tuple(ders),
        loads=tuple(loads),
        s_base=s_base,
        attached_lv_grids=tuple(attached),
    )
    validate_radial(model)
    logger.debug(f"Loaded network with {len(buses)} buses, {len(branches)} branches, {len(ders)} DERs")
    return model


def load_network_file(path: Path) -> GridModel:
    """Read and parse a network document from disk."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read network file {path}: {e}") from e
    try:
        return load_network(text)
    except InputError as e:
        raise type(e)(f"{path.name}: {e}") from e


def dump_network(model: GridModel) -> str:
    """Serialize a model as a per-unit network document."""
    doc = {
        "s_base_mva": model.s_base,
        "units": {"power": "pu", "impedance": "pu", "current": "pu"},
        "buses": [
            {"id": b.id, "kind": b.kind, "v_min": b.v_min, "v_max": b.v_max, "base_kv": b.base_kv}
            for b in model.buses
        ],
        "branches": [
            {"id": b.id, "from_bus": b.from_bus, "to_bus": b.to_bus, "r": b.r, "x": b.x, "i_max": b.i_max}
            for b in model.branches
        ],
        "ders": [
            {
                "id": d.id, "bus": d.bus, "p_max": d.p_max, "q_min": d.q_min, "q_max": d.q_max,
                "curtailable_fraction": d.curtailable_fraction, "p_forecast": d.p_forecast,
                "q_forecast": d.q_forecast, "p_halfwidth": d.p_halfwidth, "q_halfwidth": d.q_halfwidth,
            }
            for d in model.ders
        ],
        "loads": [{"bus": l.bus, "p": l.p, "q": l.q} for l in model.loads],
        "attached_lv_grids": dict(model.attached_lv_grids),
    }
    return json.dumps(doc, indent=2)


def validate_radial(model: GridModel) -> TopologyReport:
    """Check the network is a tree rooted at the slack and order it root-first."""
    graph = nx.MultiGraph()
    graph.add_nodes_from(bus.id for bus in model.buses)
    for branch in model.branches:
        graph.add_edge(branch.from_bus, branch.to_bus, key=branch.id)

    slack = next(bus.id for bus in model.buses if bus.kind == "slack")
    if not nx.is_connected(graph):
        reachable = nx.node_connected_component(graph, slack)
        islanded = [bus.id for bus in model.buses if bus.id not in reachable]
        raise TopologyError(f"network is disconnected; buses not reachable from slack: {islanded}")
    if len(model.branches) != len(model.buses) - 1:
        cycle = nx.find_cycle(graph, source=slack)
        loop = [key for _, _, key in cycle]
        raise TopologyError(f"network is not radial; loop through branches {loop}")

    parent: Dict[str, str] = {}
    upstream: Dict[str, str] = {}
    downstream: Dict[str, str] = {}
    children: Dict[str, List[str]] = {bus.id: [] for bus in model.buses}
    depth = {slack: 0}
    order = [slack]
    for u, v, key in nx.edge_bfs(graph, slack):
        if v in depth:
            continue
        parent[v] = key
        upstream[key] = u
        downstream[key] = v
        children[u].append(key)
        depth[v] = depth[u] + 1
        order.append(v)

    # every non-slack bus has exactly one parent branch
    if len(parent) != len(model.buses) - 1 or set(parent) != {b.id for b in model.buses} - {slack}:
        raise TopologyError("radial ordering failed to assign a unique parent to every bus")

    return TopologyReport(
        order=tuple(order),
        parent=parent,
        upstream=upstream,
        downstream=downstream,
        children={bus_id: tuple(ids) for bus_id, ids in children.items()},
        depth=depth,
    )


def add_uniform_load(model: GridModel, p_total: float, q_total: float = 0.0) -> GridModel:
    """Spread an extra load evenly over all non-slack buses."""
    if p_total == 0.0 and q_total == 0.0:
        return model
    share = len(model.non_slack_ids)
    extra = tuple(Load(bus=bus_id, p=p_total / share, q=q_total / share) for bus_id in model.non_slack_ids)
    return replace(model, loads=model.loads + extra)
