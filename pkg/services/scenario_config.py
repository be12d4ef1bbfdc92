"""Parse scenario configuration files into structured settings."""

import hashlib
import json
import tomllib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from config import RIDGE, VIOLATION_RATE_CHF
from services.errors import InputError
from services.mv_robust_opf import ObjectiveWeights


@dataclass(frozen=True)
class ScenarioConfig:
    """Structured scenario settings."""
    label: str
    mv_network: Path
    forecasts: Optional[Path] = None
    future_load_kw: float = 0.0
    horizon_hours: float = 24.0
    measurement_mode: str = "synthetic"  # "synthetic" or "csv"
    samples: int = 200
    jitter_pu: float = 0.01
    seed: int = 0
    measurement_paths: Dict[str, Path] = field(default_factory=dict)
    level: float = 0.5
    budget: float = 1.0
    directions: int = 8
    window: Optional[int] = None
    ridge: float = RIDGE
    coupling: str = "expected"  # "expected" or "robust"
    weights: ObjectiveWeights = ObjectiveWeights()
    violation_rate_chf: float = VIOLATION_RATE_CHF

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mv_network"] = str(self.mv_network)
        data["forecasts"] = str(self.forecasts) if self.forecasts else None
        data["measurement_paths"] = {k: str(v) for k, v in sorted(self.measurement_paths.items())}
        return data

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ScenarioConfigParser:
    """Parse TOML or JSON scenario files, then apply command-line overrides."""

    MODES = ("synthetic", "csv")
    COUPLINGS = ("expected", "robust")
    OVERRIDES = {
        "alpha": "level",
        "gamma": "budget",
        "directions": "directions",
        "future_load_kw": "future_load_kw",
    }

    def parse(self, path: Path, overrides: Optional[Mapping[str, Any]] = None) -> ScenarioConfig:
        """Parse a scenario file into a validated ScenarioConfig."""
        path = Path(path)
        raw = self._load(path)
        config = self._build(raw, path.parent)
        config = self._apply_overrides(config, overrides or {})
        self._validate(config)
        return config

    def _load(self, path: Path) -> Dict[str, Any]:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise InputError(f"cannot read scenario config {path}: {e}") from e
        try:
            if path.suffix.lower() == ".json":
                return json.loads(text)
            return tomllib.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise InputError(f"scenario config {path.name} is malformed: {e}") from e

    def _resolve(self, base: Path, value: Optional[str]) -> Optional[Path]:
        if value is None:
            return None
        candidate = Path(value)
        return candidate if candidate.is_absolute() else (base / candidate).resolve()

    def _build(self, raw: Dict[str, Any], base: Path) -> ScenarioConfig:
        if "mv_network" not in raw:
            raise InputError("scenario config lacks 'mv_network'")
        measurements = raw.get("measurements", {})
        uncertainty = raw.get("uncertainty", {})
        flexibility = raw.get("flexibility", {})
        weights = raw.get("weights", {})
        costs = raw.get("costs", {})
        try:
            return ScenarioConfig(
                label=str(raw.get("label", "scenario")),
                mv_network=self._resolve(base, raw["mv_network"]),
                forecasts=self._resolve(base, raw.get("forecasts")),
                future_load_kw=float(raw.get("future_load_kw", 0.0)),
                horizon_hours=float(raw.get("horizon_hours", 24.0)),
                measurement_mode=str(measurements.get("mode", "synthetic")),
                samples=int(measurements.get("samples", 200)),
                jitter_pu=float(measurements.get("jitter_pu", 0.01)),
                seed=int(measurements.get("seed", 0)),
                measurement_paths={
                    str(bus): self._resolve(base, p) for bus, p in measurements.get("paths", {}).items()
                },
                level=float(uncertainty.get("level", 0.5)),
                budget=float(uncertainty.get("budget", 1.0)),
                directions=int(flexibility.get("directions", 8)),
                window=int(flexibility["window"]) if "window" in flexibility else None,
                ridge=float(flexibility.get("ridge", RIDGE)),
                coupling=str(flexibility.get("coupling", "expected")),
                weights=ObjectiveWeights(
                    w_l=float(weights.get("losses", 1.0)),
                    w_v=float(weights.get("voltage", 100.0)),
                    w_lim=float(weights.get("current", 100.0)),
                    w_p=float(weights.get("p_slack", 0.01)),
                    w_q=float(weights.get("q_slack", 0.01)),
                ),
                violation_rate_chf=float(costs.get("violation_rate_chf", VIOLATION_RATE_CHF)),
            )
        except (TypeError, ValueError) as e:
            raise InputError(f"scenario config has a field of the wrong type: {e}") from e

    def _apply_overrides(self, config: ScenarioConfig, overrides: Mapping[str, Any]) -> ScenarioConfig:
        changes = {self.OVERRIDES[k]: v for k, v in overrides.items() if k in self.OVERRIDES and v is not None}
        return replace(config, **changes) if changes else config

    def _validate(self, config: ScenarioConfig):
        if not config.mv_network.exists():
            raise InputError(f"MV network file not found: {config.mv_network}")
        if config.forecasts is not None and not config.forecasts.exists():
            raise InputError(f"forecast table not found: {config.forecasts}")
        if config.measurement_mode not in self.MODES:
            raise InputError(f"measurement mode must be one of {self.MODES}")
        if config.measurement_mode == "csv":
            missing = [str(p) for p in config.measurement_paths.values() if not p.exists()]
            if missing:
                raise InputError(f"measurement files not found: {missing}")
        if config.coupling not in self.COUPLINGS:
            raise InputError(f"coupling must be one of {self.COUPLINGS}")
        if config.directions < 4:
            raise InputError("directions must be at least 4")
        if config.samples < 2 or config.jitter_pu <= 0:
            raise InputError("synthetic measurements need samples >= 2 and a positive jitter")
        if abs(config.level) > 1.0:
            raise InputError(f"uncertainty level {config.level} outside [-1, 1]")
        if config.budget < 0:
            raise InputError(f"uncertainty budget must be non-negative, got {config.budget}")
        if config.horizon_hours <= 0:
            raise InputError("horizon_hours must be positive")
        if config.ridge < 0:
            raise InputError("ridge must be non-negative")
        if config.window is not None and config.window < 2:
            raise InputError("window must be at least 2 samples")
        if config.future_load_kw < 0:
            raise InputError("future_load_kw must be non-negative")
