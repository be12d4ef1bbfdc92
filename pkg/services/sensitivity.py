"""Measurement-based sensitivity estimation and linear state prediction."""

import io
import logging
from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import FIT_DEGREE, RIDGE
from services.errors import ConvergenceError, InputError, MeasurementError
from services.grid_model import GridModel
from services.power_flow import InjectionSet, OperatingPoint, SensitivityMatrices, solve_bfs

logger = logging.getLogger(__name__)

SAMPLE_PERIOD = pd.Timedelta(minutes=10)
MEASUREMENT_KINDS = ("v", "p", "q", "i")
CSV_COLUMNS = ["timestamp", "element_id", "kind", "value_pu"]

__all__ = [
    "MeasurementSeries",
    "PredictedState",
    "SensitivityMatrices",
    "estimate_from_measurements",
    "measurements_to_csv",
    "predict_state",
    "read_measurements_csv",
    "simulate_measurements",
]


@dataclass(frozen=True, eq=False)
class MeasurementSeries:
    """Monitoring-device readings on a 10-minute grid.

    p and q hold the power injected into the network at each measured bus;
    the column of the slack bus is the transformer transfer.
    """
    v: pd.DataFrame
    p: pd.DataFrame
    q: pd.DataFrame
    i: pd.DataFrame
    slack_id: str
    allow_gaps: bool = False

    def __post_init__(self):
        index = self.v.index
        for name in ("p", "q", "i"):
            if not getattr(self, name).index.equals(index):
                raise MeasurementError(f"'{name}' readings are not aligned with voltage timestamps")
        if len(index) >= 2:
            steps = index.to_series().diff().iloc[1:]
            if (steps <= pd.Timedelta(0)).any():
                raise MeasurementError("timestamps must be strictly increasing")
            irregular = steps[steps != SAMPLE_PERIOD]
            if len(irregular) and not self.allow_gaps:
                raise MeasurementError(
                    f"timestamps are not on a 10-minute grid; first irregular step ends at {irregular.index[0]}"
                )
        for name in MEASUREMENT_KINDS:
            frame = getattr(self, name)
            missing = frame.columns[frame.isna().any()].tolist()
            if missing:
                raise MeasurementError(f"missing '{name}' readings for elements {missing}")
        if self.slack_id not in self.p.columns or self.slack_id not in self.q.columns:
            raise MeasurementError(f"no transfer measurement at slack bus {self.slack_id}")

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        return self.v.index

    @property
    def injection_ids(self) -> Tuple[str, ...]:
        """Non-slack buses with both p and q measured."""
        return tuple(c for c in self.p.columns if c != self.slack_id and c in self.q.columns)

    def tail(self, window: int) -> "MeasurementSeries":
        return MeasurementSeries(
            v=self.v.iloc[-window:],
            p=self.p.iloc[-window:],
            q=self.q.iloc[-window:],
            i=self.i.iloc[-window:],
            slack_id=self.slack_id,
            allow_gaps=self.allow_gaps,
        )


@dataclass(frozen=True, eq=False)
class PredictedState:
    bus_ids: Tuple[str, ...]
    branch_ids: Tuple[str, ...]
    v: np.ndarray
    i: np.ndarray
    p_slack: float
    q_slack: float


def simulate_measurements(
    model: GridModel,
    inj: InjectionSet,
    samples: int = 200,
    sigma: float = 0.01,
    seed: int = 0,
    noise: float = 0.0,
    start: str = "2024-01-01 00:00",
    monitored_buses: Optional[Iterable[str]] = None,
    monitored_branches: Optional[Iterable[str]] = None,
) -> MeasurementSeries:
    """Synthesize a series by jittering injections around inj and solving each sample.

    The last sample carries the unperturbed injections.
    """
    if samples < 2:
        raise InputError("at least two samples are needed")
    rng = np.random.default_rng(seed)
    n = len(inj.bus_ids)
    buses = list(monitored_buses) if monitored_buses is not None else list(model.bus_ids)
    branches = list(monitored_branches) if monitored_branches is not None else list(model.branch_ids)
    bus_rows = [model.bus_index[b] for b in buses]
    branch_rows = [model.branch_index[b] for b in branches]

    v_rows, i_rows, p_rows, q_rows = [], [], [], []
    for k in range(samples):
        if k == samples - 1:
            sample = inj
        else:
            sample = inj.with_delta(rng.normal(0.0, sigma, n), rng.normal(0.0, sigma, n))
        op = solve_bfs(model, sample)
        if not op.converged:
            raise ConvergenceError(f"power flow for synthetic sample {k} did not converge")
        v_rows.append(op.v[bus_rows])
        i_rows.append(op.i[branch_rows])
        p_rows.append(np.concatenate(([op.p_slack], sample.p)))
        q_rows.append(np.concatenate(([op.q_slack], sample.q)))

    index = pd.date_range(start=start, periods=samples, freq=SAMPLE_PERIOD)
    injection_columns = [model.slack.id, *inj.bus_ids]
    frames = {
        "v": pd.DataFrame(np.array(v_rows), index=index, columns=buses),
        "i": pd.DataFrame(np.array(i_rows), index=index, columns=branches),
        "p": pd.DataFrame(np.array(p_rows), index=index, columns=injection_columns),
        "q": pd.DataFrame(np.array(q_rows), index=index, columns=injection_columns),
    }
    if noise > 0:
        for name, frame in frames.items():
            frames[name] = frame + rng.normal(0.0, noise, frame.shape)
    logger.info(f"Simulated {samples} measurement samples (jitter {sigma} pu, seed {seed})")
    return MeasurementSeries(slack_id=model.slack.id, **frames)


def measurements_to_csv(series: MeasurementSeries) -> str:
    """Long-format CSV: one row per element, kind and timestamp."""
    parts = []
    for kind in MEASUREMENT_KINDS:
        frame = getattr(series, kind)
        long = frame.rename_axis("timestamp").reset_index().melt(
            id_vars="timestamp", var_name="element_id", value_name="value_pu"
        )
        long["kind"] = kind
        parts.append(long[CSV_COLUMNS])
    table = pd.concat(parts, ignore_index=True)
    table["timestamp"] = table["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%S")
    buffer = io.StringIO()
    table.to_csv(buffer, index=False, float_format="%.17g")
    return buffer.getvalue()


def parse_measurements(table: pd.DataFrame, slack_id: str, allow_gaps: bool = False) -> MeasurementSeries:
    """Pivot a long-format measurement table into a series."""
    missing = [c for c in CSV_COLUMNS if c not in table.columns]
    if missing:
        raise MeasurementError(f"measurement table lacks columns {missing}")
    unknown = sorted(set(table["kind"]) - set(MEASUREMENT_KINDS))
    if unknown:
        raise MeasurementError(f"unknown measurement kinds {unknown}")
    try:
        table = table.assign(timestamp=pd.to_datetime(table["timestamp"]), element_id=table["element_id"].astype(str))
    except (ValueError, TypeError) as e:
        raise MeasurementError(f"unparseable timestamp: {e}") from e
    if table.duplicated(["timestamp", "element_id", "kind"]).any():
        raise MeasurementError("duplicate readings for one element, kind and timestamp")

    index = pd.DatetimeIndex(sorted(table["timestamp"].unique()))
    frames = {}
    for kind in MEASUREMENT_KINDS:
        subset = table[table["kind"] == kind]
        frame = subset.pivot(index="timestamp", columns="element_id", values="value_pu")
        frames[kind] = frame.reindex(index).astype(float)
        frames[kind].columns.name = None
        frames[kind].index.name = None
    return MeasurementSeries(slack_id=slack_id, allow_gaps=allow_gaps, **frames)


def read_measurements_csv(path: Path, slack_id: str, allow_gaps: bool = False) -> MeasurementSeries:
    try:
        table = pd.read_csv(path, dtype={"element_id": str, "kind": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MeasurementError(f"cannot read measurement file {path}: {e}") from e
    return parse_measurements(table, slack_id, allow_gaps)


def _first_differences(frame: pd.DataFrame, keep: np.ndarray) -> np.ndarray:
    return frame.diff().to_numpy()[1:][keep]


def _monomials(dev: np.ndarray, degree: int) -> np.ndarray:
    """Products of deviation columns of order 2 up to degree."""
    columns = [
        np.prod(dev[:, list(combo)], axis=1)
        for order in range(2, degree + 1)
        for combo in combinations_with_replacement(range(dev.shape[1]), order)
    ]
    return np.column_stack(columns) if columns else np.zeros((dev.shape[0], 0))


def _regressor_count(linear: int, degree: int) -> int:
    return sum(comb(linear + order - 1, order) for order in range(1, degree + 1))


def _usable_degree(rows: int, linear: int, degree: int) -> int:
    """Highest order up to degree that leaves two differences per regressor."""
    for d in range(max(degree, 1), 1, -1):
        if rows >= 2 * _regressor_count(linear, d):
            return d
    return 1


def estimate_from_measurements(
    series: MeasurementSeries,
    window: Optional[int] = None,
    ridge: float = RIDGE,
    degree: int = FIT_DEGREE,
) -> SensitivityMatrices:
    """Ridge least-squares fit of first-differenced voltages and currents on injections.

    Next to the injection changes, the fit carries the changes of products of
    injection deviations from the latest sample (up to ``degree``), so that
    power-flow curvature does not leak into the linear coefficients. Only the
    linear coefficients are returned; they are the slopes at the latest sample.
    The ridge weight applies to regressors scaled to unit standard deviation.
    """
    if ridge < 0:
        raise InputError("ridge weight must be non-negative")
    if degree < 1:
        raise InputError("fit degree must be at least 1")
    columns = series.injection_ids
    n = len(columns)
    window = len(series.timestamps) if window is None else window
    if window < 2 * max(n, 1) or window > len(series.timestamps):
        raise MeasurementError(
            f"insufficient samples: window {window} needs at least {2 * max(n, 1)} "
            f"and at most {len(series.timestamps)} readings for {n} injection buses"
        )
    data = series.tail(window)

    steps = data.timestamps.to_series().diff().iloc[1:]
    keep = (steps == SAMPLE_PERIOD).to_numpy()
    x = np.hstack([
        _first_differences(data.p[list(columns)], keep),
        _first_differences(data.q[list(columns)], keep),
    ])
    for k, label in enumerate([f"p at {c}" for c in columns] + [f"q at {c}" for c in columns]):
        if np.allclose(x[:, k], 0.0, atol=1e-14):
            raise MeasurementError(f"rank-deficient regressors: zero variance in {label}")
    if ridge == 0 and np.linalg.matrix_rank(x) < x.shape[1]:
        raise MeasurementError("rank-deficient regressors (collinear injections); use ridge > 0")

    used = _usable_degree(len(x), x.shape[1], degree)
    if used < degree:
        logger.warning(f"{len(x)} differences support fit degree {used} only (requested {degree})")
    injections = np.hstack([data.p[list(columns)].to_numpy(), data.q[list(columns)].to_numpy()])
    higher = _monomials(injections - injections[-1], used)
    regressors = np.hstack([x, np.diff(higher, axis=0)[keep]])

    y_v = _first_differences(data.v, keep)
    y_i = _first_differences(data.i, keep)
    y_s = np.column_stack([
        _first_differences(data.p[[series.slack_id]], keep),
        _first_differences(data.q[[series.slack_id]], keep),
    ])
    y = np.hstack([y_v, y_i, y_s])

    scale = regressors.std(axis=0)
    scale[scale == 0] = 1.0
    width = regressors.shape[1]
    lhs = np.vstack([regressors / scale, np.sqrt(ridge) * np.eye(width)])
    rhs = np.vstack([y, np.zeros((width, y.shape[1]))])
    scaled, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    coef = scaled / scale[:, None]
    fitted = regressors @ coef
    rms = np.sqrt(np.mean((y - fitted) ** 2, axis=0))

    nv, ni = y_v.shape[1], y_i.shape[1]
    k = coef[:2 * n].T  # rows: targets, columns: [p..., q...]
    bus_ids = tuple(data.v.columns)
    branch_ids = tuple(data.i.columns)
    residuals = {f"v:{b}": float(r) for b, r in zip(bus_ids, rms[:nv])}
    residuals.update({f"i:{b}": float(r) for b, r in zip(branch_ids, rms[nv:nv + ni])})
    residuals.update({"p_slack": float(rms[-2]), "q_slack": float(rms[-1])})

    latest = data.v.index[-1]
    base = OperatingPoint(
        bus_ids=bus_ids,
        branch_ids=branch_ids,
        v=data.v.loc[latest].to_numpy(dtype=float),
        i=data.i.loc[latest].to_numpy(dtype=float),
        p_slack=float(data.p.loc[latest, series.slack_id]),
        q_slack=float(data.q.loc[latest, series.slack_id]),
        converged=True,
        iterations=0,
    )
    logger.info(f"Estimated sensitivities for {len(bus_ids)} buses, {len(branch_ids)} branches from {len(x)} differences")
    return SensitivityMatrices(
        bus_ids=bus_ids,
        branch_ids=branch_ids,
        injection_ids=columns,
        k_vp=k[:nv, :n],
        k_vq=k[:nv, n:],
        k_ip=k[nv:nv + ni, :n],
        k_iq=k[nv:nv + ni, n:],
        k_sp=k[nv + ni:, :n],
        k_sq=k[nv + ni:, n:],
        base=base,
        residuals=residuals,
    )


def _rows(base_ids: Sequence[str], wanted: Sequence[str], kind: str) -> np.ndarray:
    try:
        return np.array([list(base_ids).index(e) for e in wanted], dtype=int)
    except ValueError as e:
        raise InputError(f"base operating point lacks a monitored {kind}: {e}") from e


def predict_state(
    sens: SensitivityMatrices,
    base: OperatingPoint,
    dp: Sequence[float],
    dq: Sequence[float],
) -> PredictedState:
    """First-order state after injection changes dp, dq on the sensitivity columns."""
    dp = np.asarray(dp, dtype=float)
    dq = np.asarray(dq, dtype=float)
    n = len(sens.injection_ids)
    if dp.shape != (n,) or dq.shape != (n,):
        raise InputError(f"injection deltas must have shape ({n},), got {dp.shape} and {dq.shape}")
    v0 = base.v[_rows(base.bus_ids, sens.bus_ids, "bus")]
    i0 = base.i[_rows(base.branch_ids, sens.branch_ids, "branch")]
    return PredictedState(
        bus_ids=sens.bus_ids,
        branch_ids=sens.branch_ids,
        v=v0 + sens.k_vp @ dp + sens.k_vq @ dq,
        i=i0 + sens.k_ip @ dp + sens.k_iq @ dq,
        p_slack=base.p_slack + float(sens.k_sp[0] @ dp + sens.k_sq[0] @ dq),
        q_slack=base.q_slack + float(sens.k_sp[1] @ dp + sens.k_sq[1] @ dq),
    )
