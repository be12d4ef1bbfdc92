"""Backward/forward sweep power flow for radial networks."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from config import BFS_MAX_ITER, BFS_TOL, FD_STEP
from services.errors import ConvergenceError, InputError, NumericError
from services.grid_model import GridModel

logger = logging.getLogger(__name__)

# Below this magnitude the sweep is treated as a voltage collapse
COLLAPSE_VOLTAGE = 0.05


@dataclass(frozen=True, eq=False)
class InjectionSet:
    """Net complex injections per non-slack bus; generation positive."""
    bus_ids: Tuple[str, ...]
    p: np.ndarray
    q: np.ndarray

    @classmethod
    def from_model(cls, model: GridModel) -> "InjectionSet":
        """Nominal injections: DER forecasts minus loads."""
        index = {bus_id: k for k, bus_id in enumerate(model.non_slack_ids)}
        p = np.zeros(len(index))
        q = np.zeros(len(index))
        for der in model.ders:
            if der.bus in index:
                p[index[der.bus]] += der.p_forecast
                q[index[der.bus]] += der.q_forecast
        for load in model.loads:
            if load.bus in index:
                p[index[load.bus]] -= load.p
                q[index[load.bus]] -= load.q
        return cls(bus_ids=model.non_slack_ids, p=p, q=q)

    @classmethod
    def zeros(cls, model: GridModel) -> "InjectionSet":
        n = len(model.non_slack_ids)
        return cls(bus_ids=model.non_slack_ids, p=np.zeros(n), q=np.zeros(n))

    def with_delta(self, dp: Sequence[float], dq: Sequence[float]) -> "InjectionSet":
        """Injections shifted by per-bus deltas."""
        dp = np.asarray(dp, dtype=float)
        dq = np.asarray(dq, dtype=float)
        if dp.shape != self.p.shape or dq.shape != self.q.shape:
            raise InputError(f"injection delta shape {dp.shape}/{dq.shape} does not match {self.p.shape}")
        return InjectionSet(bus_ids=self.bus_ids, p=self.p + dp, q=self.q + dq)

    def at(self, bus_id: str) -> Tuple[float, float]:
        k = self.bus_ids.index(bus_id)
        return float(self.p[k]), float(self.q[k])


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    """Solved state: voltage magnitudes per bus, sending-end current per branch."""
    bus_ids: Tuple[str, ...]
    branch_ids: Tuple[str, ...]
    v: np.ndarray
    i: np.ndarray
    p_slack: float
    q_slack: float
    converged: bool
    iterations: int
    mismatch: float = 0.0

    def voltage(self, bus_id: str) -> float:
        return float(self.v[self.bus_ids.index(bus_id)])

    def current(self, branch_id: str) -> float:
        return float(self.i[self.branch_ids.index(branch_id)])


@dataclass(frozen=True, eq=False)
class SensitivityMatrices:
    """Linear response of monitored voltages, currents and slack transfer to injections.

    Rows of k_vp/k_vq follow bus_ids, rows of k_ip/k_iq follow branch_ids and
    columns follow injection_ids. k_sp and k_sq have two rows: the response of
    p_slack and of q_slack.
    """
    bus_ids: Tuple[str, ...]
    branch_ids: Tuple[str, ...]
    injection_ids: Tuple[str, ...]
    k_vp: np.ndarray
    k_vq: np.ndarray
    k_ip: np.ndarray
    k_iq: np.ndarray
    k_sp: np.ndarray
    k_sq: np.ndarray
    base: OperatingPoint
    residuals: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.injection_ids)
        expected = {
            "k_vp": (len(self.bus_ids), n),
            "k_vq": (len(self.bus_ids), n),
            "k_ip": (len(self.branch_ids), n),
            "k_iq": (len(self.branch_ids), n),
            "k_sp": (2, n),
            "k_sq": (2, n),
        }
        for name, shape in expected.items():
            matrix = getattr(self, name)
            if matrix.shape != shape:
                raise InputError(f"{name} has shape {matrix.shape}, expected {shape}")
            if not np.all(np.isfinite(matrix)):
                raise NumericError(f"{name} contains non-finite coefficients")

    def coefficient(self, name: str, row_id: str, column_id: str) -> float:
        """Single entry addressed by element ids, e.g. ('k_vp', 'B2', 'B2')."""
        rows = self.branch_ids if name in ("k_ip", "k_iq") else self.bus_ids
        matrix = getattr(self, name)
        return float(matrix[rows.index(row_id), self.injection_ids.index(column_id)])


def solve_bfs(
    model: GridModel,
    inj: InjectionSet,
    tol: float = BFS_TOL,
    max_iter: int = BFS_MAX_ITER,
    v_slack: float = 1.0,
) -> OperatingPoint:
    """Run the backward/forward sweep until the complex-power mismatch drops below tol."""
    if tol <= 0:
        raise InputError("power flow tolerance must be positive")
    if tuple(inj.bus_ids) != model.non_slack_ids:
        raise InputError("injection set does not cover the non-slack buses of the model")

    topo = model.topology
    bus_index = model.bus_index
    branch_index = model.branch_index
    n_bus = len(model.buses)

    s = np.zeros(n_bus, dtype=complex)
    for k, bus_id in enumerate(inj.bus_ids):
        s[bus_index[bus_id]] = complex(inj.p[k], inj.q[k])

    z = np.array([complex(b.r, b.x) for b in model.branches])
    slack = bus_index[model.slack.id]
    # Precomputed index arrays in sweep order
    down = [
        (bus_index[bus_id], branch_index[topo.parent[bus_id]],
         bus_index[topo.upstream[topo.parent[bus_id]]],
         [branch_index[c] for c in topo.children[bus_id]])
        for bus_id in topo.order[1:]
    ]
    others = np.array([k for k in range(n_bus) if k != slack], dtype=int)

    v = np.full(n_bus, complex(v_slack, 0.0))
    j = np.zeros(len(model.branches), dtype=complex)
    converged = False
    mismatch = float("inf")
    iteration = 0
    for iteration in range(1, max_iter + 1):
        i_inj = np.conj(s / v)
        for bus, branch, _, children in reversed(down):
            j[branch] = -i_inj[bus] + sum(j[c] for c in children)
        for bus, branch, parent, _ in down:
            v[bus] = v[parent] - z[branch] * j[branch]

        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(j))):
            logger.error(f"Power flow produced non-finite values at iteration {iteration}")
            raise NumericError(f"power flow diverged to non-finite values at iteration {iteration}")
        if np.min(np.abs(v)) < COLLAPSE_VOLTAGE:
            logger.warning(f"Voltage collapse detected at iteration {iteration}")
            break
        mismatch = float(np.max(np.abs(v[others] * i_inj[others].conj() - s[others]))) if len(others) else 0.0
        if mismatch <= tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Power flow did not converge after {iteration} iterations (mismatch {mismatch:.3e})")

    root_branches = [branch_index[b] for b in topo.children[model.slack.id]]
    s_slack = v[slack] * np.conj(sum(j[b] for b in root_branches)) if root_branches else 0j
    return OperatingPoint(
        bus_ids=model.bus_ids,
        branch_ids=model.branch_ids,
        v=np.abs(v),
        i=np.abs(j),
        p_slack=float(np.real(s_slack)),
        q_slack=float(np.imag(s_slack)),
        converged=converged,
        iterations=iteration,
        mismatch=mismatch,
    )


def losses(model: GridModel, op: OperatingPoint) -> float:
    """Active losses Σ r·i² in per-unit."""
    r = np.array([b.r for b in model.branches])
    return float(np.sum(r * op.i ** 2))


def energy_kwh(loss_pu: float, s_base_mva: float, hours: float) -> float:
    return loss_pu * s_base_mva * 1000.0 * hours


def finite_diff_sensitivities(
    model: GridModel,
    inj: InjectionSet,
    h: float = FD_STEP,
    tol: Optional[float] = None,
    max_iter: int = BFS_MAX_ITER,
) -> SensitivityMatrices:
    """Central-difference sensitivities of every bus voltage and branch current."""
    if h <= 0:
        raise InputError("finite-difference step must be positive")
    # Mismatch tolerance well below the step keeps ≥ 3 significant digits
    tol = min(BFS_TOL, h * 1e-4) if tol is None else tol
    base = solve_bfs(model, inj, tol, max_iter)
    if not base.converged:
        raise ConvergenceError("base case for finite differences did not converge")

    n = len(inj.bus_ids)
    k_vp = np.zeros((len(model.buses), n))
    k_vq = np.zeros_like(k_vp)
    k_ip = np.zeros((len(model.branches), n))
    k_iq = np.zeros_like(k_ip)
    k_sp = np.zeros((2, n))
    k_sq = np.zeros((2, n))

    def perturbed(column: int, dp: float, dq: float) -> OperatingPoint:
        delta_p = np.zeros(n)
        delta_q = np.zeros(n)
        delta_p[column] = dp
        delta_q[column] = dq
        op = solve_bfs(model, inj.with_delta(delta_p, delta_q), tol, max_iter)
        if not op.converged:
            bus_id = inj.bus_ids[column]
            logger.error(f"Perturbed power flow at bus {bus_id} did not converge")
            raise ConvergenceError(f"perturbed power flow at bus {bus_id} did not converge")
        return op

    for col in range(n):
        for vp, ip, sp, (dp, dq) in (
            (k_vp, k_ip, k_sp, (h, 0.0)),
            (k_vq, k_iq, k_sq, (0.0, h)),
        ):
            plus = perturbed(col, dp, dq)
            minus = perturbed(col, -dp, -dq)
            vp[:, col] = (plus.v - minus.v) / (2 * h)
            ip[:, col] = (plus.i - minus.i) / (2 * h)
            sp[0, col] = (plus.p_slack - minus.p_slack) / (2 * h)
            sp[1, col] = (plus.q_slack - minus.q_slack) / (2 * h)

    # Slack voltage is fixed
    k_vp[model.bus_index[model.slack.id], :] = 0.0
    k_vq[model.bus_index[model.slack.id], :] = 0.0
    logger.debug(f"Computed finite-difference sensitivities for {n} injection buses")
    return SensitivityMatrices(
        bus_ids=model.bus_ids,
        branch_ids=model.branch_ids,
        injection_ids=tuple(inj.bus_ids),
        k_vp=k_vp,
        k_vq=k_vq,
        k_ip=k_ip,
        k_iq=k_iq,
        k_sp=k_sp,
        k_sq=k_sq,
        base=base,
    )
