"""Polar Newton-Raphson power flow, used only as an independent oracle in tests."""

from dataclasses import dataclass

import numpy as np

from services.grid_model import GridModel
from services.power_flow import InjectionSet


@dataclass
class NewtonResult:
    v: np.ndarray
    i: np.ndarray
    p_slack: float
    q_slack: float
    converged: bool


def admittance(model: GridModel) -> np.ndarray:
    n = len(model.buses)
    y = np.zeros((n, n), dtype=complex)
    for branch in model.branches:
        a, b = model.bus_index[branch.from_bus], model.bus_index[branch.to_bus]
        ys = 1.0 / complex(branch.r, branch.x)
        y[a, a] += ys
        y[b, b] += ys
        y[a, b] -= ys
        y[b, a] -= ys
    return y


def newton_power_flow(model: GridModel, inj: InjectionSet, tol: float = 1e-12, max_iter: int = 30) -> NewtonResult:
    y = admittance(model)
    n = len(model.buses)
    slack = model.bus_index[model.slack.id]
    pq = np.array([model.bus_index[b] for b in inj.bus_ids], dtype=int)
    s_spec = np.zeros(n, dtype=complex)
    s_spec[pq] = inj.p + 1j * inj.q

    v = np.ones(n, dtype=complex)
    converged = False
    for _ in range(max_iter):
        ibus = y @ v
        s_calc = v * np.conj(ibus)
        mis = s_calc[pq] - s_spec[pq]
        if np.max(np.abs(mis), initial=0.0) < tol:
            converged = True
            break
        diag_v = np.diag(v)
        diag_i = np.diag(ibus)
        diag_vn = np.diag(v / np.abs(v))
        ds_dvm = diag_v @ np.conj(y @ diag_vn) + np.conj(diag_i) @ diag_vn
        ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
        jac = np.block([
            [ds_dva[np.ix_(pq, pq)].real, ds_dvm[np.ix_(pq, pq)].real],
            [ds_dva[np.ix_(pq, pq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
        ])
        step = np.linalg.solve(jac, -np.concatenate([mis.real, mis.imag]))
        m = len(pq)
        angle = np.angle(v)
        mag = np.abs(v)
        angle[pq] += step[:m]
        mag[pq] += step[m:]
        v = mag * np.exp(1j * angle)

    currents = np.array([
        abs((v[model.bus_index[b.from_bus]] - v[model.bus_index[b.to_bus]]) / complex(b.r, b.x))
        for b in model.branches
    ])
    s_slack = v[slack] * np.conj((y @ v)[slack])
    return NewtonResult(
        v=np.abs(v),
        i=currents,
        p_slack=float(s_slack.real),
        q_slack=float(s_slack.imag),
        converged=converged,
    )
