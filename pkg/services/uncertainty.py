"""Box/budget uncertainty set on per-node forecast deviations."""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from services.errors import InputError


@dataclass(frozen=True, eq=False)
class UncertaintyModel:
    """Realizations w with |w_i| ≤ 1 and Σ|w_i| ≤ budget, scaled per node by level·half-width."""
    level: float
    budget: float
    node_ids: Tuple[str, ...] = ()
    p_halfwidth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    q_halfwidth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_level: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.budget) and self.budget >= 0):
            raise InputError(f"uncertainty budget must be non-negative, got {self.budget}")
        if not math.isfinite(self.level) or abs(self.level) > self.max_level:
            raise InputError(f"uncertainty level {self.level} outside [-{self.max_level}, {self.max_level}]")
        object.__setattr__(self, "p_halfwidth", np.asarray(self.p_halfwidth, dtype=float))
        object.__setattr__(self, "q_halfwidth", np.asarray(self.q_halfwidth, dtype=float))
        n = len(self.node_ids)
        if self.p_halfwidth.shape != (n,) or self.q_halfwidth.shape != (n,):
            raise InputError(f"half-widths must have one entry per uncertain node ({n})")
        if np.any(self.p_halfwidth < 0) or np.any(self.q_halfwidth < 0):
            raise InputError("forecast half-widths must be non-negative")

    @property
    def is_trivial(self) -> bool:
        return self.level == 0.0 or self.budget == 0.0

    def halfwidths_for(self, node_ids: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        """Half-widths aligned to node_ids; nodes not in the model get zero."""
        index = {node: k for k, node in enumerate(self.node_ids)}
        hp = np.array([self.p_halfwidth[index[n]] if n in index else 0.0 for n in node_ids])
        hq = np.array([self.q_halfwidth[index[n]] if n in index else 0.0 for n in node_ids])
        return hp, hq


def budget_dual_norm(values: Sequence[float], budget: float) -> float:
    """max Σ w_i v_i over |w_i| ≤ 1, Σ|w_i| ≤ budget."""
    if budget < 0:
        raise InputError(f"uncertainty budget must be non-negative, got {budget}")
    mags = np.sort(np.abs(np.asarray(values, dtype=float)))[::-1]
    if budget >= len(mags):
        return float(mags.sum())
    whole = int(math.floor(budget))
    return float(mags[:whole].sum() + (budget - whole) * mags[whole])


def worst_case_realization(
    unc: UncertaintyModel,
    sign: int,
    weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Admissible w pushing sign·Σ w_i·weight_i to its extreme.

    Weights default to the active half-widths; the budget goes to the largest first.
    """
    if sign not in (-1, 0, 1):
        raise InputError(f"realization sign must be -1, 0 or +1, got {sign}")
    weights = unc.p_halfwidth if weights is None else np.asarray(weights, dtype=float)
    w = np.zeros(len(unc.node_ids))
    if sign == 0:
        return w
    remaining = unc.budget
    # stable sort keeps node order on ties
    for k in np.argsort(-np.abs(weights), kind="stable"):
        if remaining <= 0 or weights[k] == 0:
            break
        share = min(1.0, remaining)
        w[k] = sign * share * np.sign(weights[k])
        remaining -= share
    return w


def is_admissible(w: Sequence[float], budget: float, tol: float = 1e-9) -> bool:
    w = np.asarray(w, dtype=float)
    return bool(np.all(np.abs(w) <= 1.0 + tol) and np.sum(np.abs(w)) <= budget + tol)


def sample_realizations(unc: UncertaintyModel, count: int, seed: int = 0) -> np.ndarray:
    """Random admissible realizations, one per row."""
    rng = np.random.default_rng(seed)
    draws = rng.uniform(-1.0, 1.0, size=(count, len(unc.node_ids)))
    norms = np.abs(draws).sum(axis=1)
    scale = np.where(norms > unc.budget, unc.budget / np.maximum(norms, 1e-300), 1.0)
    return draws * scale[:, None]
