"""Discrete 30-action space over fluid volume and vasopressor intensity.

Fluids are binned into 5 quintile bins of the nonzero dose distribution
(zero fluid joins the lowest bin). Vasopressor intensity (VIS) gets a
dedicated zero bin plus 5 quintile bins of the strictly positive doses,
because initiating vasopressors is a clinically meaningful cutoff. Bins are
left-open/right-closed; an action id encodes the (fluid_bin, vaso_bin) pair
vaso-major: ``id = (vaso_bin - 1) * 5 + (fluid_bin - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DataError, InsufficientDataError

N_FLUID_BINS = 5
N_VASO_BINS = 6
N_ACTIONS = N_FLUID_BINS * N_VASO_BINS


def _ascending(values) -> bool:
    return all(a < b for a, b in zip(values, values[1:]))


@dataclass(frozen=True)
class ActionGrid:
    """Dose cutoffs defining the 30-action space.

    fluid_cutoffs: 4 ascending upper bounds; fluid bin 1 is [0, c0] and bin
    i>1 is (c_{i-2}, c_{i-1}], with bin 5 open above.
    vis_cutoffs: 5 ascending values with vis_cutoffs[0] == 0; vaso bin 1 is
    exactly VIS = 0, bin i>1 is (c_{i-2}, c_{i-1}], bin 6 open above.
    """

    fluid_cutoffs: tuple[float, float, float, float]
    vis_cutoffs: tuple[float, float, float, float, float]

    def __post_init__(self):
        if len(self.fluid_cutoffs) != 4 or len(self.vis_cutoffs) != 5:
            raise DataError("grid needs 4 fluid cutoffs and 5 VIS cutoffs")
        if self.vis_cutoffs[0] != 0.0:
            raise DataError("first VIS cutoff must be 0 (the zero-dose bin)")
        if not _ascending(self.fluid_cutoffs) or not _ascending(self.vis_cutoffs):
            raise DataError("cutoffs must be strictly ascending")

    def to_dict(self) -> dict:
        return {"fluid_cutoffs": list(self.fluid_cutoffs), "vis_cutoffs": list(self.vis_cutoffs)}

    @classmethod
    def from_dict(cls, obj: dict) -> "ActionGrid":
        return cls(tuple(obj["fluid_cutoffs"]), tuple(obj["vis_cutoffs"]))


# Cutoffs fitted on a large adult-ICU cohort; the fallback when a dataset
# cannot support quintile fitting (fewer than 5 distinct nonzero doses).
REFERENCE_GRID = ActionGrid(
    fluid_cutoffs=(100.0, 270.0, 500.0, 960.0),
    vis_cutoffs=(0.0, 3.0, 6.0, 10.0, 20.0),
)


def _nearest_rank(sorted_vals: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    n = len(sorted_vals)
    idx = max(int(math.ceil(pct / 100.0 * n)) - 1, 0)
    return float(sorted_vals[idx])


def _nonzero_quintile_cutoffs(values: np.ndarray, what: str) -> tuple[float, ...]:
    nz = np.sort(values[values > 0.0])
    if len(np.unique(nz)) < 5:
        raise InsufficientDataError(
            f"need at least 5 distinct nonzero {what} values to form quintiles, "
            f"got {len(np.unique(nz))}"
        )
    cuts = tuple(_nearest_rank(nz, p) for p in (20, 40, 60, 80))
    if not _ascending(cuts):
        raise InsufficientDataError(f"nonzero {what} quintile cutoffs are not strictly ascending: {cuts}")
    return cuts


def fit_action_grid(doses: Iterable[tuple[float, float]]) -> ActionGrid:
    """Fit quintile cutoffs from observed (fluid_ml, vis) dose pairs.

    Quintiles are taken over the nonzero doses only: zero fluids fall into
    the lowest fluid bin, while a zero VIS is kept as its own bin.
    """
    arr = np.asarray(list(doses) if not isinstance(doses, np.ndarray) else doses, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError("doses must be (fluid_ml, vis) pairs")
    if np.any(arr < 0):
        raise DataError("negative dose")
    fluid_cuts = _nonzero_quintile_cutoffs(arr[:, 0], "fluid")
    vis_cuts = (0.0,) + _nonzero_quintile_cutoffs(arr[:, 1], "VIS")
    return ActionGrid(fluid_cutoffs=fluid_cuts, vis_cutoffs=vis_cuts)


def discretize_doses(grid: ActionGrid, fluid_ml: np.ndarray, vis: np.ndarray) -> np.ndarray:
    """Vectorized dose-pair -> action-id mapping (right-closed bins)."""
    fluid_ml = np.asarray(fluid_ml, dtype=float)
    vis = np.asarray(vis, dtype=float)
    if np.any(fluid_ml < 0) or np.any(vis < 0):
        raise DataError("negative dose")
    fluid_bin = np.searchsorted(np.asarray(grid.fluid_cutoffs), fluid_ml, side="left") + 1
    vaso_bin = np.searchsorted(np.asarray(grid.vis_cutoffs), vis, side="left") + 1
    return (vaso_bin - 1) * N_FLUID_BINS + (fluid_bin - 1)


def discretize_action(grid: ActionGrid, fluid_ml: float, vis: float) -> int:
    """Map one (fluid_ml, vis) pair to its action id in [0, 30)."""
    return int(discretize_doses(grid, np.array([fluid_ml]), np.array([vis]))[0])


def action_id(fluid_bin: int, vaso_bin: int) -> int:
    if not (1 <= fluid_bin <= N_FLUID_BINS and 1 <= vaso_bin <= N_VASO_BINS):
        raise DataError(f"bin pair out of range: ({fluid_bin}, {vaso_bin})")
    return (vaso_bin - 1) * N_FLUID_BINS + (fluid_bin - 1)


def action_components(action: int) -> tuple[int, int]:
    """Inverse of the id encoding: action id -> (fluid_bin, vaso_bin)."""
    if not 0 <= action < N_ACTIONS:
        raise DataError(f"action id out of range: {action}")
    return action % N_FLUID_BINS + 1, action // N_FLUID_BINS + 1


def bin_midpoints(grid: ActionGrid) -> tuple[np.ndarray, np.ndarray]:
    """Representative dose per bin: interval midpoints; open-ended top bins
    use 1.5x their lower cutoff; the zero-VIS bin is exactly 0."""
    fc = grid.fluid_cutoffs
    fluid = [fc[0] / 2.0]
    fluid += [(lo + hi) / 2.0 for lo, hi in zip(fc, fc[1:])]
    fluid.append(fc[-1] * 1.5)
    vc = grid.vis_cutoffs
    vis = [0.0]
    vis += [(lo + hi) / 2.0 for lo, hi in zip(vc, vc[1:])]
    vis.append(vc[-1] * 1.5)
    return np.array(fluid), np.array(vis)
