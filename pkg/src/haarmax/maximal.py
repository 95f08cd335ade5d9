"""Dyadic maximal operators, linearized maximal operators, Buckley constants."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .dyadic import DyadicCube, GridFunction
from .weights import Weight, lorentz_weak_norm, lp_norm


def level_averages(f: GridFunction, w: Weight | None = None) -> list[np.ndarray]:
    """w-averages of f over every cube, one array per level."""
    sysm = f.system
    if w is None:
        return [sysm.level_means(f.values, lev) for lev in range(sysm.depth + 1)]
    num = sysm.pyramid(f.values * w.values)
    return [a / b for a, b in zip(num, w.masses)]


def dyadic_maximal(f: GridFunction, w: Weight | None = None) -> GridFunction:
    """M_w f(x) = max over dyadic Q containing x of w(Q)^-1 int_Q |f| w."""
    sysm = f.system
    avgs = level_averages(abs(f), w)
    out = np.abs(f.values).copy() if w is None else sysm.upsample(avgs[sysm.depth], sysm.depth)
    for lev in range(sysm.depth - 1, -1, -1):
        out = np.maximum(out, sysm.upsample(avgs[lev], lev))
    return GridFunction(sysm, out)


def maximal_levels(f: GridFunction, w: Weight | None = None) -> np.ndarray:
    """Per cell, the coarsest level attaining the maximal average of |f|."""
    sysm = f.system
    avgs = level_averages(abs(f), w)
    stack = np.stack([sysm.upsample(a, lev) for lev, a in enumerate(avgs)])
    return np.argmax(stack, axis=0)


class SetSelection:
    """Disjoint sets E(Q) subset Q, stored as a per-cell level choice.

    ``levels[x] = l`` puts cell x into E(Q) for the level-l cube Q containing
    x; ``-1`` leaves x unselected.
    """

    def __init__(self, system, levels: np.ndarray):
        levels = np.asarray(levels, dtype=np.int64)
        if levels.shape != (system.n_cells,) or np.any(levels < -1) or np.any(levels > system.depth):
            raise ValueError("selection levels must be in -1..depth per cell")
        self.system = system
        self.levels = levels

    @classmethod
    def from_sets(cls, system, sets: Mapping[DyadicCube, np.ndarray | Sequence[int]]) -> "SetSelection":
        levels = np.full(system.n_cells, -1, dtype=np.int64)
        for Q, cells in sets.items():
            cells = np.asarray(cells)
            if cells.dtype == bool:
                cells = np.nonzero(cells)[0]
            sl = system.cell_slice(Q)
            if np.any((cells < sl.start) | (cells >= sl.stop)):
                raise ValueError(f"E({Q}) is not contained in {Q}")
            if np.any(levels[cells] != -1):
                raise ValueError("selected sets overlap")
            levels[cells] = Q.level
        return cls(system, levels)

    @classmethod
    def empty(cls, system) -> "SetSelection":
        return cls(system, np.full(system.n_cells, -1))


def linearized_maximal(f: GridFunction, w: Weight | None, sel: SetSelection) -> GridFunction:
    """N f = sum_Q 1_{E(Q)} E^w_Q f."""
    sysm = f.system
    avgs = level_averages(f, w)
    out = np.zeros(sysm.n_cells)
    for lev, a in enumerate(avgs):
        hit = sel.levels == lev
        if hit.any():
            out[hit] = sysm.upsample(a, lev)[hit]
    return GridFunction(sysm, out)


def buckley_constants(w: Weight, sigma: Weight, p: float, bank: Sequence[GridFunction]):
    """Bank lower bounds for ||M(f sigma)||_{L^p(w)} / ||f||_{L^p(sigma)} (strong, weak)."""
    if not bank:
        raise ValueError("empty test bank")
    strong = weak = 0.0
    for f in bank:
        den = lp_norm(f, sigma, p)
        if den == 0:
            continue
        Mf = dyadic_maximal(f * sigma.values)
        strong = max(strong, lp_norm(Mf, w, p) / den)
        weak = max(weak, lorentz_weak_norm(Mf, w, p) / den)
    return strong, weak
