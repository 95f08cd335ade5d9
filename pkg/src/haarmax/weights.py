"""Weights, dual weights, Muckenhoupt characteristics and weighted norms."""

from __future__ import annotations

from functools import cached_property

import numpy as np

from .dyadic import DyadicCube, DyadicSystem, GridFunction


def conjugate(p: float) -> float:
    check_exponent(p)
    return p / (p - 1.0)


def check_exponent(p: float) -> None:
    if not (1.0 < p < np.inf):
        raise ValueError(f"exponent must satisfy 1 < p < inf, got {p}")


class Weight:
    """Strictly positive density together with its cube masses."""

    def __init__(self, density: GridFunction | np.ndarray, system: DyadicSystem | None = None):
        if not isinstance(density, GridFunction):
            density = GridFunction(system, np.asarray(density, dtype=float))
        if not np.all(np.isfinite(density.values)) or np.any(density.values <= 0):
            raise ValueError("weights must be finite and strictly positive")
        self.density = density

    @property
    def system(self) -> DyadicSystem:
        return self.density.system

    @property
    def values(self) -> np.ndarray:
        return self.density.values

    @cached_property
    def masses(self) -> list[np.ndarray]:
        """w(Q) for every cube, one array per level."""
        return self.system.pyramid(self.values)

    @cached_property
    def means(self) -> list[np.ndarray]:
        return [m / self.system.volume(lev) for lev, m in enumerate(self.masses)]

    def mass(self, Q: DyadicCube) -> float:
        return float(self.masses[Q.level][self.system.flat(Q)])

    def mean(self, Q: DyadicCube) -> float:
        return self.mass(Q) / Q.volume(self.system.dim)

    def measure(self, mask: np.ndarray) -> float:
        return float(self.values[mask].sum()) * self.system.cell_volume

    def on(self, system: DyadicSystem) -> "Weight":
        return Weight(self.density.on(system))

    @classmethod
    def lebesgue(cls, system: DyadicSystem) -> "Weight":
        return cls(system.constant(1.0))


def dual_weight(w: Weight, p: float) -> Weight:
    """sigma = w^(1-p') = w^(-1/(p-1))."""
    check_exponent(p)
    return Weight(GridFunction(w.system, w.values ** (-1.0 / (p - 1.0))))


def ap_ratios(w: Weight, p: float, sigma: Weight | None = None) -> list[np.ndarray]:
    """(w(Q)/|Q|)(sigma(Q)/|Q|)^(p-1) for every cube, per level."""
    sigma = sigma or dual_weight(w, p)
    return [a * b ** (p - 1.0) for a, b in zip(w.means, sigma.means)]


def ap_characteristic(w: Weight, p: float) -> float:
    return max(float(r.max()) for r in ap_ratios(w, p))


def two_weight_a2(w: Weight, sigma: Weight) -> float:
    return max(float((a * b).max()) for a, b in zip(w.means, sigma.means))


def _local_maximal_integrals(w: Weight) -> list[np.ndarray]:
    """For each cube Q, the integral over Q of M(w 1_Q)."""
    sysm = w.system
    running = w.values.copy()
    out = [None] * (sysm.depth + 1)
    for lev in range(sysm.depth, -1, -1):
        running = np.maximum(running, sysm.upsample(w.means[lev], lev))
        out[lev] = sysm.level_sums(running, lev)
    return out


def ainfty_characteristic(w: Weight, mode: str = "wilson") -> float:
    if mode == "wilson":
        ints = _local_maximal_integrals(w)
        return max(float((i / m).max()) for i, m in zip(ints, w.masses))
    if mode == "hruscev":
        logs = w.system.pyramid(-np.log(w.values))
        vals = []
        for lev, (m, lg) in enumerate(zip(w.means, logs)):
            vals.append(float((m * np.exp(lg / w.system.volume(lev))).max()))
        return max(vals)
    raise ValueError(f"unknown A_infinity mode {mode!r}")


def power_weight(system: DyadicSystem, a: float, center=None) -> Weight:
    """|x - c|^a on the cells; exact cell averages in one dimension."""
    c = np.zeros(system.dim) if center is None else np.atleast_1d(np.asarray(center, float))
    h = 2.0 ** (-system.depth)
    if system.dim == 1:
        if a <= -1:
            raise ValueError("|x|^a with a <= -1 is not locally integrable")
        c0 = float(c[0])
        if abs(c0 / h - round(c0 / h)) > 1e-12:
            raise ValueError("center must lie on a cell boundary")
        lo = system.cell_lower_corners()[:, 0] - c0
        hi = lo + h

        def prim(t):
            return np.sign(t) * np.abs(t) ** (a + 1.0) / (a + 1.0)

        vals = (prim(hi) - prim(lo)) / h
        return Weight(GridFunction(system, vals))
    mids = system.cell_centers()
    r = np.linalg.norm(mids - c, axis=1)
    if np.any(r == 0):
        raise ValueError("center coincides with a cell midpoint")
    return Weight(GridFunction(system, r**a))


def lp_norm(f: GridFunction, w: Weight | None, p: float) -> float:
    wv = 1.0 if w is None else w.values
    s = float(np.sum(np.abs(f.values) ** p * wv)) * f.system.cell_volume
    return s ** (1.0 / p)


def lorentz_weak_norm(f: GridFunction, w: Weight | None, p: float) -> float:
    """sup_t t w(|f| > t)^(1/p), attained at the distinct values of |f|."""
    a = np.abs(f.values)
    wv = np.ones_like(a) if w is None else w.values
    order = np.argsort(-a, kind="stable")
    a_sorted = a[order]
    mass = np.cumsum(wv[order]) * f.system.cell_volume
    # last position of each run of equal values carries the full superlevel mass
    last = np.r_[a_sorted[1:] != a_sorted[:-1], True]
    cand = a_sorted[last] * mass[last] ** (1.0 / p)
    return float(cand.max()) if cand.size else 0.0


def concentration_bound_check(w: Weight, p: float, Q: DyadicCube, E: np.ndarray,
                              ap: float | None = None):
    """Check (|E|/|Q|)^p / [w]_Ap <= w(E)/w(Q) for a cell mask E inside Q.

    Returns (holds, lhs, rhs).  A relative slack of 1e-12 absorbs rounding.
    """
    sysm = w.system
    E = np.asarray(E, dtype=bool)
    inside = np.zeros(sysm.n_cells, dtype=bool)
    inside[sysm.cell_slice(Q)] = True
    if np.any(E & ~inside):
        raise ValueError("E must be contained in Q")
    ap = ap_characteristic(w, p) if ap is None else ap
    lhs = (E.sum() * sysm.cell_volume / Q.volume(sysm.dim)) ** p / ap
    rhs = w.measure(E) / w.mass(Q)
    return bool(lhs <= rhs * (1 + 1e-12)), float(lhs), float(rhs)
