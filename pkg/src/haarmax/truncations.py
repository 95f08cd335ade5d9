"""Scale truncations, maximal truncations, linearizations and their adjoints.

Scales are addressed by level: the window [eps, ups] of side lengths
corresponds to the level range ups_level <= level(Q) <= eps_level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dyadic import DyadicCube, GridFunction
from .shifts import HaarShift, as_level_masks


def window_levels(S: HaarShift, eps: float, ups: float) -> tuple[int, int]:
    """(coarsest, finest) level with eps <= side <= ups."""
    if eps > ups:
        raise ValueError("truncation window needs eps <= ups")
    if eps <= 0:
        raise ValueError("truncation scales must be positive")
    top = max(0, math.ceil(-math.log2(ups) - 1e-12))
    bottom = min(S.system.depth, math.floor(-math.log2(eps) + 1e-12))
    return top, bottom


def truncated_apply(S: HaarShift, f: GridFunction, eps: float, ups: float) -> GridFunction:
    top, bottom = window_levels(S, eps, ups)
    return level_truncated_apply(S, f, top, bottom)


def level_truncated_apply(S: HaarShift, f: GridFunction, top: int, bottom: int) -> GridFunction:
    values = S._values(f)
    out = np.zeros(S.system.n_cells)
    for lev in range(max(top, 0), min(bottom, S.system.depth) + 1):
        if lev in S.blocks:
            out = out + S.level_apply(lev, values)
    return GridFunction(S.system, out)


def prefix_sums(S: HaarShift, values: np.ndarray) -> np.ndarray:
    """P[0] = 0 and P[j] = sum of the j coarsest per-scale contributions."""
    rows = S.scale_contributions(values)
    P = np.zeros((rows.shape[0] + 1, rows.shape[1]))
    for j, row in enumerate(rows):
        P[j + 1] = P[j] + row
    return P


def maximal_truncation(S: HaarShift, f: GridFunction) -> GridFunction:
    P = prefix_sums(S, S._values(f))
    return GridFunction(S.system, P.max(axis=0) - P.min(axis=0))


def restricted_maximal_truncations(S: HaarShift, f: GridFunction) -> np.ndarray:
    """Row l: sup over windows using only levels >= l (sides <= 2^-l)."""
    rows = S.scale_contributions(S._values(f))
    depth = S.system.depth
    out = np.zeros((depth + 1, S.system.n_cells))
    for top in range(depth + 1):
        acc = np.zeros(S.system.n_cells)
        hi = acc.copy()
        lo = acc.copy()
        for lev in range(top, depth + 1):
            acc = acc + rows[lev]
            hi = np.maximum(hi, acc)
            lo = np.minimum(lo, acc)
        out[top] = hi - lo
    return out


@dataclass(frozen=True)
class Linearization:
    """Frozen per-cell window [eps(x), ups(x)] and sign."""

    shift: HaarShift
    top: np.ndarray     # coarsest level of the window (ups = 2^-top)
    bottom: np.ndarray  # finest level of the window (eps = 2^-bottom)
    sign: np.ndarray

    def __post_init__(self):
        N = self.shift.system.n_cells
        for name in ("top", "bottom", "sign"):
            if getattr(self, name).shape != (N,):
                raise ValueError(f"{name} must have one entry per cell")
        if np.any(self.top > self.bottom) or np.any(self.top < 0) or np.any(self.bottom > self.shift.system.depth):
            raise ValueError("windows must satisfy 0 <= top <= bottom <= depth")
        if not np.all(np.abs(self.sign) == 1):
            raise ValueError("signs must be +1 or -1")

    @property
    def eps(self) -> np.ndarray:
        return 2.0 ** (-self.bottom.astype(float))

    @property
    def ups(self) -> np.ndarray:
        return 2.0 ** (-self.top.astype(float))

    def active(self, level: int) -> np.ndarray:
        return (self.top <= level) & (level <= self.bottom)


def canonical_linearization(S: HaarShift, f: GridFunction, upper_only: bool = False) -> Linearization:
    """Window attaining the maximal truncation at every cell.

    Among maximizing windows the smallest ups (finest top level) wins, then
    the largest eps (coarsest bottom level).  With ``upper_only`` the window
    always reaches the finest scale.
    """
    P = prefix_sums(S, S._values(f))
    K = P.shape[0]
    N = P.shape[1]
    if upper_only:
        tail = P[-1][None, :] - P[:-1]       # window [i, depth]
        val = np.abs(tail)
        best = val.max(axis=0)
        hits = val == best[None, :]
        i = K - 2 - np.argmax(hits[::-1], axis=0)
        top = i
        bottom = np.full(N, S.system.depth)
        s = np.where(tail[i, np.arange(N)] >= 0, 1.0, -1.0)
        return Linearization(S, top.astype(np.int64), bottom.astype(np.int64), s)
    best = P.max(axis=0) - P.min(axis=0)
    # candidate pairs i < j with |P_j - P_i| == best
    diff = P[None, :, :] - P[:, None, :]          # diff[i, j] = P_j - P_i
    ii, jj = np.meshgrid(np.arange(K), np.arange(K), indexing="ij")
    valid = (ii < jj)[:, :, None] & (np.abs(diff) == best[None, None, :])
    # order: largest i first, then smallest j
    rank = (K - 1 - ii) * K + jj
    rank = np.where(valid, rank[:, :, None], K * K + 1)
    flat = rank.reshape(K * K, N).argmin(axis=0)
    i, j = np.divmod(flat, K)
    sgn = np.where(diff[i, j, np.arange(N)] >= 0, 1.0, -1.0)
    return Linearization(S, i.astype(np.int64), (j - 1).astype(np.int64), sgn)


def random_linearization(S: HaarShift, seed=0, upper_only: bool = False) -> Linearization:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    N, depth = S.system.n_cells, S.system.depth
    a = rng.integers(0, depth + 1, size=N)
    b = rng.integers(0, depth + 1, size=N)
    top, bottom = np.minimum(a, b), np.maximum(a, b)
    if upper_only:
        top, bottom = a, np.full(N, depth)
    sign = rng.choice([-1.0, 1.0], size=N)
    return Linearization(S, top.astype(np.int64), bottom.astype(np.int64), sign)


def full_linearization(S: HaarShift, sign: float = 1.0) -> Linearization:
    """The untruncated operator itself, viewed as a linearization."""
    N = S.system.n_cells
    return Linearization(S, np.zeros(N, dtype=np.int64), np.full(N, S.system.depth, dtype=np.int64),
                         np.full(N, float(sign)))


def linearize_apply(L: Linearization, g: GridFunction) -> GridFunction:
    S = L.shift
    P = prefix_sums(S, S._values(g))
    cols = np.arange(S.system.n_cells)
    val = P[L.bottom + 1, cols] - P[L.top, cols]
    return GridFunction(S.system, L.sign * val)


def adjoint_apply(L: Linearization, nu: GridFunction, family=None) -> GridFunction:
    """L* nu = sum_Q S_Q^*(1_{window contains level(Q)} sign nu).

    ``family`` restricts the sum to base cubes Q of a cube family (given as
    cubes or as per-level boolean masks).
    """
    S = L.shift
    values = S._values(nu)
    masks = None if family is None else as_level_masks(S.system, family)
    out = np.zeros(S.system.n_cells)
    for lev in sorted(S.blocks):
        keep = None
        if masks is not None:
            keep = masks.get(lev)
            if keep is None or not keep.any():
                continue
        weighted = np.where(L.active(lev), L.sign * values, 0.0)
        out = out + S.level_adjoint(lev, weighted, keep)
    return GridFunction(S.system, out)


def smoothness_verify(L: Linearization, nu: GridFunction, Q0: DyadicCube, rtol: float = 1e-12) -> bool:
    """L* nu is constant on the subcubes of Q0 of side 2^-n side(Q0) when nu = 0 on Q0."""
    S = L.shift
    sysm = S.system
    sl = sysm.cell_slice(Q0)
    if np.any(nu.values[sl] != 0):
        raise ValueError("nu must vanish on Q0")
    lev = min(Q0.level + S.n, sysm.depth)
    vals = adjoint_apply(L, nu).values[sl].reshape(-1, sysm.block(lev))
    scale = max(1.0, float(np.abs(vals).max()))
    return bool(np.all(vals.max(axis=1) - vals.min(axis=1) <= rtol * scale))
