"""Whitney, corona, principal-cube, adapted and size/density decompositions.

Cube families are handled as per-level boolean masks over the Morton flat
indices of each level (``{level: mask}``); every routine here accepts a
family either in that form or as an iterable of cubes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dyadic import DyadicCube, DyadicSystem, GridFunction
from .shifts import as_level_masks
from .weights import Weight, ap_ratios, check_exponent, dual_weight

Family = Mapping[int, np.ndarray] | Iterable[DyadicCube]


# family plumbing ---------------------------------------------------------------

def family_masks(system: DyadicSystem, family: Family | None) -> dict[int, np.ndarray]:
    """Masks for every level 0..depth (missing levels are empty)."""
    given = {} if family is None else as_level_masks(system, family)
    out = {}
    for lev in range(system.depth + 1):
        m = given.get(lev)
        out[lev] = np.zeros(system.n_cubes(lev), dtype=bool) if m is None else m.copy()
        if out[lev].shape != (system.n_cubes(lev),):
            raise ValueError(f"mask for level {lev} has the wrong length")
    return out


def all_cubes_masks(system: DyadicSystem, within: DyadicCube | None = None) -> dict[int, np.ndarray]:
    out = {}
    for lev in range(system.depth + 1):
        out[lev] = np.ones(system.n_cubes(lev), dtype=bool) if within is None \
            else subtree_mask(system, within, lev)
    return out


def subtree_mask(system: DyadicSystem, Q: DyadicCube, level: int) -> np.ndarray:
    """Level-``level`` cubes contained in Q."""
    mask = np.zeros(system.n_cubes(level), dtype=bool)
    if level >= Q.level:
        span = 2 ** (system.dim * (level - Q.level))
        start = system.flat(Q) * span
        mask[start:start + span] = True
    return mask


def family_cubes(system: DyadicSystem, masks: Mapping[int, np.ndarray]) -> list[DyadicCube]:
    return [system.cube(lev, int(i)) for lev in sorted(masks) for i in np.nonzero(masks[lev])[0]]


def family_size(masks: Mapping[int, np.ndarray]) -> int:
    return int(sum(int(m.sum()) for m in masks.values()))


def _parent_values(arr: np.ndarray, system: DyadicSystem) -> np.ndarray:
    """Spread a level-l array onto level l+1 (each child gets its parent's value)."""
    return np.repeat(arr, system.n_children)


def strict_ancestor_hit(system: DyadicSystem, masks: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    """For each cube, whether some strict ancestor lies in the family."""
    out = {0: np.zeros(1, dtype=bool)}
    for lev in range(1, system.depth + 1):
        up = masks[lev - 1] | out[lev - 1]
        out[lev] = _parent_values(up, system)
    return out


def maximal_elements(system: DyadicSystem, masks: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    masks = family_masks(system, masks)
    hit = strict_ancestor_hit(system, masks)
    return {lev: masks[lev] & ~hit[lev] for lev in masks}


def _family_dump(system: DyadicSystem, masks: Mapping[int, np.ndarray]) -> list[list[int]]:
    return [[Q.level, *Q.index] for Q in family_cubes(system, masks)]


def full_cubes(system: DyadicSystem, cells: np.ndarray) -> dict[int, np.ndarray]:
    """Cubes entirely contained in a cell set."""
    cells = np.asarray(cells, dtype=bool)
    return {lev: cells.reshape(system.n_cubes(lev), -1).all(axis=1) for lev in range(system.depth + 1)}


# Whitney -------------------------------------------------------------------------

@dataclass
class WhitneyDecomposition:
    """Maximal dyadic Q with Q^(zeta) inside Omega = {g > threshold}."""

    system: DyadicSystem
    zeta: int
    threshold: float
    omega: np.ndarray                 # cell mask of Omega
    masks: dict[int, np.ndarray]      # the selected cubes
    unresolved: np.ndarray            # cells of Omega not covered (finite resolution)

    @property
    def cubes(self) -> list[DyadicCube]:
        return family_cubes(self.system, self.masks)

    def covered(self) -> np.ndarray:
        out = np.zeros(self.system.n_cells, dtype=bool)
        for lev, m in self.masks.items():
            out |= self.system.upsample(m.astype(float), lev) > 0
        return out

    def owner_level(self) -> np.ndarray:
        """Per cell, the level of the selected cube containing it (-1 if none)."""
        out = np.full(self.system.n_cells, -1, dtype=np.int64)
        for lev, m in self.masks.items():
            out[self.system.upsample(m.astype(float), lev) > 0] = lev
        return out

    def to_dict(self) -> dict:
        return {"zeta": self.zeta, "threshold": self.threshold,
                "cubes": _family_dump(self.system, self.masks),
                "unresolved_cells": int(self.unresolved.sum())}


def whitney_decompose(g: GridFunction, lam: float, zeta: int) -> WhitneyDecomposition:
    if zeta < 0:
        raise ValueError("zeta must be nonnegative")
    sysm = g.system
    omega = g.values > lam
    inside = full_cubes(sysm, omega)
    cand = {}
    for lev in range(sysm.depth + 1):
        top = lev - zeta
        if top < 0:
            # the ancestor sits above the root, which counts as outside Omega
            cand[lev] = np.zeros(sysm.n_cubes(lev), dtype=bool)
        else:
            cand[lev] = np.repeat(inside[top], 2 ** (sysm.dim * zeta))
    masks = {0: cand[0].copy()}
    for lev in range(1, sysm.depth + 1):
        masks[lev] = cand[lev] & ~_parent_values(cand[lev - 1], sysm)
    dec = WhitneyDecomposition(sysm, zeta, float(lam), omega, masks, np.zeros(0, dtype=bool))
    dec.unresolved = omega & ~dec.covered()
    return dec


def whitney_verify(dec: WhitneyDecomposition) -> dict[str, bool]:
    """Disjoint cover (up to unresolved cells) and the Whitney condition."""
    sysm = dec.system
    count = np.zeros(sysm.n_cells, dtype=np.int64)
    for lev, m in dec.masks.items():
        count += (sysm.upsample(m.astype(float), lev) > 0).astype(np.int64)
    disjoint = bool(count.max(initial=0) <= 1)
    covered = count > 0
    inside_omega = not np.any(covered & ~dec.omega)
    if dec.zeta <= sysm.depth:
        # exactly the cells whose level-(L - zeta) ancestor leaves Omega are unresolved
        anc = full_cubes(sysm, dec.omega)[sysm.depth - dec.zeta]
        res_ok = np.array_equal(~covered & dec.omega,
                                dec.omega & ~(sysm.upsample(anc.astype(float), sysm.depth - dec.zeta) > 0))
    else:
        res_ok = not covered.any()
    inside = full_cubes(sysm, dec.omega)
    whit = True
    for lev, m in dec.masks.items():
        idx = np.nonzero(m)[0]
        if idx.size == 0:
            continue
        d = sysm.dim
        up = lev - dec.zeta
        if up < 0 or not inside[up][idx >> (d * dec.zeta)].all():
            whit = False
        up1 = up - 1
        if up1 >= 0 and inside[up1][idx >> (d * (dec.zeta + 1))].any():
            whit = False
    return {"disjoint": disjoint, "inside": inside_omega, "cover": bool(res_ok), "whitney": bool(whit)}


def whitney_nested_verify(decs: Mapping[int, WhitneyDecomposition]) -> bool:
    """Q in Q_k, Q' in Q_l, Q strictly inside Q' implies k > l."""
    ks = sorted(decs)
    if not ks:
        return True
    sysm = decs[ks[0]].system
    for k in ks:
        for l in ks:
            if l < k:
                continue
            # a cube of Q_k strictly inside a cube of Q_l with l >= k violates nesting
            hit = strict_ancestor_hit(sysm, family_masks(sysm, decs[l].masks))
            for lev, m in decs[k].masks.items():
                if np.any(m & hit[lev]):
                    return False
    return True


# corona ---------------------------------------------------------------------------

@dataclass
class Corona:
    """w-stopping cubes of ``root`` and the partition P(S) of a family."""

    system: DyadicSystem
    root: DyadicCube
    step: int                                   # grid step (kappa + 1); 1 = all cubes
    stopping: dict[int, np.ndarray]             # masks of stopping cubes (root included)
    owner: dict[int, np.ndarray]                # flat index of the owning stopping cube, per level
    owner_level: dict[int, np.ndarray]
    family: dict[int, np.ndarray]
    densities: list[np.ndarray]

    @property
    def stopping_cubes(self) -> list[DyadicCube]:
        return family_cubes(self.system, self.stopping)

    def part(self, S: DyadicCube) -> dict[int, np.ndarray]:
        """Masks of P(S)."""
        out = {}
        for lev, fam in self.family.items():
            out[lev] = fam & (self.owner_level[lev] == S.level) & (self.owner[lev] == self.system.flat(S))
        return out

    def parts(self) -> dict[DyadicCube, dict[int, np.ndarray]]:
        return {S: self.part(S) for S in self.stopping_cubes}

    def stopping_parent(self, S: DyadicCube) -> DyadicCube | None:
        if S == self.root:
            return None
        P = self.system.parent(S)
        return self.system.cube(int(self.owner_level[P.level][self.system.flat(P)]),
                                int(self.owner[P.level][self.system.flat(P)]))

    def to_dict(self) -> dict:
        return {"root": [self.root.level, *self.root.index], "step": self.step,
                "stopping": _family_dump(self.system, self.stopping),
                "parts": {f"{S.level}:{','.join(map(str, S.index))}": _family_dump(self.system, P)
                          for S, P in self.parts().items()}}


def corona_decompose(w: Weight, Q: DyadicCube, family: Family | None = None, step: int = 1) -> Corona:
    """Stopping rule w(S')/|S'| >= 4 w(S)/|S| on the grid of levels level(Q) + j*step.

    The root Q is itself a stopping cube.  The family defaults to all cubes of
    that grid inside Q; it must lie inside Q.
    """
    sysm = w.system
    if step < 1:
        raise ValueError("grid step must be positive")
    fam = family_masks(sysm, family if family is not None else
                       {lev: subtree_mask(sysm, Q, lev) for lev in range(Q.level, sysm.depth + 1, step)})
    for lev, m in fam.items():
        if np.any(m & ~subtree_mask(sysm, Q, lev)):
            raise ValueError("family cubes must lie inside the root cube")
    dens = w.means
    stop, owner, owner_lev = {}, {}, {}
    for lev in range(sysm.depth + 1):
        n = sysm.n_cubes(lev)
        stop[lev] = np.zeros(n, dtype=bool)
        owner[lev] = np.full(n, -1, dtype=np.int64)
        owner_lev[lev] = np.full(n, -1, dtype=np.int64)
    q = sysm.flat(Q)
    stop[Q.level][q] = True
    owner[Q.level][q] = q
    owner_lev[Q.level][q] = Q.level
    ref = np.full(sysm.n_cubes(Q.level), np.nan)
    ref[q] = dens[Q.level][q]
    for lev in range(Q.level + 1, sysm.depth + 1):
        inside = subtree_mask(sysm, Q, lev)
        ref = _parent_values(ref, sysm)
        own = _parent_values(owner[lev - 1], sysm)
        own_lev = _parent_values(owner_lev[lev - 1], sysm)
        if (lev - Q.level) % step == 0:
            new = inside & (dens[lev] >= 4.0 * ref)
        else:
            new = np.zeros_like(inside)
        stop[lev] = new
        idx = np.arange(sysm.n_cubes(lev))
        owner[lev] = np.where(new, idx, np.where(inside, own, -1))
        owner_lev[lev] = np.where(new, lev, np.where(inside, own_lev, -1))
        ref = np.where(new, dens[lev], ref)
    return Corona(sysm, Q, step, stop, owner, owner_lev, fam, dens)


def corona_verify(c: Corona) -> dict[str, bool]:
    """Threshold at selection, the strict bound for P(S), partition, geometric growth."""
    sysm = c.system
    ok_4ps = ok_sel = ok_part = True
    d = c.densities
    for lev, fam in c.family.items():
        idx = np.nonzero(fam)[0]
        if idx.size == 0:
            continue
        ol, of = c.owner_level[lev][idx], c.owner[lev][idx]
        if np.any(ol < 0):
            ok_part = False
            continue
        sd = np.array([d[a][b] for a, b in zip(ol, of)])
        is_top = (ol == lev) & (of == idx)
        if np.any(~is_top & ~(d[lev][idx] < 4.0 * sd)):
            ok_4ps = False
    for S in c.stopping_cubes:
        P = c.stopping_parent(S)
        if P is not None and not d[S.level][sysm.flat(S)] >= 4.0 * d[P.level][sysm.flat(P)]:
            ok_sel = False
    # partition: each family cube is owned by exactly one stopping cube, the minimal container
    parts = c.parts()
    total = family_size(c.family)
    if sum(family_size(P) for P in parts.values()) != total:
        ok_part = False
    return {"e4": ok_sel, "e4ps": ok_4ps, "partition": ok_part}


def stopping_sum_ratio(c: Corona, w: Weight) -> float:
    """sum_S w(S) / w(root)."""
    total = sum(float(w.masses[lev][m].sum()) for lev, m in c.stopping.items())
    return total / w.mass(c.root)


# principal cubes --------------------------------------------------------------------

@dataclass
class PrincipalCubes:
    system: DyadicSystem
    root: DyadicCube
    masks: dict[int, np.ndarray]
    generation: dict[int, np.ndarray]       # generation of principal cubes (-1 otherwise)
    gamma: dict[int, np.ndarray]            # flat index of Gamma(Q)
    gamma_level: dict[int, np.ndarray]
    averages: list[np.ndarray]              # sigma averages of |f|

    @property
    def cubes(self) -> list[DyadicCube]:
        return family_cubes(self.system, self.masks)

    def generations(self) -> list[list[DyadicCube]]:
        top = max(int(g.max(initial=-1)) for g in self.generation.values())
        out = [[] for _ in range(top + 1)]
        for lev, g in self.generation.items():
            for i in np.nonzero(g >= 0)[0]:
                out[g[i]].append(self.system.cube(lev, int(i)))
        return out

    def lookup(self, Q: DyadicCube) -> DyadicCube:
        """Gamma(Q): the minimal principal cube containing Q."""
        f = self.system.flat(Q)
        lev = int(self.gamma_level[Q.level][f])
        if lev < 0:
            raise ValueError(f"{Q} lies outside the root {self.root}")
        return self.system.cube(lev, int(self.gamma[Q.level][f]))

    def packing_ratio(self, sigma: Weight) -> float:
        """sum_G sigma(G) / sigma(root)."""
        total = sum(float(sigma.masses[lev][m].sum()) for lev, m in self.masks.items())
        return total / sigma.mass(self.root)

    def to_dict(self) -> dict:
        return {"root": [self.root.level, *self.root.index],
                "generations": [[[Q.level, *Q.index] for Q in g] for g in self.generations()]}


def principal_cubes(sigma: Weight, f: GridFunction, root: DyadicCube | None = None) -> PrincipalCubes:
    sysm = sigma.system
    root = root or sysm.root
    num = sysm.pyramid(np.abs(f.values) * sigma.values)
    avg = [a / b for a, b in zip(num, sigma.masses)]
    r = sysm.flat(root)
    if not avg[root.level][r] > 0:
        raise ValueError("f vanishes on the root; principal cubes are undefined")
    masks, gen, gam, gam_lev = {}, {}, {}, {}
    for lev in range(sysm.depth + 1):
        n = sysm.n_cubes(lev)
        masks[lev] = np.zeros(n, dtype=bool)
        gen[lev] = np.full(n, -1, dtype=np.int64)
        gam[lev] = np.full(n, -1, dtype=np.int64)
        gam_lev[lev] = np.full(n, -1, dtype=np.int64)
    masks[root.level][r] = True
    gen[root.level][r] = 0
    gam[root.level][r] = r
    gam_lev[root.level][r] = root.level
    ref = np.full(sysm.n_cubes(root.level), np.nan)
    ref[r] = avg[root.level][r]
    cur_gen = np.full(sysm.n_cubes(root.level), -1, dtype=np.int64)
    cur_gen[r] = 0
    for lev in range(root.level + 1, sysm.depth + 1):
        inside = subtree_mask(sysm, root, lev)
        ref = _parent_values(ref, sysm)
        cur_gen = _parent_values(cur_gen, sysm)
        g_up = _parent_values(gam[lev - 1], sysm)
        gl_up = _parent_values(gam_lev[lev - 1], sysm)
        new = inside & (avg[lev] > 4.0 * ref)
        masks[lev] = new
        gen[lev] = np.where(new, cur_gen + 1, -1)
        idx = np.arange(sysm.n_cubes(lev))
        gam[lev] = np.where(new, idx, np.where(inside, g_up, -1))
        gam_lev[lev] = np.where(new, lev, np.where(inside, gl_up, -1))
        ref = np.where(new, avg[lev], ref)
        cur_gen = np.where(new, cur_gen + 1, cur_gen)
    return PrincipalCubes(sysm, root, masks, gen, gam, gam_lev, avg)


def principal_verify(pc: PrincipalCubes) -> bool:
    """E^sigma_Q |f| <= 4 E^sigma_Gamma(Q) |f| for every Q inside the root."""
    for lev in range(pc.root.level, pc.system.depth + 1):
        inside = subtree_mask(pc.system, pc.root, lev)
        idx = np.nonzero(inside)[0]
        gl, gf = pc.gamma_level[lev][idx], pc.gamma[lev][idx]
        ref = np.array([pc.averages[a][b] for a, b in zip(gl, gf)])
        if np.any(pc.averages[lev][idx] > 4.0 * ref):
            return False
    return True


# adapted families --------------------------------------------------------------------

@dataclass
class AdaptedFamily:
    residue: int
    alpha: int
    masks: dict[int, np.ndarray]

    def __len__(self) -> int:
        return family_size(self.masks)


def ap_band(w: Weight, p: float, sigma: Weight | None = None) -> list[np.ndarray]:
    """Band index alpha = floor(log2 ratio) of every cube, clipped at 0."""
    out = []
    for r in ap_ratios(w, p, sigma):
        # the ratio is >= 1 exactly; rounding can push it a hair below
        out.append(np.maximum(np.floor(np.log2(np.maximum(r, 1.0))), 0).astype(np.int64))
    return out


def adapted_partition(family: Family, w: Weight, p: float, kappa: int,
                      sigma: Weight | None = None) -> list[AdaptedFamily]:
    check_exponent(p)
    sysm = w.system
    fam = family_masks(sysm, family)
    bands = ap_band(w, p, sigma)
    step = kappa + 1
    parts: dict[tuple[int, int], AdaptedFamily] = {}
    for lev, m in fam.items():
        if not m.any():
            continue
        r = lev % step
        for a in np.unique(bands[lev][m]):
            key = (r, int(a))
            part = parts.setdefault(key, AdaptedFamily(r, int(a), family_masks(sysm, None)))
            part.masks[lev] |= m & (bands[lev] == a)
    return [parts[k] for k in sorted(parts)]


# size and density -----------------------------------------------------------------------

def ancestor_max_means(g: GridFunction) -> list[np.ndarray]:
    """For each cube Q, sup over Q' containing Q of E_Q' |g|."""
    sysm = g.system
    means = [sysm.level_means(np.abs(g.values), lev) for lev in range(sysm.depth + 1)]
    out = [means[0]]
    for lev in range(1, sysm.depth + 1):
        out.append(np.maximum(means[lev], _parent_values(out[-1], sysm)))
    return out


def l2_means(f: GridFunction) -> list[np.ndarray]:
    sysm = f.system
    return [np.sqrt(sysm.level_means(f.values ** 2, lev)) for lev in range(sysm.depth + 1)]


def size_density(f: GridFunction, g: GridFunction, family: Family) -> tuple[float, float]:
    sysm = f.system
    fam = family_masks(sysm, family)
    sz = l2_means(f)
    dn = ancestor_max_means(g)
    size = max((float(sz[lev][m].max()) for lev, m in fam.items() if m.any()), default=0.0)
    dense = max((float(dn[lev][m].max()) for lev, m in fam.items() if m.any()), default=0.0)
    return size, dense


@dataclass
class SplitPart:
    k: float                          # stage label (density/size modes use the parameter)
    top: DyadicCube
    masks: dict[int, np.ndarray]


@dataclass
class SplitResult:
    mode: str
    rest: dict[int, np.ndarray]       # Q' (density, size) or Q^{-infinity} (combined)
    parts: list[SplitPart] = field(default_factory=list)
    n0: int | None = None

    def tops_measure(self, system: DyadicSystem, k=None) -> float:
        return sum(system.volume(P.top.level) for P in self.parts if k is None or P.k == k)

    def to_dict(self, system: DyadicSystem) -> dict:
        return {"mode": self.mode, "n0": self.n0, "rest": _family_dump(system, self.rest),
                "parts": [{"k": P.k, "top": [P.top.level, *P.top.index],
                           "cubes": _family_dump(system, P.masks)} for P in self.parts]}


def _split_under_tops(system: DyadicSystem, fam: dict[int, np.ndarray], bad: dict[int, np.ndarray],
                      label) -> tuple[dict[int, np.ndarray], list[SplitPart]]:
    """Cut out {Q in fam : Q inside a maximal element of bad}."""
    tops = maximal_elements(system, bad)
    owner = {}
    rest = {}
    parts: dict[tuple[int, int], SplitPart] = {}
    for lev in range(system.depth + 1):
        up = np.full(system.n_cubes(lev), -1, dtype=np.int64) if lev == 0 else \
            _parent_values(owner[lev - 1], system)
        up_lev = np.full(system.n_cubes(lev), -1, dtype=np.int64) if lev == 0 else \
            _parent_values(owner[(lev - 1, "lev")], system)
        idx = np.arange(system.n_cubes(lev))
        owner[lev] = np.where(tops[lev], idx, up)
        owner[(lev, "lev")] = np.where(tops[lev], lev, up_lev)
        under = owner[lev] >= 0
        rest[lev] = fam[lev] & ~under
        for i in np.nonzero(fam[lev] & under)[0]:
            key = (int(owner[(lev, "lev")][i]), int(owner[lev][i]))
            part = parts.get(key)
            if part is None:
                part = parts[key] = SplitPart(label, system.cube(*key), family_masks(system, None))
            part.masks[lev][i] = True
    ordered = [parts[k] for k in sorted(parts)]
    return rest, ordered


def density_split(family: Family, g: GridFunction, delta: float) -> SplitResult:
    if delta <= 0:
        raise ValueError("delta must be positive")
    sysm = g.system
    fam = family_masks(sysm, family)
    g1 = float(np.abs(g.values).sum()) * sysm.cell_volume
    dn = ancestor_max_means(g)
    bad = {lev: fam[lev] & (dn[lev] > delta * g1) for lev in fam}
    rest, parts = _split_under_tops(sysm, fam, bad, delta)
    return SplitResult("density", rest, parts)


def size_split(family: Family, f: GridFunction, sig: float) -> SplitResult:
    if sig <= 0:
        raise ValueError("sigma must be positive")
    sysm = f.system
    fam = family_masks(sysm, family)
    f2 = math.sqrt(float((f.values ** 2).sum()) * sysm.cell_volume)
    sz = l2_means(f)
    bad = {lev: fam[lev] & (sz[lev] > sig * f2) for lev in fam}
    rest, parts = _split_under_tops(sysm, fam, bad, sig)
    return SplitResult("size", rest, parts)


def combined_split(family: Family, f: GridFunction, g: GridFunction, n0: int,
                   k_floor: int = -200) -> SplitResult:
    """Iterated density/size splitting into the parts Q^k_j and Q^{-infinity}."""
    sysm = f.system
    fam = family_masks(sysm, family)
    g1 = float(np.abs(g.values).sum()) * sysm.cell_volume
    f2 = math.sqrt(float((f.values ** 2).sum()) * sysm.cell_volume)
    size, dense = size_density(f, g, fam)
    if dense > 2.0 ** (2 * n0) * g1 or size > 2.0 ** n0 * f2:
        raise ValueError(f"n0={n0} too small: dense={dense!r} vs {2.0 ** (2 * n0) * g1!r}, "
                         f"size={size!r} vs {2.0 ** n0 * f2!r}")
    dn = ancestor_max_means(g)
    sz = l2_means(f)
    parts: list[SplitPart] = []
    k = n0
    while family_size(fam) and k > k_floor:
        bad = {lev: fam[lev] & (dn[lev] > 2.0 ** (2 * (k - 1)) * g1) for lev in fam}
        fam, p1 = _split_under_tops(sysm, fam, bad, k)
        bad = {lev: fam[lev] & (sz[lev] > 2.0 ** (k - 1) * f2) for lev in fam}
        fam, p2 = _split_under_tops(sysm, fam, bad, k)
        parts.extend(p1 + p2)
        k -= 1
        if not any((fam[lev] & ((dn[lev] > 0) | (sz[lev] > 0))).any() for lev in fam):
            break
    return SplitResult("combined", fam, parts, n0)


def split_decompose(family: Family, f: GridFunction | None, g: GridFunction | None, mode: str,
                    param: float) -> SplitResult:
    if mode == "density":
        return density_split(family, g, param)
    if mode == "size":
        return size_split(family, f, param)
    if mode == "combined":
        return combined_split(family, f, g, int(param))
    raise ValueError(f"unknown split mode {mode!r}")


def split_verify(res: SplitResult, family: Family, f: GridFunction | None, g: GridFunction | None,
                 param: float) -> dict[str, bool]:
    """Check every stated conclusion of the split by direct measurement."""
    sysm = (f if f is not None else g).system
    fam = family_masks(sysm, family)
    out: dict[str, bool] = {}
    # disjoint union reproducing the family
    total = {lev: res.rest[lev].astype(np.int64) for lev in fam}
    for P in res.parts:
        for lev in fam:
            total[lev] = total[lev] + P.masks[lev]
    out["partition"] = all(np.array_equal(total[lev], fam[lev].astype(np.int64)) for lev in fam)
    inside = True
    for P in res.parts:
        for lev, m in P.masks.items():
            if np.any(m & ~subtree_mask(sysm, P.top, lev)):
                inside = False
    out["contained"] = inside
    if res.mode == "density":
        g1 = float(np.abs(g.values).sum()) * sysm.cell_volume
        out["dense_rest"] = size_density(g, g, res.rest)[1] <= param * g1
        out["measure"] = res.tops_measure(sysm) <= 1.0 / param
    elif res.mode == "size":
        f2 = math.sqrt(float((f.values ** 2).sum()) * sysm.cell_volume)
        out["size_rest"] = size_density(f, f, res.rest)[0] <= param * f2
        out["measure"] = res.tops_measure(sysm) <= param ** -2
    else:
        g1 = float(np.abs(g.values).sum()) * sysm.cell_volume
        f2 = math.sqrt(float((f.values ** 2).sum()) * sysm.cell_volume)
        ok_i = ok_ii = ok_iii = True
        for k in sorted({P.k for P in res.parts}):
            for P in res.parts:
                if P.k != k:
                    continue
                sz, dn = size_density(f, g, P.masks)
                ok_i &= dn <= 2.0 ** (2 * k) * g1
                ok_ii &= sz <= 2.0 ** k * f2
            ok_iii &= res.tops_measure(sysm, k) <= 8.0 * 2.0 ** (-2 * k)
        vanish = True
        for lev, m in res.rest.items():
            idx = np.nonzero(m)[0]
            if idx.size:
                gs = sysm.level_sums(np.abs(g.values), lev)[idx]
                fs = sysm.level_sums(f.values ** 2, lev)[idx]
                vanish &= bool(np.all(gs == 0) and np.all(fs == 0))
        out.update({"i": bool(ok_i), "ii": bool(ok_ii), "iii": bool(ok_iii), "iv": bool(vanish)})
    return out


# John-Nirenberg --------------------------------------------------------------------------

@dataclass
class JohnNirenbergReport:
    hypotheses: dict[str, bool]
    failed_cubes: list[DyadicCube]
    measured_delta: float
    delta: float
    ratios: dict[float, float]          # t -> worst |{phi* > t}| / (delta^{(t-1)/2} |R|)

    @property
    def holds(self) -> bool | None:
        if not all(self.hypotheses.values()):
            return None
        return all(r <= 1.0 for r in self.ratios.values())


def phi_rows(system: DyadicSystem, phi: Mapping[DyadicCube, GridFunction | np.ndarray],
             levels: Sequence[int]) -> tuple[np.ndarray, dict[str, bool], list[DyadicCube]]:
    """Stack sum_{level(Q)=l} phi_Q per grid level; check hypotheses (1) and (2)."""
    pos = {lev: i for i, lev in enumerate(levels)}
    rows = np.zeros((len(levels), system.n_cells))
    support = const = bounded = True
    bad: list[DyadicCube] = []
    step = levels[1] - levels[0] if len(levels) > 1 else system.depth + 1
    for Q, v in phi.items():
        v = v.values if isinstance(v, GridFunction) else np.asarray(v, dtype=float)
        if Q.level not in pos:
            raise ValueError(f"{Q} is not on the scale-separated grid")
        sl = system.cell_slice(Q)
        ok = True
        if np.any(v[:sl.start] != 0) or np.any(v[sl.stop:] != 0):
            support = ok = False
        child = Q.level + step
        if child <= system.depth:
            blocks = v.reshape(system.n_cubes(child), -1)
            if np.any(blocks.max(axis=1) != blocks.min(axis=1)):
                const = ok = False
        if np.abs(v).max(initial=0.0) > 1.0:
            bounded = ok = False
        if not ok:
            bad.append(Q)
        rows[pos[Q.level]] += v
    return rows, {"support": support, "constant": const, "bounded": bounded}, bad


def phi_star(rows: np.ndarray, start: int) -> np.ndarray:
    """max over j >= start of |sum_{start <= i <= j} rows[i]| per cell."""
    acc = np.zeros(rows.shape[1])
    best = np.zeros(rows.shape[1])
    for i in range(start, rows.shape[0]):
        acc = acc + rows[i]
        best = np.maximum(best, np.abs(acc))
    return best


def grid_levels(system: DyadicSystem, step: int, residue: int) -> list[int]:
    return list(range(residue % step, system.depth + 1, step))


def john_nirenberg_verify(phi: Mapping[DyadicCube, GridFunction | np.ndarray], step: int,
                          residue: int, delta: float | None = None,
                          t_grid: Sequence[float] = tuple(range(2, 11)),
                          R: DyadicCube | None = None) -> JohnNirenbergReport:
    """Hypotheses of the John-Nirenberg lemma on every grid cube, then its conclusion.

    ``delta=None`` uses the measured hypothesis constant.  With ``R=None`` the
    conclusion is checked on every grid cube.
    """
    if not phi:
        raise ValueError("empty phi family; pass at least one cube")
    system = _system_of(phi)
    levels = grid_levels(system, step, residue)
    rows, hyp, bad = phi_rows(system, phi, levels)
    measured = 0.0
    stars = {}
    for i, lev in enumerate(levels):
        st = phi_star(rows, i)
        stars[lev] = st
        frac = (st > 1.0).reshape(system.n_cubes(lev), -1).mean(axis=1)
        measured = max(measured, float(frac.max()))
    if delta is None:
        # phi* <= 1 everywhere makes every delta admissible; report a nominal one
        d = measured if measured > 0 else 0.5
    else:
        d = float(delta)
    hyp["delta"] = 0.0 < d < 1.0 and measured <= d
    ratios = {}
    targets = levels if R is None else [R.level]
    for t in t_grid:
        worst = 0.0
        for lev in targets:
            frac = (stars[lev] > t).reshape(system.n_cubes(lev), -1).mean(axis=1)
            if R is not None:
                frac = frac[system.flat(R)][None]
            bound = d ** ((t - 1) / 2.0) if d > 0 else 0.0
            if bound > 0:
                worst = max(worst, float(frac.max()) / bound)
            elif frac.max() > 0:
                worst = math.inf
        ratios[float(t)] = worst
    return JohnNirenbergReport(hyp, bad, measured, d, ratios)


def _system_of(phi: Mapping[DyadicCube, GridFunction | np.ndarray]) -> DyadicSystem:
    for v in phi.values():
        if isinstance(v, GridFunction):
            return v.system
    raise ValueError("phi values must be GridFunctions (the system is taken from them)")


def random_phi_family(system: DyadicSystem, step: int, residue: int, density: float, seed=0,
                      amplitude: float = 1.0, aligned: bool = False) -> dict[DyadicCube, GridFunction]:
    """Spikes: phi_Q = +-u 1_{Q''} on one random grid child Q'' of Q.

    ``aligned`` fixes every sign to +1 and u to ``amplitude`` so partial sums stack.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = {}
    for lev in grid_levels(system, step, residue):
        child = min(lev + step, system.depth)
        span = 2 ** (system.dim * (child - lev))
        for q in range(system.n_cubes(lev)):
            if rng.random() >= density:
                continue
            c = q * span + int(rng.integers(span))
            v = np.zeros(system.n_cells)
            sl = system.cell_slice(system.cube(child, c))
            v[sl] = amplitude if aligned else rng.choice([-1.0, 1.0]) * amplitude * rng.uniform(0.5, 1.0)
            out[system.cube(lev, q)] = GridFunction(system, v)
    return out


# distributional profile -------------------------------------------------------------------

@dataclass
class DistributionalProfile:
    t: np.ndarray
    lebesgue: np.ndarray              # |{x in S : |L* v| >= c t w(S)/|S|}| / |S|
    sigma: np.ndarray                 # sigma analogue, normalized by sigma(S)
    beta_lebesgue: float
    beta_sigma: float
    envelope_lebesgue: float
    envelope_sigma: float


def decay_rate(t: np.ndarray, prof: np.ndarray, floor: float = 0.0) -> tuple[float, float]:
    """(beta, c') from a least-squares fit log2 prof ~ log2 c' - beta t on positive points.

    Fewer than two positive points means the profile dies out: beta = inf.
    With a positive ``floor`` (the smallest nonzero value the profile can
    take) the first vanishing grid point enters the fit at floor / 2.
    """
    pos = prof > 0
    if pos.sum() < 2:
        return math.inf, float(prof.max(initial=0.0))
    tt, vals = t[pos], prof[pos]
    gone = np.nonzero(~pos & (t > tt[-1]))[0]
    if floor > 0 and gone.size:
        tt = np.append(tt, t[gone[0]])
        vals = np.append(vals, min(floor, vals.min()) / 2.0)
    slope, _ = np.polyfit(tt, np.log2(vals), 1)
    beta = -float(slope)
    env = float(np.max(prof[pos] * 2.0 ** (beta * t[pos])))
    return beta, env


def distributional_profile(L, part: Family, S: DyadicCube, w: Weight, sigma: Weight,
                           phi: GridFunction, t_grid: Sequence[float] = tuple(range(1, 13)),
                           c: float = 1.0) -> DistributionalProfile:
    from .truncations import adjoint_apply

    if np.abs(phi.values).max(initial=0.0) > 1.0:
        raise ValueError("phi must satisfy |phi| <= 1")
    sysm = w.system
    inS = np.zeros(sysm.n_cells, dtype=bool)
    inS[sysm.cell_slice(S)] = True
    nu = GridFunction(sysm, np.where(inS, phi.values * w.values, 0.0))
    v = np.abs(adjoint_apply(L, nu, family_masks(sysm, part)).values)
    scale = w.mass(S) / S.volume(sysm.dim)
    t = np.asarray(t_grid, dtype=float)
    leb = np.array([float(np.sum(inS & (v >= c * tt * scale))) * sysm.cell_volume for tt in t])
    sig = np.array([sigma.measure(inS & (v >= c * tt * scale)) for tt in t])
    leb = leb / S.volume(sysm.dim)
    sig = sig / sigma.mass(S)
    cells = sigma.values[sysm.cell_slice(S)] * sysm.cell_volume
    bl, el = decay_rate(t, leb, sysm.cell_volume / S.volume(sysm.dim))
    bs, es = decay_rate(t, sig, float(cells.min()) / sigma.mass(S))
    return DistributionalProfile(t, leb, sig, bl, bs, el, es)


def dual_sigma(w: Weight, p: float) -> Weight:
    return dual_weight(w, p)


def corona_phi_family(L, part: Family, S: DyadicCube, w: Weight, phi: GridFunction,
                      scale: float | str = 1.0) -> dict[DyadicCube, GridFunction]:
    """phi_Q = |S| / (4 w(S) scale) * (Q-component of L*(1_S phi w)) for Q in P(S).

    On P(S) the w-density stays below 4 w(S)/|S|, so every phi_Q has sup at
    most 1/scale.  ``scale="sup"`` rescales the family to sup exactly 1.
    """
    sysm = w.system
    masks = family_masks(sysm, part)
    inS = np.zeros(sysm.n_cells)
    inS[sysm.cell_slice(S)] = 1.0
    values = inS * phi.values * w.values
    norm = S.volume(sysm.dim) / (4.0 * w.mass(S) * (1.0 if scale == "sup" else scale))
    out = {}
    shift = L.shift
    for lev in sorted(shift.blocks):
        keep = masks.get(lev)
        if keep is None or not keep.any():
            continue
        weighted = np.where(L.active(lev), L.sign * values, 0.0)
        v = shift.level_adjoint(lev, weighted, keep) * norm
        for q in np.nonzero(keep)[0]:
            Q = sysm.cube(lev, int(q))
            piece = np.zeros(sysm.n_cells)
            sl = sysm.cell_slice(Q)
            piece[sl] = v[sl]
            out[Q] = GridFunction(sysm, piece)
    if scale == "sup" and out:
        top = max(float(np.abs(g.values).max()) for g in out.values())
        if top > 0:
            out = {Q: GridFunction(sysm, g.values / top) for Q, g in out.items()}
    return out
