"""Generalized Haar shifts of complexity type (m, n).

A shift is stored as per-level component blocks.  A component of the cube
Q (level l) pairs a unit h on R' (level l+n, input side) with a unit k on
Q' (level l+m, output side); both units are constant on the children of
their base cube, so they are stored as 2^d child coefficients.

For application the components of each Q are folded into one dense
coefficient block C_Q of shape (2^{d(m+1)}, 2^{d(n+1)}), indexed by the
level-(l+m+1) and level-(l+n+1) subcubes of Q, so that

    S_Q f = |Q|^{-1} sum_b C_Q[a, b] * (integral of f over subcube b)

on subcube a.  An overall ``scale`` multiplies every component; it keeps
the stored unit coefficients exact (dyadic rationals) after normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np
from scipy.sparse.linalg import LinearOperator, svds

from .dyadic import DyadicCube, DyadicSystem, GridFunction

MODES = ("general", "paraproduct", "dual_paraproduct")


@dataclass(frozen=True)
class HaarUnit:
    cube: DyadicCube
    coeffs: tuple[float, ...]

    @property
    def cancellative(self) -> bool:
        return math.fsum(self.coeffs) == 0.0

    @property
    def sup(self) -> float:
        return max(abs(c) for c in self.coeffs)

    def energy(self, dim: int) -> float:
        """Squared L^2 norm of the child-constant function."""
        return math.fsum(c * c for c in self.coeffs) * self.cube.volume(dim) / 2**dim


@dataclass(frozen=True)
class ComponentBlock:
    """All components of one level, as parallel arrays."""

    level: int
    q: np.ndarray  # Morton index of Q' at level + m
    r: np.ndarray  # Morton index of R' at level + n
    h: np.ndarray  # (count, 2^d) child coefficients on R'
    k: np.ndarray  # (count, 2^d) child coefficients on Q'

    @property
    def count(self) -> int:
        return int(self.q.size)

    def select(self, keep: np.ndarray) -> "ComponentBlock":
        return ComponentBlock(self.level, self.q[keep], self.r[keep], self.h[keep], self.k[keep])


class HaarShift:
    def __init__(self, system: DyadicSystem, m: int, n: int,
                 blocks: Mapping[int, ComponentBlock] | Iterable[ComponentBlock] = (),
                 mode: str = "general", scale: float = 1.0, rescaled: bool = False,
                 validate: bool = True):
        if mode not in MODES:
            raise ValueError(f"unknown shift mode {mode!r}")
        if m < 0 or n < 0:
            raise ValueError("complexity parameters must be nonnegative")
        if max(m, n) > system.depth:
            raise ValueError(f"type ({m},{n}) exceeds the depth {system.depth}")
        if isinstance(blocks, Mapping):
            blocks = blocks.values()
        self.system = system
        self.m, self.n = int(m), int(n)
        self.mode = mode
        self.scale = float(scale)
        self.rescaled = rescaled
        self.blocks = {b.level: b for b in blocks if b.count}
        if validate:
            self._validate()

    # structure ---------------------------------------------------------
    @property
    def kappa(self) -> int:
        return max(self.m, self.n, 1)

    @property
    def top_level(self) -> int:
        """Deepest level carrying components (children of Q', R' must exist)."""
        return self.system.depth - max(self.m, self.n) - 1

    @property
    def levels(self) -> list[int]:
        return sorted(self.blocks)

    @property
    def n_components(self) -> int:
        return sum(b.count for b in self.blocks.values())

    def _validate(self) -> None:
        d, nc = self.system.dim, self.system.n_children
        if not 0 < self.scale <= 1 or not math.isfinite(self.scale):
            raise ValueError("scale must lie in (0, 1]")
        for lev, b in self.blocks.items():
            if not 0 <= lev <= self.top_level:
                raise ValueError(f"level {lev} cannot carry type ({self.m},{self.n}) components")
            if b.h.shape != (b.count, nc) or b.k.shape != (b.count, nc):
                raise ValueError("unit coefficient arrays have the wrong shape")
            if np.abs(b.h).max() > 1 or np.abs(b.k).max() > 1:
                raise ValueError("Haar units must have sup norm at most 1")
            if np.any(b.q >> (d * self.m) != b.r >> (d * self.n)):
                raise ValueError("Q' and R' of a component must share the base cube")
            pair = b.q.astype(np.int64) * (2 ** (d * (lev + self.n))) + b.r
            if np.unique(pair).size != pair.size:
                raise ValueError("at most one component per (Q', R') pair")
            hsum = b.h.sum(axis=1)
            ksum = b.k.sum(axis=1)
            if self.mode == "general" and (np.any(hsum != 0) or np.any(ksum != 0)):
                raise ValueError("general shifts need cancellative units")
            if self.mode == "paraproduct":
                if self.m or self.n or np.any(b.h != 1) or np.any(ksum != 0):
                    raise ValueError("paraproducts are type (0,0) with h = 1_Q and cancellative k")
            if self.mode == "dual_paraproduct":
                if self.m or self.n or np.any(b.k != 1) or np.any(hsum != 0):
                    raise ValueError("dual paraproducts are type (0,0) with k = 1_Q and cancellative h")

    def components(self, Q: DyadicCube) -> list[tuple[DyadicCube, DyadicCube, HaarUnit, HaarUnit]]:
        b = self.blocks.get(Q.level)
        if b is None:
            return []
        d = self.system.dim
        base = self.system.flat(Q)
        out = []
        for i in np.nonzero(b.q >> (d * self.m) == base)[0]:
            Qp = self.system.cube(Q.level + self.m, b.q[i])
            Rp = self.system.cube(Q.level + self.n, b.r[i])
            out.append((Qp, Rp, HaarUnit(Rp, tuple(b.h[i])), HaarUnit(Qp, tuple(b.k[i]))))
        return out

    # coefficient blocks ----------------------------------------------------
    @cached_property
    def _coefficients(self) -> dict[int, np.ndarray]:
        d, nc = self.system.dim, self.system.n_children
        out = {}
        for lev, b in self.blocks.items():
            nq = self.system.n_cubes(lev)
            C = np.zeros((nq, 2 ** (d * (self.m + 1)), 2 ** (d * (self.n + 1))))
            base = b.q >> (d * self.m)
            lq = b.q - (base << (d * self.m))
            lr = b.r - (base << (d * self.n))
            child = np.arange(nc)
            rows = (lq[:, None] * nc + child)[:, :, None]
            cols = (lr[:, None] * nc + child)[:, None, :]
            vals = b.k[:, :, None] * b.h[:, None, :] * self.scale
            np.add.at(C, (base[:, None, None], rows, cols), vals)
            out[lev] = C
        return out

    def coefficients(self, level: int) -> np.ndarray | None:
        return self._coefficients.get(level)

    # application -------------------------------------------------------------
    def level_apply(self, level: int, values: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
        """sum over Q of ``level`` of S_Q f, on the finest cells."""
        sysm = self.system
        C = self._coefficients.get(level)
        if C is None:
            return np.zeros(sysm.n_cells)
        F = sysm.level_sums(values, level + self.n + 1).reshape(C.shape[0], C.shape[2])
        if keep is not None:
            F = F * keep[:, None]
        out = np.einsum("qab,qb->qa", C, F) / sysm.volume(level)
        return sysm.upsample(out.reshape(-1), level + self.m + 1)

    def level_adjoint(self, level: int, values: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
        sysm = self.system
        C = self._coefficients.get(level)
        if C is None:
            return np.zeros(sysm.n_cells)
        G = sysm.level_sums(values, level + self.m + 1).reshape(C.shape[0], C.shape[1])
        if keep is not None:
            G = G * keep[:, None]
        out = np.einsum("qab,qa->qb", C, G) / sysm.volume(level)
        return sysm.upsample(out.reshape(-1), level + self.n + 1)

    def scale_contributions(self, values: np.ndarray) -> np.ndarray:
        """Row l holds sum_{level(Q)=l} S_Q f; shape (depth+1, n_cells)."""
        out = np.zeros((self.system.depth + 1, self.system.n_cells))
        for lev in self.blocks:
            out[lev] = self.level_apply(lev, values)
        return out

    def apply(self, f: GridFunction) -> GridFunction:
        return GridFunction(self.system, _row_sum(self.scale_contributions(self._values(f))))

    def adjoint(self, g: GridFunction) -> GridFunction:
        gv = self._values(g)
        out = np.zeros(self.system.n_cells)
        for lev in sorted(self.blocks):
            out = out + self.level_adjoint(lev, gv)
        return GridFunction(self.system, out)

    def _values(self, f) -> np.ndarray:
        if isinstance(f, GridFunction):
            if f.system != self.system:
                raise ValueError("function and shift live on different systems")
            return f.values
        v = np.asarray(f, dtype=float)
        if v.shape != (self.system.n_cells,):
            raise ValueError("value array does not match the system")
        return v

    # kernels ---------------------------------------------------------------
    def kernel_blocks(self, level: int) -> np.ndarray | None:
        """Kernel restricted to the diagonal blocks Q x Q of ``level``."""
        C = self._coefficients.get(level)
        if C is None:
            return None
        sysm = self.system
        ra = sysm.block(level + self.m + 1)
        rb = sysm.block(level + self.n + 1)
        return np.repeat(np.repeat(C, ra, axis=1), rb, axis=2) / sysm.volume(level)

    def level_kernel(self, level: int) -> np.ndarray:
        N = self.system.n_cells
        K = np.zeros((N, N))
        blocks = self.kernel_blocks(level)
        if blocks is not None:
            nq, B = blocks.shape[0], blocks.shape[1]
            K4 = K.reshape(nq, B, nq, B)
            idx = np.arange(nq)
            K4[idx, :, idx, :] = blocks
        return K

    def kernel_matrix(self) -> np.ndarray:
        """Dense K(x, y) with S f(x) = sum_y K(x, y) f(y) |cell|."""
        N = self.system.n_cells
        K = np.zeros((N, N))
        for lev in sorted(self.blocks):
            K += self.level_kernel(lev)
        return K

    def kernel_eval(self, x: int | DyadicCube, y: int | DyadicCube) -> float:
        """K_S(x, y) by direct summation over the common ancestors."""
        sysm = self.system
        if isinstance(x, DyadicCube):
            x = sysm.flat(x)
        if isinstance(y, DyadicCube):
            y = sysm.flat(y)
        d = sysm.dim
        total = 0.0
        for lev in sorted(self.blocks):
            qx, qy = sysm.ancestor_flat(x, lev), sysm.ancestor_flat(y, lev)
            if qx != qy:
                break
            C = self._coefficients[lev]
            a = int(sysm.ancestor_flat(x, lev + self.m + 1)) - (int(qx) << (d * (self.m + 1)))
            b = int(sysm.ancestor_flat(y, lev + self.n + 1)) - (int(qy) << (d * (self.n + 1)))
            total += C[qx, a, b] / sysm.volume(lev)
        return float(total)

    # derived shifts ------------------------------------------------------------
    def restricted(self, keep: Mapping[int, np.ndarray] | Iterable[DyadicCube]) -> "HaarShift":
        """Components kept only for base cubes in the family."""
        masks = as_level_masks(self.system, keep)
        d = self.system.dim
        blocks = []
        for lev, b in self.blocks.items():
            mask = masks.get(lev)
            if mask is None:
                continue
            blocks.append(b.select(mask[b.q >> (d * self.m)]))
        return self._like(blocks)

    def separate_scales(self) -> list["HaarShift"]:
        step = self.kappa + 1
        return [self._like([b for lev, b in self.blocks.items() if lev % step == r])
                for r in range(step)]

    def _like(self, blocks) -> "HaarShift":
        return HaarShift(self.system, self.m, self.n, blocks, self.mode, self.scale,
                         self.rescaled, validate=False)

    def with_scale(self, scale: float, rescaled: bool = True) -> "HaarShift":
        return HaarShift(self.system, self.m, self.n, self.blocks, self.mode, scale,
                         rescaled, validate=False)

    def carleson_constant(self) -> float:
        """Carleson constant of the non-constant unit family (paraproduct modes)."""
        if self.mode == "paraproduct":
            units = {lev: b.k for lev, b in self.blocks.items()}
        elif self.mode == "dual_paraproduct":
            units = {lev: b.h for lev, b in self.blocks.items()}
        else:
            raise ValueError("Carleson constants are defined for paraproducts")
        energies = {}
        for lev, coeffs in units.items():
            base = self.blocks[lev].q
            e = np.zeros(self.system.n_cubes(lev))
            np.add.at(e, base, (coeffs**2).sum(axis=1) * self.system.volume(lev + 1) * self.scale**2)
            energies[lev] = e
        return _carleson_from_energies(self.system, energies)

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        comps = []
        for lev in sorted(self.blocks):
            b = self.blocks[lev]
            for i in range(b.count):
                comps.append({
                    "level": lev,
                    "q": [int(v) for v in self.system.cube(lev + self.m, b.q[i]).index],
                    "r": [int(v) for v in self.system.cube(lev + self.n, b.r[i]).index],
                    "h": [float(v) for v in b.h[i]],
                    "k": [float(v) for v in b.k[i]],
                })
        return {
            "format": "haar-shift/1",
            "dim": self.system.dim,
            "depth": self.system.depth,
            "offset": list(self.system.offset),
            "m": self.m,
            "n": self.n,
            "mode": self.mode,
            "scale": self.scale,
            "rescaled": self.rescaled,
            "components": comps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HaarShift":
        if data.get("format") != "haar-shift/1":
            raise ValueError("not a serialized Haar shift")
        sysm = DyadicSystem(data["dim"], data["depth"], tuple(data["offset"]))
        m, n = data["m"], data["n"]
        by_level: dict[int, list] = {}
        for c in data["components"]:
            by_level.setdefault(c["level"], []).append(c)
        blocks = []
        for lev, comps in by_level.items():
            q = np.array([sysm.flat(DyadicCube(lev + m, tuple(c["q"]))) for c in comps], dtype=np.int64)
            r = np.array([sysm.flat(DyadicCube(lev + n, tuple(c["r"]))) for c in comps], dtype=np.int64)
            h = np.array([c["h"] for c in comps], dtype=float)
            k = np.array([c["k"] for c in comps], dtype=float)
            blocks.append(ComponentBlock(lev, q, r, h, k))
        return cls(sysm, m, n, blocks, data["mode"], data["scale"], data["rescaled"])

    def __repr__(self):
        return (f"HaarShift(type=({self.m},{self.n}), mode={self.mode}, "
                f"components={self.n_components}, scale={self.scale:.6g})")


def _row_sum(rows: np.ndarray) -> np.ndarray:
    out = np.zeros(rows.shape[1])
    for row in rows:
        out = out + row
    return out


def as_level_masks(system: DyadicSystem, family) -> dict[int, np.ndarray]:
    """Cube family as boolean arrays per level (Morton order)."""
    if isinstance(family, Mapping):
        return {int(k): np.asarray(v, dtype=bool) for k, v in family.items()}
    masks: dict[int, np.ndarray] = {}
    for Q in family:
        arr = masks.setdefault(Q.level, np.zeros(system.n_cubes(Q.level), dtype=bool))
        arr[system.flat(Q)] = True
    return masks


def _carleson_from_energies(system: DyadicSystem, energies: Mapping[int, np.ndarray]) -> float:
    total = np.zeros(system.n_cubes(system.depth))
    best = 0.0
    for lev in range(system.depth, -1, -1):
        if lev < system.depth:
            total = total.reshape(-1, system.n_children).sum(axis=1)
        if lev in energies:
            total = total + energies[lev]
        best = max(best, float((total / system.volume(lev)).max()))
    return best


def carleson_constant(system: DyadicSystem, family: Mapping[DyadicCube, HaarUnit]) -> float:
    """sup_R |R|^{-1} sum_{Q in R} ||k_Q||_2^2."""
    energies: dict[int, np.ndarray] = {}
    for Q, unit in family.items():
        e = energies.setdefault(Q.level, np.zeros(system.n_cubes(Q.level)))
        e[system.flat(Q)] += unit.energy(system.dim)
    return _carleson_from_energies(system, energies)


# norms ------------------------------------------------------------------------

def l2_norm(S: HaarShift) -> float:
    """Operator norm of S on L^2([0,1)^d)."""
    N = S.system.n_cells
    if S.n_components == 0:
        return 0.0
    if N <= 256:
        return float(np.linalg.norm(S.kernel_matrix() * S.system.cell_volume, 2))
    op = LinearOperator((N, N), matvec=lambda x: S.apply(np.ravel(x)).values,
                        rmatvec=lambda x: S.adjoint(np.ravel(x)).values, dtype=float)
    rng = np.random.default_rng(12345)
    s = svds(op, k=1, tol=1e-12, return_singular_vectors=False, v0=rng.standard_normal(N))
    return float(s[0])


def normalized(S: HaarShift) -> HaarShift:
    """Divide by the measured L^2 norm when it exceeds one."""
    nu = l2_norm(S)
    if nu <= 1.0:
        return S
    return S.with_scale(S.scale / (nu * (1.0 + 1e-9)))


# generators ---------------------------------------------------------------------

def random_units(rng: np.random.Generator, count: int, n_children: int) -> np.ndarray:
    """Cancellative child coefficients with exact zero sum and sup in (1/2, 1]."""
    z = rng.integers(-1024, 1025, size=(count, n_children))
    c = (z - np.roll(z, 1, axis=1)).astype(float)
    zero = ~np.any(c, axis=1)
    c[zero, 0], c[zero, 1] = 1.0, -1.0
    top = np.abs(c).max(axis=1)
    c *= 2.0 ** (-np.ceil(np.log2(top)))[:, None]
    return c


def random_shift(system: DyadicSystem, m: int, n: int, density: float = 1.0, seed=0,
                 mode: str = "general", max_level: int | None = None,
                 normalize: bool = True) -> HaarShift:
    if not 0 <= density <= 1:
        raise ValueError("density must lie in [0, 1]")
    if max(m, n) > system.depth:
        raise ValueError(f"type ({m},{n}) exceeds the depth {system.depth}")
    if mode != "general" and (m or n):
        raise ValueError("paraproducts have type (0,0)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, nc = system.dim, system.n_children
    top = system.depth - max(m, n) - 1
    if max_level is not None:
        top = min(top, max_level)
    blocks = []
    for lev in range(top + 1):
        nq = system.n_cubes(lev)
        pq, pr = 2 ** (d * m), 2 ** (d * n)
        base = np.repeat(np.arange(nq, dtype=np.int64), pq * pr)
        lq = np.tile(np.repeat(np.arange(pq, dtype=np.int64), pr), nq)
        lr = np.tile(np.arange(pr, dtype=np.int64), nq * pq)
        keep = rng.random(base.size) < density
        base, lq, lr = base[keep], lq[keep], lr[keep]
        cnt = base.size
        h = random_units(rng, cnt, nc)
        k = random_units(rng, cnt, nc)
        if mode == "paraproduct":
            h = np.ones((cnt, nc))
        elif mode == "dual_paraproduct":
            k = np.ones((cnt, nc))
        blocks.append(ComponentBlock(lev, (base << (d * m)) + lq, (base << (d * n)) + lr, h, k))
    S = HaarShift(system, m, n, blocks, mode)
    if mode != "general" and S.n_components:
        c = S.carleson_constant()
        if c > 1:
            S = S.with_scale(1.0 / math.sqrt(c * (1.0 + 1e-12)), rescaled=False)
    return normalized(S) if normalize else S


def martingale_transform(system: DyadicSystem, signs=None) -> HaarShift:
    """sum_Q eps_Q <f, h_Q> h_Q / |Q| with the canonical Haar functions."""
    if system.dim != 1:
        raise ValueError("the canonical martingale transform is one-dimensional")
    blocks = []
    for lev in range(system.depth):
        nq = system.n_cubes(lev)
        eps = _signs_at(system, signs, lev, nq)
        keep = np.nonzero(eps)[0].astype(np.int64)
        unit = np.array([1.0, -1.0])
        h = np.tile(unit, (keep.size, 1))
        k = h * eps[keep][:, None]
        blocks.append(ComponentBlock(lev, keep, keep, h, k))
    return HaarShift(system, 0, 0, blocks, "general")


def _signs_at(system, signs, lev, nq) -> np.ndarray:
    if signs is None:
        eps = np.ones(nq)
    elif np.isscalar(signs):
        eps = np.full(nq, float(signs))
    elif callable(signs):
        eps = np.array([float(signs(system.cube(lev, i))) for i in range(nq)])
    elif isinstance(signs, Mapping):
        eps = np.array([float(signs.get(system.cube(lev, i), 0.0)) for i in range(nq)])
    else:
        eps = np.asarray(signs[lev], dtype=float)
    if eps.shape != (nq,) or not np.all(np.isin(eps, (-1.0, 0.0, 1.0))):
        raise ValueError("martingale signs must be -1, 0 or +1")
    return eps


def alternating_martingale(system: DyadicSystem) -> HaarShift:
    """Martingale transform with sign (-1)^level."""
    return martingale_transform(system, lambda Q: (-1.0) ** Q.level)
