"""Finite dyadic systems on [0,1)^d.

Cell values are stored in Morton (Z-curve) order, so that every dyadic cube
is a contiguous slice of the value array and the cubes of one level are
obtained by a single reshape.  Level arrays (one entry per cube of a level)
use the same ordering: the children of cube ``i`` are ``2^d i, ..., 2^d i + 2^d - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

MAX_DIM = 3


@dataclass(frozen=True, order=True)
class DyadicCube:
    level: int
    index: tuple[int, ...]

    @property
    def side(self) -> float:
        return 2.0 ** (-self.level)

    def volume(self, dim: int) -> float:
        return 2.0 ** (-dim * self.level)


def morton_encode(index: Sequence[int], level: int) -> int:
    dim = len(index)
    code = 0
    for b in range(level - 1, -1, -1):
        for a in range(dim):
            code = (code << 1) | ((index[a] >> b) & 1)
    return code


def morton_decode(code: int, level: int, dim: int) -> tuple[int, ...]:
    index = [0] * dim
    for b in range(level):
        for a in range(dim - 1, -1, -1):
            index[a] |= (code & 1) << b
            code >>= 1
    return tuple(index)


def _morton_decode_array(codes: np.ndarray, level: int, dim: int) -> np.ndarray:
    out = np.zeros((codes.size, dim), dtype=np.int64)
    c = codes.astype(np.int64).copy()
    for b in range(level):
        for a in range(dim - 1, -1, -1):
            out[:, a] |= (c & 1) << b
            c >>= 1
    return out


@dataclass(frozen=True)
class DyadicSystem:
    """Dyadic cubes of [0,1)^d down to side 2^-depth.

    ``offset`` is the torus translation of the grid, in units of finest cells.
    """

    dim: int
    depth: int
    offset: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 1 <= self.dim <= MAX_DIM:
            raise ValueError(f"dimension must be in 1..{MAX_DIM}, got {self.dim}")
        if self.depth < 1:
            raise ValueError("finest level must be at least 1")
        off = self.offset or (0,) * self.dim
        if len(off) != self.dim:
            raise ValueError("offset length must equal the dimension")
        side = 2**self.depth
        object.__setattr__(self, "offset", tuple(int(o) % side for o in off))

    # sizes -------------------------------------------------------------
    @property
    def n_cells(self) -> int:
        return 2 ** (self.dim * self.depth)

    @property
    def cell_volume(self) -> float:
        return 2.0 ** (-self.dim * self.depth)

    @property
    def n_children(self) -> int:
        return 2**self.dim

    @property
    def shift(self) -> np.ndarray:
        """Grid shift as a point of [0,1)^d."""
        return np.array(self.offset, dtype=float) * 2.0 ** (-self.depth)

    def n_cubes(self, level: int) -> int:
        return 2 ** (self.dim * level)

    def volume(self, level: int) -> float:
        return 2.0 ** (-self.dim * level)

    def block(self, level: int) -> int:
        """Number of finest cells inside one cube of ``level``."""
        return 2 ** (self.dim * (self.depth - level))

    # cubes -------------------------------------------------------------
    @property
    def root(self) -> DyadicCube:
        return DyadicCube(0, (0,) * self.dim)

    def _check(self, Q: DyadicCube) -> None:
        if not 0 <= Q.level <= self.depth or len(Q.index) != self.dim:
            raise ValueError(f"{Q} is not a cube of {self}")
        if any(i < 0 or i >= 2**Q.level for i in Q.index):
            raise ValueError(f"{Q} has an index out of range")

    def flat(self, Q: DyadicCube) -> int:
        self._check(Q)
        return morton_encode(Q.index, Q.level)

    def cube(self, level: int, flat: int) -> DyadicCube:
        return DyadicCube(level, morton_decode(int(flat), level, self.dim))

    def cubes(self, level: int) -> list[DyadicCube]:
        return [self.cube(level, i) for i in range(self.n_cubes(level))]

    def all_cubes(self) -> list[DyadicCube]:
        return [Q for lev in range(self.depth + 1) for Q in self.cubes(lev)]

    def cells(self) -> list[DyadicCube]:
        return self.cubes(self.depth)

    def children(self, Q: DyadicCube) -> list[DyadicCube]:
        self._check(Q)
        if Q.level == self.depth:
            return []
        base = self.flat(Q) * self.n_children
        return [self.cube(Q.level + 1, base + e) for e in range(self.n_children)]

    def parent(self, Q: DyadicCube, j: int = 1) -> DyadicCube:
        self._check(Q)
        if j < 0 or Q.level - j < 0:
            raise IndexError(f"ancestor {j} of {Q} lies above the root")
        return DyadicCube(Q.level - j, tuple(i >> j for i in Q.index))

    def ancestors(self, Q: DyadicCube) -> list[DyadicCube]:
        """Q and all its ancestors, finest first."""
        return [self.parent(Q, j) for j in range(Q.level + 1)]

    @staticmethod
    def contains(Q: DyadicCube, P: DyadicCube) -> bool:
        """True when P is a subcube of Q (P = Q included)."""
        if P.level < Q.level:
            return False
        s = P.level - Q.level
        return all((p >> s) == q for p, q in zip(P.index, Q.index))

    def cell_slice(self, Q: DyadicCube) -> slice:
        b = self.block(Q.level)
        start = self.flat(Q) * b
        return slice(start, start + b)

    def cell_cube(self, cell: int) -> DyadicCube:
        return self.cube(self.depth, cell)

    def ancestor_flat(self, cells: np.ndarray | int, level: int):
        """Morton index at ``level`` of the cube containing each cell."""
        return np.asarray(cells) >> (self.dim * (self.depth - level))

    # geometry ----------------------------------------------------------
    @cached_property
    def grid_index(self) -> np.ndarray:
        """(n_cells, d) integer coordinates of each Morton cell in grid units."""
        return _morton_decode_array(np.arange(self.n_cells), self.depth, self.dim)

    @cached_property
    def geometric_index(self) -> np.ndarray:
        """(n_cells, d) coordinates of each cell in the unshifted lattice."""
        side = 2**self.depth
        return (self.grid_index + np.array(self.offset)) % side

    @cached_property
    def natural_order(self) -> np.ndarray:
        """Row-major position of each Morton cell in the natural d-dim array."""
        return np.ravel_multi_index(
            tuple(self.geometric_index.T), (2**self.depth,) * self.dim
        )

    def cell_lower_corners(self) -> np.ndarray:
        return self.geometric_index * 2.0 ** (-self.depth)

    def cell_centers(self) -> np.ndarray:
        return (self.geometric_index + 0.5) * 2.0 ** (-self.depth)

    # level arrays --------------------------------------------------------
    def level_sums(self, values: np.ndarray, level: int) -> np.ndarray:
        """Integral over each cube of ``level`` of the cell function ``values``."""
        return values.reshape(self.n_cubes(level), -1).sum(axis=1) * self.cell_volume

    def level_means(self, values: np.ndarray, level: int) -> np.ndarray:
        return values.reshape(self.n_cubes(level), -1).sum(axis=1) / self.block(level)

    def level_max(self, values: np.ndarray, level: int) -> np.ndarray:
        return values.reshape(self.n_cubes(level), -1).max(axis=1)

    def upsample(self, level_values: np.ndarray, level: int) -> np.ndarray:
        return np.repeat(level_values, self.block(level))

    def pyramid(self, values: np.ndarray) -> list[np.ndarray]:
        """Cube integrals of ``values`` for every level, coarsest first."""
        return [self.level_sums(values, lev) for lev in range(self.depth + 1)]

    # construction helpers --------------------------------------------------
    def function(self, values) -> "GridFunction":
        """Grid function from values laid out in the natural (row-major) order."""
        arr = np.asarray(values, dtype=float).reshape(-1)
        if arr.size != self.n_cells:
            raise ValueError(f"expected {self.n_cells} values, got {arr.size}")
        return GridFunction(self, arr[self.natural_order])

    def from_morton(self, values) -> "GridFunction":
        return GridFunction(self, np.asarray(values, dtype=float).reshape(-1))

    def constant(self, c: float) -> "GridFunction":
        return GridFunction(self, np.full(self.n_cells, float(c)))

    def zeros(self) -> "GridFunction":
        return self.constant(0.0)

    def indicator(self, cubes: DyadicCube | Iterable[DyadicCube]) -> "GridFunction":
        if isinstance(cubes, DyadicCube):
            cubes = [cubes]
        v = np.zeros(self.n_cells)
        for Q in cubes:
            v[self.cell_slice(Q)] = 1.0
        return GridFunction(self, v)

    def cell_mask(self, cubes: Iterable[DyadicCube]) -> np.ndarray:
        return self.indicator(cubes).values > 0


class GridFunction:
    """Real function constant on the finest cells of a dyadic system."""

    __slots__ = ("system", "values")

    def __init__(self, system: DyadicSystem, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != (system.n_cells,):
            raise ValueError(f"expected shape ({system.n_cells},), got {values.shape}")
        self.system = system
        self.values = values

    def _other(self, other):
        other = getattr(other, "density", other)  # weights act through their densities
        if isinstance(other, GridFunction):
            if other.system != self.system:
                raise ValueError("grid functions live on different systems")
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.system, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.system, self.values - self._other(other))

    def __rsub__(self, other):
        return GridFunction(self.system, self._other(other) - self.values)

    def __mul__(self, other):
        return GridFunction(self.system, self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return GridFunction(self.system, self.values / self._other(other))

    def __neg__(self):
        return GridFunction(self.system, -self.values)

    def __abs__(self):
        return GridFunction(self.system, np.abs(self.values))

    def __pow__(self, q):
        return GridFunction(self.system, self.values**q)

    def __repr__(self):
        return f"GridFunction({self.system}, n={self.values.size})"

    def natural(self) -> np.ndarray:
        """Values as a d-dimensional array indexed geometrically."""
        out = np.empty(self.system.n_cells)
        out[self.system.natural_order] = self.values
        return out.reshape((2**self.system.depth,) * self.system.dim)

    def on(self, system: DyadicSystem) -> "GridFunction":
        """The same function re-expressed on a (shifted) system of equal size."""
        if (system.dim, system.depth) != (self.system.dim, self.system.depth):
            raise ValueError("systems differ in dimension or resolution")
        return system.function(self.natural())

    def inner(self, other: "GridFunction") -> float:
        return float(np.dot(self.values, self._other(other))) * self.system.cell_volume


def integrate(f: GridFunction, Q: DyadicCube) -> float:
    return float(f.values[f.system.cell_slice(Q)].sum()) * f.system.cell_volume


def average(f: GridFunction, Q: DyadicCube) -> float:
    return integrate(f, Q) / Q.volume(f.system.dim)


def dyadic_distance(system: DyadicSystem, x: int | DyadicCube, y: int | DyadicCube):
    """Side length of the smallest dyadic cube containing both cells.

    Cells may be given as finest-level cubes or as Morton cell indices
    (scalars or arrays).
    """
    if isinstance(x, DyadicCube):
        x = system.flat(x)
    if isinstance(y, DyadicCube):
        y = system.flat(y)
    return 2.0 ** (-common_level(system, x, y))


def common_level(system: DyadicSystem, x, y):
    """Level of the smallest cube containing cells x and y (Morton indices)."""
    diff = np.bitwise_xor(np.asarray(x, dtype=np.int64), np.asarray(y, dtype=np.int64))
    # number of significant bits of diff, grouped by dimension
    nbits = np.zeros_like(diff)
    d = diff.copy()
    while np.any(d):
        nz = d > 0
        nbits[nz] += 1
        d >>= 1
    levels_apart = -(-nbits // system.dim)
    out = system.depth - levels_apart
    return int(out) if np.ndim(out) == 0 else out


def shifted_view(system: DyadicSystem, beta) -> DyadicSystem:
    """Torus translate of the grid by ``beta`` (a multiple of the cell side)."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.size == 1 and system.dim > 1:
        beta = np.full(system.dim, beta[0])
    if beta.size != system.dim or np.any(beta < 0) or np.any(beta >= 1):
        raise ValueError("shift must be a vector in [0,1)^d")
    scaled = beta * 2**system.depth
    steps = np.round(scaled)
    if np.any(np.abs(scaled - steps) > 1e-9):
        raise ValueError("shift is not aligned to the finest lattice")
    base = np.array(system.offset)
    return DyadicSystem(system.dim, system.depth, tuple(int(s) for s in base + steps))
