"""Testing constants, norm estimators, the maximum principle and two-weight checks.

Suprema over test functions are replaced by suprema over finite banks, so
every bank-based estimate is a lower bound for the true constant.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .decompositions import WhitneyDecomposition, whitney_decompose
from .dyadic import DyadicCube, DyadicSystem, GridFunction
from .maximal import dyadic_maximal
from .shifts import HaarShift
from .truncations import (Linearization, canonical_linearization, full_linearization,
                          maximal_truncation, random_linearization,
                          restricted_maximal_truncations)
from .weights import Weight, conjugate, lorentz_weak_norm, lp_norm, two_weight_a2

DENSE_LIMIT = 4096


# banks ------------------------------------------------------------------------------

@dataclass
class TestBank:
    """Finite family of test functions, reproducible from (kind, seed, size)."""

    __test__ = False  # not a pytest class

    functions: list[GridFunction]
    seed: int
    descriptor: str

    def __post_init__(self):
        if not self.functions:
            raise ValueError("a test bank must be nonempty")

    def __len__(self) -> int:
        return len(self.functions)

    def __iter__(self):
        return iter(self.functions)

    def extended(self, other: "TestBank") -> "TestBank":
        return TestBank(self.functions + other.functions, self.seed, f"{self.descriptor}+{other.descriptor}")


def power_profile(system: DyadicSystem, delta: float, cut: bool = True) -> GridFunction:
    """Cell averages of |x|^(delta-1) in d = 1 (radial midpoint values otherwise).

    With ``cut`` the cell touching the singularity is set to zero.
    """
    if system.dim == 1:
        h = system.cell_volume
        lo = system.cell_lower_corners()[:, 0]
        vals = ((lo + h) ** delta - lo ** delta) / (delta * h)
    else:
        r = np.linalg.norm(system.cell_centers(), axis=1)
        vals = r ** (delta - 1.0)
    if cut:
        vals = np.where(np.all(system.cell_lower_corners() == 0, axis=1), 0.0, vals)
    return GridFunction(system, vals)


def haar_atom(system: DyadicSystem, Q: DyadicCube, child: int = 0) -> GridFunction:
    """1_{child} - 2^-d 1_Q: cancellative, supported on Q."""
    v = np.zeros(system.n_cells)
    sl = system.cell_slice(Q)
    v[sl] = -1.0 / system.n_children
    if Q.level < system.depth:
        c = system.children(Q)[child]
        v[system.cell_slice(c)] += 1.0
    return GridFunction(system, v)


def standard_bank(system: DyadicSystem, seed: int = 0, size: int = 16,
                  deltas: Sequence[float] = (0.4, 0.2, 0.1, 0.05)) -> TestBank:
    """Cube indicators near the origin, power profiles, Haar atoms, random functions."""
    rng = np.random.default_rng(seed)
    fs = [system.indicator(system.cube(lev, 0)) for lev in range(0, system.depth + 1, 2)]
    fs += [power_profile(system, d) for d in deltas]
    fs += [haar_atom(system, system.cube(lev, 0)) for lev in range(0, system.depth, 3)]
    while len(fs) < size:
        if len(fs) % 2:
            fs.append(GridFunction(system, rng.choice([-1.0, 1.0], size=system.n_cells)))
        else:
            fs.append(GridFunction(system, rng.uniform(0.0, 1.0, size=system.n_cells)))
    return TestBank(fs, seed, f"standard(size={len(fs)},seed={seed})")


def sign_bank(system: DyadicSystem, seed: int = 0, size: int = 8) -> TestBank:
    """All-ones, alternating-child signs and seeded random signs; all |phi| <= 1."""
    rng = np.random.default_rng(seed)
    fs = [system.constant(1.0)]
    if system.depth >= 1:
        fs.append(GridFunction(system, np.where(np.arange(system.n_cells) % 2 == 0, 1.0, -1.0)))
    while len(fs) < size:
        fs.append(GridFunction(system, rng.choice([-1.0, 1.0], size=system.n_cells)))
    return TestBank(fs, seed, f"signs(size={len(fs)},seed={seed})")


def exhaustive_sign_bank(system: DyadicSystem) -> TestBank:
    """Every +-1 function; only for systems with at most 12 cells."""
    N = system.n_cells
    if N > 12:
        raise ValueError(f"exhaustive sign enumeration needs <= 12 cells, got {N}")
    fs = [GridFunction(system, np.array(s, dtype=float)) for s in itertools.product([-1.0, 1.0], repeat=N)]
    return TestBank(fs, 0, f"exhaustive({N})")


def linearization_suite(S: HaarShift, bank: TestBank | None = None, sigma: Weight | None = None,
                        seed: int = 0, n_random: int = 2) -> list[Linearization]:
    """Full operator (both signs), canonical linearizations against the bank, random ones."""
    suite = [full_linearization(S, 1.0), full_linearization(S, -1.0)]
    if bank is not None:
        for f in bank:
            g = f if sigma is None else f * sigma.values
            suite.append(canonical_linearization(S, g))
    rng = np.random.default_rng(seed)
    suite += [random_linearization(S, rng) for _ in range(n_random)]
    return suite


@dataclass
class ConstantEstimate:
    value: float
    kind: str                     # "exact" or "lower_bound"
    bank: str
    argmax: dict = field(default_factory=dict)
    iterations: int | None = None

    def __post_init__(self):
        if self.kind not in ("exact", "lower_bound"):
            raise ValueError(f"unknown estimate kind {self.kind!r}")


# dense operators ----------------------------------------------------------------------

def linearization_matrix(L: Linearization) -> np.ndarray:
    """M with (L g)_x = sum_y M[x, y] g_y; L* nu = M^T nu."""
    S = L.shift
    sysm = S.system
    N = sysm.n_cells
    if N > DENSE_LIMIT:
        raise ValueError(f"dense linearization limited to {DENSE_LIMIT} cells")
    M = np.zeros((N, N))
    for lev in sorted(S.blocks):
        blocks = S.kernel_blocks(lev)
        if blocks is None:
            continue
        nq, B = blocks.shape[0], blocks.shape[1]
        rows = (L.active(lev) * L.sign * sysm.cell_volume).reshape(nq, B)
        idx = np.arange(nq)
        M4 = M.reshape(nq, B, nq, B)
        M4[idx, :, idx, :] += blocks * rows[:, :, None]
    return M


def diagonal_blocks(M: np.ndarray, system: DyadicSystem, level: int) -> np.ndarray:
    """M restricted to Q x Q for every cube Q of ``level``; shape (nQ, B, B)."""
    nq = system.n_cubes(level)
    B = system.block(level)
    idx = np.arange(nq)
    return M.reshape(nq, B, nq, B)[idx, :, idx, :]


def _localized_outputs(Mt: np.ndarray, system: DyadicSystem, level: int, v: np.ndarray) -> np.ndarray:
    """Rows q: 1_Q A(1_Q v) on the cells of Q, for every Q of ``level``."""
    D = diagonal_blocks(Mt, system, level)
    return np.einsum("qab,qb->qa", D, v.reshape(D.shape[0], -1))


# testing constants -------------------------------------------------------------------------

def testing_constant_T(S: HaarShift, w: Weight, sigma: Weight, p: float, signs: TestBank,
                       linearizations: Sequence[Linearization] | None = None) -> ConstantEstimate:
    """max ||1_Q L*(1_Q phi w)||_{L^p'(sigma)} / w(Q)^{1/p'} over Q, L and phi."""
    sysm = S.system
    pp = conjugate(p)
    lins = linearizations if linearizations is not None else linearization_suite(S)
    best, arg = 0.0, {}
    for li, L in enumerate(lins):
        Mt = linearization_matrix(L).T
        for fi, phi in enumerate(signs):
            v = phi.values * w.values
            for lev in range(sysm.depth + 1):
                out = _localized_outputs(Mt, sysm, lev, v)
                sig = sigma.values.reshape(out.shape)
                num = (np.sum(np.abs(out) ** pp * sig, axis=1) * sysm.cell_volume) ** (1.0 / pp)
                r = num / w.masses[lev] ** (1.0 / pp)
                q = int(np.argmax(r))
                if r[q] > best:
                    best, arg = float(r[q]), {"linearization": li, "phi": fi, "level": lev, "flat": q}
    return ConstantEstimate(best, "lower_bound", signs.descriptor, arg)


def testing_constant_N(S: HaarShift, w: Weight, sigma: Weight, p: float, signs: TestBank,
                       linearizations: Sequence[Linearization] | None = None) -> ConstantEstimate:
    """Nonstandard testing constant; the inner sup over Q inside Q0 is exact."""
    sysm = S.system
    lins = linearizations if linearizations is not None else linearization_suite(S)
    best, arg = 0.0, {}
    for li, L in enumerate(lins):
        Mt = linearization_matrix(L).T
        for fi, phi in enumerate(signs):
            v = phi.values * w.values
            a = []
            for lev in range(sysm.depth + 1):
                out = _localized_outputs(Mt, sysm, lev, v)
                sig = sigma.values.reshape(out.shape)
                integ = np.sum(np.abs(out) * sig, axis=1) * sysm.cell_volume
                a.append(sysm.upsample((integ / w.masses[lev]) ** p, lev))
            # cum[l0](x) = max over levels l >= l0 of the value of the level-l cube at x
            cum = np.zeros(sysm.n_cells)
            for lev in range(sysm.depth, -1, -1):
                cum = np.maximum(cum, a[lev])
                r = sysm.level_sums(cum * w.values, lev) / sigma.masses[lev]
                q = int(np.argmax(r))
                if r[q] > best:
                    best, arg = float(r[q]), {"linearization": li, "phi": fi, "level": lev, "flat": q}
    return ConstantEstimate(best ** (1.0 / p), "lower_bound", signs.descriptor, arg)


def untruncated_testing(S: HaarShift, w: Weight, sigma: Weight) -> tuple[float, float]:
    """(frak S, frak S*): exhaustive over cubes, exact."""
    sysm = S.system
    M = linearization_matrix(full_linearization(S))
    out = []
    for A, u, v in ((M, sigma, w), (M.T, w, sigma)):
        best = 0.0
        for lev in range(sysm.depth + 1):
            y = _localized_outputs(A, sysm, lev, u.values)
            vv = v.values.reshape(y.shape)
            num = np.sqrt(np.sum(y ** 2 * vv, axis=1) * sysm.cell_volume)
            best = max(best, float(np.max(num / np.sqrt(u.masses[lev]))))
        out.append(best)
    return out[0], out[1]


# norm estimation ----------------------------------------------------------------------------

OPERATOR_KINDS = ("linear", "sublinear", "maximal")


def operator_callable(kind: str, S: HaarShift | None) -> Callable[[GridFunction], GridFunction]:
    if kind == "linear":
        return S.apply
    if kind == "sublinear":
        return lambda g: maximal_truncation(S, g)
    if kind == "maximal":
        return dyadic_maximal
    raise ValueError(f"operator kind must be one of {OPERATOR_KINDS}, got {kind!r}")


def ratio(op: Callable, f: GridFunction, w: Weight, sigma: Weight, p: float, mode: str) -> float:
    den = lp_norm(f, sigma, p)
    if den == 0:
        return 0.0
    g = op(f * sigma.values)
    num = lp_norm(g, w, p) if mode == "strong" else lorentz_weak_norm(g, w, p)
    return num / den


def greedy_refine(op: Callable, f: GridFunction, w: Weight, sigma: Weight, p: float, mode: str,
                  steps: int, seed: int = 0) -> tuple[float, GridFunction]:
    """Cellwise ascent: try sign flips and doubling/halving of random cells."""
    rng = np.random.default_rng(seed)
    cur = f.values.copy()
    best = ratio(op, f, w, sigma, p, mode)
    N = cur.size
    for _ in range(steps):
        i = int(rng.integers(N))
        for move in (-1.0, 2.0, 0.5):
            trial = cur.copy()
            trial[i] = trial[i] * move if trial[i] != 0 else 1.0
            r = ratio(op, GridFunction(f.system, trial), w, sigma, p, mode)
            if r > best:
                best, cur = r, trial
                break
    return best, GridFunction(f.system, cur)


def power_norm(S: HaarShift, w: Weight, sigma: Weight, tol: float = 1e-9,
               max_iter: int = 500, seed: int = 0) -> tuple[float, bool, int]:
    """||S(. sigma)||_{L^2(sigma) -> L^2(w)} by power iteration on the normal operator.

    With f = sigma^{-1/2} u the norm is that of B = W^{1/2} S Sigma^{1/2} on L^2.
    """
    sw, ss = np.sqrt(w.values), np.sqrt(sigma.values)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(S.system.n_cells)
    u /= np.linalg.norm(u)
    lam_old = 0.0
    for it in range(1, max_iter + 1):
        Bu = sw * S.apply(ss * u).values
        v = ss * S.adjoint(sw * Bu).values
        lam = float(np.dot(u, v))
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0, True, it
        u = v / nv
        if it > 1 and abs(lam - lam_old) <= tol * max(abs(lam), 1e-300):
            return math.sqrt(max(nv, 0.0)), True, it
        lam_old = lam
    return math.sqrt(max(lam, 0.0)), False, max_iter


def operator_norm_estimate(kind: str, S: HaarShift | None, w: Weight, sigma: Weight, p: float,
                           mode: str = "strong", bank: TestBank | None = None,
                           refine_steps: int = 0, power: bool = True, seed: int = 0) -> ConstantEstimate:
    """Bank lower bound; for a linear operator at p = 2 also the power-iteration norm."""
    if mode not in ("strong", "weak"):
        raise ValueError("mode must be 'strong' or 'weak'")
    op = operator_callable(kind, S)
    sysm = w.system
    bank = bank if bank is not None else standard_bank(sysm, seed)
    scores = [ratio(op, f, w, sigma, p, mode) for f in bank]
    i = int(np.argmax(scores))
    best, arg = scores[i], {"bank_index": i}
    if refine_steps:
        r, _ = greedy_refine(op, bank.functions[i], w, sigma, p, mode, refine_steps, seed)
        best = max(best, r)
    if kind == "linear" and p == 2 and mode == "strong" and power:
        nrm, ok, its = power_norm(S, w, sigma, seed=seed)
        if ok:
            return ConstantEstimate(max(nrm, 0.0), "exact", bank.descriptor, arg, its)
        return ConstantEstimate(max(best, nrm), "lower_bound", bank.descriptor, arg, its)
    return ConstantEstimate(best, "lower_bound", bank.descriptor, arg)


# maximum principle -----------------------------------------------------------------------------

@dataclass
class MaximumPrincipleReport:
    first: np.ndarray            # per cell of the Whitney cubes: first inequality holds
    second: np.ndarray
    cells: np.ndarray            # indices of the checked cells
    worst_margin: float          # min over cells of (rhs - lhs) / scale for the first inequality
    decomposition: WhitneyDecomposition

    @property
    def holds(self) -> bool:
        return bool(self.first.all() and self.second.all())


def maximum_principle_verify(S: HaarShift, f: GridFunction, sigma: Weight | None, k: int, zeta: int,
                             decomposition: WhitneyDecomposition | None = None,
                             constant: float | None = None, rtol: float = 1e-12) -> MaximumPrincipleReport:
    """Both pointwise inequalities at every cell of every Whitney cube of Omega_k.

    ``constant`` defaults to zeta + n + 1.  Comparisons allow a relative
    rounding slack ``rtol`` of the magnitudes involved.
    """
    sysm = S.system
    F = f if sigma is None else f * sigma.values
    sharp = maximal_truncation(S, F).values
    dec = decomposition or whitney_decompose(GridFunction(sysm, sharp), 2.0 ** k, zeta)
    c = float(zeta + S.n + 1) if constant is None else float(constant)
    Mf = dyadic_maximal(F).values
    restricted = restricted_maximal_truncations(S, F)
    first, second, cells = [], [], []
    worst = math.inf
    for Q in dec.cubes:
        sl = sysm.cell_slice(Q)
        local = restricted[Q.level, sl]
        rhs = local + 2.0 ** k + c * Mf[sl]
        lhs = sharp[sl]
        slack = rtol * (np.abs(lhs) + np.abs(rhs))
        first.append(lhs <= rhs + slack)
        FQ = np.zeros(sysm.n_cells)
        FQ[sl] = F.values[sl]
        cut = maximal_truncation(S, GridFunction(sysm, FQ)).values[sl]
        second.append(local <= cut + rtol * (np.abs(local) + np.abs(cut)))
        cells.append(np.arange(sl.start, sl.stop))
        scale = np.maximum(np.abs(rhs), 1e-300)
        worst = min(worst, float(np.min((rhs - lhs) / scale)))
    cat = (lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dtype=dt))
    return MaximumPrincipleReport(cat(first, bool), cat(second, bool), cat(cells, np.int64),
                                  worst, dec)


# two-weight sufficiency -------------------------------------------------------------------------

@dataclass
class TwoWeightReport:
    weak_lhs: float
    strong_lhs: float
    maximal_weak: float
    maximal_strong: float
    T: float
    N: float
    kappa: int

    @property
    def weak_rhs(self) -> float:
        return self.kappa * self.maximal_weak + self.T

    @property
    def strong_rhs(self) -> float:
        return self.kappa * self.maximal_strong + self.T + self.N

    @property
    def weak_ratio(self) -> float:
        return self.weak_lhs / self.weak_rhs if self.weak_rhs > 0 else 0.0

    @property
    def strong_ratio(self) -> float:
        return self.strong_lhs / self.strong_rhs if self.strong_rhs > 0 else 0.0


def two_weight_verify(S: HaarShift, w: Weight, sigma: Weight, p: float, bank: TestBank,
                      signs: TestBank | None = None, seed: int = 0) -> TwoWeightReport:
    """Bank estimates of both sides of the weak and strong two-weight bounds."""
    signs = signs if signs is not None else sign_bank(S.system, seed)
    lins = linearization_suite(S, bank, sigma, seed)
    sub = operator_callable("sublinear", S)
    mx = operator_callable("maximal", None)
    wl = max(ratio(sub, f, w, sigma, p, "weak") for f in bank)
    sl = max(ratio(sub, f, w, sigma, p, "strong") for f in bank)
    mw = max(ratio(mx, f, w, sigma, p, "weak") for f in bank)
    ms = max(ratio(mx, f, w, sigma, p, "strong") for f in bank)
    T = testing_constant_T(S, w, sigma, p, signs, lins).value
    N = testing_constant_N(S, w, sigma, p, signs, lins).value
    return TwoWeightReport(wl, sl, mw, ms, T, N, S.kappa)


def ntv_ratio(S: HaarShift, w: Weight, sigma: Weight, bank: TestBank) -> float:
    """Bank estimate of ||S(. sigma)|| over kappa (S + S*) + kappa^2 [w, sigma]_{A2}^{1/2}."""
    lhs = operator_norm_estimate("linear", S, w, sigma, 2.0, "strong", bank, power=False).value
    s, sstar = untruncated_testing(S, w, sigma)
    rhs = S.kappa * (s + sstar) + S.kappa ** 2 * math.sqrt(two_weight_a2(w, sigma))
    return lhs / rhs if rhs > 0 else 0.0
