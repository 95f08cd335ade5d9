"""Experiment configs, sweeps, exponent fits and deterministic reports."""

from __future__ import annotations

import configparser
import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .decompositions import (all_cubes_masks, combined_split, corona_decompose,
                             corona_verify, density_split, john_nirenberg_verify,
                             principal_cubes, principal_verify, random_phi_family, size_split,
                             split_verify, whitney_decompose, whitney_verify)
from .dyadic import DyadicSystem, GridFunction, dyadic_distance, shifted_view
from .maximal import dyadic_maximal
from .shifts import HaarShift, alternating_martingale, martingale_transform, random_shift
from .testing_norms import (linearization_suite, maximum_principle_verify, power_profile, sign_bank,
                            standard_bank, testing_constant_T)
from .truncations import (Linearization, adjoint_apply, canonical_linearization, linearize_apply,
                          maximal_truncation, random_linearization, smoothness_verify)
from .weights import (ainfty_characteristic, ap_characteristic, concentration_bound_check, conjugate,
                      dual_weight, lorentz_weak_norm, lp_norm, power_weight, Weight)

CONFIG_VERSION = 1
KINDS = ("sharpness", "buckley", "complexity", "ainfty", "representation", "invariants")
CSV_COLUMNS = ("instance", "kind", "label", "d", "L", "p", "kappa", "param", "ap_char", "ainfty_char",
               "strong_est", "weak_est", "T_const", "N_const", "ratio_strong", "ratio_weak")


# configuration -------------------------------------------------------------------------

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


@dataclass
class ExperimentConfig:
    kind: str = "sharpness"
    dim: int = 1
    level: int = 12
    p: float = 2.0
    deltas: tuple[float, ...] = (0.4, 0.2, 0.1, 0.05)
    m: int = 1
    n: int = 1
    kappas: tuple[int, ...] = (1, 2, 3, 4)
    bank_size: int = 16
    seed: int = 0
    out: str = "report"
    operator: str = "alternating"          # alternating | martingale
    weight_family: str = "auto"            # auto | primal | dual
    n_shifts: int = 20
    cutoff: tuple[int, int] = (3, 3)
    smoothness: float = 1.0
    n_grids: int = 4
    version: int = CONFIG_VERSION

    def validate(self) -> "ExperimentConfig":
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind must be one of {KINDS}")
        if self.dim < 1 or self.dim > 3:
            problems.append("dim must be 1, 2 or 3")
        if not 1 <= self.level <= 24 // self.dim:
            problems.append(f"level must be in 1..{24 // self.dim} for dim={self.dim}")
        if not 1.0 < self.p < math.inf:
            problems.append("p must satisfy 1 < p < inf")
        if not self.deltas or any(not 0 < d < 1 for d in self.deltas):
            problems.append("deltas must be a nonempty list in (0, 1)")
        if self.m < 0 or self.n < 0:
            problems.append("m and n must be nonnegative")
        if not self.kappas or any(k < 1 for k in self.kappas):
            problems.append("kappas must be positive")
        if self.bank_size < 1 or self.n_shifts < 1 or self.n_grids < 1:
            problems.append("bank_size, n_shifts and n_grids must be positive")
        if self.operator not in ("alternating", "martingale"):
            problems.append("operator must be 'alternating' or 'martingale'")
        if self.weight_family not in ("auto", "primal", "dual"):
            problems.append("weight_family must be 'auto', 'primal' or 'dual'")
        if len(self.cutoff) != 2 or min(self.cutoff) < 0:
            problems.append("cutoff must be two nonnegative integers")
        if self.smoothness <= 0:
            problems.append("smoothness must be positive")
        if self.version != CONFIG_VERSION:
            problems.append(f"config version {self.version} is not supported (expected {CONFIG_VERSION})")
        if self.kind in ("sharpness", "buckley", "representation") and self.dim != 1:
            problems.append(f"{self.kind} experiments are one-dimensional")
        if problems:
            raise ValueError("invalid experiment config: " + "; ".join(problems))
        return self

    # flat key-value text --------------------------------------------------------------
    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {}
        sec = cp["experiment"]
        for f in fields(self):
            v = getattr(self, f.name)
            sec[f.name] = " ".join(repr(x) for x in v) if isinstance(v, tuple) else \
                (repr(v) if isinstance(v, float) else str(v))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if "experiment" not in cp:
            raise ValueError("config needs an [experiment] section")
        sec = cp["experiment"]
        known = {f.name: f for f in fields(cls)}
        unknown = set(sec) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name in sec:
            raw = sec[name]
            if name in ("deltas",):
                kw[name] = _floats(raw)
            elif name in ("kappas", "cutoff"):
                kw[name] = _ints(raw)
            elif name in ("p", "smoothness"):
                kw[name] = float(raw)
            elif name in ("kind", "out", "operator", "weight_family"):
                kw[name] = raw.strip()
            else:
                kw[name] = int(raw)
        return cls(**kw).validate()

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise OSError(f"cannot read config {path!r}: {exc}") from exc

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list[dict] = field(default_factory=list)
    fits: dict[str, dict] = field(default_factory=dict)
    summary: dict[str, object] = field(default_factory=dict)

    @property
    def environment(self) -> dict:
        return {"seed": self.config.seed, "L": self.config.level, "d": self.config.dim,
                "version": __version__}

    def to_dict(self) -> dict:
        return {"config": asdict(self.config), "environment": self.environment,
                "fits": self.fits, "summary": self.summary, "rows": self.rows}


# fitting ---------------------------------------------------------------------------------

def fit_exponent(pairs: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """OLS of log y on log x: (slope, intercept, stderr of the slope)."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 pairs, got {len(pairs)}")
    x = np.array([a for a, _ in pairs], dtype=float)
    y = np.array([b for _, b in pairs], dtype=float)
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(x * y)):
        raise ValueError("fit_exponent needs finite positive values")
    lx, ly = np.log(x), np.log(y)
    xm, ym = lx.mean(), ly.mean()
    sxx = float(np.sum((lx - xm) ** 2))
    if sxx == 0:
        raise ValueError("x values are all equal")
    slope = float(np.sum((lx - xm) * (ly - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = ly - (intercept + slope * lx)
    dof = len(pairs) - 2
    stderr = math.sqrt(float(np.sum(resid ** 2)) / dof / sxx) if dof > 0 else 0.0
    return slope, intercept, stderr


def _fit_entry(pairs, target=None) -> dict:
    try:
        s, b, e = fit_exponent(pairs)
    except ValueError as exc:
        return {"slope": None, "intercept": None, "stderr": None, "error": str(exc)}
    out = {"slope": s, "intercept": b, "stderr": e}
    if target is not None:
        out["target"] = target
    return out


# test functions --------------------------------------------------------------------------

def chain_function(system: DyadicSystem) -> GridFunction:
    """sum_k (-1)^k h_{J_k} with J_k = [0, 2^-k) and h_J = 1_left - 1_right."""
    if system.dim != 1:
        raise ValueError("the chain function is one-dimensional")
    x = system.cell_centers()[:, 0]
    v = np.zeros(system.n_cells)
    for k in range(system.depth):
        h = 2.0 ** -k
        v[x < h / 2] += (-1) ** k
        v[(x >= h / 2) & (x < h)] -= (-1) ** k
    return GridFunction(system, v)


def _operator(config: ExperimentConfig, system: DyadicSystem) -> HaarShift:
    if config.operator == "alternating":
        return alternating_martingale(system)
    return martingale_transform(system)


def _weight_exponent(config: ExperimentConfig, delta: float, route: str) -> float:
    """Power-weight exponent for a sweep point; route is 'primal' or 'dual'."""
    fam = config.weight_family if config.weight_family != "auto" else route
    return (1.0 - delta) * (config.p - 1.0) if fam == "primal" else delta - 1.0


def _cut_origin(system: DyadicSystem, values: np.ndarray) -> np.ndarray:
    out = values.copy()
    out[np.all(system.cell_lower_corners() == 0, axis=1)] = 0.0
    return out


def _row(config, idx, label, **kw) -> dict:
    row = {c: None for c in CSV_COLUMNS}
    row.update(instance=idx, kind=config.kind, label=label, d=config.dim, L=config.level, p=config.p)
    row.update(kw)
    return row


# sweep points ------------------------------------------------------------------------------

def _sharpness_point(config: ExperimentConfig, delta: float) -> list[dict]:
    sysm = DyadicSystem(1, config.level)
    T = _operator(config, sysm)
    p = config.p
    fd = power_profile(sysm, delta)
    rows = []
    # strong type
    route = "primal" if p <= 2 else "dual"
    w = power_weight(sysm, _weight_exponent(config, delta, route))
    sig = dual_weight(w, p)
    ap = ap_characteristic(w, p)
    if route == "primal" or config.weight_family == "primal":
        F = fd
        den = lp_norm(F, w, p)
        out = maximal_truncation(T, F)
        strong, weak = lp_norm(out, w, p) / den, lorentz_weak_norm(out, w, p) / den
    else:
        pp = conjugate(p)
        G = GridFunction(sysm, _cut_origin(sysm, w.values))
        H = T.adjoint(G)
        dual = lp_norm(H, sig, pp) / lp_norm(G / w.values, w, pp)
        f = GridFunction(sysm, np.sign(H.values) * np.abs(H.values) ** (pp - 1.0))
        out = maximal_truncation(T, f * sig.values)
        den = lp_norm(f, sig, p)
        strong = max(dual, lp_norm(out, w, p) / den)
        weak = lorentz_weak_norm(out, w, p) / den
    rows.append(dict(label="strong", param=delta, ap_char=ap, strong_est=strong, weak_est=weak,
                     kappa=T.kappa))
    # weak type, meaningful for 1 < p < 2
    if p < 2:
        w = power_weight(sysm, _weight_exponent(config, delta, "dual"))
        ap = ap_characteristic(w, p)
        strong = weak = 0.0
        for G in (chain_function(sysm), fd):
            out = maximal_truncation(T, G)
            den = lp_norm(G, w, p)
            strong = max(strong, lp_norm(out, w, p) / den)
            weak = max(weak, lorentz_weak_norm(out, w, p) / den)
        rows.append(dict(label="weak", param=delta, ap_char=ap, strong_est=strong, weak_est=weak,
                         kappa=T.kappa))
    return rows


def _buckley_point(config: ExperimentConfig, delta: float) -> list[dict]:
    sysm = DyadicSystem(1, config.level)
    p = config.p
    w = power_weight(sysm, _weight_exponent(config, delta, "primal"))
    F = power_profile(sysm, delta)
    MF = dyadic_maximal(F)
    den = lp_norm(F, w, p)
    return [dict(label="maximal", param=delta, ap_char=ap_characteristic(w, p),
                 strong_est=lp_norm(MF, w, p) / den, weak_est=lorentz_weak_norm(MF, w, p) / den)]


def l1_bank(system: DyadicSystem, seed: int) -> list[GridFunction]:
    """Point masses, small cube indicators and sparse random functions."""
    N = system.n_cells
    rng = np.random.default_rng(seed)
    out = []
    for c in (0, N // 3, N // 2 + 5, N - 1):
        v = np.zeros(N)
        v[c % N] = 1.0
        out.append(GridFunction(system, v))
    for lev in (2, system.depth // 2, max(system.depth - 2, 0)):
        out.append(system.indicator(system.cube(lev, min(1, system.n_cubes(lev) - 1))))
    for _ in range(3):
        out.append(GridFunction(system, rng.normal(size=N) * (rng.random(N) < 0.05)))
    return out


def weak11_constant(L: Linearization, bank: Sequence[GridFunction]) -> float:
    """sup over the bank and lambda of lambda |{|L* f| > lambda}| / ||f||_1."""
    best = 0.0
    for f in bank:
        n1 = float(np.abs(f.values).sum()) * f.system.cell_volume
        if n1 > 0:
            best = max(best, lorentz_weak_norm(adjoint_apply(L, f), None, 1.0) / n1)
    return best


def _complexity_point(config: ExperimentConfig, job: tuple[int, int]) -> list[dict]:
    kappa, i = job
    sysm = DyadicSystem(config.dim, config.level)
    rng = np.random.default_rng([config.seed, kappa, i])
    m, n = [(kappa, kappa), (kappa, 0), (0, kappa), (kappa, int(rng.integers(0, kappa + 1)))][i % 4]
    S = random_shift(sysm, m, n, seed=rng)
    bank = l1_bank(sysm, config.seed + i)
    g = GridFunction(sysm, rng.normal(size=sysm.n_cells))
    lins = [canonical_linearization(S, g), random_linearization(S, rng)]
    full = max(weak11_constant(L, bank) for L in lins)
    rows = [dict(label="full", kappa=kappa, param=i, strong_est=full)]
    for r, P in enumerate(S.separate_scales()):
        c = max(weak11_constant(Linearization(P, L.top, L.bottom, L.sign), bank) for L in lins)
        rows.append(dict(label=f"part{r}", kappa=kappa, param=i, strong_est=c))
    return rows


def _ainfty_point(config: ExperimentConfig, delta: float) -> list[dict]:
    sysm = DyadicSystem(config.dim, min(config.level, 8))
    p = config.p
    w = power_weight(sysm, (1.0 - delta) * (p - 1.0))
    sig = dual_weight(w, p)
    rng = np.random.default_rng([config.seed, int(round(delta * 1e6))])
    S = random_shift(sysm, config.m, config.n, seed=rng)
    ap = ap_characteristic(w, p)
    ai = ainfty_characteristic(w)
    lins = linearization_suite(S, standard_bank(sysm, config.seed, config.bank_size), sig, config.seed)
    T = testing_constant_T(S, w, sig, p, sign_bank(sysm, config.seed), lins).value
    mixed = S.kappa * ap ** (1.0 / p) * ai ** (1.0 / conjugate(p))
    return [dict(label="testing", param=delta, kappa=S.kappa, ap_char=ap, ainfty_char=ai, T_const=T,
                 ratio_strong=T / mixed, ratio_weak=T / (S.kappa * ap))]


# representation synthesis --------------------------------------------------------------------

def _grid_permutation(base: DyadicSystem, other: DyadicSystem) -> np.ndarray:
    """perm[j] = cell of ``other`` at the geometric position of base cell j."""
    inv = np.empty(other.n_cells, dtype=np.int64)
    inv[other.natural_order] = np.arange(other.n_cells)
    return inv[base.natural_order]


def torus_distance(system: DyadicSystem) -> np.ndarray:
    c = system.cell_centers()
    diff = np.abs(c[:, None, :] - c[None, :, :])
    diff = np.minimum(diff, 1.0 - diff)
    return np.sqrt(np.sum(diff ** 2, axis=-1))


@dataclass
class Synthesis:
    base: DyadicSystem
    grids: list[DyadicSystem]
    terms: list[tuple[float, HaarShift, np.ndarray]]   # (weight, shift on its grid, permutation)

    def kernel(self) -> np.ndarray:
        K = np.zeros((self.base.n_cells,) * 2)
        for a, S, perm in self.terms:
            K += a * S.kernel_matrix()[np.ix_(perm, perm)]
        return K / len(self.grids)

    def shift_maximal_sum(self, f: GridFunction) -> np.ndarray:
        out = np.zeros(self.base.n_cells)
        for a, S, perm in self.terms:
            g = f.on(S.system)
            out += a * maximal_truncation(S, g).values[perm]
        return out / len(self.grids)


def synthesize(config: ExperimentConfig) -> Synthesis:
    base = DyadicSystem(1, min(config.level, 8))
    rng = np.random.default_rng([config.seed, 7])
    stride = base.n_cells // config.n_grids + 1
    grids = [shifted_view(base, ((j * stride) % base.n_cells) / base.n_cells) for j in range(config.n_grids)]
    terms = []
    mc, nc = config.cutoff
    for G in grids:
        perm = _grid_permutation(base, G)
        for m in range(mc + 1):
            for n in range(nc + 1):
                a = 2.0 ** (-(m + n) * config.smoothness / 2.0)
                if (m, n) == (0, 0):
                    for mode in ("general", "paraproduct", "dual_paraproduct"):
                        terms.append((a, random_shift(G, 0, 0, seed=rng, mode=mode), perm))
                else:
                    terms.append((a, random_shift(G, m, n, seed=rng), perm))
    return Synthesis(base, grids, terms)


def kernel_truncation_maximal(K: np.ndarray, dist: np.ndarray, f: np.ndarray, cell: float) -> np.ndarray:
    """sup over 0 < eps < nu of |sum_{eps < |x-y| < nu} K(x,y) f(y) |cell||, per x."""
    N = K.shape[0]
    out = np.zeros(N)
    for x in range(N):
        d = dist[x]
        order = np.argsort(d, kind="stable")
        d_sorted = d[order]
        contrib = K[x, order] * f[order] * cell
        keep = d_sorted > 0
        d_sorted, contrib = d_sorted[keep], contrib[keep]
        # group equal distances into shells
        ends = np.r_[d_sorted[1:] != d_sorted[:-1], True]
        P = np.r_[0.0, np.cumsum(contrib)[ends]]
        out[x] = P.max() - P.min()
    return out


def ball_maximal(dist: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Centered maximal function over closed discrete balls of the torus."""
    N = dist.shape[0]
    out = np.zeros(N)
    a = np.abs(f)
    for x in range(N):
        order = np.argsort(dist[x], kind="stable")
        d_sorted = dist[x][order]
        ends = np.r_[d_sorted[1:] != d_sorted[:-1], True]
        sums = np.cumsum(a[order])[ends]
        counts = np.arange(1, N + 1)[ends]
        out[x] = float(np.max(sums / counts))
    return out


def _representation(config: ExperimentConfig) -> ExperimentReport:
    syn = synthesize(config)
    base = syn.base
    K = syn.kernel()
    dist = torus_distance(base)
    floor = np.maximum(dist, base.cell_volume ** (1.0 / base.dim))
    c_kernel = float(np.max(np.abs(K) * floor ** base.dim))
    # dyadic distance in the worst grid, i.e. the smallest over the grids
    dmin = np.full(K.shape, np.inf)
    for G in syn.grids:
        perm = _grid_permutation(base, G)
        dmin = np.minimum(dmin, dyadic_distance(G, perm[:, None], perm[None, :]))
    c_dyadic = float(np.max(np.abs(K) * dmin ** base.dim))
    bank = standard_bank(base, config.seed, config.bank_size)
    rows = []
    worst = 0.0
    for i, f in enumerate(bank):
        lhs = kernel_truncation_maximal(K, dist, f.values, base.cell_volume)
        rhs = syn.shift_maximal_sum(f) + ball_maximal(dist, f.values)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(lhs > 0, lhs / rhs, 0.0)
        c = float(np.max(r))
        worst = max(worst, c)
        rows.append(dict(label="domination", param=i, strong_est=float(lhs.max()),
                         weak_est=float(rhs.max()), ratio_strong=c))
    report = ExperimentReport(config)
    report.rows = [_row(config, i, **r) for i, r in enumerate(rows)]
    report.summary = {"kernel_constant": c_kernel, "kernel_constant_dyadic": c_dyadic,
                      "domination_constant": worst, "n_terms": len(syn.terms),
                      "n_grids": len(syn.grids)}
    return report


# invariant suites ------------------------------------------------------------------------------

def _suite_adjoint(rng, sysm) -> bool:
    m, n = (int(x) for x in rng.integers(0, 3, 2))
    S = random_shift(sysm, m, n, density=rng.uniform(0.2, 1.0), seed=rng)
    f, g = (GridFunction(sysm, rng.normal(size=sysm.n_cells)) for _ in range(2))
    L = random_linearization(S, rng)
    a, b = S.apply(f).inner(g), f.inner(S.adjoint(g))
    c, d = linearize_apply(L, f).inner(g), f.inner(adjoint_apply(L, g))
    tol = 1e-12 * (1 + abs(a) + abs(c)) * sysm.depth
    return abs(a - b) <= tol and abs(c - d) <= tol


def _suite_truncation(rng, sysm) -> bool:
    S = random_shift(sysm, int(rng.integers(0, 3)), int(rng.integers(0, 3)), seed=rng)
    f = GridFunction(sysm, rng.normal(size=sysm.n_cells))
    rows = S.scale_contributions(f.values)
    best = np.zeros(sysm.n_cells)
    for i in range(rows.shape[0]):
        acc = np.zeros(sysm.n_cells)
        for j in range(i, rows.shape[0]):
            acc = acc + rows[j]
            best = np.maximum(best, np.abs(acc))
    fast = maximal_truncation(S, f).values
    return bool(np.allclose(fast, best, rtol=1e-12, atol=1e-12))


def _suite_whitney(rng, sysm) -> bool:
    g = GridFunction(sysm, rng.random(sysm.n_cells))
    dec = whitney_decompose(g, float(rng.uniform(0.1, 0.9)), int(rng.integers(0, 3)))
    return all(whitney_verify(dec).values())


def _suite_corona(rng, sysm) -> bool:
    w = Weight(np.exp(rng.normal(scale=1.5, size=sysm.n_cells)), sysm)
    c = corona_decompose(w, sysm.root, step=int(rng.integers(1, 4)))
    return all(corona_verify(c).values())


def _suite_principal(rng, sysm) -> bool:
    s = Weight(np.exp(rng.normal(size=sysm.n_cells)), sysm)
    f = GridFunction(sysm, rng.normal(size=sysm.n_cells) * (rng.random(sysm.n_cells) < 0.1))
    if not np.any(f.values):
        return True
    return principal_verify(principal_cubes(s, f))


def _suite_split(rng, sysm) -> bool:
    fam = all_cubes_masks(sysm)
    f = GridFunction(sysm, rng.normal(size=sysm.n_cells))
    g = GridFunction(sysm, rng.exponential(size=sysm.n_cells) ** 3)
    d = float(rng.uniform(1.0, 5.0))
    ok = all(split_verify(density_split(fam, g, d), fam, f, g, d).values())
    ok &= all(split_verify(size_split(fam, f, d), fam, f, g, d).values())
    r = combined_split(fam, f, g, 8)
    return ok and all(split_verify(r, fam, f, g, 8).values())


def _suite_maxprinc(rng, sysm) -> bool:
    m, n = (int(x) for x in rng.integers(0, 3, 2))
    zeta = int(rng.choice([0, n + 1]))
    S = random_shift(sysm, m, n, seed=rng)
    f = GridFunction(sysm, rng.normal(size=sysm.n_cells))
    sharp = maximal_truncation(S, f).values
    k = int(math.floor(math.log2(max(float(np.quantile(sharp, 0.5)), 1e-300))))
    return maximum_principle_verify(S, f, None, k, zeta).holds


def _suite_concentration(rng, sysm) -> bool:
    w = Weight(np.exp(rng.normal(size=sysm.n_cells)), sysm)
    lev = int(rng.integers(0, sysm.depth + 1))
    Q = sysm.cube(lev, int(rng.integers(sysm.n_cubes(lev))))
    E = np.zeros(sysm.n_cells, dtype=bool)
    sl = sysm.cell_slice(Q)
    E[sl] = rng.random(sl.stop - sl.start) < rng.uniform(0.05, 1.0)
    return concentration_bound_check(w, float(rng.uniform(1.1, 4.0)), Q, E)[0]


def _suite_smoothness(rng, sysm) -> bool:
    S = random_shift(sysm, int(rng.integers(0, 3)), int(rng.integers(0, 3)), seed=rng)
    L = random_linearization(S, rng)
    lev = int(rng.integers(0, sysm.depth + 1))
    Q0 = sysm.cube(lev, int(rng.integers(sysm.n_cubes(lev))))
    nu = rng.normal(size=sysm.n_cells)
    nu[sysm.cell_slice(Q0)] = 0.0
    return smoothness_verify(L, GridFunction(sysm, nu), Q0, rtol=1e-10)


def _suite_john_nirenberg(rng, sysm) -> bool:
    step = int(rng.integers(1, 3))
    phi = random_phi_family(sysm, step, 0, float(rng.uniform(0.2, 0.9)), rng)
    if not phi:
        return True
    rep = john_nirenberg_verify(phi, step, 0)
    return rep.holds is not False


INVARIANT_SUITES: dict[str, Callable] = {
    "adjoint": _suite_adjoint, "maximal_truncation": _suite_truncation,
    "whitney": _suite_whitney, "corona": _suite_corona, "principal": _suite_principal,
    "split": _suite_split, "maximum_principle": _suite_maxprinc,
    "concentration": _suite_concentration, "smoothness": _suite_smoothness,
    "john_nirenberg": _suite_john_nirenberg,
}


def run_invariants(config: ExperimentConfig, count: int = 20, threads: int = 1) -> dict[str, tuple[int, int]]:
    sysm = DyadicSystem(config.dim, min(config.level, 8 if config.dim == 1 else 4))

    def one(job):
        name, i = job
        rng = np.random.default_rng([config.seed, list(INVARIANT_SUITES).index(name), i])
        return name, bool(INVARIANT_SUITES[name](rng, sysm))

    jobs = [(name, i) for name in INVARIANT_SUITES for i in range(count)]
    results = _map(one, jobs, threads)
    out = {name: [0, 0] for name in INVARIANT_SUITES}
    for name, ok in results:
        out[name][0] += ok
        out[name][1] += 1
    return {k: (v[0], v[1]) for k, v in out.items()}


# orchestration ------------------------------------------------------------------------------------

def _map(fn, jobs, threads: int):
    if threads <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs))


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    config.validate()
    kind = config.kind
    if kind == "representation":
        return _representation(config)
    report = ExperimentReport(config)
    if kind == "invariants":
        res = run_invariants(config, threads=threads)
        report.rows = [_row(config, i, name, ratio_strong=ok / tot, strong_est=float(ok), weak_est=float(tot))
                       for i, (name, (ok, tot)) in enumerate(res.items())]
        report.summary = {name: [ok, tot] for name, (ok, tot) in res.items()}
        return report
    if kind == "complexity":
        jobs = [(k, i) for k in config.kappas for i in range(config.n_shifts)]
        point = _complexity_point
    else:
        jobs = list(config.deltas)
        point = {"sharpness": _sharpness_point, "buckley": _buckley_point, "ainfty": _ainfty_point}[kind]
    results = _map(lambda j: point(config, j), jobs, threads)
    rows = [r for rs in results for r in rs]
    report.rows = [_row(config, i, r.pop("label"), **r) for i, r in enumerate(rows)]
    report.fits = _fits(config, report.rows)
    return report


def _fits(config: ExperimentConfig, rows: list[dict]) -> dict[str, dict]:
    p = config.p
    out = {}
    if config.kind == "sharpness":
        out["strong"] = _fit_entry([(r["ap_char"], r["strong_est"]) for r in rows if r["label"] == "strong"],
                                   max(1.0, 1.0 / (p - 1.0)))
        if p < 2:
            out["weak"] = _fit_entry([(r["ap_char"], r["weak_est"]) for r in rows if r["label"] == "weak"], 1.0)
    elif config.kind == "buckley":
        out["strong"] = _fit_entry([(r["ap_char"], r["strong_est"]) for r in rows], 1.0 / (p - 1.0))
        out["weak"] = _fit_entry([(r["ap_char"], r["weak_est"]) for r in rows], 1.0 / p)
    elif config.kind == "complexity":
        for name, pick in (("full", lambda r: r["label"] == "full"),
                           ("parts", lambda r: r["label"].startswith("part"))):
            pairs = []
            for k in config.kappas:
                vals = [r["strong_est"] for r in rows if r["kappa"] == k and pick(r)]
                if vals:
                    pairs.append((float(k), max(vals)))
            out[name] = _fit_entry(pairs)
    elif config.kind == "ainfty":
        out["T_vs_ap"] = _fit_entry([(r["ap_char"], r["T_const"]) for r in rows])
    return out


# persistence -------------------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return "%.17g" % v
    return str(v)


def _json(v, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f'{pad}{_json(str(k))}: {_json(x, indent + 1)}' for k, x in v.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(v, (list, tuple)):
        if not v:
            return "[]"
        return "[" + ", ".join(_json(x, indent + 1) for x in v) + "]"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'
    if v is None:
        return "null"
    if isinstance(v, (float, np.floating)) and not math.isfinite(float(v)):
        return _json(_fmt(v))
    return _fmt(v)


def report_json(report: ExperimentReport) -> str:
    return _json(report.to_dict()) + "\n"


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for r in report.rows:
        wr.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def emit_report(report: ExperimentReport, path: str | None = None, formats: Sequence[str] = ("csv", "json")) -> list[str]:
    """Write <path>.csv / <path>.json; returns the written paths."""
    base = path or report.config.out
    written = []
    for fmt in formats:
        text = {"csv": report_csv, "json": report_json}[fmt](report)
        target = f"{base}.{fmt}"
        try:
            d = os.path.dirname(target)
            if d:
                os.makedirs(d, exist_ok=True)
            with open(target, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise OSError(f"cannot write report {target!r}: {exc}") from exc
        written.append(target)
    return written


def load_report(path: str) -> dict:
    import json

    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read report {path!r}: {exc}") from exc


def render_summary(data: dict) -> str:
    """Human-readable digest of a saved JSON report."""
    cfg = data.get("config", {})
    lines = [f"kind={cfg.get('kind')} d={cfg.get('dim')} L={cfg.get('level')} p={cfg.get('p')} "
             f"seed={cfg.get('seed')} rows={len(data.get('rows', []))}"]
    for name, fit in data.get("fits", {}).items():
        if fit.get("slope") is None:
            lines.append(f"fit {name}: unavailable ({fit.get('error')})")
        else:
            tgt = f" target={fit['target']:.4g}" if "target" in fit else ""
            lines.append(f"fit {name}: slope={fit['slope']:.4f} +- {fit['stderr']:.4f}{tgt}")
    for name, val in data.get("summary", {}).items():
        lines.append(f"{name}: {val}")
    return "\n".join(lines)
