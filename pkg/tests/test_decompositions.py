import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from haarmax.decompositions import (adapted_partition, all_cubes_masks, corona_decompose, corona_phi_family,
                                    corona_verify, decay_rate, distributional_profile, family_cubes, family_masks,
                                    family_size, john_nirenberg_verify, principal_cubes, principal_verify,
                                    random_phi_family, size_density, split_decompose, split_verify,
                                    stopping_sum_ratio, whitney_decompose, whitney_nested_verify,
                                    whitney_verify)
from haarmax.dyadic import DyadicSystem, GridFunction
from haarmax.shifts import HaarShift, random_shift
from haarmax.truncations import full_linearization, random_linearization
from haarmax.weights import Weight, ap_characteristic, dual_weight, power_weight

from oracles import (ancestor, brute_corona, brute_principal, brute_size_density, brute_whitney,
                     cells_of)

seeds = st.integers(0, 2**32 - 1)


def _weight(s, rng, scale=1.0):
    return Weight(np.exp(rng.normal(scale=scale, size=s.n_cells)), s)


# Whitney

def test_whitney_single_cube_examples():
    s = DyadicSystem(1, 5)
    for C in (s.root, s.cube(2, 1), s.cube(4, 9)):
        g = s.indicator(C)
        assert set(whitney_decompose(g, 0.5, 0).cubes) == {C}
        assert set(whitney_decompose(g, 0.5, 1).cubes) == set(s.children(C))
    dec = whitney_decompose(s.zeros(), 0.5, 2)
    assert dec.cubes == [] and all(whitney_verify(dec).values())
    with pytest.raises(ValueError):
        whitney_decompose(s.zeros(), 0.5, -1)


@given(seeds, st.integers(0, 3), st.sampled_from([(1, 6), (2, 3)]))
def test_whitney_matches_maximality_oracle(seed, zeta, dl):
    rng = np.random.default_rng(seed)
    s = DyadicSystem(*dl)
    g = GridFunction(s, rng.random(s.n_cells) * (rng.random(s.n_cells) < rng.uniform(0.3, 1.0)))
    dec = whitney_decompose(g, 0.2, zeta)
    assert set(dec.cubes) == brute_whitney(s, g.values > 0.2, zeta)
    assert all(whitney_verify(dec).values())


@given(seeds, st.integers(0, 2))
def test_whitney_nested_across_thresholds(seed, zeta):
    rng = np.random.default_rng(seed)
    s = DyadicSystem(1, 7)
    Mg = GridFunction(s, np.exp(rng.normal(size=s.n_cells) * 2))
    decs = {k: whitney_decompose(Mg, 2.0 ** k, zeta) for k in range(-2, 5)}
    assert whitney_nested_verify(decs)


def test_whitney_nested_detects_violation():
    s = DyadicSystem(1, 4)
    big = whitney_decompose(s.indicator(s.root), 0.5, 0)
    small = whitney_decompose(s.indicator(s.cube(2, 0)), 0.5, 0)
    # the deeper cube sits under the root but carries the smaller index
    assert not whitney_nested_verify({0: small, 1: big})
    assert whitney_nested_verify({0: big, 1: small})


# corona

def test_corona_constant_weight():
    s = DyadicSystem(1, 6)
    c = corona_decompose(Weight(s.constant(3.0)), s.root)
    assert c.stopping_cubes == [s.root]
    assert family_size(c.part(s.root)) == sum(s.n_cubes(l) for l in range(s.depth + 1))
    assert all(corona_verify(c).values())
    assert stopping_sum_ratio(c, Weight(s.constant(3.0))) == 1.0


def _spike_chain(s, cell, height):
    """Stopping chain of a single spike by walking the ancestors of its cell."""
    cube = s.cell_cube(cell)
    dens = lambda Q: float(np.mean([height if x == cell else 1.0 for x in cells_of(s, Q)]))
    chain = [s.root]
    ref = dens(s.root)
    for j in range(s.depth - 1, -1, -1):
        Q = ancestor(cube, j)
        if dens(Q) >= 4.0 * ref:
            chain.append(Q)
            ref = dens(Q)
    return chain


def test_corona_single_spike_chain():
    s = DyadicSystem(1, 10)
    cell = 357
    v = np.ones(s.n_cells)
    v[cell] = 9.0
    c = corona_decompose(Weight(v, s), s.root)
    chain = _spike_chain(s, cell, 9.0)
    assert set(c.stopping_cubes) == set(chain)
    # root density ~ 1, and level L-1 is the first ancestor at 5 >= 4 * root density
    assert [Q.level for Q in chain] == [0, 9]


@given(seeds, st.integers(1, 3), st.sampled_from([(1, 7), (2, 3)]))
def test_corona_matches_recursive_oracle(seed, step, dl):
    rng = np.random.default_rng(seed)
    s = DyadicSystem(*dl)
    w = _weight(s, rng, 2.0)
    lev = int(rng.integers(0, 2))
    root = s.cube(lev, int(rng.integers(s.n_cubes(lev))))
    c = corona_decompose(w, root, step=step)
    assert set(c.stopping_cubes) == brute_corona(s, w.values, root, step)
    assert all(corona_verify(c).values())
    for S in c.stopping_cubes:
        for Q in family_cubes(s, c.part(S)):
            # S is the minimal stopping cube containing Q
            holders = [T for T in c.stopping_cubes if s.contains(T, Q)]
            assert max(holders, key=lambda T: T.level) == S


def test_corona_family_validation():
    s = DyadicSystem(1, 4)
    w = Weight.lebesgue(s)
    with pytest.raises(ValueError):
        corona_decompose(w, s.cube(1, 0), [s.cube(1, 1)])
    with pytest.raises(ValueError):
        corona_decompose(w, s.root, step=0)


def test_stopping_sum_ratio_against_direct_sum(rng):
    s = DyadicSystem(1, 8)
    w = _weight(s, rng, 1.5)
    c = corona_decompose(w, s.root)
    direct = sum(w.mass(S) for S in c.stopping_cubes) / w.mass(s.root)
    assert stopping_sum_ratio(c, w) == pytest.approx(direct, rel=1e-12)
    assert stopping_sum_ratio(c, w) >= 1.0


def test_stopping_sum_constant_stable_in_level():
    cs = []
    for L in (8, 10):
        s = DyadicSystem(1, L)
        c = 0.0
        for a in (-0.8, -0.5, 0.5, 1.5):
            w = power_weight(s, a)
            c = max(c, stopping_sum_ratio(corona_decompose(w, s.root), w) / ap_characteristic(w, 2.0))
        cs.append(c)
    assert abs(cs[1] - cs[0]) / cs[0] < 0.20


# principal cubes

def test_principal_examples():
    s = DyadicSystem(1, 6)
    sigma = Weight.lebesgue(s)
    with pytest.raises(ValueError):
        principal_cubes(sigma, s.zeros())
    pc = principal_cubes(sigma, s.constant(-2.0))
    assert pc.cubes == [s.root] and principal_verify(pc)


def test_principal_single_cell_chain():
    s = DyadicSystem(1, 10)
    cell = 600
    f = GridFunction(s, (np.arange(s.n_cells) == cell).astype(float))
    pc = principal_cubes(Weight.lebesgue(s), f)
    # the average on the level-l ancestor is 2^(l-L); strictly more than 4x needs three levels
    cube = s.cell_cube(cell)
    chain, ref = [s.root], 2.0 ** -s.depth
    for j in range(s.depth - 1, -1, -1):
        Q = ancestor(cube, j)
        if 2.0 ** (Q.level - s.depth) > 4 * ref:
            chain.append(Q)
            ref = 2.0 ** (Q.level - s.depth)
    assert set(pc.cubes) == set(chain)
    assert [Q.level for Q in chain] == [0, 3, 6, 9]
    assert [[Q.level for Q in g] for g in pc.generations()] == [[0], [3], [6], [9]]


@given(seeds, st.sampled_from([(1, 7), (2, 3)]))
def test_principal_matches_oracle(seed, dl):
    rng = np.random.default_rng(seed)
    s = DyadicSystem(*dl)
    sigma = _weight(s, rng, 1.5)
    f = GridFunction(s, rng.standard_cauchy(size=s.n_cells))
    pc = principal_cubes(sigma, f)
    assert set(pc.cubes) == brute_principal(s, sigma.values, f.values)
    assert principal_verify(pc)
    # 4x rule: the children of each principal cube carry at most a quarter of its sigma mass
    assert pc.packing_ratio(sigma) <= 4.0 / 3.0 + 1e-12
    for _ in range(10):
        lev = int(rng.integers(0, s.depth + 1))
        Q = s.cube(lev, int(rng.integers(s.n_cubes(lev))))
        G = pc.lookup(Q)
        assert s.contains(G, Q)
        assert not any(s.contains(T, Q) and T.level > G.level for T in pc.cubes)


# adapted families

def test_adapted_examples():
    s = DyadicSystem(1, 5)
    parts = adapted_partition(all_cubes_masks(s), Weight.lebesgue(s), 2.0, 2)
    assert [(P.residue, P.alpha) for P in parts] == [(0, 0), (1, 0), (2, 0)]
    fam = [Q for lev in (0, 1, 2) for Q in s.cubes(lev)]
    parts = adapted_partition(fam, Weight.lebesgue(s), 2.0, 1)
    levels = {P.residue: {Q.level for Q in family_cubes(s, P.masks)} for P in parts}
    assert levels == {0: {0, 2}, 1: {1}}


@given(seeds, st.integers(0, 3), st.floats(1.2, 4.0))
def test_adapted_bands_match_direct_ratio(seed, kappa, p):
    rng = np.random.default_rng(seed)
    s = DyadicSystem(1, 6)
    w = _weight(s, rng, 1.5)
    fam = [Q for Q in s.all_cubes() if rng.random() < 0.6]
    parts = adapted_partition(fam, w, p, kappa)
    seen = []
    for P in parts:
        for Q in family_cubes(s, P.masks):
            idx = list(cells_of(s, Q))
            ratio = np.mean(w.values[idx]) * np.mean(w.values[idx] ** (-1 / (p - 1))) ** (p - 1)
            assert P.alpha == max(0, math.floor(math.log2(max(ratio, 1.0))))
            assert P.residue == Q.level % (kappa + 1)
            seen.append(Q)
    assert sorted(seen) == sorted(fam)
    assert len(parts) <= (kappa + 1) * (math.ceil(math.log2(ap_characteristic(w, p))) + 1)


# size and density

def test_size_density_examples():
    s = DyadicSystem(1, 5)
    Q = s.cube(2, 3)
    assert size_density(s.indicator(Q), s.zeros(), [Q])[0] == 1.0
    assert size_density(s.zeros(), s.constant(2.5), [Q, s.cube(5, 0)])[1] == 2.5
    assert size_density(s.constant(1.0), s.constant(1.0), []) == (0.0, 0.0)


@given(seeds, st.sampled_from([(1, 6), (2, 3)]))
def test_size_density_vs_double_enumeration(seed, dl):
    rng = np.random.default_rng(seed)
    s = DyadicSystem(*dl)
    f, g = (GridFunction(s, rng.standard_cauchy(size=s.n_cells)) for _ in range(2))
    fam = [Q for Q in s.all_cubes() if rng.random() < 0.3]
    got = size_density(f, g, fam)
    want = brute_size_density(s, f.values, g.values, fam)
    assert got == pytest.approx(want, rel=1e-12)


# splits

def test_split_examples(rng):
    s = DyadicSystem(1, 6)
    fam = all_cubes_masks(s)
    g = GridFunction(s, rng.random(s.n_cells))
    res = split_decompose(fam, None, g, "density", 1e6)
    assert family_size(res.rest) == family_size(fam) and res.parts == []
    res = split_decompose(fam, None, s.zeros(), "density", 0.5)
    assert family_size(res.rest) == family_size(fam)
    with pytest.raises(ValueError):
        split_decompose(fam, g, g, "other", 1.0)
    with pytest.raises(ValueError):
        split_decompose(fam, None, g, "density", 0.0)
    with pytest.raises(ValueError):
        split_decompose(fam, g, None, "size", -1.0)


@given(seeds, st.sampled_from(["density", "size", "combined"]))
def test_split_conclusions_randomized(seed, mode):
    rng = np.random.default_rng(seed)
    s = DyadicSystem(1, 7)
    fam = [Q for Q in s.all_cubes() if rng.random() < 0.5]
    f = GridFunction(s, rng.standard_cauchy(size=s.n_cells) * (rng.random(s.n_cells) < 0.5))
    g = GridFunction(s, rng.standard_cauchy(size=s.n_cells) * (rng.random(s.n_cells) < 0.5))
    param = {"density": rng.uniform(0.5, 8), "size": rng.uniform(0.5, 4), "combined": 6}[mode]
    res = split_decompose(fam, f, g, mode, param)
    assert all(split_verify(res, fam, f, g, param).values())


def test_combined_split_reports_measured_quantities():
    s = DyadicSystem(1, 6)
    f = GridFunction(s, (np.arange(s.n_cells) == 0) * 100.0)
    with pytest.raises(ValueError, match=r"n0=0 too small: dense=.* size="):
        split_decompose(all_cubes_masks(s), f, f, "combined", 0)


def test_combined_split_vanishing_rest():
    s = DyadicSystem(1, 5)
    f = GridFunction(s, (np.arange(s.n_cells) < 8).astype(float))
    g = s.zeros()
    # cubes under the right half never see f, so none of them can become a top
    right = all_cubes_masks(s, s.cube(1, 1))
    res = split_decompose(right, f, g, "combined", 4)
    assert res.parts == [] and family_size(res.rest) == family_size(right)
    assert all(split_verify(res, right, f, g, 4).values())
    # on the full family the root turns into a top once the threshold drops below its size
    res = split_decompose(all_cubes_masks(s), f, g, "combined", 4)
    assert family_size(res.rest) == 0 and s.root in [P.top for P in res.parts]


# John-Nirenberg

def test_john_nirenberg_trivial_families():
    s = DyadicSystem(1, 6)
    zero = {Q: s.zeros() for Q in s.cubes(2)}
    rep = john_nirenberg_verify(zero, 2, 0)
    assert rep.holds and all(r == 0 for r in rep.ratios.values())
    Q = s.cube(2, 1)
    one = {Q: GridFunction(s, s.indicator(s.cube(4, 5)).values)}
    rep = john_nirenberg_verify(one, 2, 0)
    assert rep.holds and all(r == 0 for t, r in rep.ratios.items() if t > 1)
    with pytest.raises(ValueError):
        john_nirenberg_verify({}, 2, 0)
    with pytest.raises(ValueError):
        john_nirenberg_verify({s.cube(1, 0): s.zeros()}, 2, 0)


def test_john_nirenberg_flags_hypothesis_failures():
    s = DyadicSystem(1, 6)
    Q = s.cube(2, 1)
    rep = john_nirenberg_verify({Q: GridFunction(s, 2.0 * s.indicator(s.cube(4, 5)).values)}, 2, 0)
    assert not rep.hypotheses["bounded"] and rep.failed_cubes == [Q] and rep.holds is None
    rep = john_nirenberg_verify({Q: GridFunction(s, np.arange(s.n_cells) / 100.0 * s.indicator(Q).values)}, 2, 0)
    assert not rep.hypotheses["constant"]


def test_john_nirenberg_random_spikes(rng):
    s = DyadicSystem(1, 10)
    for _ in range(5):
        phi = random_phi_family(s, 2, 0, 0.3, rng)
        rep = john_nirenberg_verify(phi, 2, 0)
        assert all(v for k, v in rep.hypotheses.items() if k != "delta")
        if rep.hypotheses["delta"]:
            assert rep.holds


def test_corona_pieces_feed_john_nirenberg(rng):
    s = DyadicSystem(1, 8)
    w = _weight(s, rng, 1.0)
    S = random_shift(s, 0, 1, seed=rng)
    L = random_linearization(S, rng)
    c = corona_decompose(w, s.root, step=S.kappa + 1)
    phi = corona_phi_family(L, c.part(s.root), s.root, w, GridFunction(s, rng.uniform(-1, 1, s.n_cells)))
    assert all(np.abs(v.values).max() <= 1.0 + 1e-12 for v in phi.values())
    rep = john_nirenberg_verify(phi, S.kappa + 1, 0)
    assert rep.hypotheses["support"] and rep.hypotheses["constant"] and rep.hypotheses["bounded"]


# distributional profile

def test_decay_rate_examples():
    t = np.arange(1.0, 13.0)
    beta, env = decay_rate(t, 3.0 * 2.0 ** (-0.7 * t))
    assert beta == pytest.approx(0.7, rel=1e-12) and env == pytest.approx(3.0, rel=1e-12)
    assert decay_rate(t, np.r_[0.5, np.zeros(11)]) == (math.inf, 0.5)
    steps = np.r_[0.25, 0.25, np.zeros(10)]
    assert decay_rate(t, steps)[0] == pytest.approx(0.0, abs=1e-12)
    # with a floor of 1/8 the vanishing point at t=3 enters as 1/16: slope of (0, 0, -2) over (1, 2, 3)
    assert decay_rate(t, steps, floor=0.125)[0] == pytest.approx(1.0, rel=1e-12)


def test_distributional_trivial_cases(rng):
    s = DyadicSystem(1, 6)
    w = _weight(s, rng)
    sigma = dual_weight(w, 2.0)
    zero = full_linearization(HaarShift(s, 0, 0))
    phi = GridFunction(s, rng.uniform(-1, 1, s.n_cells))
    prof = distributional_profile(zero, all_cubes_masks(s), s.root, w, sigma, phi)
    assert np.all(prof.lebesgue == 0) and np.all(prof.sigma == 0)
    L = full_linearization(random_shift(s, 1, 1, seed=rng))
    prof = distributional_profile(L, all_cubes_masks(s), s.root, w, sigma, s.zeros())
    assert np.all(prof.lebesgue == 0) and prof.beta_lebesgue == math.inf
    with pytest.raises(ValueError):
        distributional_profile(L, all_cubes_masks(s), s.root, w, sigma, s.constant(2.0))


def test_distributional_decay_positive(rng):
    s = DyadicSystem(1, 9)
    for _ in range(5):
        w = _weight(s, rng, 0.7)
        S = random_shift(s, 1, 0, seed=rng)
        c = corona_decompose(w, s.root, step=S.kappa + 1)
        parts = adapted_partition(c.part(s.root), w, 2.0, S.kappa)
        L = random_linearization(S, rng)
        phi = GridFunction(s, rng.uniform(-1, 1, s.n_cells))
        prof = distributional_profile(L, parts[0].masks, s.root, w, dual_weight(w, 2.0), phi)
        assert prof.beta_lebesgue > 0 and prof.beta_sigma > 0


def test_family_mask_validation():
    s = DyadicSystem(1, 3)
    with pytest.raises(ValueError):
        family_masks(s, {1: np.ones(3, dtype=bool)})
