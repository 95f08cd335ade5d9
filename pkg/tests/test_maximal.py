import numpy as np
import pytest
from hypothesis import given, strategies as st

from haarmax.dyadic import DyadicSystem, GridFunction
from haarmax.maximal import (SetSelection, buckley_constants, dyadic_maximal, level_averages,
                             linearized_maximal, maximal_levels)
from haarmax.weights import Weight, dual_weight, lp_norm

from oracles import brute_maximal, cells_of

seeds = st.integers(0, 2**32 - 1)


def _weight(s, rng, scale=1.0):
    return Weight(np.exp(rng.normal(scale=scale, size=s.n_cells)), s)


def test_indicator_and_constant_examples():
    s = DyadicSystem(2, 3)
    for Q in (s.root, s.cube(1, 2), s.cube(3, 17)):
        M = dyadic_maximal(s.indicator(Q)).values
        assert np.all(M[s.cell_slice(Q)] == 1.0)
    assert np.all(dyadic_maximal(s.constant(2.5)).values == 2.5)
    assert np.all(dyadic_maximal(s.constant(-2.5)).values == 2.5)


@given(seeds, st.booleans(), st.sampled_from([(1, 6), (2, 3), (3, 2)]))
def test_maximal_matches_ancestor_enumeration(seed, weighted, dl):
    rng = np.random.default_rng(seed)
    s = DyadicSystem(*dl)
    f = GridFunction(s, rng.normal(size=s.n_cells))
    w = _weight(s, rng, 1.5) if weighted else None
    got = dyadic_maximal(f, w).values
    want = brute_maximal(s, f.values, None if w is None else w.values)
    np.testing.assert_allclose(got, want, rtol=1e-12)
    if w is None:
        assert np.all(got >= np.abs(f.values) - 1e-15)


def test_maximal_dominates_every_cube_average(rng):
    s = DyadicSystem(1, 6)
    w = _weight(s, rng)
    f = GridFunction(s, rng.normal(size=s.n_cells))
    M = dyadic_maximal(f, w).values
    for Q in s.all_cubes():
        idx = list(cells_of(s, Q))
        avg = np.sum(np.abs(f.values[idx]) * w.values[idx]) / np.sum(w.values[idx])
        assert np.all(M[idx] >= avg * (1 - 1e-12))


def test_maximal_levels_attain_maximum(rng):
    s = DyadicSystem(1, 6)
    f = GridFunction(s, rng.normal(size=s.n_cells))
    lev = maximal_levels(f)
    avgs = level_averages(abs(f))
    M = dyadic_maximal(f).values
    for x in range(s.n_cells):
        a = avgs[lev[x]][s.ancestor_flat(x, lev[x])]
        assert a == pytest.approx(M[x], rel=1e-12)


def test_linearized_examples(rng):
    s = DyadicSystem(1, 5)
    w = _weight(s, rng)
    f = GridFunction(s, rng.normal(size=s.n_cells))
    assert np.all(linearized_maximal(f, w, SetSelection.empty(s)).values == 0)
    root = SetSelection.from_sets(s, {s.root: np.arange(s.n_cells)})
    mean = np.sum(f.values * w.values) / np.sum(w.values)
    np.testing.assert_allclose(linearized_maximal(f, w, root).values, mean, rtol=1e-12)


def test_selection_errors():
    s = DyadicSystem(1, 4)
    with pytest.raises(ValueError, match="not contained"):
        SetSelection.from_sets(s, {s.cube(1, 0): [0, 9]})
    with pytest.raises(ValueError, match="overlap"):
        SetSelection.from_sets(s, {s.cube(1, 0): [0, 1], s.cube(2, 0): [1]})
    with pytest.raises(ValueError):
        SetSelection(s, np.full(s.n_cells, 5))


@given(seeds)
def test_linearized_bounded_by_maximal(seed):
    rng = np.random.default_rng(seed)
    s = DyadicSystem(1, 6)
    w = _weight(s, rng)
    f = GridFunction(s, rng.normal(size=s.n_cells))
    sel = SetSelection(s, rng.integers(-1, s.depth + 1, size=s.n_cells))
    N = linearized_maximal(f, w, sel).values
    assert np.all(np.abs(N) <= dyadic_maximal(f, w).values * (1 + 1e-12))


def test_from_sets_round_trip():
    s = DyadicSystem(1, 4)
    sel = SetSelection.from_sets(s, {s.cube(1, 1): np.arange(8, 12), s.cube(3, 0): [0]})
    assert sel.levels[0] == 3 and np.all(sel.levels[8:12] == 1) and sel.levels[5] == -1


def test_buckley_errors_and_normalization(rng):
    s = DyadicSystem(1, 6)
    one = Weight.lebesgue(s)
    with pytest.raises(ValueError):
        buckley_constants(one, one, 2.0, [])
    bank = [GridFunction(s, np.abs(rng.normal(size=s.n_cells))) for _ in range(5)] + [s.indicator(s.cube(3, 1))]
    strong, weak = buckley_constants(one, one, 2.0, bank)
    assert strong >= 1.0 and 0 < weak <= strong
    # unweighted bank maximum equals the same ratio computed directly
    direct = max(lp_norm(dyadic_maximal(f), one, 2.0) / lp_norm(f, one, 2.0) for f in bank)
    assert strong == pytest.approx(direct, rel=1e-14)
    assert strong <= 2.0 + 1e-12


def test_buckley_monotone_in_bank(rng):
    s = DyadicSystem(1, 6)
    w = _weight(s, rng)
    sigma = dual_weight(w, 3.0)
    bank = [GridFunction(s, np.abs(rng.normal(size=s.n_cells))) for _ in range(6)]
    a = buckley_constants(w, sigma, 3.0, bank[:3])
    b = buckley_constants(w, sigma, 3.0, bank)
    assert b[0] >= a[0] and b[1] >= a[1]
    assert buckley_constants(w, sigma, 3.0, [s.zeros()]) == (0.0, 0.0)
