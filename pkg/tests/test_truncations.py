import numpy as np
import pytest
from hypothesis import given, strategies as st

from haarmax.dyadic import DyadicSystem, GridFunction
from haarmax.shifts import ComponentBlock, HaarShift, random_shift
from haarmax.truncations import (Linearization, adjoint_apply, canonical_linearization, full_linearization,
                                 level_truncated_apply, linearize_apply, maximal_truncation, prefix_sums,
                                 random_linearization, restricted_maximal_truncations, smoothness_verify,
                                 truncated_apply, window_levels)

from oracles import brute_maximal_truncation, shift_level_rows

seeds = st.integers(0, 2**32 - 1)
types = st.tuples(st.integers(0, 2), st.integers(0, 2))


def _rand(s, rng):
    return GridFunction(s, rng.normal(size=s.n_cells))


def _instance(seed, mn, L=6, d=1):
    rng = np.random.default_rng(seed)
    s = DyadicSystem(d, L)
    return rng, s, random_shift(s, *mn, density=rng.uniform(0.3, 1.0), seed=rng)


def test_window_errors_and_levels():
    S = HaarShift(DyadicSystem(1, 5), 0, 0)
    with pytest.raises(ValueError):
        window_levels(S, 0.5, 0.25)
    with pytest.raises(ValueError):
        window_levels(S, 0.0, 1.0)
    assert window_levels(S, 2.0 ** -5, 1.0) == (0, 5)
    assert window_levels(S, 0.25, 0.25) == (2, 2)


def test_empty_window_and_full_window(rng):
    s = DyadicSystem(1, 6)
    f = _rand(s, rng)
    assert np.all(truncated_apply(HaarShift(s, 1, 0), f, 0.25, 0.25).values == 0)
    S = random_shift(s, 1, 1, seed=rng)
    np.testing.assert_array_equal(truncated_apply(S, f, 2.0 ** -6, 1.0).values, S.apply(f).values)


def test_window_additivity(rng):
    s = DyadicSystem(1, 7)
    S = random_shift(s, 2, 0, seed=rng)
    f = _rand(s, rng)
    for mid in range(0, 7):
        a = level_truncated_apply(S, f, 0, mid).values + level_truncated_apply(S, f, mid + 1, 7).values
        np.testing.assert_allclose(a, S.apply(f).values, rtol=0, atol=1e-13)


@given(seeds, types)
def test_scale_rows_match_component_oracle(seed, mn):
    rng, s, S = _instance(seed, mn, L=5)
    f = rng.normal(size=s.n_cells)
    np.testing.assert_allclose(S.scale_contributions(f), shift_level_rows(S, f), atol=1e-12)


@given(seeds, types, st.sampled_from([(1, 7), (2, 3)]))
def test_maximal_truncation_equals_window_brute_force(seed, mn, dl):
    rng, s, S = _instance(seed, mn, L=dl[1], d=dl[0])
    f = _rand(s, rng)
    got = maximal_truncation(S, f).values
    want = brute_maximal_truncation(S.scale_contributions(f.values))
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-13)
    assert np.all(got >= np.abs(S.apply(f).values) - 1e-13)
    for top in range(s.depth + 1):
        for bot in range(top, s.depth + 1):
            assert np.all(got >= np.abs(level_truncated_apply(S, f, top, bot).values) - 1e-12)


def test_maximal_truncation_examples(rng):
    s = DyadicSystem(1, 6)
    S = random_shift(s, 1, 1, seed=rng)
    assert np.all(maximal_truncation(S, s.zeros()).values == 0)
    one = HaarShift(s, 1, 1, [S.blocks[2]], validate=False)
    f = _rand(s, rng)
    np.testing.assert_allclose(maximal_truncation(one, f).values, np.abs(one.apply(f).values), atol=1e-15)


@given(seeds, types)
def test_sublinearity(seed, mn):
    rng, s, S = _instance(seed, mn)
    f, g = _rand(s, rng), _rand(s, rng)
    lhs = maximal_truncation(S, f + g).values
    assert np.all(lhs <= maximal_truncation(S, f).values + maximal_truncation(S, g).values + 1e-12)


def test_restricted_maximal_rows(rng):
    s = DyadicSystem(1, 6)
    S = random_shift(s, 1, 0, seed=rng)
    f = _rand(s, rng)
    R = restricted_maximal_truncations(S, f)
    rows = S.scale_contributions(f.values)
    np.testing.assert_allclose(R[0], maximal_truncation(S, f).values, atol=1e-13)
    for top in range(s.depth + 1):
        want = brute_maximal_truncation(rows[top:])
        np.testing.assert_allclose(R[top], want, atol=1e-13)
    assert np.all(np.diff(R, axis=0) <= 1e-13)


@given(seeds, types, st.booleans())
def test_canonical_linearization_attains_maximal_truncation(seed, mn, upper):
    rng, s, S = _instance(seed, mn)
    f = _rand(s, rng)
    L = canonical_linearization(S, f, upper_only=upper)
    Lf = linearize_apply(L, f).values
    assert np.all(Lf >= -1e-13)
    if upper:
        assert np.all(L.bottom == s.depth)
        np.testing.assert_allclose(Lf, restricted_upper_oracle(S, f), atol=1e-12)
    else:
        np.testing.assert_allclose(Lf, maximal_truncation(S, f).values, rtol=1e-12, atol=1e-13)


def restricted_upper_oracle(S, f):
    rows = S.scale_contributions(f.values)
    return np.max([np.abs(rows[i:].sum(axis=0)) for i in range(rows.shape[0])], axis=0)


def test_canonical_linearization_examples(rng):
    s = DyadicSystem(1, 5)
    S = random_shift(s, 1, 0, seed=rng)
    L0 = canonical_linearization(S, s.zeros())
    assert np.all(linearize_apply(L0, s.zeros()).values == 0)
    assert np.all(L0.top == L0.top[0]) and np.all(L0.bottom == L0.bottom[0])
    one = HaarShift(s, 1, 0, [S.blocks[2]], validate=False)
    f = _rand(s, rng)
    L = canonical_linearization(one, f)
    live = np.abs(one.apply(f).values) > 1e-12
    assert np.all(L.top[live] == 2) and np.all(L.bottom[live] == 2)


def test_tie_break_prefers_finest_upper_then_coarsest_lower():
    s = DyadicSystem(1, 2)
    # one component at level 0 and a zero block at level 1: windows [0,0], [0,1], [0,2] all tie
    blk = ComponentBlock(0, np.array([0]), np.array([0]), np.array([[1.0, -1.0]]), np.array([[1.0, -1.0]]))
    S = HaarShift(s, 0, 0, [blk])
    f = GridFunction(s, np.array([1.0, 1.0, 0.0, 0.0]))
    L = canonical_linearization(S, f)
    assert np.all(L.top == 0) and np.all(L.bottom == 0)
    assert np.all(linearize_apply(L, f).values == maximal_truncation(S, f).values)


@given(seeds, types, st.booleans())
def test_linearization_is_linear_and_dual(seed, mn, upper):
    rng, s, S = _instance(seed, mn)
    L = random_linearization(S, rng, upper_only=upper)
    g1, g2, nu = _rand(s, rng), _rand(s, rng), _rand(s, rng)
    a = float(rng.normal())
    np.testing.assert_allclose(linearize_apply(L, a * g1 + g2).values,
                               a * linearize_apply(L, g1).values + linearize_apply(L, g2).values, atol=1e-12)
    lhs = linearize_apply(L, g1).inner(nu)
    rhs = g1.inner(adjoint_apply(L, nu))
    scale = np.linalg.norm(g1.values) * np.linalg.norm(nu.values) * s.cell_volume
    assert abs(lhs - rhs) <= 1e-12 * max(scale, abs(lhs))
    assert np.all(linearize_apply(L, s.zeros()).values == 0)
    assert np.all(adjoint_apply(L, s.zeros()).values == 0)


def test_full_linearization_is_shift(rng):
    s = DyadicSystem(1, 6)
    S = random_shift(s, 1, 2, seed=rng)
    f = _rand(s, rng)
    np.testing.assert_allclose(linearize_apply(full_linearization(S), f).values, S.apply(f).values, atol=1e-13)
    np.testing.assert_allclose(adjoint_apply(full_linearization(S, -1.0), f).values, -S.adjoint(f).values,
                               atol=1e-13)


def test_family_restriction_partitions_adjoint(rng):
    s = DyadicSystem(1, 6)
    S = random_shift(s, 1, 1, seed=rng)
    L = random_linearization(S, rng)
    nu = _rand(s, rng)
    fam = [Q for Q in s.all_cubes() if rng.random() < 0.5]
    rest = [Q for Q in s.all_cubes() if Q not in set(fam)]
    total = adjoint_apply(L, nu, fam).values + adjoint_apply(L, nu, rest).values
    np.testing.assert_allclose(total, adjoint_apply(L, nu).values, atol=1e-13)


def test_separated_scales_stay_in_residue_class(rng):
    s = DyadicSystem(1, 7)
    S = random_shift(s, 1, 1, seed=rng)
    nu = _rand(s, rng)
    parts = S.separate_scales()
    for r, part in enumerate(parts):
        L = random_linearization(part, rng)
        other = [Q for Q in s.all_cubes() if Q.level % len(parts) != r]
        assert np.all(adjoint_apply(L, nu, other).values == 0)
        assert np.any(adjoint_apply(L, nu).values != 0)


def test_linearization_validation():
    s = DyadicSystem(1, 3)
    S = HaarShift(s, 0, 0)
    z = np.zeros(8, dtype=np.int64)
    with pytest.raises(ValueError):
        Linearization(S, z + 2, z + 1, np.ones(8))
    with pytest.raises(ValueError):
        Linearization(S, z, z + 4, np.ones(8))
    with pytest.raises(ValueError):
        Linearization(S, z, z, np.zeros(8))
    with pytest.raises(ValueError):
        Linearization(S, z[:4], z[:4], np.ones(4))


def test_prefix_sums_start_at_zero(rng):
    s = DyadicSystem(1, 4)
    S = random_shift(s, 0, 0, seed=rng)
    P = prefix_sums(S, rng.normal(size=s.n_cells))
    assert P.shape == (s.depth + 2, s.n_cells) and np.all(P[0] == 0)


def test_smoothness_zero_measure():
    s = DyadicSystem(1, 5)
    S = random_shift(s, 1, 1, seed=3)
    L = random_linearization(S, 4)
    assert smoothness_verify(L, s.zeros(), s.cube(2, 1))
    assert np.all(adjoint_apply(L, s.zeros()).values == 0)


def test_smoothness_sibling_example(rng):
    s = DyadicSystem(1, 6)
    S = random_shift(s, 0, 1, seed=rng)
    Q0, sib = s.cube(1, 0), s.cube(1, 1)
    nu = GridFunction(s, rng.normal(size=s.n_cells) * s.indicator(sib).values)
    L = random_linearization(S, rng)
    assert smoothness_verify(L, nu, Q0)
    vals = adjoint_apply(L, nu).values
    for K in s.children(Q0):
        blk = vals[s.cell_slice(K)]
        assert blk.max() - blk.min() <= 1e-12 * max(1.0, np.abs(blk).max())


def test_smoothness_rejects_mass_on_cube():
    s = DyadicSystem(1, 4)
    L = full_linearization(random_shift(s, 0, 0, seed=1))
    with pytest.raises(ValueError):
        smoothness_verify(L, s.constant(1.0), s.cube(1, 0))


@given(seeds, types, st.booleans())
def test_smoothness_randomized(seed, mn, upper):
    rng, s, S = _instance(seed, mn)
    lev = int(rng.integers(0, s.depth + 1))
    Q0 = s.cube(lev, int(rng.integers(s.n_cubes(lev))))
    nu = rng.normal(size=s.n_cells) * (1 - s.indicator(Q0).values)
    L = canonical_linearization(S, _rand(s, rng), upper) if rng.random() < 0.5 else random_linearization(S, rng, upper)
    assert smoothness_verify(L, GridFunction(s, nu), Q0)
