import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import comb

from conftest import path_field
from rcmwalk.environment import ConductanceField, LawSpec, sample_field
from rcmwalk.kernel import (
    BoxTooSmall,
    DistributionVector,
    TransitionKernel,
    ZeroWeightError,
    annulus_mass,
    check_reversibility,
    cs_lower_bound,
    full_sum,
    heat_kernel,
    return_series,
    step,
)
from rcmwalk.lattice import Edge
from rcmwalk.walk import final_positions


def point(field, x):
    return DistributionVector.point(field.geometry, x)


# ---------------------------------------------------------------------------
# step


def test_step_d1_constant():
    f = ConductanceField.constant(1, 3)
    d = step(TransitionKernel(f), point(f, (0,)))
    assert d.at((-1,)) == 0.5 and d.at((1,)) == 0.5 and d.total == 1.0
    assert d.parity == 1


def test_step_d2_constant():
    f = ConductanceField.constant(2, 3)
    d = step(TransitionKernel(f), point(f, (0, 0)))
    for y in [(1, 0), (-1, 0), (0, 1), (0, -1)]:
        assert d.at(y) == 0.25


def test_step_weighted_path():
    # ω = (1, 2) scaled into [0, 1]; p(x, ·) is scale invariant
    f = path_field([0.5, 1.0])
    d = step(TransitionKernel(f), point(f, (0,)))
    assert d.at((-1,)) == pytest.approx(1 / 3, abs=1e-15)
    assert d.at((1,)) == pytest.approx(2 / 3, abs=1e-15)


def test_step_from_zero_weight_vertex_is_error():
    f = ConductanceField.constant(1, 3).with_values({Edge((0,), 0): 0.0, Edge((-1,), 0): 0.0})
    with pytest.raises(ZeroWeightError):
        step(TransitionKernel(f), point(f, (0,)))


# ---------------------------------------------------------------------------
# heat kernel


def test_heat_kernel_d1_two_steps():
    f = ConductanceField.constant(1, 2)
    d = heat_kernel(f, (0,), 2)
    assert d.at((0,)) == 0.5 and d.at((2,)) == 0.25 and d.at((-2,)) == 0.25


def test_heat_kernel_d2_two_steps():
    f = ConductanceField.constant(2, 2)
    assert heat_kernel(f, (0, 0), 2).at((0, 0)) == 0.25


def enumerate_paths(field, o, n):
    """Brute-force P^n(o, ·): sum over all 2d^n direction sequences."""
    d = field.d
    out: dict = {}
    for seq in product(range(2 * d), repeat=n):
        x, p = tuple(o), 1.0
        for s in seq:
            axis, sign = divmod(s, 2)
            y = list(x)
            y[axis] += 1 if sign else -1
            y = tuple(y)
            pi = sum(field.conductance(x, z) for z in _nb(x))
            p *= field.conductance(x, y) / pi
            x = y
            if p == 0:
                break
        if p:
            out[x] = out.get(x, 0.0) + p
    return out


def _nb(x):
    for a in range(len(x)):
        for s in (-1, 1):
            y = list(x)
            y[a] += s
            yield tuple(y)


def test_heat_kernel_epsilon_fixture_path_sum():
    eps = 0.01
    f = ConductanceField.constant(1, 4).with_values({Edge((-1,), 0): eps})
    got = heat_kernel(f, (0,), 2)
    oracle = enumerate_paths(f, (0,), 2)
    for x, p in oracle.items():
        assert got.at(x) == pytest.approx(p, abs=1e-15)
    # hand value: 1/(1+ε) * 1/2 + ε/(1+ε) * ε/(1+ε)
    hand = (1 / (1 + eps)) * 0.5 + (eps / (1 + eps)) * (eps / (1 + eps))
    assert got.at((0,)) == pytest.approx(hand, abs=1e-15)


@given(seed=st.integers(0, 2**32), n=st.integers(1, 5))
@settings(max_examples=15, deadline=None)
def test_heat_kernel_matches_path_enumeration_d2(seed, n):
    f = sample_field(LawSpec.uniform(0.05, 1), 2, 5, seed)
    got = heat_kernel(f, (0, 0), n)
    oracle = enumerate_paths(f, (0, 0), n)
    err = max(abs(got.at(x) - p) for x, p in oracle.items())
    assert err <= 1e-14
    assert sum(oracle.values()) == pytest.approx(got.total, abs=1e-13)


def test_box_too_small_is_hard_error():
    f = ConductanceField.constant(2, 5)
    with pytest.raises(BoxTooSmall):
        heat_kernel(f, (0, 0), 6)
    with pytest.raises(BoxTooSmall):
        heat_kernel(f, (1, 0), 5)
    with pytest.raises(BoxTooSmall):
        return_series(f, (0, 0), 3)


def test_start_with_zero_weight_is_error():
    f = ConductanceField.constant(1, 3).with_values({Edge((0,), 0): 0.0, Edge((-1,), 0): 0.0})
    with pytest.raises(ZeroWeightError):
        heat_kernel(f, (0,), 1)


# ---------------------------------------------------------------------------
# return series


def test_return_series_d1_binomial():
    f = ConductanceField.constant(1, 40)
    s = return_series(f, (0,), 20)
    assert s[:3].tolist() == [0.5, 0.375, 0.3125]
    oracle = np.array([comb(2 * n, n, exact=True) / 4**n for n in range(1, 21)])
    assert np.max(np.abs(s - oracle)) <= 1e-15


def test_return_series_d2_first_term():
    assert return_series(ConductanceField.constant(2, 2), (0, 0), 1)[0] == 0.25


def test_odd_returns_vanish():
    f = sample_field(LawSpec.lp(0.3), 2, 9, 1)
    k = TransitionKernel(f)
    dist = point(f, (0, 0))
    for _ in range(4):
        dist = k.evolve(dist, 1)
        if dist.parity:
            assert dist.at((0, 0)) == 0.0


def random_field(seed: int, d: int):
    """Small random field of one of several laws, origin with π > 0."""
    laws = [LawSpec.lp(0.3), LawSpec.uniform(0, 1), LawSpec.bernoulli(0.7, 1.0), LawSpec.histogram([0, 0.01, 1], [0.3, 0.7])]
    law = laws[seed % len(laws)]
    L = {1: 40, 2: 12, 3: 5}[d]
    s = seed
    while True:
        f = sample_field(law, d, L, s)
        if f.pi[f.geometry.origin] > 0:
            return f
        s += 7919


@given(seed=st.integers(0, 10**6), d=st.integers(1, 3))
@settings(max_examples=30, deadline=None)
def test_even_returns_non_increasing(seed, d):
    f = random_field(seed, d)
    n_max = f.L // 2
    s = return_series(f, (0,) * d, n_max)
    assert np.all(np.diff(s) <= 1e-15)


# ---------------------------------------------------------------------------
# annuli and the Cauchy–Schwarz bound


def test_annulus_mass_examples():
    f = ConductanceField.constant(2, 8)
    assert annulus_mass(f, (0, 0), 1, 0) == 1.0
    assert annulus_mass(f, (0, 0), 1, 1) == 0.0


def test_annulus_mass_monte_carlo():
    f = ConductanceField.constant(2, 8)
    exact = annulus_mass(f, (0, 0), 4, 0)
    reps = 10**6
    end = final_positions(f, (0, 0), 4, seed=5, n_replicas=reps)
    norms = f.geometry.norms[end]
    emp = np.mean((norms > 0) & (norms <= 3))
    assert abs(emp - exact) <= 3 * math.sqrt(exact * (1 - exact) / reps)


def test_cs_bound_d1_hand_value():
    f = ConductanceField.constant(1, 4)
    # P^2(0,±2) = 1/4 each, P^2(0,0) = 1/2 lies outside B°_0 = {±1,±2,±3}
    # term = (1/2)^2 / 6 * π(o)/(2d) = 1/24
    assert cs_lower_bound(f, (0,), 2, 3) == pytest.approx(1 / 24, abs=1e-16)


@given(seed=st.integers(0, 10**6), d=st.integers(1, 3), n=st.integers(1, 5))
@settings(max_examples=30, deadline=None)
def test_cs_bound_below_return_and_monotone_in_r(seed, d, n):
    f = random_field(seed, d)
    o = (0,) * d
    if f.L < 2 * n:
        return
    p2n = heat_kernel(f, o, 2 * n).at(o)
    vals = [cs_lower_bound(f, o, n, r) for r in range(0, f.L + 1)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] <= p2n * (1 + 1e-12)


@given(seed=st.integers(0, 10**6), d=st.integers(1, 3), n=st.integers(1, 6))
@settings(max_examples=30, deadline=None)
def test_full_sum_identity(seed, d, n):
    f = random_field(seed, d)
    o = (0,) * d
    if f.L < 2 * n:
        return
    dist = heat_kernel(f, o, n)
    p2n = heat_kernel(f, o, 2 * n).at(o)
    assert abs(full_sum(dist, f.pi, o) - p2n) <= 1e-12


# ---------------------------------------------------------------------------
# reversibility, normalisation, composition


def test_reversibility_examples():
    assert check_reversibility(ConductanceField.constant(2, 4)) == 0.0
    assert check_reversibility(sample_field(LawSpec.lp(0.05), 2, 10, 3)) <= 1e-12


def test_tampered_kernel_detected():
    f = ConductanceField.constant(2, 3)
    k = TransitionKernel(f)
    probs = k.probs.copy()
    i = f.geometry.origin
    probs[i] = [0.1, 0.2, 0.3, 0.4]
    assert check_reversibility(TransitionKernel(f, probs)) > 0.01


@given(seed=st.integers(0, 10**6), d=st.integers(1, 3), m=st.integers(0, 4), n=st.integers(0, 4))
@settings(max_examples=30, deadline=None)
def test_chapman_kolmogorov_parity_and_mass(seed, d, m, n):
    f = random_field(seed, d)
    o = (0,) * d
    if f.L < m + n:
        return
    k = TransitionKernel(f)
    direct = heat_kernel(f, o, m + n, k)
    composed = k.evolve(heat_kernel(f, o, m, k), n)
    assert np.max(np.abs(direct.mass - composed.mass)) <= 1e-12
    l1 = np.abs(f.geometry.coords).sum(axis=1)
    assert np.all(direct.mass[(l1 % 2) != ((m + n) % 2)] == 0)
    assert np.all(direct.mass[l1 > m + n] == 0)
    assert direct.total <= 1 + 1e-12
    assert k.row_sum_residual() <= 1e-12
    assert check_reversibility(k) <= 1e-12


def test_mass_conserved_without_dead_vertices():
    f = sample_field(LawSpec.uniform(0.1, 1), 2, 10, 8)
    assert abs(heat_kernel(f, (0, 0), 10).total - 1) <= 1e-12


def test_mass_lost_only_at_dead_vertices():
    # a dead vertex next to the origin cannot receive mass (ω = 0 on its bonds)
    f = ConductanceField.constant(2, 4)
    g = f.geometry
    dead = (1, 0)
    f = f.with_values({Edge.between(dead, y): 0.0 for y in _nb(dead)})
    dist = heat_kernel(f, (0, 0), 4)
    assert dist.at(dead) == 0.0
    assert abs(dist.total - 1) <= 1e-12
    assert g.contains(dead)
