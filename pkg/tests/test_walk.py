import math
from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evplab.operators import ParticleMeasure
from evplab.torus import RotationVector, TrigPoly, orbit, random_trig_poly, xi_map
from evplab.walk import (
    RngSpec,
    SymmetryError,
    evp_chain_sample,
    ratio_limit_report,
    record_frequency_estimate,
    walk_pmf_batch,
    walk_pmf_exact,
    walk_pmf_series,
    walk_sample,
)

GOLDEN = RotationVector.of((math.sqrt(5) - 1) / 2)
FAIR = xi_map(TrigPoly.zero(1))


def test_fair_walk_is_binomial():
    pmf = walk_pmf_exact(FAIR, GOLDEN, [0.3], 4)
    assert pmf.prob(0) == 0.375
    for n in (1, 7, 20):
        pmf = walk_pmf_exact(FAIR, GOLDEN, [0.3], n)
        for k in range(-n, n + 1):
            exact = comb(n, (n + k) // 2) / 2**n if (n + k) % 2 == 0 else 0.0
            assert pmf.prob(k) == pytest.approx(exact, abs=1e-15)


def test_constant_bias_matches_exact_binomial():
    # p = e^c/(1+e^c); oracle in rational arithmetic on the rounded p
    env = xi_map(TrigPoly.constant(1, 0.7))
    p = float(env.p(np.array([0.0])))
    pf = Fraction(p)
    pmf = walk_pmf_exact(env, GOLDEN, [0.1], 9)
    for up in range(10):
        k = 2 * up - 9
        exact = comb(9, up) * pf**up * (1 - pf) ** (9 - up)
        assert pmf.prob(k) == pytest.approx(float(exact), rel=1e-13)


def test_two_step_bridges():
    env = xi_map(TrigPoly(1, {(1,): (0.2, 0.9), (2,): (0.0, -0.4)}))
    z = 0.37
    pts = orbit([[z]], GOLDEN, [-1, 0, 1])[0]
    p = env.p(pts)
    q = env.q(pts)
    pmf = walk_pmf_exact(env, GOLDEN, [z], 2)
    assert pmf.prob(0) == pytest.approx(p[1] * q[2] + q[1] * p[0], abs=1e-15)


@given(st.integers(0, 2**31), st.integers(1, 40))
def test_pmf_is_a_probability(seed, n):
    g = np.random.default_rng(seed)
    env = xi_map(random_trig_poly(g, 2, 3, amp=2.0))
    al = RotationVector.of(g.random(), g.random())
    pmf = walk_pmf_exact(env, al, g.random(2), n)
    assert pmf.total() == pytest.approx(1.0, abs=1e-12)
    assert np.all(pmf.probs >= 0)
    assert np.all(pmf.probs[np.arange(2 * n + 1) % 2 == 1] == 0)  # parity: k = n mod 2


def test_series_and_batch_agree_with_single():
    env = xi_map(TrigPoly.sine((1,), 0.6))
    ser = walk_pmf_series(env, GOLDEN, [0.2], [3, 10])
    np.testing.assert_allclose(ser[10].probs, walk_pmf_exact(env, GOLDEN, [0.2], 10).probs, atol=1e-16)
    batch = walk_pmf_batch(env, GOLDEN, np.array([[0.2], [0.6]]), [3, 10])
    np.testing.assert_allclose(batch[3][1], walk_pmf_exact(env, GOLDEN, [0.6], 3).probs, atol=1e-16)


def test_mc_matches_dp():
    env = xi_map(TrigPoly.sine((1,), 0.5))
    s = walk_sample(env, GOLDEN, [0.1], 16, 100_000, RngSpec(3))
    exact = walk_pmf_exact(env, GOLDEN, [0.1], 16).probs
    sigma = np.sqrt(exact * (1 - exact) / s.m)
    assert np.all(np.abs(s.freq - exact) <= 4 * sigma + 1e-12)


def test_sampling_is_deterministic_and_stream_dependent():
    a = walk_sample(FAIR, GOLDEN, [0.1], 10, 1000, RngSpec(5), keep_trajectories=True)
    b = walk_sample(FAIR, GOLDEN, [0.1], 10, 1000, RngSpec(5), keep_trajectories=True)
    c = walk_sample(FAIR, GOLDEN, [0.1], 10, 1000, RngSpec(5, 1))
    np.testing.assert_array_equal(a.counts, b.counts)
    assert not np.array_equal(a.counts, c.counts)
    tr = a.trajectory(3, [0.1])
    assert tr.positions[-1] in a.offsets[a.counts > 0]
    assert set(np.unique(tr.steps)) <= {-1, 1}


def test_record_frequency_fair_walk():
    est, se = record_frequency_estimate(FAIR, GOLDEN, ParticleMeasure.uniform_grid(16), 4, 200_000, RngSpec(11))
    assert abs(est - 3 / 16) < 3 * se


def test_record_frequency_decreases():
    mu = ParticleMeasure.uniform_grid(8)
    ests = [record_frequency_estimate(FAIR, GOLDEN, mu, n, 40_000, RngSpec(2))[0] for n in (4, 16, 64, 256)]
    assert all(a > b for a, b in zip(ests, ests[1:]))


def test_ratio_limit_requires_symmetry():
    env = xi_map(TrigPoly(1, {(0,): (0.3, 0.0), (1,): (0.0, 0.3)}))
    with pytest.raises(SymmetryError):
        ratio_limit_report(env, GOLDEN, [0.1], 1, 0, [10])


def test_ratio_limit_gap_shrinks():
    env = xi_map(TrigPoly.sine((1,), 0.3))
    rows = ratio_limit_report(env, GOLDEN, [0.1], 1, 0, [20, 200])
    assert rows[1].gap < rows[0].gap < 0.1
    printed = ratio_limit_report(env, GOLDEN, [0.1], 1, 0, [200], convention="printed")
    assert printed[0].gap > 10 * rows[1].gap


def test_evp_chain_path_is_consistent():
    env = xi_map(TrigPoly.sine((1,), 0.8))
    path = evp_chain_sample(env, GOLDEN, [0.25], 500, RngSpec(1))
    assert path.xi[0] == 0 and set(np.unique(path.steps)) <= {-1, 1}
    np.testing.assert_array_equal(path.points, orbit([[0.25]], GOLDEN, path.xi)[0])
    again = evp_chain_sample(env, GOLDEN, [0.25], 500, RngSpec(1))
    np.testing.assert_array_equal(path.xi, again.xi)


def test_strongly_biased_chain_moves_right():
    env = xi_map(TrigPoly.constant(1, 10.0))
    path = evp_chain_sample(env, GOLDEN, [0.0], 20_000, RngSpec(4))
    frac_up = np.mean(path.steps == 1)
    assert frac_up == pytest.approx(math.exp(10) / (1 + math.exp(10)), abs=2e-4)
