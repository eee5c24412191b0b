import cmath
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evplab.analysis import (
    FourierFingerprint,
    atom_partial_sums,
    fingerprint,
    lebesgue_fingerprint,
    mixing_correlation,
    ratio_uniformity_scan,
    stationary_estimate,
    weak_star_distance,
)
from evplab.operators import ConstantTest, ParticleMeasure, TrigTest, apply_markov
from evplab.torus import RotationVector, TrigPoly, random_trig_poly, xi_map
from evplab.walk import RngSpec

GOLDEN = RotationVector.of((math.sqrt(5) - 1) / 2)
FAIR = xi_map(TrigPoly.zero(1))
COS = TrigTest(TrigPoly.cosine((1,), 1.0))


def random_measure(seed, d=1, n=30):
    g = np.random.default_rng(seed)
    return ParticleMeasure.from_points(g.random((n, d)), weights=g.random(n) + 0.01)


@given(st.integers(0, 2**31), st.integers(1, 2), st.integers(1, 4))
def test_fingerprint_invariants(seed, d, K):
    fp = fingerprint(random_measure(seed, d), K)
    assert fp[(0,) * d] == 1
    for k, c in fp.coeffs.items():
        assert fp[tuple(-x for x in k)] == c.conjugate()
        assert abs(c) <= 1 + 1e-12


def test_fingerprint_of_point_mass():
    z = [0.3, 0.1]
    fp = fingerprint(ParticleMeasure.dirac(z), 2)
    for k, c in fp.coeffs.items():
        assert c == pytest.approx(cmath.exp(2j * math.pi * (k[0] * z[0] + k[1] * z[1])), abs=1e-14)
    back = FourierFingerprint.from_json(fp.to_json(), 2)
    assert back.coeffs == fp.coeffs


def test_weak_star_distance_examples():
    fp = fingerprint(ParticleMeasure.dirac([0.0]), 1)
    assert weak_star_distance(fp, fp) == 0
    assert weak_star_distance(fp, lebesgue_fingerprint(1, 1)) == 1.0
    with pytest.raises(ValueError):
        weak_star_distance(fp, lebesgue_fingerprint(1, 2))


@given(st.integers(0, 2**31))
def test_weak_star_triangle(seed):
    a, b, c = (fingerprint(random_measure(seed + i), 3) for i in range(3))
    assert weak_star_distance(a, c) <= weak_star_distance(a, b) + weak_star_distance(b, c) + 1e-12


def test_stationary_fair_chain_equidistributes():
    mu = stationary_estimate(FAIR, GOLDEN, [0.1], 10_000, 100_000, RngSpec(1))
    fp = fingerprint(mu, 3)
    assert max(abs(c) for k, c in fp.coeffs.items() if any(k)) < 0.02


def test_stationary_zero_rotation():
    z0 = 0.37
    mu = stationary_estimate(FAIR, RotationVector.of(0), [z0], 10, 500, RngSpec(1))
    assert np.all(mu.points == z0)
    fp = fingerprint(mu, 2)
    assert fp[(1,)] == pytest.approx(cmath.exp(2j * math.pi * z0), abs=1e-12)


def test_stationary_is_deterministic():
    env = xi_map(TrigPoly.sine((1,), 0.3))
    a = stationary_estimate(env, GOLDEN, [0.1], 100, 2000, RngSpec(9))
    b = stationary_estimate(env, GOLDEN, [0.1], 100, 2000, RngSpec(9))
    np.testing.assert_array_equal(a.points, b.points)


def test_stationarity_residual_shrinks():
    env = xi_map(TrigPoly.sine((1,), 0.3))
    dist = []
    for L in (100_000, 400_000):
        mu = stationary_estimate(env, GOLDEN, [0.1], 10_000, L, RngSpec(3))
        dist.append(weak_star_distance(fingerprint(mu), fingerprint(apply_markov(mu, env, GOLDEN))))
    assert dist[0] < 5 * dist[1]
    assert dist[1] < 0.01


def test_mixing_constant_observables():
    env = xi_map(TrigPoly.sine((1,), 0.3))
    mu = random_measure(4)
    cs = mixing_correlation(env, GOLDEN, mu, ConstantTest(2.0), COS, [0, 1, 5, 12])
    np.testing.assert_allclose(cs.value, 0.0, atol=1e-14)
    cs = mixing_correlation(env, GOLDEN, mu, COS, ConstantTest(3.0), [0, 3])
    assert cs.at(0) == pytest.approx(0.0, abs=1e-14)


@given(st.integers(0, 2**31), st.integers(0, 30))
def test_correlation_bound(seed, n):
    g = np.random.default_rng(seed)
    env = xi_map(random_trig_poly(g, 1, 2))
    mu = random_measure(seed)
    phi = TrigTest(random_trig_poly(g, 1, 2))
    psi = TrigTest(random_trig_poly(g, 1, 2))
    v = mixing_correlation(env, GOLDEN, mu, phi, psi, [n]).value[0]
    bound = phi.sup_norm * psi.sup_norm + abs(mu.integrate(phi)) * abs(mu.integrate(psi))
    assert abs(v) <= bound + 1e-12


def test_mixing_monte_carlo_beyond_dp_limit():
    mu = ParticleMeasure.uniform_grid(64)
    cs = mixing_correlation(FAIR, GOLDEN, mu, COS, COS, [4, 2100], RngSpec(1), mc_samples=4000)
    assert cs.method == ["dp", "mc"]
    assert cs.stderr[1] > 0 and abs(cs.value[1]) < 5 * cs.stderr[1] + 0.02


def test_atom_partial_sums():
    s = atom_partial_sums(TrigPoly.zero(1), GOLDEN, [0.2], 50)
    np.testing.assert_allclose(s[:, 1], np.log(2 * np.arange(51) + 1), atol=1e-12)
    f = TrigPoly(1, {(0,): (0.3, 0.0), (1,): (0.0, 0.5)})
    s = atom_partial_sums(f, GOLDEN, [0.2], 2000)
    assert np.all(np.diff(s[:, 1]) > 0)
    slope = (s[2000, 1] - s[1000, 1]) / 1000
    assert slope == pytest.approx(0.3, abs=0.01)


def test_atom_partial_sums_reflection():
    f = TrigPoly(1, {(1,): (0.4, 0.7), (2,): (0.1, -0.2)})
    refl = TrigPoly(1, {k: (a, -b) for k, (a, b) in f.terms.items()})  # f(-t)
    z0 = 0.3
    s = atom_partial_sums(f, GOLDEN, [z0], 200)
    r = atom_partial_sums(refl, -GOLDEN, [1 - z0], 200)
    np.testing.assert_allclose(s, r, atol=1e-10)


def test_uniformity_scan_examples():
    grid = np.arange(64)[:, None] / 64
    one = ratio_uniformity_scan(TrigPoly.sine((1,), 2.0), GOLDEN, ConstantTest(1.0), grid, 300)
    assert one.spread == 0.0
    spreads = [ratio_uniformity_scan(TrigPoly.zero(1), GOLDEN, COS, grid, n).spread for n in (10, 100, 1000)]
    assert spreads[0] > spreads[1] > spreads[2]
