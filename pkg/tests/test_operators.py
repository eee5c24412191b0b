import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evplab.operators import (
    ConstantTest,
    ParticleMeasure,
    RampProfile,
    TrigTest,
    apply_markov,
    arc_indicator,
    dual_apply,
    dual_apply_once,
    pf_unit_residual,
    quasi_invariance_residual,
    rho_log,
    t_power_log,
    t_semigroup_residual,
    weighted_birkhoff,
    weighted_ratios,
)
from evplab.torus import RotationVector, TrigPoly, birkhoff_sum, random_trig_poly, xi_map

GOLDEN = RotationVector.of((math.sqrt(5) - 1) / 2)
unit = st.floats(0, 1, allow_nan=False, exclude_max=True)


def test_ramp_profile_shape():
    phi = RampProfile([(0.1, 0.0), (0.4, 1.0), (0.6, 1.0), (0.9, 0.0)], d=2, coord=0)
    z = np.array([[0.0, 0.3], [0.5, 0.1], [0.25, 0.0], [0.95, 0.5]])
    np.testing.assert_allclose(phi(z), [0.0, 1.0, 0.5, 0.0], atol=1e-15)
    assert phi.bounds() == (0.0, 1.0)


def test_arc_indicator_wraps():
    ind = arc_indicator(0.9, 0.1)
    np.testing.assert_array_equal(ind(np.array([[0.95], [0.05], [0.5], [0.9], [0.1]])), [1, 1, 0, 1, 0])
    ind = arc_indicator(0.2, 0.3)
    np.testing.assert_array_equal(ind(np.array([[0.19], [0.2], [0.29], [0.3]])), [0, 1, 1, 0])


def test_measure_basics():
    mu = ParticleMeasure.from_points([[0.1], [0.2], [0.2]], weights=[1, 1, 2])
    assert math.exp(mu.log_mass()) == pytest.approx(1.0)
    assert mu.integrate(ConstantTest(3.0)) == pytest.approx(3.0)
    c = mu.compact(merge_radius=1e-6)
    assert len(c) == 2
    assert np.sort(c.weights) == pytest.approx([0.25, 0.75])
    back = ParticleMeasure.from_json(mu.to_json())
    np.testing.assert_array_equal(back.points, mu.points)
    np.testing.assert_array_equal(back.logw, mu.logw)


def test_compaction_cap_keeps_heaviest():
    mu = ParticleMeasure.from_points(np.arange(10)[:, None] / 10, weights=np.arange(1, 11))
    c = mu.compact(merge_radius=0, cap=3)
    assert len(c) == 3
    np.testing.assert_allclose(np.sort(c.points[:, 0]), [0.7, 0.8, 0.9])
    assert c.weights.sum() == pytest.approx(1.0)


def test_apply_markov_split_weights():
    env = xi_map(TrigPoly.sine((0, 2), -1.0))
    mu = ParticleMeasure.dirac([0.0, 0.125])
    out = apply_markov(mu, env, RotationVector.of(Fraction(1, 10), Fraction(1, 7)), compact=False)
    assert len(out) == 2
    np.testing.assert_allclose(np.sort(out.weights), [0.26894142136999512075, 1 - 0.26894142136999512075],
                               rtol=1e-14)


def test_dual_apply_binomial_example():
    env = xi_map(TrigPoly.zero(1))
    phi = TrigTest(TrigPoly.cosine((1,), 1.0))
    v = dual_apply(phi, env, RotationVector.of(0.3), [0.0], 2)
    expected = 0.25 * math.cos(-1.2 * math.pi) + 0.5 + 0.25 * math.cos(1.2 * math.pi)
    assert v == pytest.approx(expected, abs=1e-15)


@given(unit, st.integers(0, 2**31))
def test_dual_apply_once_matches_one_step_law(z, seed):
    f = random_trig_poly(np.random.default_rng(seed), 1, 3)
    env = xi_map(f)
    phi = TrigTest(TrigPoly(1, {(1,): (0.4, 0.2), (2,): (0.0, 1.0)}))
    assert dual_apply_once(phi, env, GOLDEN, [[z]])[0] == pytest.approx(dual_apply(phi, env, GOLDEN, [z], 1),
                                                                        abs=1e-13)


@given(st.integers(0, 2**31))
def test_duality_without_compaction(seed):
    g = np.random.default_rng(seed)
    env = xi_map(random_trig_poly(g, 1, 3))
    mu = ParticleMeasure.from_points(g.random((20, 1)), weights=g.random(20) + 0.1)
    phi = TrigTest(random_trig_poly(g, 1, 4))
    lhs = float(np.sum(mu.weights * dual_apply_once(phi, env, GOLDEN, mu.points)))
    rhs = apply_markov(mu, env, GOLDEN, compact=False).integrate(phi)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_weighted_birkhoff_frozen():
    f = TrigPoly.sine((1,), 1.0)
    phi = TrigTest(TrigPoly.cosine((1,), 1.0))
    res = weighted_birkhoff(f, RotationVector.of(Fraction(1, 3)), phi, [0.05], 5)
    assert res.ratio == pytest.approx(-0.091456491859330721886, abs=1e-14)
    assert res.log_total == pytest.approx(1.9992743546834543497, abs=1e-14)


def test_weighted_ratios_chunking_consistent(rng):
    f = random_trig_poly(rng, 2, 3)
    al = RotationVector.of(0.1234, 0.77)
    phi = TrigTest(random_trig_poly(rng, 2, 2))
    pts = rng.random((7, 2))
    a = weighted_ratios(f, al, phi, pts, 1000, chunk=4096)
    b = weighted_ratios(f, al, phi, pts, 1000, chunk=37)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12, atol=1e-14)


def test_weighted_ratio_of_one_is_one(rng):
    f = random_trig_poly(rng, 1, 4, amp=5.0)
    _, r = weighted_ratios(f, GOLDEN, ConstantTest(1.0), rng.random((5, 1)), 500)
    np.testing.assert_array_equal(r, 1.0)


def test_t_power_log_is_birkhoff_sum():
    f = TrigPoly.sine((1,), 0.3)
    assert t_power_log(f, GOLDEN, [0.1], 17) == birkhoff_sum(f, GOLDEN, [0.1], 17)


@given(st.integers(0, 2**31), st.integers(0, 60), st.integers(0, 60), unit)
def test_semigroup_identity(seed, n, m, z):
    g = np.random.default_rng(seed)
    f = random_trig_poly(g, 1, 3)
    phi = TrigTest(random_trig_poly(g, 1, 2))
    assert t_semigroup_residual(f, GOLDEN, phi, [z], n, m) < 1e-9


def test_semigroup_trivial_cases():
    f = TrigPoly.sine((1,), 1.0)
    phi = ConstantTest(1.0)
    assert t_semigroup_residual(f, GOLDEN, phi, [0.2], 0, 5) == 0.0
    assert t_semigroup_residual(f, GOLDEN, ConstantTest(0.0), [0.2], 5, 5) == 0.0


def test_rho_reversible_frozen():
    env = xi_map(TrigPoly.sine((1,), 0.3))
    assert rho_log(env, GOLDEN, [0.1], 2) == pytest.approx(-0.072841462223211962428, abs=1e-14)
    assert rho_log(env, GOLDEN, [0.1], 0) == 0.0


def test_rho_conventions_differ_by_boundary_factor():
    env = xi_map(TrigPoly.sine((1,), 0.3))
    z = [0.1]
    for n in (1, 2, 5):
        pts = np.array([[(0.1 + n * GOLDEN.float[0]) % 1]])
        bf = float(env.log_p(pts)[0] - env.log_q(pts)[0])
        assert rho_log(env, GOLDEN, z, n, "printed") - rho_log(env, GOLDEN, z, n) == pytest.approx(bf, abs=1e-12)
    with pytest.raises(ValueError):
        rho_log(env, GOLDEN, z, 1, "other")


@given(st.integers(0, 2**31), unit)
def test_rho_detailed_balance(seed, z):
    # rho_{n+1} q_{n+1} = rho_n p_n: the reversible measure balances flows
    env = xi_map(random_trig_poly(np.random.default_rng(seed), 1, 3))
    for n in (-3, 0, 4):
        pts = np.array([[(z + k * GOLDEN.float[0]) % 1] for k in (n, n + 1)])
        lp, lq = env.log_p(pts), env.log_q(pts)
        lhs = rho_log(env, GOLDEN, [z], n + 1) + lq[1]
        rhs = rho_log(env, GOLDEN, [z], n) + lp[0]
        assert lhs == pytest.approx(rhs, abs=1e-10)


@given(st.integers(0, 2**31))
def test_pf_unit_identity_even_when_asymmetric(seed):
    g = np.random.default_rng(seed)
    env = xi_map(random_trig_poly(g, 2, 3, mean=0.3))
    res = pf_unit_residual(env, RotationVector.of(g.random(), g.random()), g.random((50, 2)))
    assert np.max(res) < 1e-12


def test_quasi_invariance_exact_solution_and_generic():
    G = TrigPoly.cosine((1,), 0.5)
    f = G - G.compose_rotation(GOLDEN)
    N = 4000
    pts = np.arange(N)[:, None] / N
    mu = ParticleMeasure.from_points(pts, logw=-np.asarray(G(pts)))
    smooth = [TrigTest(TrigPoly.cosine((k,), 1.0)) for k in (1, 2, 3)]
    assert quasi_invariance_residual(mu, f, GOLDEN, smooth) < 1e-12
    generic = ParticleMeasure.uniform_grid(N)
    assert quasi_invariance_residual(generic, TrigPoly.sine((1,), 0.4), GOLDEN, smooth) > 1e-3
