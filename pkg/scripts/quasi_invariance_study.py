"""Quasi-invariance residual of the normalized e^{-G} measure on N uniform atoms.

Arc indicators expose the O(1/N) discretization rate; trigonometric tests are
integrated exactly once N exceeds their degree.
"""

import math

import numpy as np

from evplab.operators import ParticleMeasure, TrigTest, arc_indicator, quasi_invariance_residual
from evplab.torus import RotationVector, TrigPoly

ALPHA = RotationVector.of((math.sqrt(5) - 1) / 2)


def main():
    G = TrigPoly.cosine((1,), 0.5)
    f = G - G.compose_rotation(ALPHA)
    g = np.random.default_rng(5)
    arcs = [arc_indicator(u, u + 0.05 + 0.9 * w) for u, w in g.random((128, 2))]
    smooth = [TrigTest(TrigPoly.cosine((k,), 1.0)) for k in (1, 2, 3)]
    prev = None
    for N in (10**2, 10**3, 10**4, 10**5, 10**6):
        pts = np.arange(N)[:, None] / N
        mu = ParticleMeasure.from_points(pts, logw=-np.asarray(G(pts)))
        r_arc = quasi_invariance_residual(mu, f, ALPHA, arcs)
        r_smooth = quasi_invariance_residual(mu, f, ALPHA, smooth)
        ratio = "" if prev is None else f" ratio={prev / r_arc:.2f}"
        print(f"N={N:>8d} arcs={r_arc:.3e} smooth={r_smooth:.1e}{ratio}")
        prev = r_arc


if __name__ == "__main__":
    main()
