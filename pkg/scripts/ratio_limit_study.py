"""Ratio-limit gap versus n under both density conventions.

The reversible convention converges; the alternative one carries an extra
one-site factor and settles at a nonzero gap.
"""

import math

from evplab.torus import RotationVector, TrigPoly, xi_map
from evplab.walk import ratio_limit_report

ALPHA = RotationVector.of((math.sqrt(5) - 1) / 2)


def main():
    env = xi_map(TrigPoly.sine((1,), 0.3))
    ns = [100, 200, 400, 800, 1600, 2000]
    for z in (0.1, 0.37, 0.8):
        for a, b in ((1, 0), (2, -1)):
            for conv in ("reversible", "printed"):
                rows = ratio_limit_report(env, ALPHA, [z], a, b, ns, convention=conv)
                gaps = " ".join(f"{r.gap:.3e}" for r in rows)
                print(f"z={z:<5} a={a:2d} b={b:2d} {conv:10s} rhs={rows[0].rhs:.6f} gaps {gaps}")


if __name__ == "__main__":
    main()
