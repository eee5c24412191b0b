"""EVP Markov operator, its dual, the multiplier cocycle T and related residuals.

Measures are weighted atom lists (log-weights).  The multiplier operator is
``T phi = h * (phi o R_alpha)`` with ``h = exp(f)``, so
``T^n phi(z) = exp(S_n f(z)) phi(R^n z)``; all products of weights are kept
in the log domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .torus import (
    DimensionError,
    EnvProfile,
    RotationVector,
    TorusPoint,
    TrigPoly,
    as_points,
    birkhoff_sum,
    orbit,
    rotate_k,
    wrap,
)

DEFAULT_MERGE_RADIUS = 1e-6
DEFAULT_ATOM_CAP = 2**16


# --------------------------------------------------------------------------
# test functions


class TestFunction:
    """Bounded observable on the torus.  Subclasses implement ``__call__`` on ``(..., d)`` arrays."""

    __test__ = False
    d: int

    def __call__(self, z) -> np.ndarray:
        raise NotImplementedError

    def bounds(self) -> tuple[float, float]:
        raise NotImplementedError

    @property
    def sup_norm(self) -> float:
        lo, hi = self.bounds()
        return max(abs(lo), abs(hi))


class TrigTest(TestFunction):
    def __init__(self, poly: TrigPoly):
        self.poly = poly
        self.d = poly.d

    def __call__(self, z):
        return self.poly(z)

    def bounds(self):
        m = self.poly.mean
        rest = self.poly.sup_bound() - abs(m)
        return m - rest, m + rest


class ConstantTest(TestFunction):
    def __init__(self, value: float, d: int = 1):
        self.value = float(value)
        self.d = d

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        out = np.full(z.shape[:-1] if z.ndim else (), self.value)
        return float(out) if out.ndim == 0 else out

    def bounds(self):
        return self.value, self.value


class RampProfile(TestFunction):
    """Periodic function of one coordinate given by knots ``(x, value)``.

    Between consecutive knots the value follows a cosine smoothstep.  Two
    knots at the same abscissa produce a jump, so arc indicators are ramp
    profiles with zero-width ramps.
    """

    def __init__(self, knots: Sequence[tuple[float, float]], d: int = 1, coord: int = 0):
        ks = sorted(((float(x) % 1.0, float(v)) for x, v in knots), key=lambda t: t[0])
        if not ks:
            raise ValueError("ramp profile needs at least one knot")
        self.knots = ks
        self.d = d
        self.coord = coord
        self._x = np.array([k[0] for k in ks])
        self._v = np.array([k[1] for k in ks])

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 0:
            z = z.reshape(1)
        if z.shape[-1] != self.d:
            raise DimensionError(f"point dimension {z.shape[-1]} != {self.d}")
        u = wrap(z[..., self.coord])
        xs = np.concatenate([self._x - 1.0, self._x, self._x + 1.0])
        vs = np.concatenate([self._v, self._v, self._v])
        i = np.searchsorted(xs, u, side="right") - 1
        x0, x1 = xs[i], xs[i + 1]
        v0, v1 = vs[i], vs[i + 1]
        width = x1 - x0
        s = np.where(width > 0, (u - x0) / np.where(width > 0, width, 1.0), 0.0)
        out = v0 + (v1 - v0) * 0.5 * (1.0 - np.cos(np.pi * s))
        return float(out) if out.ndim == 0 else out

    def bounds(self):
        return float(self._v.min()), float(self._v.max())

    def to_json(self) -> dict:
        return {"type": "ramp", "d": self.d, "coord": self.coord, "knots": [list(k) for k in self.knots]}


def arc_indicator(u: float, v: float, d: int = 1, coord: int = 0) -> RampProfile:
    """Indicator of the arc ``[u, v)`` (mod 1) in coordinate ``coord``."""
    u, v = u % 1.0, v % 1.0
    if u < v:
        knots = [(u, 0.0), (u, 1.0), (v, 1.0), (v, 0.0)]
    else:
        knots = [(v, 1.0), (v, 0.0), (u, 0.0), (u, 1.0)]
    return RampProfile(knots, d=d, coord=coord)


def as_test_function(obj, d: int | None = None) -> TestFunction:
    if isinstance(obj, TestFunction):
        return obj
    if isinstance(obj, TrigPoly):
        return TrigTest(obj)
    if isinstance(obj, (int, float)):
        return ConstantTest(obj, d or 1)
    raise TypeError(f"cannot use {type(obj).__name__} as a test function")


# --------------------------------------------------------------------------
# measures


@dataclass
class ParticleMeasure:
    """Probability measure as weighted atoms; ``logw`` log-sums to zero."""

    points: np.ndarray
    logw: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        self.points = wrap(pts)
        self.logw = np.asarray(self.logw, dtype=float).ravel()
        if self.points.shape[0] != self.logw.shape[0]:
            raise ValueError("points and weights disagree in length")
        if self.logw.size == 0:
            raise ValueError("empty measure")

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.logw.size

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.logw)

    @classmethod
    def from_points(cls, points, weights=None, logw=None) -> "ParticleMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if logw is None:
            if weights is None:
                logw = np.zeros(pts.shape[0])
            else:
                with np.errstate(divide="ignore"):
                    logw = np.log(np.asarray(weights, dtype=float))
        return cls(pts, logw).normalized()

    @classmethod
    def dirac(cls, z) -> "ParticleMeasure":
        if isinstance(z, TorusPoint):
            z = z.array()
        return cls(np.asarray(z, dtype=float).reshape(1, -1), np.zeros(1))

    @classmethod
    def uniform_grid(cls, n: int, d: int = 1) -> "ParticleMeasure":
        axes = [np.arange(n) / n] * d
        pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        return cls.from_points(pts)

    def normalized(self) -> "ParticleMeasure":
        return ParticleMeasure(self.points, self.logw - logsumexp(self.logw))

    def log_mass(self) -> float:
        return float(logsumexp(self.logw))

    def integrate(self, phi) -> float:
        vals = np.asarray(_evaluate(phi, self.points), dtype=float)
        return float(np.sum(self.weights * vals))

    def rotated(self, alpha: RotationVector, k: int = 1) -> "ParticleMeasure":
        """Pushforward under ``R_alpha^k``."""
        return ParticleMeasure(wrap(self.points + alpha.offsets([k])[0]), self.logw.copy())

    def compact(self, merge_radius: float = DEFAULT_MERGE_RADIUS, cap: int = DEFAULT_ATOM_CAP) -> "ParticleMeasure":
        """Merge atoms sharing a cell of side ``merge_radius``, keep the ``cap`` heaviest, renormalize.

        A merged atom sits at the position of its heaviest member.
        """
        pts, lw = self.points, self.logw
        if merge_radius > 0:
            cells = np.floor(pts / merge_radius).astype(np.int64)
            _, inv = np.unique(cells, axis=0, return_inverse=True)
            inv = inv.ravel()
            order = np.lexsort((-lw, inv))
            starts = np.flatnonzero(np.r_[True, inv[order][1:] != inv[order][:-1]])
            head = order[starts]
            m = lw.max()
            sums = np.bincount(inv, weights=np.exp(lw - m))
            with np.errstate(divide="ignore"):
                merged_lw = np.log(sums) + m
            pts, lw = pts[head], merged_lw[inv[head]]
        if lw.size > cap:
            keep = np.sort(np.argsort(-lw, kind="stable")[:cap])
            pts, lw = pts[keep], lw[keep]
        return ParticleMeasure(pts, lw).normalized()

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "atoms": [{"z": p.tolist(), "logw": float(w)} for p, w in zip(self.points, self.logw)],
        }

    @classmethod
    def from_json(cls, data) -> "ParticleMeasure":
        d = int(data["d"])
        pts = np.array([a["z"] for a in data["atoms"]], dtype=float).reshape(-1, d)
        return cls(pts, np.array([a["logw"] for a in data["atoms"]], dtype=float))


def _evaluate(phi, pts: np.ndarray) -> np.ndarray:
    if isinstance(phi, (int, float)):
        return np.full(pts.shape[0], float(phi))
    return np.asarray(phi(pts), dtype=float).reshape(pts.shape[0])


# --------------------------------------------------------------------------
# Markov operator and its dual


def apply_markov(mu: ParticleMeasure, env: EnvProfile, alpha: RotationVector, compact: bool = True,
                 merge_radius: float = DEFAULT_MERGE_RADIUS, cap: int = DEFAULT_ATOM_CAP) -> ParticleMeasure:
    """``P mu``: each atom splits into ``R_alpha z`` (weight p) and ``R_{-alpha} z`` (weight q)."""
    if len(mu) == 0:
        raise ValueError("empty measure")
    if mu.d != alpha.d:
        raise DimensionError("measure and rotation dimensions differ")
    up = wrap(mu.points + alpha.offsets([1])[0])
    down = wrap(mu.points + alpha.offsets([-1])[0])
    lw = np.concatenate([mu.logw + env.log_p(mu.points), mu.logw + env.log_q(mu.points)])
    out = ParticleMeasure(np.concatenate([up, down]), lw).normalized()
    return out.compact(merge_radius, cap) if compact else out


def dual_apply(phi, env: EnvProfile, alpha: RotationVector, z, n: int) -> float:
    """``U^n phi(z) = sum_k P_z(xi_n = k) phi(R^k z)`` from the exact walk law."""
    from .walk import walk_pmf_exact

    if n < 1:
        raise ValueError("n must be >= 1")
    pmf = walk_pmf_exact(env, alpha, z, n)
    ks = np.arange(-n, n + 1)
    pts = orbit(z, alpha, ks)[0]
    return float(np.sum(pmf.probs * _evaluate(phi, pts)))


def dual_apply_once(phi, env: EnvProfile, alpha: RotationVector, z) -> np.ndarray:
    """Two-term form ``p(z) phi(R z) + q(z) phi(R^{-1} z)``, vectorized over points."""
    pts = as_points(z, alpha.d)
    up = wrap(pts + alpha.offsets([1])[0])
    down = wrap(pts + alpha.offsets([-1])[0])
    return env.p(pts) * _evaluate(phi, up) + env.q(pts) * _evaluate(phi, down)


# --------------------------------------------------------------------------
# multiplier cocycle


@dataclass(frozen=True)
class WeightedSumResult:
    log_total: float
    ratio: float


def weighted_ratios(f: TrigPoly, alpha: RotationVector, phi, points, n: int,
                    chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``log Sbar_n(1, z)`` and ``Sbar_n(phi, z) / Sbar_n(1, z)``.

    Steps are streamed in chunks with a running log-sum-exp, so weights
    ``exp(S_j f)`` never materialize.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = as_points(points, f.d)
    N = pts.shape[0]
    run_max = np.full(N, -np.inf)
    s_one = np.zeros(N)
    s_phi = np.zeros(N)
    base = np.zeros(N)
    for j0 in range(0, n, chunk):
        ks = np.arange(j0, min(n, j0 + chunk))
        orb = orbit(pts, alpha, ks)
        fv = np.asarray(f(orb)).reshape(N, ks.size)
        pv = np.asarray(_evaluate(phi, orb.reshape(-1, f.d))).reshape(N, ks.size)
        S = np.empty_like(fv)
        S[:, 0] = base
        np.cumsum(fv[:, :-1], axis=1, out=S[:, 1:])
        S[:, 1:] += base[:, None]
        base = base + fv.sum(axis=1)
        m_new = np.maximum(run_max, S.max(axis=1))
        scale = np.exp(run_max - m_new)
        w = np.exp(S - m_new[:, None])
        s_one = s_one * scale + w.sum(axis=1)
        s_phi = s_phi * scale + (w * pv).sum(axis=1)
        run_max = m_new
    return run_max + np.log(s_one), s_phi / s_one


def weighted_birkhoff(f: TrigPoly, alpha: RotationVector, phi, z, n: int) -> WeightedSumResult:
    """``Sbar_n(phi, z) / Sbar_n(1, z)`` with ``Sbar_n(phi, z) = sum_{j<n} e^{S_j f(z)} phi(R^j z)``."""
    lt, ratio = weighted_ratios(f, alpha, phi, z, n)
    return WeightedSumResult(float(lt[0]), float(ratio[0]))


def t_power_log(f: TrigPoly, alpha: RotationVector, z, n: int) -> float:
    """``log T^n 1(z) = S_n f(z)``."""
    return birkhoff_sum(f, alpha, z, n)


def t_semigroup_residual(f: TrigPoly, alpha: RotationVector, phi, z, n: int, m: int) -> float:
    """Relative gap in ``T^{n+m} phi(z) = T^n 1(z) T^m phi(R^n z)``."""
    if n < 0 or m < 0:
        raise ValueError("n, m must be >= 0")
    z = as_points(z, f.d)
    end = rotate_k(z, alpha, n + m)
    phi_end = float(_evaluate(phi, end.reshape(1, -1))[0])
    lhs_log = birkhoff_sum(f, alpha, z, n + m)
    rhs_log = birkhoff_sum(f, alpha, z, n) + birkhoff_sum(f, alpha, rotate_k(z, alpha, n), m)
    if phi_end == 0.0 or lhs_log == rhs_log:
        return 0.0
    # |e^L - e^R| / max(e^L, e^R) = 1 - e^{-|L-R|}
    return float(-math.expm1(-abs(lhs_log - rhs_log)))


def rho_log(env: EnvProfile, alpha: RotationVector, z, n: int, convention: str = "reversible") -> float:
    """``log rho_n(z)``, the weight of site n relative to site 0.

    ``convention="reversible"`` gives the reversible measure of the walk,
    ``prod_{j<n} p_j / prod_{1<=j<=n} q_j`` (mirrored for n < 0).
    ``convention="printed"`` keeps the extra boundary factor
    ``p(z)/q(R^n z) prod_{j=1}^n p_j/q_j``, which differs from the reversible
    measure by ``p_n/q_n`` and does not match the walk's ratio limit.
    """
    if n == 0:
        return 0.0
    m = abs(n)
    sign = 1 if n > 0 else -1
    ks = sign * np.arange(0, m + 1)
    pts = orbit(z, alpha, ks)[0]
    lp, lq = np.asarray(env.log_p(pts)), np.asarray(env.log_q(pts))
    if sign < 0:
        lp, lq = lq, lp
    if convention == "reversible":
        return float(math.fsum(lp[:m].tolist()) - math.fsum(lq[1:].tolist()))
    if convention == "printed":
        if sign > 0:
            boundary = lp[0] - lq[m]
        else:
            boundary = lp[0] - lq[1]
        return float(boundary + math.fsum((lp[1:] - lq[1:]).tolist()))
    raise ValueError(f"unknown convention {convention!r}")


def pf_unit_residual(env: EnvProfile, alpha: RotationVector, z) -> np.ndarray | float:
    """``|q(R z) h(z) + p(R^{-1} z) / h(R^{-1} z) - 1|`` with ``h = p / (q o R)``."""
    pts = as_points(z, env.d)
    up = wrap(pts + alpha.offsets([1])[0])
    down = wrap(pts + alpha.offsets([-1])[0])
    h_z = env.p(pts) / env.q(up)
    h_down = env.p(down) / env.q(pts)
    res = np.abs(env.q(up) * h_z + env.p(down) / h_down - 1.0)
    return float(res[0]) if res.size == 1 else res


def quasi_invariance_residual(mu: ParticleMeasure, f: TrigPoly, alpha: RotationVector,
                              tests: Sequence) -> float:
    """``max_phi |int phi d(R_{-alpha})_* mu - int phi e^f dmu|`` over the atoms."""
    if not tests:
        raise ValueError("need at least one test function")
    shifted = wrap(mu.points + alpha.offsets([-1])[0])
    w = mu.weights
    ef = np.exp(np.asarray(f(mu.points)))
    worst = 0.0
    for phi in tests:
        lhs = np.sum(w * _evaluate(phi, shifted))
        rhs = np.sum(w * ef * _evaluate(phi, mu.points))
        worst = max(worst, abs(float(lhs - rhs)))
    return worst


Observable = Callable[[np.ndarray], np.ndarray]
