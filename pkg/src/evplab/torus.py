"""Torus points, exact rotations, trigonometric polynomials and Birkhoff sums.

Points are stored as float arrays of shape ``(d,)`` or ``(N, d)`` with every
coordinate in ``[0, 1)``.  Rotation angles keep an exact rational view so
that iterates ``z + k*alpha`` can be formed without accumulated drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
RESONANCE_TOL = 1e-12


class DimensionError(ValueError):
    pass


class ResonantAngleError(ZeroDivisionError):
    """Raised when sin(pi*q*alpha) vanishes (to 1e-12)."""


def wrap(x):
    """Canonical representative in [0, 1), floor based."""
    y = np.asarray(x, dtype=float)
    y = y - np.floor(y)
    # x - floor(x) can round up to 1.0 for tiny negative x
    return np.where(y >= 1.0, 0.0, y)


def as_points(z, d: int | None = None) -> np.ndarray:
    """Coerce to a ``(N, d)`` float array of canonical torus points."""
    arr = np.asarray(z, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if d is None or arr.shape[0] == d else arr.reshape(-1, 1)
    if d is not None and arr.shape[1] != d:
        raise DimensionError(f"expected dimension {d}, got {arr.shape[1]}")
    return wrap(arr)


@dataclass(frozen=True)
class TorusPoint:
    coords: tuple[float, ...]

    def __post_init__(self):
        if len(self.coords) < 1:
            raise DimensionError("torus dimension must be >= 1")
        object.__setattr__(self, "coords", tuple(float(c) for c in wrap(self.coords)))

    @property
    def d(self) -> int:
        return len(self.coords)

    def array(self) -> np.ndarray:
        return np.array(self.coords)


def _to_fraction(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, str):
        return Fraction(v)
    if isinstance(v, int):
        return Fraction(v)
    return Fraction(float(v))


@dataclass(frozen=True)
class RotationVector:
    """Rotation angle with an exact rational view and a float view.

    Floats passed in are converted exactly (binary rationals), so the float
    view always equals the exact view rounded.
    """

    exact: tuple[Fraction, ...]

    def __post_init__(self):
        vals = tuple(_to_fraction(v) for v in self.exact)
        if not vals:
            raise DimensionError("rotation needs at least one component")
        object.__setattr__(self, "exact", vals)

    @classmethod
    def of(cls, *components) -> "RotationVector":
        if len(components) == 1 and isinstance(components[0], (list, tuple, np.ndarray)):
            components = tuple(components[0])
        return cls(tuple(components))

    @property
    def d(self) -> int:
        return len(self.exact)

    @property
    def float(self) -> np.ndarray:
        return np.array([float(a) for a in self.exact])

    def reduced(self) -> "RotationVector":
        return RotationVector(tuple(a - math.floor(a) for a in self.exact))

    def __add__(self, other: "RotationVector") -> "RotationVector":
        _check_dim(self.d, other.d)
        return RotationVector(tuple(a + b for a, b in zip(self.exact, other.exact)))

    def __neg__(self) -> "RotationVector":
        return RotationVector(tuple(-a for a in self.exact))

    def offsets(self, ks) -> np.ndarray:
        """Exact ``frac(k * alpha)`` for integer ``ks``, returned as ``(len(ks), d)`` floats."""
        ks = np.asarray(ks, dtype=np.int64).ravel()
        out = np.empty((ks.size, self.d))
        for i, a in enumerate(self.exact):
            num, den = a.numerator, a.denominator
            num %= den
            if den < 2**31:
                r = (ks % den) * num % den
                out[:, i] = r / den
            else:
                rs = [(int(k) * num) % den for k in ks]
                out[:, i] = [float(Fraction(r, den)) for r in rs]
        return wrap(out)

    def to_json(self) -> list[str]:
        return [f"{a.numerator}/{a.denominator}" for a in self.exact]

    @classmethod
    def from_json(cls, data: Sequence) -> "RotationVector":
        return cls(tuple(_to_fraction(v) for v in data))


def _check_dim(d1: int, d2: int):
    if d1 != d2:
        raise DimensionError(f"dimension mismatch: {d1} vs {d2}")


def rotate_k(z, alpha: RotationVector, k: int):
    """``z + k*alpha mod 1`` using the exact angle for the offset."""
    pts = as_points(z)
    _check_dim(pts.shape[1], alpha.d)
    out = wrap(pts + alpha.offsets([k])[0])
    if isinstance(z, TorusPoint):
        return TorusPoint(tuple(out[0]))
    return out[0] if np.ndim(z) <= 1 else out


def orbit(z, alpha: RotationVector, ks) -> np.ndarray:
    """Points ``R_alpha^k z`` for each k in ``ks``; shape ``(N, len(ks), d)``."""
    pts = as_points(z, alpha.d)
    offs = alpha.offsets(ks)
    return wrap(pts[:, None, :] + offs[None, :, :])


@dataclass(frozen=True)
class TrigPoly:
    """Real trigonometric polynomial ``sum_k a_k cos(2 pi k.z) + b_k sin(2 pi k.z)``.

    ``terms`` maps integer frequency tuples to ``(cos_amp, sin_amp)``.  The mean
    is the cosine amplitude at ``k = 0``.
    """

    d: int
    terms: Mapping[tuple[int, ...], tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        clean: dict[tuple[int, ...], tuple[float, float]] = {}
        for k, (a, b) in dict(self.terms).items():
            k = tuple(int(x) for x in k)
            if len(k) != self.d:
                raise DimensionError(f"frequency {k} has wrong dimension for d={self.d}")
            if not any(k):
                b = 0.0
            # fold -k onto k: cos even, sin odd
            if any(k) and next(x for x in k if x != 0) < 0:
                k = tuple(-x for x in k)
                b = -b
            a0, b0 = clean.get(k, (0.0, 0.0))
            clean[k] = (a0 + float(a), b0 + float(b))
        clean = {k: ab for k, ab in clean.items() if ab != (0.0, 0.0)}
        object.__setattr__(self, "terms", dict(sorted(clean.items())))

    @classmethod
    def zero(cls, d: int) -> "TrigPoly":
        return cls(d, {})

    @classmethod
    def constant(cls, d: int, c: float) -> "TrigPoly":
        return cls(d, {(0,) * d: (c, 0.0)})

    @classmethod
    def sine(cls, k: Sequence[int], amp: float = 1.0) -> "TrigPoly":
        return cls(len(k), {tuple(k): (0.0, amp)})

    @classmethod
    def cosine(cls, k: Sequence[int], amp: float = 1.0) -> "TrigPoly":
        return cls(len(k), {tuple(k): (amp, 0.0)})

    @property
    def mean(self) -> float:
        return self.terms.get((0,) * self.d, (0.0, 0.0))[0]

    @property
    def degree(self) -> int:
        return max((sum(abs(x) for x in k) for k in self.terms), default=0)

    def sup_bound(self) -> float:
        """Upper bound on sup|f| from the amplitudes."""
        return sum(math.hypot(a, b) for a, b in self.terms.values())

    def frequencies(self) -> np.ndarray:
        return np.array(list(self.terms) or np.zeros((0, self.d), int), dtype=np.int64).reshape(-1, self.d)

    def __call__(self, z) -> np.ndarray | float:
        """Evaluate at points with last axis of length d; one point gives a float."""
        if isinstance(z, TorusPoint):
            z = z.array()
        pts = np.asarray(z, dtype=float)
        if pts.ndim == 0:
            pts = pts.reshape(1)
        if pts.shape[-1] != self.d:
            raise DimensionError(f"point dimension {pts.shape[-1]} != {self.d}")
        out = np.zeros(pts.shape[:-1])
        for k, (a, b) in self.terms.items():
            ph = TWO_PI * (pts @ np.array(k, dtype=float))
            if a:
                out += a * np.cos(ph)
            if b:
                out += b * np.sin(ph)
        return float(out) if out.ndim == 0 else out

    def __add__(self, other: "TrigPoly") -> "TrigPoly":
        _check_dim(self.d, other.d)
        terms = dict(self.terms)
        for k, (a, b) in other.terms.items():
            a0, b0 = terms.get(k, (0.0, 0.0))
            terms[k] = (a0 + a, b0 + b)
        return TrigPoly(self.d, terms)

    def __neg__(self) -> "TrigPoly":
        return self.scale(-1.0)

    def __sub__(self, other: "TrigPoly") -> "TrigPoly":
        return self + (-other)

    def scale(self, c: float) -> "TrigPoly":
        return TrigPoly(self.d, {k: (c * a, c * b) for k, (a, b) in self.terms.items()})

    def compose_rotation(self, alpha: RotationVector) -> "TrigPoly":
        """Coefficients of ``f o R_alpha``."""
        _check_dim(self.d, alpha.d)
        out = {}
        for k, (a, b) in self.terms.items():
            th = TWO_PI * float(sum(ki * ai for ki, ai in zip(k, alpha.exact)) % 1)
            c, s = math.cos(th), math.sin(th)
            # cos(x+th) = c cos x - s sin x ; sin(x+th) = s cos x + c sin x
            out[k] = (a * c + b * s, -a * s + b * c)
        return TrigPoly(self.d, out)

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "terms": [{"k": list(k), "cos": a, "sin": b} for k, (a, b) in self.terms.items()],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "TrigPoly":
        return cls(int(data["d"]), {tuple(t["k"]): (float(t.get("cos", 0.0)), float(t.get("sin", 0.0)))
                                     for t in data["terms"]})


def trig_eval(f: TrigPoly, z) -> float:
    return f(z)


def birkhoff_sums(f: TrigPoly, alpha: RotationVector, z, n: int) -> np.ndarray:
    """Partial sums ``S_0 f(z), ..., S_n f(z)`` (forward) for each point.

    Returns shape ``(N, n+1)``; column j is ``sum_{i<j} f(R^i z)``.
    """
    pts = as_points(z, f.d)
    vals = f(orbit(pts, alpha, np.arange(n)))
    vals = np.asarray(vals).reshape(pts.shape[0], n)
    out = np.zeros((pts.shape[0], n + 1))
    np.cumsum(vals, axis=1, out=out[:, 1:])
    return out


def birkhoff_sum(f: TrigPoly, alpha: RotationVector, z, n: int) -> float:
    """``S_n f(z)``: forward sum for n > 0, backward ``sum_{j=1}^{|n|} f(R^{-j} z)`` for n < 0."""
    pts = as_points(z, f.d)
    _check_dim(pts.shape[1], alpha.d)
    if n == 0:
        return 0.0
    ks = np.arange(n) if n > 0 else -np.arange(1, -n + 1)
    vals = np.asarray(f(orbit(pts, alpha, ks))).ravel()
    return math.fsum(vals.tolist())


def _resonance_check(q: int, alpha: float) -> float:
    s = math.sin(math.pi * q * alpha)
    if abs(s) <= RESONANCE_TOL:
        raise ResonantAngleError(f"resonant alpha: sin(pi*{q}*{alpha}) = {s:.3g}")
    return s


def sine_sum_closed_form(q: int, alpha: float, t: float, n: int) -> float:
    """Closed form of ``sum_{j=0}^{n-1} sin(2 pi q (t + j alpha))``.

    This is the n-term Dirichlet identity.  The (n+1)-term variant is
    :func:`sine_sum_shifted_display`.
    """
    s = _resonance_check(q, alpha)
    return math.sin(math.pi * q * n * alpha) * math.sin(TWO_PI * q * t + math.pi * q * (n - 1) * alpha) / s


def sine_sum_shifted_display(q: int, alpha: float, t: float, n: int) -> float:
    """``sin(pi q (n+1) alpha) sin(2 pi q (n alpha/2 + t)) / sin(pi q alpha)``.

    Equals the direct sum over ``j = 0..n`` (n+1 terms), not ``j = 0..n-1``.
    """
    s = _resonance_check(q, alpha)
    return math.sin(math.pi * q * (n + 1) * alpha) * math.sin(TWO_PI * q * (n * alpha / 2 + t)) / s


def sine_sum_direct(q: int, alpha: float, t: float, n: int) -> float:
    j = np.arange(n)
    return math.fsum(np.sin(TWO_PI * q * (t + j * alpha)).tolist())


def zeta_r(q: int, alpha: float) -> float:
    """``cos(pi q alpha) / (2 sin(pi q alpha))``."""
    s = _resonance_check(q, alpha)
    return math.cos(math.pi * q * alpha) / (2.0 * s)


@dataclass(frozen=True)
class EnvProfile:
    """Environment ``p = e^f/(1+e^f)``, ``q = 1 - p`` built from a log-ratio ``f``."""

    logratio: TrigPoly

    @property
    def d(self) -> int:
        return self.logratio.d

    def log_p(self, z):
        f = np.asarray(self.logratio(z))
        return -np.logaddexp(0.0, -f)

    def log_q(self, z):
        f = np.asarray(self.logratio(z))
        return -np.logaddexp(0.0, f)

    def p(self, z):
        return _scalarize(np.exp(self.log_p(z)))

    def q(self, z):
        return _scalarize(np.exp(self.log_q(z)))

    def h(self, z):
        return _scalarize(np.exp(np.asarray(self.logratio(z))))

    def is_symmetric(self, tol: float = 1e-9) -> bool:
        return abs(symmetry_defect(self.logratio)) < tol


def _scalarize(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def xi_map(f: TrigPoly) -> EnvProfile:
    """``h -> h/(1+h)`` with ``h = e^f``."""
    return EnvProfile(f)


def symmetry_defect(f: TrigPoly) -> float:
    """``int log(p/q) dz``, i.e. the mean of the log-ratio."""
    return f.mean


def random_trig_poly(rng: np.random.Generator, d: int, degree: int, amp: float = 1.0,
                     mean: float = 0.0) -> TrigPoly:
    """Random real polynomial with frequencies of l1 norm <= degree."""
    terms = {}
    for k in _lattice(d, degree):
        if not any(k):
            continue
        terms[k] = tuple(amp * rng.normal(size=2) / (1 + sum(map(abs, k))))
    terms[(0,) * d] = (mean, 0.0)
    return TrigPoly(d, terms)


def _lattice(d: int, K: int) -> Iterable[tuple[int, ...]]:
    import itertools

    for k in itertools.product(range(-K, K + 1), repeat=d):
        if sum(map(abs, k)) <= K:
            yield k
