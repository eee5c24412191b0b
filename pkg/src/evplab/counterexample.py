"""Inductive construction of an analytic environment on T^2 whose weighted
ergodic ratios separate on two families of strips.

Stage n carries ``q_n``, the rotation ``alpha_n`` (exact rationals), the
log-ratio ``f_n`` (a polynomial in ``x2`` only), and strips ``A_n^+`` /
``A_n^-`` around the circles ``(a_n t + 1/2, t)`` and ``(a_n t, t)``.  On
those strips the ratio ``Sbar_{q_n}(phi) / Sbar_{q_n}(1)`` is verified to lie
above ``prod (1 - delta_j)`` and below ``sum delta_j`` respectively.

Stage 0 uses vertical strips (slope ``a_0 = 0``): ``A_0^- = [-1/10, 1/10] x T``
and ``A_0^+ = [4/10, 6/10] x T``.

Whenever the rotation maps a circle to itself and ``q * alpha_2`` is an
integer, the orbit of length ``q`` is a full period of the rotation on that
circle, so the ratio does not depend on where along the period it starts.
Grid scans exploit this: one start point per coset of the period replaces
the whole grid.  Scans fall back to direct evaluation otherwise.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .operators import RampProfile, weighted_ratios
from .torus import TWO_PI, RotationVector, TrigPoly, birkhoff_sums, wrap

log = logging.getLogger(__name__)

DEFAULT_R_CAP = 2**20
MAX_RETRIES = 8
MIN_STRIP_WIDTH = 1e-9


class ScheduleError(ValueError):
    pass


class InvarianceError(AssertionError):
    """The exact circle-invariance identity failed; indicates an arithmetic bug."""


class StripWidthUnderflow(RuntimeError):
    pass


class PrecisionWarning(UserWarning):
    pass


class CapExhausted(RuntimeError):
    """No admissible r below the cap; carries best-effort diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


# --------------------------------------------------------------------------
# geometry


def _frac(x):
    return x - math.floor(x)


@dataclass(frozen=True)
class Circle:
    """``t -> (a t + offset, t)`` on T^2."""

    a: int
    offset: Fraction | float = Fraction(0)

    def points(self, t, shift: float = 0.0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        x1 = wrap(self.a * t + float(self.offset) + shift)
        return np.stack([x1, wrap(t)], axis=-1)

    def is_invariant(self, alpha: RotationVector) -> bool:
        """Exact check that ``R_alpha`` maps the circle to itself."""
        a1, a2 = alpha.exact
        return _frac(a1 - self.a * a2) == 0

    def to_json(self) -> dict:
        return {"a": str(self.a), "offset": _num_json(self.offset)}

    @classmethod
    def from_json(cls, data) -> "Circle":
        return cls(int(data["a"]), _num_from_json(data["offset"]))


@dataclass(frozen=True)
class Strip:
    """Points within sup-distance ``width`` of the circle in the ``x1`` direction."""

    circle: Circle
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("strip width must be positive")

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        d = wrap(pts[..., 0] - self.circle.a * pts[..., 1] - float(self.circle.offset) + 0.5) - 0.5
        return np.abs(d) < self.width

    def trace_on(self, circle: Circle) -> "ArcSet":
        """Parameter set ``{t : circle(t) in strip}``."""
        m = circle.a - self.circle.a
        shift = float(_frac(Fraction(circle.offset) - Fraction(self.circle.offset))) \
            if isinstance(circle.offset, Fraction) and isinstance(self.circle.offset, Fraction) \
            else (float(circle.offset) - float(self.circle.offset)) % 1.0
        return ArcSet.band(m, shift, self.width)

    def to_json(self) -> dict:
        return {"circle": self.circle.to_json(), "width": self.width}

    @classmethod
    def from_json(cls, data) -> "Strip":
        return cls(Circle.from_json(data["circle"]), float(data["width"]))


class ArcSet:
    """Subset of the circle given by a vectorized indicator."""

    def __init__(self, indicator: Callable[[np.ndarray], np.ndarray], label: str):
        self._ind = indicator
        self.label = label

    def __call__(self, t) -> np.ndarray:
        return np.asarray(self._ind(wrap(np.asarray(t, dtype=float))), dtype=bool)

    def __repr__(self):
        return f"ArcSet({self.label})"

    @classmethod
    def arcs(cls, intervals: Sequence[tuple[float, float]]) -> "ArcSet":
        """Union of open arcs ``(u, v)``; ``u > v`` wraps through 0."""
        ivs = [(u % 1.0, v % 1.0) for u, v in intervals]

        def ind(t):
            out = np.zeros(t.shape, dtype=bool)
            for u, v in ivs:
                out |= ((t > u) & (t < v)) if u < v else ((t > u) | (t < v))
            return out

        return cls(ind, f"arcs{intervals}")

    @classmethod
    def full(cls) -> "ArcSet":
        return cls(lambda t: np.ones(t.shape, dtype=bool), "circle")

    @classmethod
    def band(cls, m: int, shift: float, width: float) -> "ArcSet":
        """``{t : ||m t + shift|| < width}``, i.e. |m| arcs around the solutions of ``m t + shift = 0``."""

        def ind(t):
            return np.abs(wrap(m * t + shift + 0.5) - 0.5) < width

        return cls(ind, f"band(m={m}, shift={shift}, w={width})")

    def complement(self) -> "ArcSet":
        return ArcSet(lambda t: ~self._ind(t), f"not {self.label}")


# --------------------------------------------------------------------------
# polynomials on circles


def restrict_to_circle(f: TrigPoly, circle: Circle) -> TrigPoly:
    """Coefficients of ``t -> f(a t + offset, t)``; frequency ``(k1, k2)`` goes to ``a k1 + k2``."""
    if f.d != 2:
        raise ValueError("restriction needs a polynomial on T^2")
    out: dict[tuple[int], tuple[float, float]] = {}
    for (k1, k2), (ca, sa) in f.terms.items():
        m = circle.a * k1 + k2
        c, s = _unit_phase(k1, circle.offset)
        new = (ca * c + sa * s, -ca * s + sa * c)
        prev = out.get((m,), (0.0, 0.0))
        if m < 0:
            new = (new[0], -new[1])
            m = -m
            prev = out.get((m,), (0.0, 0.0))
        out[(m,)] = (prev[0] + new[0], prev[1] + new[1])
    return TrigPoly(1, out)


def _unit_phase(k: int, offset) -> tuple[float, float]:
    """``cos, sin`` of ``2 pi k offset``, exact at quarter turns."""
    if isinstance(offset, Fraction):
        ph = _frac(k * offset)
        exact = {Fraction(0): (1.0, 0.0), Fraction(1, 4): (0.0, 1.0),
                 Fraction(1, 2): (-1.0, 0.0), Fraction(3, 4): (0.0, -1.0)}
        if ph in exact:
            return exact[ph]
        th = TWO_PI * float(ph)
    else:
        th = TWO_PI * ((k * float(offset)) % 1.0)
    return math.cos(th), math.sin(th)


def shifted_sine(q: int, c: float, t0: float = 0.0) -> TrigPoly:
    """``-c sin(2 pi q (t - t0))`` on T^1."""
    ph = TWO_PI * q * t0
    return TrigPoly(1, {(q,): (c * math.sin(ph), -c * math.cos(ph))})


# --------------------------------------------------------------------------
# auxiliary ratio on a circle


def _cycle_positions(t0: float, num: int, den: int, idx: np.ndarray) -> np.ndarray:
    num %= den
    if den < 2**31:
        r = (idx % den) * num % den
        return wrap(t0 + r / den)
    r = np.array([(int(i) * num) % den for i in idx], dtype=float)
    return wrap(t0 + r / den)


@dataclass
class AuxScan:
    """Result of an auxiliary-ratio scan over one or more masks."""

    q: int
    r: int
    reps: int
    minima: list[float]
    argmin_t: list[float]
    ratios: list[np.ndarray] = field(repr=False, default_factory=list)  # shape (reps, q) per mask
    period_defect: float = 0.0
    per_residue: bool = True

    @property
    def min(self) -> float:
        return min(self.minima)

    def ratio_at(self, mask: int, rep: int, s: int) -> float:
        """Kept ratio for start index ``s`` on coset ``rep``."""
        return float(self.ratios[mask][rep, s % self.q if self.per_residue else s])


def auxiliary_scan(f2: TrigPoly, alpha: Fraction, q: int, r: int, masks: Sequence[ArcSet], reps: int,
                   chunk: int = 1 << 21, keep: bool = False) -> AuxScan:
    """Masked block ratio for every start point on ``reps`` cosets of the period ``q r``.

    For a start index s the ratio is
    ``sum_j e^{S_{jq}} 1_B(x_{s+jq}) Sbar_q(1, x_{s+jq}) / Sbar_{qr}(1, x_s)`` and,
    because the weights are periodic with period ``q r``, it depends only on
    ``s mod q``.  Returns the minimum over reps and residues for each mask.
    """
    D = q * r
    a = Fraction(alpha)
    if (a * D).denominator != 1:
        raise ValueError("q*r*alpha must be an integer for the cycle scan")
    num = (a * D).numerator
    rows_per_chunk = max(1, chunk // q)
    k = len(masks)
    minima = [math.inf] * k
    argmin = [0.0] * k
    kept = [np.empty((reps, q)) for _ in range(k)] if keep else []
    worst_defect = 0.0
    G = reps * D
    for rep in range(reps):
        t0 = rep / G
        num_lse = np.full((k, q), -np.inf)
        den_lse = np.full(q, -np.inf)
        base = 0.0
        for b0 in range(0, r, rows_per_chunk):
            b1 = min(r, b0 + rows_per_chunk)
            idx = np.arange(b0 * q, (b1 + 1) * q)
            x = _cycle_positions(t0, num, D, idx)
            fv = np.asarray(f2(x[:, None]))
            P = np.empty(idx.size)
            P[0] = base
            np.cumsum(fv[:-1], out=P[1:])
            P[1:] += base
            base = P[(b1 - b0) * q]
            M = P.reshape(b1 - b0 + 1, q)
            rowmax = M.max(axis=1)
            E = np.exp(M - rowmax[:, None])
            # prefix[rho] = sum E[:, :rho], suffix[rho] = sum E[:, rho:]
            prefix = np.concatenate([np.zeros((E.shape[0], 1)), np.cumsum(E, axis=1)[:, :-1]], axis=1)
            suffix = np.cumsum(E[:, ::-1], axis=1)[:, ::-1]
            with np.errstate(divide="ignore"):
                lsuf = np.log(suffix[:-1]) + rowmax[:-1, None]
                lpre = np.log(prefix[1:]) + rowmax[1:, None]
            block = np.logaddexp(lsuf, lpre)  # (rows, q): block (rho, b)
            den_lse = np.logaddexp(den_lse, _lse0(block))
            starts = x[: (b1 - b0) * q].reshape(b1 - b0, q)
            for i, B in enumerate(masks):
                mk = B(starts)
                num_lse[i] = np.logaddexp(num_lse[i], _lse0(np.where(mk, block, -np.inf)))
        # base now holds S over a full period; zero for periodic weights
        scale = max(1.0, float(np.abs(fv).max()) * D)
        worst_defect = max(worst_defect, abs(base) / scale)
        for i in range(k):
            ratio = np.exp(num_lse[i] - den_lse)
            if keep:
                kept[i][rep] = ratio
            j = int(np.argmin(ratio))
            if ratio[j] < minima[i]:
                minima[i] = float(ratio[j])
                argmin[i] = float(_cycle_positions(t0, num, D, np.array([j]))[0])
    if worst_defect > 1e-9:
        # frequencies alias onto the period; only small periods can do so
        if D > 4096:
            raise ValueError(f"weights not periodic (relative defect {worst_defect:.3g}) for period {D}")
        return _aliased_scan(f2, num, q, r, masks, reps, keep)
    return AuxScan(q, r, reps, minima, argmin, kept, worst_defect)


def _aliased_scan(f2: TrigPoly, num: int, q: int, r: int, masks: Sequence[ArcSet], reps: int,
                  keep: bool) -> AuxScan:
    """Every start index separately, for periods short enough that the weights are not periodic."""
    D = q * r
    G = reps * D
    i = np.arange(D)
    s = np.arange(D)
    k = len(masks)
    minima, argmin = [math.inf] * k, [0.0] * k
    kept = [np.empty((reps, D)) for _ in range(k)] if keep else []
    for rep in range(reps):
        t0 = rep / G
        x = _cycle_positions(t0, num, D, np.arange(2 * D))
        fv = np.asarray(f2(x[:, None]))
        P = np.concatenate([[0.0], np.cumsum(fv)])[: 2 * D]
        W = P[s[:, None] + i[None, :]]
        W = np.exp(W - W.max(axis=1, keepdims=True))
        starts = x[s[:, None] + (i[None, :] // q) * q]
        for m, B in enumerate(masks):
            ratio = (W * B(starts)).sum(axis=1) / W.sum(axis=1)
            if keep:
                kept[m][rep] = ratio
            j = int(np.argmin(ratio))
            if ratio[j] < minima[m]:
                minima[m], argmin[m] = float(ratio[j]), float(x[j])
    return AuxScan(q, r, reps, minima, argmin, kept, float("nan"), per_residue=False)


def _lse0(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(a - safe).sum(axis=0)) + safe


def auxiliary_ratio_direct(f2: TrigPoly, alpha: Fraction, q: int, r: int, B: ArcSet, t: float) -> float:
    """Term-by-term evaluation of the masked block ratio at one point (oracle)."""
    rot = RotationVector.of(alpha)
    S = birkhoff_sums(f2, rot, [[t]], q * r)[0]  # S_0 .. S_{qr}
    x = wrap(t + rot.offsets(np.arange(q * r))[:, 0])
    logs = S[:-1]
    num = []
    for j in range(r):
        block = logs[j * q:(j + 1) * q]
        if B(np.array([x[j * q]]))[0]:
            num.append(block)
    m = logs.max()
    den = np.exp(logs - m).sum()
    if not num:
        return 0.0
    return float(np.exp(np.concatenate(num) - m).sum() / den)


def _reps_for(grid: int | None, period: int) -> int:
    if grid is None:
        grid = max(4096, 8 * period)
    return max(1, -(-int(grid) // period))


def auxiliary_min_ratio(f2: TrigPoly, q: int, r: int, B: ArcSet, grid: int | None = None, p: int = 0) -> float:
    """Min over a circle grid of the masked block ratio with ``alpha = p/q + 1/(q r)``."""
    alpha = Fraction(p, q) + Fraction(1, q * r)
    return auxiliary_scan(f2, alpha, q, r, [B], _reps_for(grid, q * r)).minima[0]


@dataclass
class RSearchResult:
    r: int | None
    value: float
    trace: list[tuple[int, float]]


class RNotFound(RuntimeError):
    def __init__(self, message: str, best: tuple[int, float], trace: list):
        super().__init__(message)
        self.best = best
        self.trace = trace


def _doubling_search(evaluate: Callable[[int], float], delta: float, r_start: int, r_cap: int) -> RSearchResult:
    trace = []
    r = r_start
    while r <= r_cap:
        v = evaluate(r)
        trace.append((r, v))
        log.info("r=%d min ratio %.6f (target > %.6f)", r, v, 1 - delta)
        if v > 1 - delta:
            return RSearchResult(r, v, trace)
        r *= 2
    best = max(trace, key=lambda rv: rv[1]) if trace else (r_start, float("nan"))
    raise RNotFound(f"no r <= {r_cap} reaches {1 - delta}", best, trace)


def search_r(f1: TrigPoly, q: int, c: float, t0: float, B: ArcSet, delta: float,
             r_cap: int = DEFAULT_R_CAP, grid: int | None = None, p: int = 0) -> int:
    """First r in 2, 4, 8, ... with auxiliary ratio above ``1 - delta`` for ``f1 - c sin(2 pi q (t - t0))``."""
    return search_r_trace(f1, q, c, t0, B, delta, r_cap, grid, p).r


def search_r_trace(f1: TrigPoly, q: int, c: float, t0: float, B: ArcSet, delta: float,
                   r_cap: int = DEFAULT_R_CAP, grid: int | None = None, p: int = 0) -> RSearchResult:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if c <= 0:
        raise ValueError("c must be positive")
    if abs(f1.mean) > 1e-12:
        raise ValueError("f1 must have zero mean")
    if any(abs(k[0]) >= q for k in f1.terms):
        raise ValueError(f"f1 has frequencies >= q={q}")
    f2 = f1 + shifted_sine(q, c, t0)
    return _doubling_search(lambda r: auxiliary_min_ratio(f2, q, r, B, grid, p), delta, 2, r_cap)


# --------------------------------------------------------------------------
# stages


def stage_test_function() -> RampProfile:
    """0 on ``x1 in [-1/10, 1/10]``, 1 on ``[4/10, 6/10]``, cosine ramps between."""
    return RampProfile([(0.1, 0.0), (0.4, 1.0), (0.6, 1.0), (0.9, 0.0)], d=2, coord=0)


@dataclass
class RatioReport:
    grid: int
    offsets: int
    min_plus: float
    max_minus: float
    argmin_plus: tuple[float, float]
    argmax_minus: tuple[float, float]
    threshold_plus: float
    threshold_minus: float
    strict: bool = True
    path: str = "cycle"

    @property
    def separation(self) -> float:
        return self.min_plus - self.max_minus

    @property
    def pass_plus(self) -> bool:
        return self.min_plus > self.threshold_plus if self.strict else self.min_plus >= self.threshold_plus - 1e-12

    @property
    def pass_minus(self) -> bool:
        return self.max_minus < self.threshold_minus if self.strict else self.max_minus <= self.threshold_minus + 1e-12

    @property
    def passed(self) -> bool:
        return self.pass_plus and self.pass_minus

    def to_json(self) -> dict:
        return {
            "grid": self.grid, "offsets": self.offsets,
            "min_plus": self.min_plus, "max_minus": self.max_minus,
            "argmin_plus": list(self.argmin_plus), "argmax_minus": list(self.argmax_minus),
            "threshold_plus": self.threshold_plus, "threshold_minus": self.threshold_minus,
            "separation": self.separation, "pass_plus": self.pass_plus, "pass_minus": self.pass_minus,
            "strict": self.strict, "path": self.path,
        }

    @classmethod
    def from_json(cls, d) -> "RatioReport":
        return cls(d["grid"], d["offsets"], d["min_plus"], d["max_minus"], tuple(d["argmin_plus"]),
                   tuple(d["argmax_minus"]), d["threshold_plus"], d["threshold_minus"], d["strict"], d["path"])


@dataclass
class Stage:
    n: int
    q: int
    a: int
    r: int
    c: float
    f: TrigPoly
    alpha: RotationVector
    strips_plus: Strip
    strips_minus: Strip
    deltas: tuple[float, ...]
    verification: RatioReport | None = None
    search_trace: list = field(default_factory=list)

    @property
    def delta(self) -> float:
        return self.deltas[self.n - 1] if self.n >= 1 else 0.0

    @property
    def a_next(self) -> int:
        return 2 if self.n == 0 else self.a + self.q

    @property
    def threshold_plus(self) -> float:
        return float(math.prod(1 - d for d in self.deltas[: self.n]))

    @property
    def threshold_minus(self) -> float:
        return math.fsum(self.deltas[: self.n])

    def to_json(self) -> dict:
        return {
            "n": self.n, "q": str(self.q), "a": str(self.a), "r": str(self.r), "c": self.c,
            "f": self.f.to_json(), "alpha": self.alpha.to_json(),
            "strips_plus": self.strips_plus.to_json(), "strips_minus": self.strips_minus.to_json(),
            "deltas": list(self.deltas),
            "verification": self.verification.to_json() if self.verification else None,
            "search_trace": [list(t) for t in self.search_trace],
        }

    @classmethod
    def from_json(cls, d) -> "Stage":
        return cls(
            n=int(d["n"]), q=int(d["q"]), a=int(d["a"]), r=int(d["r"]), c=float(d["c"]),
            f=TrigPoly.from_json(d["f"]), alpha=RotationVector.from_json(d["alpha"]),
            strips_plus=Strip.from_json(d["strips_plus"]), strips_minus=Strip.from_json(d["strips_minus"]),
            deltas=tuple(d["deltas"]),
            verification=RatioReport.from_json(d["verification"]) if d.get("verification") else None,
            search_trace=[tuple(t) for t in d.get("search_trace", [])],
        )


def _num_json(x) -> str | float:
    return f"{x.numerator}/{x.denominator}" if isinstance(x, Fraction) else float(x)


def _num_from_json(x):
    return Fraction(x) if isinstance(x, str) else float(x)


def default_schedule(n: int, first: float = 0.025) -> tuple[float, ...]:
    """``delta_k = first * 2^{-(k-1)}``; the default gives ``0.05 * 2^{-k}``."""
    return tuple(first * 0.5**k for k in range(n))


def check_schedule(deltas: Sequence[float]):
    deltas = tuple(float(d) for d in deltas)
    if any(not 0 < d < 1 for d in deltas):
        raise ScheduleError("every delta must lie in (0, 1)")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ScheduleError("deltas must be strictly decreasing")
    if not math.fsum(deltas) < 0.1:
        raise ScheduleError(f"sum of deltas {math.fsum(deltas)} is not < 0.1")
    if not math.prod(1 - d for d in deltas) > 0.9:
        raise ScheduleError("product of (1 - delta) is not > 0.9")
    return deltas


def init_stage0(delta_schedule: Sequence[float]) -> Stage:
    deltas = check_schedule(delta_schedule)
    f1 = TrigPoly.sine((0, 2), -1.0)
    minus = Strip(Circle(0, Fraction(0)), 0.1)
    plus = Strip(Circle(0, Fraction(1, 2)), 0.1)
    s = Stage(0, 1, 0, 1, 1.0, f1, RotationVector.of(Fraction(0), Fraction(0)), plus, minus, deltas)
    s.verification = verify_stage(s)
    return s


def verify_stage(s: Stage, grid: int | None = None, offsets: int = 5, f: TrigPoly | None = None,
                 alpha: RotationVector | None = None, phi=None, direct: bool = False) -> RatioReport:
    """Extrema of the q_n-step ratio on grids of ``A_n^+`` and ``A_n^-``.

    ``f`` and ``alpha`` default to the stage's own; passing later ones
    re-checks the stage's inequalities under a refined construction.
    """
    f = s.f if f is None else f
    alpha = s.alpha if alpha is None else alpha
    phi = stage_test_function() if phi is None else phi
    q = s.q
    G = max(4096, 8 * q) if grid is None else int(grid)
    eps = np.linspace(-1.0, 1.0, offsets) if offsets > 1 else np.zeros(1)
    results = []
    path = "direct"
    for strip, sign in ((s.strips_plus, 1), (s.strips_minus, -1)):
        circ = strip.circle
        cyclic = (not direct) and circ.is_invariant(alpha) and (q * alpha.exact[1]).denominator == 1
        if cyclic:
            reps = _reps_for(G, q)
            ts = np.arange(reps) / (reps * q)
            path = "cycle"
        else:
            ts = np.arange(G) / G
        shifts = eps * strip.width * (1 - 1e-12)
        pts = np.concatenate([circ.points(ts, sh) for sh in shifts])
        _, ratio = weighted_ratios(f, alpha, phi, pts, q)
        ratio = sign * ratio
        i = int(np.argmin(ratio))
        tt, sh = ts[i % ts.size], shifts[i // ts.size]
        results.append((sign * float(ratio[i]), (float(tt), float(sh))))
    (mp, ap), (mm, am) = results
    return RatioReport(grid=G, offsets=len(eps), min_plus=mp, max_minus=mm, argmin_plus=ap, argmax_minus=am,
                       threshold_plus=s.threshold_plus, threshold_minus=s.threshold_minus,
                       strict=s.n >= 1, path=path)


def next_alpha(s: Stage, r: int) -> RotationVector:
    q_next = s.q * r
    a1, a2 = s.alpha.exact
    return RotationVector.of(a1 + Fraction(s.a_next, q_next), a2 + Fraction(1, q_next))


def check_invariance(s: Stage) -> bool:
    """``a_{n+1} alpha_{n,2} = alpha_{n,1} (mod 1)``, in exact arithmetic."""
    ok = Circle(s.a_next, Fraction(0)).is_invariant(s.alpha)
    if not ok:
        raise InvarianceError(f"alpha_{s.n} does not preserve the circles of slope {s.a_next}")
    return ok


def next_logratio(s: Stage, c_mode: str = "relaxed", c_value: float | None = None) -> tuple[TrigPoly, float]:
    if s.n == 0:
        return s.f, 1.0
    if c_mode == "strict":
        c = math.exp(-s.q) / 2
    elif c_mode == "relaxed":
        c = 0.5 ** (s.n + 1) if c_value is None else float(c_value)
        if not c > 0:
            raise ValueError("c must be positive")
    else:
        raise ValueError(f"unknown c_mode {c_mode!r}")
    scale = s.f.sup_bound()
    if c < 1e-16 * scale:
        warnings.warn(f"c_{s.n + 1} = {c:.3g} is below double precision relative to |f_{s.n}| ~ {scale:.3g}; "
                      "f_{n+1} is numerically identical to f_n", PrecisionWarning, stacklevel=2)
    return s.f - TrigPoly.sine((0, s.q), c), c


def advance_stage(s: Stage, delta_next: float | None = None, c_mode: str = "relaxed", c_value: float | None = None,
                  r_cap: int = DEFAULT_R_CAP, grid: int | None = None, previous: Sequence[Stage] = (),
                  offsets: int = 5) -> Stage:
    """Build stage n+1 from a verified stage n.

    ``previous`` holds stages 1..n-1 (stage ``s`` itself is re-checked too);
    their inequalities must survive the new ``f`` and ``alpha``.
    """
    if s.verification is None or not s.verification.passed:
        raise ValueError(f"stage {s.n} is not verified")
    n1 = s.n + 1
    deltas = s.deltas
    if delta_next is not None:
        if len(deltas) >= n1:
            deltas = deltas[: n1 - 1] + (float(delta_next),) + deltas[n1:]
        else:
            deltas = deltas + (float(delta_next),)
        check_schedule(deltas)
    if len(deltas) < n1:
        raise ScheduleError(f"schedule has no delta for stage {n1}")
    delta = deltas[n1 - 1]
    check_invariance(s)
    f_next, c = next_logratio(s, c_mode, c_value)
    a_next = s.a_next
    lplus, lminus = Circle(a_next, Fraction(1, 2)), Circle(a_next, Fraction(0))
    g_plus, g_minus = restrict_to_circle(f_next, lplus), restrict_to_circle(f_next, lminus)
    B_plus, B_minus = s.strips_plus.trace_on(lplus), s.strips_minus.trace_on(lminus)
    p = (s.alpha.exact[1] * s.q)
    if p.denominator != 1:
        raise InvarianceError("q_n alpha_{n,2} is not an integer")
    p = p.numerator

    def lemma_min(r: int) -> float:
        alpha = Fraction(p, s.q) + Fraction(1, s.q * r)
        reps = _reps_for(grid, s.q * r)
        if g_plus == g_minus:
            return auxiliary_scan(g_plus, alpha, s.q, r, [B_plus, B_minus], reps).min
        return min(auxiliary_scan(g_plus, alpha, s.q, r, [B_plus], reps).min,
                   auxiliary_scan(g_minus, alpha, s.q, r, [B_minus], reps).min)

    diagnostics = {"stage": n1, "c": c, "delta": delta, "lemma_trace": [], "attempts": []}
    try:
        found = _doubling_search(lemma_min, delta, 2, r_cap)
    except RNotFound as err:
        diagnostics["lemma_trace"] = err.trace
        diagnostics["best"] = {"r": err.best[0], "lemma_min": err.best[1]}
        raise CapExhausted(f"stage {n1}: lemma search exhausted r_cap={r_cap}", diagnostics) from err
    diagnostics["lemma_trace"] = found.trace
    r = found.r
    trace = list(found.trace)
    checked = list(previous) + ([s] if s.n >= 1 else [])
    prev_violation = None
    for attempt in range(MAX_RETRIES):
        alpha_next = next_alpha(s, r)
        cand = Stage(n1, s.q * r, a_next, r, c, f_next, alpha_next,
                     Strip(lplus, 1.0 / (8 * a_next)), Strip(lminus, 1.0 / (8 * a_next)), deltas,
                     search_trace=trace)
        info = {"r": r}
        core = verify_stage(cand, grid, offsets=1)
        info["core"] = core.to_json()
        if core.passed:
            rep = _fit_strips(cand, grid, offsets)
            info["strips"] = rep.to_json()
            stale = [(t.n, verify_stage(t, None, offsets, f=f_next, alpha=alpha_next)) for t in checked]
            failed = [(k, rr) for k, rr in stale if not rr.passed]
            info["recheck"] = {k: rr.to_json() for k, rr in stale}
            diagnostics["attempts"].append(info)
            if not failed:
                cand.verification = rep
                return cand
            log.info("stage %d: earlier stages %s fail under r=%d", n1, [k for k, _ in failed], r)
            v = max(_violation(rr) for _, rr in failed)
            if prev_violation is not None and v > 0.5 * prev_violation:
                diagnostics["stagnation"] = {"r": r, "violation": v, "previous": prev_violation}
                log.info("stage %d: recheck violation %.4g did not shrink under doubling; stopping", n1, v)
                break
            prev_violation = v
        else:
            diagnostics["attempts"].append(info)
            log.info("stage %d: core check fails at r=%d (min+ %.4f, max- %.4f)", n1, r, core.min_plus,
                     core.max_minus)
        r *= 2
        if r > r_cap:
            break
        trace.append((r, float("nan")))
    best = max(diagnostics["attempts"], key=lambda a: a["core"]["separation"])
    diagnostics["best"] = {"r": best["r"], **{k: best["core"][k] for k in ("min_plus", "max_minus", "separation")}}
    if "recheck" in best:
        diagnostics["best"]["recheck"] = {k: {m: v[m] for m in ("min_plus", "max_minus", "threshold_plus",
                                                                "threshold_minus")}
                                          for k, v in best["recheck"].items()}
    reason = "recheck of earlier stages stagnates" if "stagnation" in diagnostics else f"r_cap={r_cap} reached"
    raise CapExhausted(f"stage {n1}: no admissible r found ({reason}) after {len(diagnostics['attempts'])} attempts",
                       diagnostics)


def _violation(rep: RatioReport) -> float:
    return max(rep.threshold_plus - rep.min_plus, rep.max_minus - rep.threshold_minus, 0.0)


def _fit_strips(cand: Stage, grid: int | None, offsets: int) -> RatioReport:
    """Halve each strip width from ``1/(8 a)`` until its side of the inequality holds on the grid."""
    w_plus = w_minus = cand.strips_plus.width
    while True:
        cand.strips_plus = replace(cand.strips_plus, width=w_plus)
        cand.strips_minus = replace(cand.strips_minus, width=w_minus)
        rep = verify_stage(cand, grid, offsets)
        if rep.passed:
            return rep
        if not rep.pass_plus:
            w_plus /= 2
        if not rep.pass_minus:
            w_minus /= 2
        if min(w_plus, w_minus) < MIN_STRIP_WIDTH:
            raise StripWidthUnderflow(f"stage {cand.n}: strip width fell below {MIN_STRIP_WIDTH}")


def limit_angle(stages: Sequence[Stage], growth: int | None = None) -> tuple[RotationVector, float]:
    """Last exact angle and a bound on the remaining tail ``sum_{j>N} (a_j + 1) / q_j``.

    The tail assumes later factors ``r_j`` at least double the last one used
    (``growth`` overrides that starting factor).  No finite stage is
    rationally independent; only the limit can be.
    """
    if not stages:
        raise ValueError("need at least one stage")
    last = stages[-1]
    R = max(2, growth or last.r)
    a, q = Fraction(last.a_next), Fraction(last.q)
    tail = Fraction(0)
    rk = 2 * R
    for _ in range(200):
        q = q * rk
        term = (a + 1) / q
        tail += term
        a = a + q
        rk *= 2
        if term < Fraction(1, 10**30):
            break
    return last.alpha, float(tail)


@dataclass
class BuildResult:
    stages: list[Stage]
    failure: dict | None = None


def build_counterexample(n_stages: int, deltas: Sequence[float] | None = None, c_mode: str = "relaxed",
                         c_values: Sequence[float] | None = None, r_cap: int = DEFAULT_R_CAP,
                         grid: int | None = None, offsets: int = 5) -> BuildResult:
    """Run stages 1..n_stages; stops at the first exhausted stage and records its diagnostics."""
    deltas = default_schedule(n_stages) if deltas is None else tuple(deltas)
    stages = [init_stage0(deltas)]
    for k in range(1, n_stages + 1):
        cv = None if c_values is None or len(c_values) < k else c_values[k - 1]
        try:
            nxt = advance_stage(stages[-1], None, c_mode, cv, r_cap, grid, stages[1:-1], offsets)
        except CapExhausted as err:
            return BuildResult(stages, {"error": "cap_exhausted", "message": str(err), **err.diagnostics})
        stages.append(nxt)
    return BuildResult(stages)
