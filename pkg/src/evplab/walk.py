"""Quenched random walk in a quasi-periodic environment.

``p_j = p(z + j*alpha)`` is the probability of stepping right from site j.
Site offsets are formed from the exact rational angle and memoized per walk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .operators import ParticleMeasure
from .torus import EnvProfile, RotationVector, as_points, orbit, symmetry_defect

TINY = np.finfo(float).tiny


class SymmetryError(ValueError):
    pass


@dataclass(frozen=True)
class RngSpec:
    """Counter-based stream: Philox keyed by ``seed`` in the low and ``stream`` in the high 64 bits."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = (int(self.seed) % 2**64) | ((int(self.stream) % 2**64) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, stream: int) -> "RngSpec":
        return RngSpec(self.seed, stream)


@dataclass
class WalkPMF:
    """Law of ``xi_n``; ``probs[k + n] = P_z(xi_n = k)``."""

    n: int
    probs: np.ndarray
    underflow: int = 0

    def prob(self, k: int) -> float:
        if abs(k) > self.n:
            return 0.0
        return float(self.probs[k + self.n])

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.n, self.n + 1)

    def as_dict(self) -> dict[int, float]:
        return {int(k): float(p) for k, p in zip(self.offsets, self.probs) if p > 0}

    def total(self) -> float:
        return float(np.sum(self.probs))


def env_log_table(env: EnvProfile, alpha: RotationVector, z, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    """``log p_j, log q_j`` for ``j = lo..hi`` at each start point; shape ``(N, hi-lo+1)``."""
    pts = orbit(z, alpha, np.arange(lo, hi + 1))
    return np.asarray(env.log_p(pts)), np.asarray(env.log_q(pts))


def _dp(p: np.ndarray, q: np.ndarray, n: int, record: Iterable[int] = ()):
    """Batched DP over start points. ``p, q`` have shape (N, 2n+1) indexed by offset + n."""
    N = p.shape[0]
    law = np.zeros((N, 2 * n + 1))
    law[:, n] = 1.0
    record = set(record)
    kept = {}
    underflow = 0
    if 0 in record:
        kept[0] = law.copy()
    for m in range(n):
        lo, hi = n - m, n + m  # active window after m steps
        new = np.zeros_like(law)
        new[:, lo + 1:hi + 2] += law[:, lo:hi + 1] * p[:, lo:hi + 1]
        new[:, lo - 1:hi] += law[:, lo:hi + 1] * q[:, lo:hi + 1]
        window = new[:, lo - 1:hi + 2:2]
        bad = window < TINY
        if bad.any():
            underflow += int(bad.sum())
            window[bad] = 0.0
            new[:, lo - 1:hi + 2:2] = window
        law = new
        if m + 1 in record:
            kept[m + 1] = law.copy()
    return law, kept, underflow


def walk_pmf_exact(env: EnvProfile, alpha: RotationVector, z, n: int) -> WalkPMF:
    """Exact law of ``xi_n`` under ``P_z`` by dynamic programming, O(n^2)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    lp, lq = env_log_table(env, alpha, z, -n, n)
    law, _, under = _dp(np.exp(lp), np.exp(lq), n)
    return WalkPMF(n, law[0], under)


def walk_pmf_series(env: EnvProfile, alpha: RotationVector, z, ns: Sequence[int]) -> dict[int, WalkPMF]:
    """Laws at several times from one DP pass."""
    nmax = max(ns)
    lp, lq = env_log_table(env, alpha, z, -nmax, nmax)
    _, kept, under = _dp(np.exp(lp), np.exp(lq), nmax, record=ns)
    out = {}
    for n in ns:
        probs = kept[n][0, nmax - n:nmax + n + 1]
        out[n] = WalkPMF(n, probs.copy(), under)
    return out


def walk_pmf_batch(env: EnvProfile, alpha: RotationVector, points, ns: Sequence[int]) -> dict[int, np.ndarray]:
    """Laws for many start points at the times in ``ns``; arrays of shape ``(N, 2n+1)``."""
    nmax = max(ns)
    lp, lq = env_log_table(env, alpha, points, -nmax, nmax)
    _, kept, _ = _dp(np.exp(lp), np.exp(lq), nmax, record=ns)
    return {n: kept[n][:, nmax - n:nmax + n + 1] for n in ns}


@dataclass
class Trajectory:
    start: np.ndarray
    steps: np.ndarray

    @property
    def positions(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.steps)])


@dataclass
class WalkSample:
    n: int
    m: int
    counts: np.ndarray  # counts[k + n]
    steps: np.ndarray | None = field(default=None, repr=False)

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.n, self.n + 1)

    @property
    def freq(self) -> np.ndarray:
        return self.counts / self.m

    @property
    def stderr(self) -> np.ndarray:
        f = self.freq
        return np.sqrt(f * (1 - f) / self.m)

    def trajectory(self, i: int, start) -> Trajectory:
        if self.steps is None:
            raise ValueError("trajectories were not kept")
        return Trajectory(np.asarray(start, dtype=float), self.steps[i].copy())


def _simulate(p_table: np.ndarray, n: int, u: np.ndarray, keep: bool):
    """Advance walks using uniforms ``u`` of shape (rows, n); ``p_table`` is (rows or 1, 2n+1)."""
    rows = u.shape[0]
    pos = np.zeros(rows, dtype=np.int64)
    ridx = np.arange(rows) if p_table.shape[0] > 1 else np.zeros(rows, dtype=np.int64)
    steps = np.empty((rows, n), dtype=np.int8) if keep else None
    running_max = np.full(rows, np.iinfo(np.int64).min)
    for j in range(n):
        if j == n - 1:
            prev_max = np.maximum(running_max, pos)
        running_max = np.maximum(running_max, pos)
        step = np.where(u[:, j] < p_table[ridx, pos + n], 1, -1)
        pos += step
        if keep:
            steps[:, j] = step
    if n == 0:
        prev_max = np.full(rows, np.iinfo(np.int64).min)
    return pos, steps, prev_max


def walk_sample(env: EnvProfile, alpha: RotationVector, z, n: int, m: int, rng: RngSpec,
                keep_trajectories: bool = False, chunk: int = 1 << 15) -> WalkSample:
    """Monte Carlo endpoints of ``m`` walks of length ``n`` under ``P_z``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    lp, _ = env_log_table(env, alpha, z, -n, n)
    table = np.exp(lp)
    gen = rng.generator()
    counts = np.zeros(2 * n + 1, dtype=np.int64)
    kept = []
    for start in range(0, m, chunk):
        rows = min(chunk, m - start)
        u = gen.random((rows, n))
        pos, steps, _ = _simulate(table, n, u, keep_trajectories)
        counts += np.bincount(pos + n, minlength=2 * n + 1)
        if keep_trajectories:
            kept.append(steps)
    return WalkSample(n, m, counts, np.concatenate(kept) if keep_trajectories else None)


@dataclass(frozen=True)
class RatioLimitRow:
    n: int
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)


def ratio_limit_report(env: EnvProfile, alpha: RotationVector, z, a: int, b: int, n_list: Sequence[int],
                       convention: str = "reversible") -> list[RatioLimitRow]:
    """``P_z(xi_2n = 2a) / P_z(xi_2n = 2b)`` against ``rho_2a(z) / rho_2b(z)`` along ``n_list``."""
    from .operators import rho_log

    if abs(symmetry_defect(env.logratio)) >= 1e-9:
        raise SymmetryError("environment is not symmetric")
    if any(max(abs(a), abs(b)) > n for n in n_list):
        raise ValueError("offsets 2a, 2b must lie within the support of xi_2n")
    rhs = math.exp(rho_log(env, alpha, z, 2 * a, convention) - rho_log(env, alpha, z, 2 * b, convention))
    laws = walk_pmf_series(env, alpha, z, [2 * n for n in n_list])
    rows = []
    for n in n_list:
        pmf = laws[2 * n]
        den = pmf.prob(2 * b)
        if den == 0.0:
            raise ZeroDivisionError(f"P(xi_{2 * n} = {2 * b}) underflowed to 0")
        rows.append(RatioLimitRow(n, pmf.prob(2 * a) / den, rhs))
    return rows


def _draw_starts(mu: ParticleMeasure, m: int, gen: np.random.Generator) -> np.ndarray:
    w = mu.weights
    idx = gen.choice(len(mu), size=m, p=w / w.sum())
    return mu.points[idx]


def record_frequency_estimate(env: EnvProfile, alpha: RotationVector, mu: ParticleMeasure, n: int, m: int,
                              rng: RngSpec, chunk: int = 4096) -> tuple[float, float]:
    """Annealed estimate of ``P_mu(max_{j<=n-1} xi_j < xi_n)`` and its standard error."""
    if m < 1:
        raise ValueError("m must be >= 1")
    gen = rng.generator()
    hits = 0
    for start in range(0, m, chunk):
        rows = min(chunk, m - start)
        starts = _draw_starts(mu, rows, gen)
        lp, _ = env_log_table(env, alpha, starts, -n, n)
        u = gen.random((rows, n))
        pos, _, prev_max = _simulate(np.exp(lp), n, u, keep=False)
        hits += int(np.sum(pos > prev_max))
    est = hits / m
    return est, math.sqrt(max(est * (1 - est), 0.0) / m)


@dataclass
class EVPPath:
    """EVP chain ``z_j = R_alpha^{xi_j} z`` with the coupled walk ``xi``."""

    start: np.ndarray
    xi: np.ndarray
    points: np.ndarray

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.xi)


def evp_chain_sample(env: EnvProfile, alpha: RotationVector, z, N: int, rng: RngSpec) -> EVPPath:
    """Sample ``z_0 = z``, ``z_{j+1} = R_alpha z_j`` w.p. ``p(z_j)``, else ``R_{-alpha} z_j``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    z = as_points(z, alpha.d)
    lp, _ = env_log_table(env, alpha, z, -N, N)
    table = np.exp(lp[0]).tolist()
    u = rng.generator().random(N).tolist()
    xi = [0] * (N + 1)
    pos = 0
    for j in range(N):
        pos += 1 if u[j] < table[pos + N] else -1
        xi[j + 1] = pos
    xi_arr = np.array(xi, dtype=np.int64)
    return EVPPath(z[0], xi_arr, orbit(z, alpha, xi_arr)[0])
