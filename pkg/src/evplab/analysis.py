"""Empirical diagnostics: stationary measures, weak-* fingerprints, mixing
correlations, atom partial sums and ratio-uniformity scans."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .operators import ParticleMeasure, _evaluate, weighted_ratios
from .torus import EnvProfile, RotationVector, TrigPoly, as_points, orbit, wrap
from .walk import RngSpec, _simulate, env_log_table, evp_chain_sample, walk_pmf_batch

DP_LIMIT = 2048
MIXING_ATOM_CAP = 4096


def stationary_estimate(env: EnvProfile, alpha: RotationVector, z0, burnin: int = 10_000, length: int = 100_000,
                        rng: RngSpec | None = None) -> ParticleMeasure:
    """Occupation measure of the last ``length`` states of one EVP trajectory."""
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = RngSpec(0) if rng is None else rng
    path = evp_chain_sample(env, alpha, z0, burnin + length, rng)
    return ParticleMeasure.from_points(path.points[burnin + 1:])


# --------------------------------------------------------------------------
# fingerprints


def _frequencies(d: int, K: int) -> list[tuple[int, ...]]:
    ks = [k for k in itertools.product(range(-K, K + 1), repeat=d) if sum(map(abs, k)) <= K]
    return sorted(ks)


@dataclass
class FourierFingerprint:
    """Characters ``int exp(2 pi i k.z) dmu`` for ``sum |k_i| <= K``."""

    K: int
    coeffs: dict[tuple[int, ...], complex]

    def __getitem__(self, k) -> complex:
        return self.coeffs[tuple(k)]

    def to_json(self) -> list:
        return [[list(k), c.real, c.imag] for k, c in self.coeffs.items()]

    @classmethod
    def from_json(cls, data, K: int) -> "FourierFingerprint":
        return cls(K, {tuple(k): complex(re, im) for k, re, im in data})


def fingerprint(mu: ParticleMeasure, K: int = 5) -> FourierFingerprint:
    if K < 1:
        raise ValueError("K must be positive")
    ks = _frequencies(mu.d, K)
    kmat = np.array(ks, dtype=float)
    w = mu.weights / mu.weights.sum()
    ph = 2 * np.pi * (mu.points @ kmat.T)
    vals = (w[:, None] * np.exp(1j * ph)).sum(axis=0)
    coeffs = {k: complex(v) for k, v in zip(ks, vals)}
    coeffs[(0,) * mu.d] = 1.0 + 0.0j
    for k in ks:  # enforce exact conjugate symmetry
        nk = tuple(-x for x in k)
        if k > nk:
            coeffs[k] = coeffs[nk].conjugate()
    return FourierFingerprint(K, coeffs)


def lebesgue_fingerprint(d: int, K: int = 5) -> FourierFingerprint:
    return FourierFingerprint(K, {k: complex(not any(k)) for k in _frequencies(d, K)})


def weak_star_distance(A: FourierFingerprint, B: FourierFingerprint) -> float:
    """``max_k |A(k) - B(k)|``."""
    if A.K != B.K or A.coeffs.keys() != B.coeffs.keys():
        raise ValueError("fingerprints have different cutoffs")
    return max(abs(A.coeffs[k] - B.coeffs[k]) for k in A.coeffs)


# --------------------------------------------------------------------------
# mixing


@dataclass
class CorrelationSeries:
    n: list[int]
    value: list[float]
    stderr: list[float] = field(default_factory=list)
    method: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(zip(self.n, self.value))

    def at(self, n: int) -> float:
        return self.value[self.n.index(n)]


def mixing_correlation(env: EnvProfile, alpha: RotationVector, mu: ParticleMeasure, phi, psi,
                       n_list: Sequence[int], rng: RngSpec | None = None, mc_samples: int = 200_000,
                       atom_cap: int = MIXING_ATOM_CAP, merge_radius: float = 1e-9) -> CorrelationSeries:
    """``int U^n phi . psi dmu - int phi dmu int psi dmu`` for each ``n``.

    Times up to ``DP_LIMIT`` use exact walk laws on a compacted copy of ``mu``;
    longer times use Monte Carlo with a standard error.
    """
    mu = mu.normalized()
    base = mu.integrate(phi) * mu.integrate(psi)
    small = mu.compact(merge_radius, atom_cap)
    w = small.weights
    psi_v = _evaluate(psi, small.points)
    out = CorrelationSeries([], [], [], [])
    exact = sorted({int(n) for n in n_list if 0 <= n <= DP_LIMIT})
    laws = walk_pmf_batch(env, alpha, small.points, [n for n in exact if n > 0]) if any(exact) else {}
    vals = {}
    for n in exact:
        if n == 0:
            u = _evaluate(phi, small.points)
        else:
            pts = orbit(small.points, alpha, np.arange(-n, n + 1))
            u = (laws[n] * _evaluate(phi, pts.reshape(-1, mu.d)).reshape(len(small), -1)).sum(axis=1)
        vals[n] = (float(np.sum(w * u * psi_v)) - base, 0.0, "dp")
    rng = RngSpec(0) if rng is None else rng
    for i, n in enumerate(sorted({int(n) for n in n_list if n > DP_LIMIT})):
        vals[n] = _mc_correlation(env, alpha, mu, phi, psi, n, mc_samples, rng.child(1000 + i), base)
    for n in n_list:
        v, se, how = vals[int(n)]
        out.n.append(int(n))
        out.value.append(v)
        out.stderr.append(se)
        out.method.append(how)
    return out


def _mc_correlation(env, alpha, mu, phi, psi, n, m, rng, base, chunk=2048):
    gen = rng.generator()
    total, total_sq = 0.0, 0.0
    w = mu.weights
    for start in range(0, m, chunk):
        rows = min(chunk, m - start)
        starts = mu.points[gen.choice(len(mu), size=rows, p=w / w.sum())]
        lp, _ = env_log_table(env, alpha, starts, -n, n)
        pos, _, _ = _simulate(np.exp(lp), n, gen.random((rows, n)), keep=False)
        ends = wrap(starts + alpha.offsets(pos))
        vals = _evaluate(phi, ends) * _evaluate(psi, starts)
        total += vals.sum()
        total_sq += (vals**2).sum()
    mean = total / m
    var = max(total_sq / m - mean**2, 0.0)
    return mean - base, math.sqrt(var / m), "mc"


# --------------------------------------------------------------------------
# atoms and uniformity


def atom_partial_sums(f: TrigPoly, alpha: RotationVector, z0, N: int) -> np.ndarray:
    """Rows ``(n, log sum_{|j|<=n} exp(S_j f(z0)))`` for ``n = 0..N``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    z = as_points(z0, f.d)
    fwd = np.asarray(f(orbit(z, alpha, np.arange(N)))).ravel()
    bwd = np.asarray(f(orbit(z, alpha, -np.arange(1, N + 1)))).ravel()
    s_fwd = np.cumsum(fwd)  # S_1 .. S_N
    s_bwd = np.cumsum(bwd)  # S_{-1} .. S_{-N}
    shell = np.concatenate([[0.0], np.logaddexp(s_fwd, s_bwd)])
    return np.stack([np.arange(N + 1), np.logaddexp.accumulate(shell)], axis=1)


@dataclass
class UniformityScan:
    min: float
    max: float
    argmin: np.ndarray
    argmax: np.ndarray

    @property
    def spread(self) -> float:
        return self.max - self.min


def ratio_uniformity_scan(f: TrigPoly, alpha: RotationVector, phi, grid, n: int) -> UniformityScan:
    """Extremes of ``Sbar_n(phi)/Sbar_n(1)`` over the grid points."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = as_points(grid, f.d)
    _, ratio = weighted_ratios(f, alpha, phi, pts, n)
    i, j = int(np.argmin(ratio)), int(np.argmax(ratio))
    return UniformityScan(float(ratio[i]), float(ratio[j]), pts[i], pts[j])
