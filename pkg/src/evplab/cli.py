"""``evp run <config.json> [--seed N]`` and ``evp describe <config.json>``.

Random streams derive from the config seed: Philox keyed by ``(seed, stream)``
with stream 1 for walk sampling, 2 for the EVP chain, 3 for record-time
sampling and ``1000 + i`` for the i-th Monte Carlo mixing time.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
import tempfile
import time
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import DP_LIMIT, atom_partial_sums, fingerprint, mixing_correlation, stationary_estimate
from .config import (ExperimentConfig, SchemaError, load_config, parse_alpha, parse_env, parse_test_function)
from .counterexample import RatioReport, Stage, build_counterexample, default_schedule, verify_stage
from .operators import ParticleMeasure, weighted_ratios
from .torus import xi_map
from .walk import RngSpec, ratio_limit_report, record_frequency_estimate, walk_pmf_exact, walk_sample

log = logging.getLogger("evplab")

CSV_HEADER = ["n", "offset_or_stat", "value", "stderr"]

STREAM_WALK, STREAM_CHAIN, STREAM_RECORD = 1, 2, 3


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _csv_bytes(rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for n, key, value, se in rows:
        w.writerow([_fmt(n), key if isinstance(key, str) else _fmt(key), _fmt(value), _fmt(se)])
    return buf.getvalue().encode()


def _json_bytes(data) -> bytes:
    return (json.dumps(data, indent=1, sort_keys=True) + "\n").encode()


def write_atomic(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class SubOperationError(RuntimeError):
    def __init__(self, message: str, details: dict):
        super().__init__(message)
        self.details = details


# --------------------------------------------------------------------------
# commands; each returns {filename: bytes}


def _env_alpha(cfg: ExperimentConfig):
    f = parse_env(cfg.env)
    return f, xi_map(f), parse_alpha(cfg.alpha)


def cmd_simulate_walk(cfg, base: Path):
    p = cfg.params
    _, env, alpha = _env_alpha(cfg)
    s = walk_sample(env, alpha, p.z, p.n, p.m, RngSpec(cfg.seed, STREAM_WALK))
    keep = [i for i in range(2 * p.n + 1) if (i - p.n - p.n) % 2 == 0]
    out = {"walk_histogram.csv": _csv_bytes((p.n, int(s.offsets[i]), s.freq[i], s.stderr[i]) for i in keep)}
    if p.exact:
        law = walk_pmf_exact(env, alpha, p.z, p.n)
        out["walk_exact.csv"] = _csv_bytes((p.n, int(law.offsets[i]), law.probs[i], 0.0) for i in keep)
    return out


def cmd_ratio_limit(cfg, base):
    p = cfg.params
    _, env, alpha = _env_alpha(cfg)
    rows = ratio_limit_report(env, alpha, p.z, p.a, p.b, p.n_list, p.convention)
    data = []
    for r in rows:
        data += [(r.n, "lhs", r.lhs, 0.0), (r.n, "rhs", r.rhs, 0.0), (r.n, "gap", r.gap, 0.0)]
    return {"ratio_limit.csv": _csv_bytes(data)}


def cmd_birkhoff_ratio(cfg, base):
    p = cfg.params
    f, _, alpha = _env_alpha(cfg)
    phi = parse_test_function(p.phi, f.d)
    logs, ratio = weighted_ratios(f, alpha, phi, np.array(p.points), p.n)
    data = [(p.n, i, ratio[i], 0.0) for i in range(len(ratio))]
    data += [(p.n, f"log_total_{i}", logs[i], 0.0) for i in range(len(ratio))]
    return {"birkhoff_ratio.csv": _csv_bytes(data)}


def _report_rows(n: int, stage: Stage, rep: RatioReport):
    return [(n, "r", stage.r, 0.0), (n, "q", stage.q, 0.0), (n, "width_plus", stage.strips_plus.width, 0.0),
            (n, "width_minus", stage.strips_minus.width, 0.0), (n, "min_plus", rep.min_plus, 0.0),
            (n, "max_minus", rep.max_minus, 0.0), (n, "separation", rep.separation, 0.0),
            (n, "threshold_plus", rep.threshold_plus, 0.0), (n, "threshold_minus", rep.threshold_minus, 0.0)]


def cmd_build_counterexample(cfg, base):
    p = cfg.params
    deltas = tuple(p.deltas[: p.stages]) if p.deltas else default_schedule(p.stages)
    res = build_counterexample(p.stages, deltas, p.c_mode, p.c_values, p.r_cap, p.grid, p.offsets)
    out = {}
    rows = []
    for s in res.stages:
        out[f"stage_{s.n}.json"] = _json_bytes(s.to_json())
        rows += _report_rows(s.n, s, s.verification)
    out["stage_reports.csv"] = _csv_bytes(rows)
    if res.failure is not None:
        out["failure.json"] = _json_bytes(res.failure)
        raise _Partial(out, SubOperationError(res.failure["message"], res.failure))
    return out


def cmd_verify_stage(cfg, base):
    p = cfg.params
    path = Path(p.bundle)
    path = path if path.is_absolute() else base / path
    stage = Stage.from_json(json.loads(path.read_text()))
    rep = verify_stage(stage, p.grid, p.offsets, direct=p.direct)
    return {"verify_report.csv": _csv_bytes(_report_rows(stage.n, stage, rep)),
            "verify_report.json": _json_bytes(rep.to_json())}


def _fingerprint_rows(n, fp):
    rows = []
    for k, c in fp.coeffs.items():
        tag = "_".join(map(str, k))
        rows += [(n, f"re[{tag}]", c.real, 0.0), (n, f"im[{tag}]", c.imag, 0.0)]
    return rows


def cmd_stationary(cfg, base):
    p = cfg.params
    _, env, alpha = _env_alpha(cfg)
    mu = stationary_estimate(env, alpha, p.z0, p.burnin, p.length, RngSpec(cfg.seed, STREAM_CHAIN))
    fp = fingerprint(mu, p.K)
    return {"fingerprint.json": _json_bytes(fp.to_json()), "fingerprint.csv": _csv_bytes(_fingerprint_rows(p.length, fp))}


def cmd_mixing(cfg, base):
    p = cfg.params
    f, env, alpha = _env_alpha(cfg)
    mu = stationary_estimate(env, alpha, p.z0, p.burnin, p.length, RngSpec(cfg.seed, STREAM_CHAIN))
    phi, psi = parse_test_function(p.phi, f.d), parse_test_function(p.psi, f.d)
    cs = mixing_correlation(env, alpha, mu, phi, psi, p.n_list, RngSpec(cfg.seed), p.mc_samples)
    return {"correlation.csv": _csv_bytes((n, f"corr_{m}", v, se) for n, v, se, m in
                                          zip(cs.n, cs.value, cs.stderr, cs.method))}


def cmd_atoms(cfg, base):
    p = cfg.params
    f, _, alpha = _env_alpha(cfg)
    series = atom_partial_sums(f, alpha, p.z0, p.N)
    return {"atom_partial_sums.csv": _csv_bytes((int(n), "log_partial_sum", v, 0.0)
                                                for n, v in series[:: p.every])}


def cmd_record_frequency(cfg, base):
    p = cfg.params
    f, env, alpha = _env_alpha(cfg)
    mu = ParticleMeasure.from_points(p.points) if p.points else ParticleMeasure.uniform_grid(p.grid, f.d)
    est, se = record_frequency_estimate(env, alpha, mu, p.n, p.m, RngSpec(cfg.seed, STREAM_RECORD))
    return {"record_frequency.csv": _csv_bytes([(p.n, "record_freq", est, se)])}


class _Partial(Exception):
    """Sub-operation failed after producing some artifacts."""

    def __init__(self, outputs: dict, error: Exception):
        super().__init__(str(error))
        self.outputs = outputs
        self.error = error


DISPATCH = {
    "simulate-walk": cmd_simulate_walk,
    "ratio-limit": cmd_ratio_limit,
    "birkhoff-ratio": cmd_birkhoff_ratio,
    "build-counterexample": cmd_build_counterexample,
    "verify-stage": cmd_verify_stage,
    "stationary-estimate": cmd_stationary,
    "mixing": cmd_mixing,
    "atoms": cmd_atoms,
    "record-frequency": cmd_record_frequency,
}


def _versions() -> dict:
    import scipy

    return {"evplab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run(cfg: ExperimentConfig, out_dir: Path, base: Path) -> int:
    """Execute one config; returns the exit status."""
    started = time.time()
    status, error, outputs = "ok", None, {}
    try:
        outputs = DISPATCH[cfg.command](cfg, base)
    except _Partial as part:
        outputs = part.outputs
        status, error = "error", _error_record(part.error)
    except Exception as err:  # noqa: BLE001 - every sub-operation failure is reported in the manifest
        status, error = "error", _error_record(err)
    for name, data in outputs.items():
        write_atomic(out_dir / name, data)
    manifest = {
        "config": cfg.canonical(),
        "config_hash": cfg.hash(),
        "versions": _versions(),
        "seeds": {"seed": cfg.seed, "streams": {"walk": STREAM_WALK, "chain": STREAM_CHAIN,
                                                "record": STREAM_RECORD, "mixing_mc": "1000+i"}},
        "workers": cfg.workers,
        "outputs": sorted(outputs),
        "status": status,
        "error": error,
        "started": started,
        "finished": time.time(),
    }
    write_atomic(out_dir / "manifest.json", _json_bytes(manifest))
    return 0 if status == "ok" else 1


def _error_record(err: Exception) -> dict:
    rec = {"type": type(err).__name__, "message": str(err)}
    details = getattr(err, "details", None) or getattr(err, "diagnostics", None)
    if details:
        rec["details"] = json.loads(json.dumps(details, default=str))
    rec["traceback"] = traceback.format_exception_only(type(err), err)[-1].strip()
    return rec


# --------------------------------------------------------------------------
# describe

MEANINGS = {
    "simulate-walk": "walk_histogram.csv: empirical law of xi_n under P_z (value = frequency, stderr = binomial); "
                     "walk_exact.csv: the same law by dynamic programming.",
    "ratio-limit": "ratio_limit.csv: lhs = P_z(xi_2n = 2a) / P_z(xi_2n = 2b); rhs = rho_2a(z) / rho_2b(z) with rho "
                   "the reversible measure of the quenched chain; gap = |lhs - rhs|, expected to vanish as n grows "
                   "(strong ratio limit for symmetric environments).",
    "birkhoff-ratio": "birkhoff_ratio.csv: Sbar_n(phi, z) / Sbar_n(1, z), the e^{S_j f}-weighted ergodic average of phi; "
                      "log_total = log Sbar_n(1, z).",
    "build-counterexample": "stage_<n>.json: exact stage data (q_n, a_n, r_n, alpha_n, f_n, strips); "
                            "stage_reports.csv: min of the q_n-step weighted ratio on A_n^+, max on A_n^-, their "
                            "separation and the thresholds prod(1 - delta) and sum(delta).",
    "verify-stage": "verify_report.csv: re-evaluated extrema of the q_n-step weighted ratio on the stage strips.",
    "stationary-estimate": "fingerprint.csv: Fourier coefficients int exp(2 pi i k.z) dmu of the occupation measure "
                           "of one EVP trajectory (weak-* proxy).",
    "mixing": "correlation.csv: int U^n phi . psi dmu - int phi dmu int psi dmu; corr_dp rows are exact walk laws, "
              "corr_mc rows Monte Carlo with standard error.",
    "atoms": "atom_partial_sums.csv: log sum_{|j|<=n} exp(S_j f(z0)); an atom at z0 requires this to stay bounded.",
    "record-frequency": "record_frequency.csv: P_mu(max_{j<n} xi_j < xi_n), the record-time frequency, with stderr.",
}


def describe(cfg: ExperimentConfig) -> str:
    p = cfg.params
    lines = [f"command: {cfg.command}", f"seed: {cfg.seed}",
             "parameters: " + json.dumps(asdict(p), sort_keys=True)]
    if cfg.env is not None:
        lines.append("environment log-ratio f: " + json.dumps(cfg.env, sort_keys=True))
        lines.append("rotation alpha: " + json.dumps(cfg.alpha))
    cost = []
    c = cfg.command
    if c == "simulate-walk":
        cost.append(f"MC steps: {p.n * p.m}")
        if p.exact:
            cost.append(f"DP steps: {p.n**2}")
    elif c == "ratio-limit":
        cost.append(f"DP steps: {(2 * max(p.n_list))**2}")
    elif c == "birkhoff-ratio":
        cost.append(f"orbit evaluations: {p.n * len(p.points)}")
    elif c == "build-counterexample":
        deltas = list(p.deltas[: p.stages]) if p.deltas else list(default_schedule(p.stages))
        lines.append(f"delta schedule: {deltas}")
        lines.append(f"budgets: sum(delta) = {sum(deltas):.6g} (< 0.1), prod(1 - delta) = "
                     f"{float(np.prod([1 - d for d in deltas])):.6g} (> 0.9)")
        lines.append(f"c mode: {p.c_mode}; r cap: {p.r_cap}")
        cost.append(f"auxiliary scans up to q_n * r_cap = q_n * {p.r_cap} steps per coset")
    elif c == "verify-stage":
        cost.append("q_n steps per grid coset and strip offset")
    elif c in ("stationary-estimate", "mixing"):
        cost.append(f"chain steps: {p.burnin + p.length}")
        if c == "mixing":
            big = [n for n in p.n_list if n > DP_LIMIT]
            if big:
                lines.append(f"Monte Carlo fallback for n > {DP_LIMIT}: {big} ({p.mc_samples} samples each)")
            cost.append(f"DP steps per atom: {max(n for n in p.n_list if n <= DP_LIMIT) ** 2 if any(n <= DP_LIMIT for n in p.n_list) else 0}")
    elif c == "atoms":
        cost.append(f"orbit evaluations: {2 * p.N}")
    elif c == "record-frequency":
        cost.append(f"MC steps: {p.n * p.m}")
    lines.append("estimated cost: " + "; ".join(cost))
    lines.append("outputs: " + MEANINGS[c])
    return "\n".join(lines)


# --------------------------------------------------------------------------


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="evp", description="EVP random-walk laboratory")
    sub = ap.add_subparsers(dest="action", required=True)
    r = sub.add_parser("run", help="execute a config (or re-run a manifest)")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--output-dir", default=None, help="override the config's output directory")
    d = sub.add_parser("describe", help="print the resolved plan without computing")
    d.add_argument("config")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.action == "run" and args.seed is not None:
            if args.seed < 0:
                raise SchemaError("seed must be >= 0")
            cfg = cfg.with_seed(args.seed)
    except SchemaError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    if args.action == "describe":
        print(describe(cfg))
        return 0
    base = Path(args.config).resolve().parent
    out = Path(args.output_dir) if args.output_dir else Path(cfg.output_dir)
    out = out if out.is_absolute() else base / out
    return run(cfg, out, base)


if __name__ == "__main__":
    sys.exit(main())
