"""Experiment configuration: one JSON document per run, parsed into dataclasses.

Every field is validated before any computation so that a malformed config
produces no artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any

from .operators import RampProfile, TestFunction, TrigTest, arc_indicator
from .torus import RotationVector, TrigPoly


class SchemaError(ValueError):
    pass


def _require(cond: bool, msg: str):
    if not cond:
        raise SchemaError(msg)


def _int(v, name, lo=None):
    _require(isinstance(v, int) and not isinstance(v, bool), f"{name} must be an integer")
    if lo is not None:
        _require(v >= lo, f"{name} must be >= {lo}")
    return v


def _point(v, name, d):
    _require(isinstance(v, list) and len(v) == d and all(isinstance(x, (int, float)) for x in v),
             f"{name} must be a list of {d} numbers")
    return [float(x) for x in v]


@dataclass
class CommonParams:
    def validate(self, d: int):
        pass

    @classmethod
    def parse(cls, data: dict, d: int):
        _require(isinstance(data, dict), "params must be an object")
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        _require(not unknown, f"unknown params for this command: {sorted(unknown)}")
        try:
            obj = cls(**data)
        except TypeError as err:
            raise SchemaError(str(err)) from None
        obj.validate(d)
        return obj


@dataclass
class SimulateWalkParams(CommonParams):
    z: list
    n: int
    m: int
    exact: bool = True

    def validate(self, d):
        self.z = _point(self.z, "z", d)
        _int(self.n, "n", 0)
        _int(self.m, "m", 1)


@dataclass
class RatioLimitParams(CommonParams):
    z: list
    a: int
    b: int
    n_list: list
    convention: str = "reversible"

    def validate(self, d):
        self.z = _point(self.z, "z", d)
        _int(self.a, "a")
        _int(self.b, "b")
        _require(isinstance(self.n_list, list) and self.n_list, "n_list must be a non-empty list")
        for n in self.n_list:
            _int(n, "n_list entry", 1)
        _require(self.convention in ("reversible", "printed"), "convention must be reversible or printed")


@dataclass
class BirkhoffRatioParams(CommonParams):
    phi: dict
    points: list
    n: int

    def validate(self, d):
        parse_test_function(self.phi, d)
        _require(isinstance(self.points, list) and self.points, "points must be a non-empty list")
        self.points = [_point(p, "point", d) for p in self.points]
        _int(self.n, "n", 1)


@dataclass
class BuildCounterexampleParams(CommonParams):
    stages: int
    deltas: list | None = None
    c_mode: str = "relaxed"
    c_values: list | None = None
    r_cap: int = 2**20
    grid: int | None = None
    offsets: int = 5

    def validate(self, d):
        _require(d == 2, "build-counterexample lives on T^2")
        _int(self.stages, "stages", 1)
        _require(self.c_mode in ("relaxed", "strict"), "c_mode must be relaxed or strict")
        if self.deltas is not None:
            _require(isinstance(self.deltas, list) and len(self.deltas) >= self.stages,
                     "deltas must list one value per stage")
            _require(all(isinstance(x, (int, float)) for x in self.deltas), "deltas must be numbers")
        if self.c_values is not None:
            _require(isinstance(self.c_values, list) and all(isinstance(x, (int, float)) and x > 0
                                                               for x in self.c_values), "c_values must be positive")
        _int(self.r_cap, "r_cap", 2)
        if self.grid is not None:
            _int(self.grid, "grid", 1)
        _int(self.offsets, "offsets", 1)


@dataclass
class VerifyStageParams(CommonParams):
    bundle: str
    grid: int | None = None
    offsets: int = 5
    direct: bool = False

    def validate(self, d):
        _require(isinstance(self.bundle, str), "bundle must be a path")
        if self.grid is not None:
            _int(self.grid, "grid", 1)
        _int(self.offsets, "offsets", 1)


@dataclass
class StationaryParams(CommonParams):
    z0: list
    length: int
    burnin: int = 10_000
    K: int = 5

    def validate(self, d):
        self.z0 = _point(self.z0, "z0", d)
        _int(self.length, "length", 1)
        _int(self.burnin, "burnin", 0)
        _int(self.K, "K", 1)


@dataclass
class MixingParams(CommonParams):
    z0: list
    length: int
    phi: dict
    psi: dict
    n_list: list
    burnin: int = 10_000
    mc_samples: int = 200_000

    def validate(self, d):
        self.z0 = _point(self.z0, "z0", d)
        _int(self.length, "length", 1)
        _int(self.burnin, "burnin", 0)
        _int(self.mc_samples, "mc_samples", 1)
        parse_test_function(self.phi, d)
        parse_test_function(self.psi, d)
        _require(isinstance(self.n_list, list) and self.n_list, "n_list must be a non-empty list")
        for n in self.n_list:
            _int(n, "n_list entry", 0)


@dataclass
class AtomsParams(CommonParams):
    z0: list
    N: int
    every: int = 1

    def validate(self, d):
        self.z0 = _point(self.z0, "z0", d)
        _int(self.N, "N", 1)
        _int(self.every, "every", 1)


@dataclass
class RecordFrequencyParams(CommonParams):
    n: int
    m: int
    grid: int = 1
    points: list | None = None

    def validate(self, d):
        _int(self.n, "n", 1)
        _int(self.m, "m", 1)
        _int(self.grid, "grid", 1)
        if self.points is not None:
            self.points = [_point(p, "point", d) for p in self.points]


COMMANDS: dict[str, type[CommonParams]] = {
    "simulate-walk": SimulateWalkParams,
    "ratio-limit": RatioLimitParams,
    "birkhoff-ratio": BirkhoffRatioParams,
    "build-counterexample": BuildCounterexampleParams,
    "verify-stage": VerifyStageParams,
    "stationary-estimate": StationaryParams,
    "mixing": MixingParams,
    "atoms": AtomsParams,
    "record-frequency": RecordFrequencyParams,
}

NEEDS_ENV = {"simulate-walk", "ratio-limit", "birkhoff-ratio", "stationary-estimate", "mixing", "atoms",
             "record-frequency"}


def parse_env(data, d_hint: int | None = None) -> TrigPoly:
    """``{"d": .., "terms": [..]}`` or ``{"d": .., "constant": c}`` (``p = e^c / (1 + e^c)``)."""
    _require(isinstance(data, dict), "env must be an object")
    try:
        if "constant" in data:
            return TrigPoly.constant(int(data["d"]), float(data["constant"]))
        return TrigPoly.from_json(data)
    except (KeyError, TypeError, ValueError) as err:
        raise SchemaError(f"bad env: {err}") from None


def parse_alpha(data) -> RotationVector:
    """List of components; strings are exact rationals, numbers are floats taken exactly."""
    _require(isinstance(data, list) and data, "alpha must be a non-empty list")
    comps = []
    for x in data:
        if isinstance(x, str):
            try:
                comps.append(Fraction(x))
            except (ValueError, ZeroDivisionError):
                raise SchemaError(f"bad rational {x!r}") from None
        elif isinstance(x, (int, float)) and not isinstance(x, bool):
            comps.append(x)
        else:
            raise SchemaError("alpha components must be numbers or rational strings")
    return RotationVector.of(*comps)


def parse_test_function(data, d: int) -> TestFunction:
    """``{"trig": <TrigPoly json>}``, ``{"ramp": [[x, v], ..], "coord": i}`` or ``{"arc": [u, v], "coord": i}``."""
    _require(isinstance(data, dict), "test function must be an object")
    coord = data.get("coord", 0)
    _require(isinstance(coord, int) and 0 <= coord < d, "coord out of range")
    try:
        if "trig" in data:
            f = TrigPoly.from_json(data["trig"])
            _require(f.d == d, "test function dimension mismatch")
            return TrigTest(f)
        if "ramp" in data:
            return RampProfile([tuple(k) for k in data["ramp"]], d=d, coord=coord)
        if "arc" in data:
            u, v = data["arc"]
            return arc_indicator(float(u), float(v), d=d, coord=coord)
    except (KeyError, TypeError, ValueError) as err:
        raise SchemaError(f"bad test function: {err}") from None
    raise SchemaError("test function needs one of trig, ramp, arc")


@dataclass
class ExperimentConfig:
    command: str
    params: CommonParams
    seed: int = 0
    env: dict | None = None
    alpha: list | None = None
    output_dir: str = "."
    workers: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: Any) -> "ExperimentConfig":
        _require(isinstance(data, dict), "config must be a JSON object")
        allowed = {"command", "params", "seed", "env", "alpha", "output_dir", "workers"}
        unknown = set(data) - allowed
        _require(not unknown, f"unknown config keys: {sorted(unknown)}")
        cmd = data.get("command")
        _require(cmd in COMMANDS, f"command must be one of {sorted(COMMANDS)}")
        seed = _int(data.get("seed", 0), "seed", 0)
        workers = _int(data.get("workers", 1), "workers", 1)
        out = data.get("output_dir", ".")
        _require(isinstance(out, str), "output_dir must be a string")
        d = 2
        if cmd in NEEDS_ENV:
            _require("env" in data and "alpha" in data, f"{cmd} needs env and alpha")
            f = parse_env(data["env"])
            al = parse_alpha(data["alpha"])
            _require(f.d == al.d, "env and alpha dimensions differ")
            d = f.d
        params = COMMANDS[cmd].parse(data.get("params", {}), d)
        return cls(cmd, params, seed, data.get("env"), data.get("alpha"), out, workers, dict(data))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = dict(self.raw, seed=seed)
        return ExperimentConfig.from_dict(raw)

    def canonical(self) -> dict:
        """Resolved config as plain JSON data (defaults filled in)."""
        out = {"command": self.command, "seed": self.seed, "output_dir": self.output_dir,
               "workers": self.workers, "params": asdict(self.params)}
        if self.env is not None:
            out["env"] = self.env
        if self.alpha is not None:
            out["alpha"] = self.alpha
        return out

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a config file, or the ``config`` block of a run manifest."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise SchemaError(f"cannot read config: {err}") from None
    if isinstance(data, dict) and "config" in data and "config_hash" in data:
        data = data["config"]
    return ExperimentConfig.from_dict(data)
