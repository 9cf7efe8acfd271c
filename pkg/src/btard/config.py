"""Experiment configuration: TOML (or JSON) file -> validated ExperimentConfig.

Schema (all sections optional except where noted)::

    seed = 0
    repetitions = 1
    hash_mode = "crypto"          # or "fast-sim"
    trace = "full"                # "full" (verifiable) or "light"

    [swarm]
    n = 16
    b = 0                         # declared number of Byzantine peers
    m = 1                         # validators per step

    [objective]
    kind = "quadratic"            # quadratic | nonconvex | quartic | logistic
    d = 256
    noise = { kind = "gaussian", sigma = 1.0 }
    init_distance = 10.0          # ||x0 - x*||

    [clip]
    mode = "fixed"                # fixed | infinite | schedule
    tau = 1.0

    [protocol]
    delta_max = "noise"           # noise | clipped | off | number
    grad_clip = 0.0               # lambda of the clipped variant (0 = off)
    ledger_views = "all"

    [trainer]
    steps = 1000
    lr = 0.1                      # number or "auto" (the smooth-SGD stepsize preset)
    projection_radius = 0.0       # 0 = unconstrained

    [[attack]]
    kind = "sign_flip"
    peers = [9, 10]               # default: the last b peer ids
    start_step = 100

    [[fault]]
    kind = "drop"
    sender = 15
"""
from __future__ import annotations

import copy
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from .adversary import ATTACK_KINDS, AttackStrategy
from .cryptokit import HASH_MODES
from .robustagg import ClipConfig
from .simnet import ConfigError, Fault

DEFAULTS = {
    "seed": 0,
    "repetitions": 1,
    "hash_mode": "crypto",
    "trace": "full",
    "swarm": {"n": 16, "b": 0, "m": 1},
    "objective": {"kind": "quadratic", "d": 256, "noise": {"kind": "gaussian", "sigma": 1.0},
                  "init_distance": 10.0},
    "clip": {"mode": "fixed", "tau": 1.0, "tol": 1e-6, "max_iters": 10000},
    "protocol": {"delta_max": "noise", "grad_clip": 0.0, "ledger_views": "all", "eps_rel": 1e-6},
    "trainer": {"steps": 200, "lr": 0.1, "projection_radius": 0.0},
    "attack": [],
    "fault": [],
}

ATTACK_FIELDS = ("kind", "peers", "start_step", "stop_step", "scale", "lag", "period", "inner", "shift",
                 "cover", "victim", "phase")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _strategy(spec: dict) -> AttackStrategy:
    kw = {k: v for k, v in spec.items() if k not in ("peers",)}
    unknown = set(kw) - set(ATTACK_FIELDS)
    if unknown:
        raise ConfigError(f"unknown attack fields {sorted(unknown)}")
    if kw.get("kind") not in ATTACK_KINDS:
        raise ConfigError(f"unknown attack kind {kw.get('kind')!r}")
    if "inner" in kw and kw["inner"] is not None:
        kw["inner"] = _strategy(kw["inner"])
    try:
        return AttackStrategy(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.raw = _merge(DEFAULTS, self.raw)
        self.validate()

    # accessors
    @property
    def n(self) -> int:
        return int(self.raw["swarm"]["n"])

    @property
    def b(self) -> int:
        return int(self.raw["swarm"]["b"])

    @property
    def m(self) -> int:
        return int(self.raw["swarm"]["m"])

    @property
    def d(self) -> int:
        return int(self.raw["objective"]["d"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def steps(self) -> int:
        return int(self.raw["trainer"]["steps"])

    @property
    def hash_mode(self) -> str:
        return self.raw["hash_mode"]

    def validate(self):
        r = self.raw
        n, b, m, d = self.n, self.b, self.m, self.d
        if n < 2:
            raise ConfigError("swarm.n must be at least 2")
        if b < 0 or 2 * b >= n:
            raise ConfigError(f"swarm.b = {b} must satisfy 0 <= b < n/2 (n = {n})")
        if m < 0:
            raise ConfigError("swarm.m must be >= 0")
        if b > 0 and m > (n - 2 * b) / 2:
            raise ConfigError(f"swarm.m = {m} exceeds (n - 2b)/2 = {(n - 2 * b) / 2}")
        if d < n:
            raise ConfigError(f"objective.d = {d} must be at least n = {n}")
        if r["hash_mode"] not in HASH_MODES:
            raise ConfigError(f"hash_mode must be one of {HASH_MODES}")
        if r["trace"] not in ("full", "light"):
            raise ConfigError("trace must be 'full' or 'light'")
        if int(r["repetitions"]) < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.steps < 1:
            raise ConfigError("trainer.steps must be >= 1")
        lr = r["trainer"]["lr"]
        if not (lr == "auto" or (isinstance(lr, (int, float)) and lr > 0)):
            raise ConfigError("trainer.lr must be a positive number or 'auto'")
        try:
            self.clip_config()
        except ValueError as exc:
            raise ConfigError(f"clip: {exc}") from exc
        byz = self.byzantine()
        if len(byz) > b:
            raise ConfigError(f"attacks name {len(byz)} Byzantine peers but swarm.b = {b}")
        for f in self.faults():
            if f.kind != "reorder" and f.sender is not None and f.sender not in byz:
                ends = {f.sender, f.recipient} - {None}
                if not ends & set(byz):
                    raise ConfigError(f"fault {f} touches an honest-honest link")
        if self.raw["protocol"]["delta_max"] == "clipped" and not self.raw["protocol"]["grad_clip"]:
            raise ConfigError("protocol.delta_max = 'clipped' needs protocol.grad_clip > 0")

    # derived objects
    def clip_config(self) -> ClipConfig:
        c = dict(self.raw["clip"])
        mode = c.pop("mode", "fixed")
        tol = float(c.get("tol", 1e-6))
        iters = int(c.get("max_iters", 10000))
        solver = c.get("solver", "step")
        if mode == "infinite":
            return ClipConfig.infinite(tol=tol, max_iters=iters, solver=solver)
        if mode == "fixed":
            tau = c.get("tau", 1.0)
            tau = math.inf if tau in ("inf", math.inf) else float(tau)
            return ClipConfig.fixed(tau, tol=tol, max_iters=iters, solver=solver)
        if mode == "schedule":
            return ClipConfig.schedule(float(c.get("delta", self.b / self.n)), float(c.get("sigma", 1.0)),
                                       float(c.get("b0_sq", 0.0)), tol=tol, max_iters=iters, solver=solver)
        raise ConfigError(f"unknown clip mode {mode!r}")

    def byzantine(self) -> dict:
        """peer id -> AttackStrategy."""
        out = {}
        default_peers = list(range(self.n - self.b, self.n))
        for spec in self.raw["attack"]:
            peers = spec.get("peers", default_peers)
            strategy = _strategy(spec)
            for p in peers:
                if not 0 <= int(p) < self.n:
                    raise ConfigError(f"attack peer {p} out of range")
                if int(p) in out:
                    raise ConfigError(f"peer {p} has two attack strategies")
                out[int(p)] = strategy
        return out

    def faults(self) -> list:
        out = []
        for spec in self.raw["fault"]:
            try:
                out.append(Fault(**spec))
            except TypeError as exc:
                raise ConfigError(f"bad fault {spec}: {exc}") from exc
        return out

    def objective(self):
        from .optim import make_objective
        spec = dict(self.raw["objective"])
        spec.pop("d", None)
        spec.pop("init_distance", None)
        try:
            return make_objective(spec, self.d, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def x0(self, objective) -> np.ndarray:
        r0 = float(self.raw["objective"].get("init_distance", 10.0))
        center = objective.x_star if objective.x_star is not None else np.zeros(self.d)
        return center + r0 * np.ones(self.d) / math.sqrt(self.d)

    def with_seed(self, seed: int, repetitions: int | None = None) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        if repetitions is not None:
            raw["repetitions"] = int(repetitions)
        return ExperimentConfig(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if isinstance(raw, dict) and "config" in raw and "summary_version" in raw:
        raw = raw["config"]  # re-run from a summary.json echo
    return ExperimentConfig(raw)
