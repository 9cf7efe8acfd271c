"""Byzantine strategies.

Attackers coordinate through a :class:`Coordinator` owned by the simulator: it
exposes the honest gradients of the current step (omniscience) and the public
broadcast state, never honest secret keys or the pre-reveal beacon output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm as _normal

from .cryptokit import sha256
from .vecmath import SeededStream, exact_mean

GRADIENT_ATTACKS = ("sign_flip", "random_direction", "wrong_objective", "delayed_gradient", "ipm", "alie")
# silent_drop goes quiet in one of the first six; slander uses the last two
ATTACK_PHASES = ("part", "part_hash", "agg_part", "reveal", "checksum", "resend", "accuse", "eliminate")
ATTACK_KINDS = ("honest",) + GRADIENT_ATTACKS + ("agg_shift", "slander", "silent_drop", "periodic")


@dataclass(frozen=True)
class AttackStrategy:
    """One Byzantine behaviour.

    ``scale`` is lambda for sign_flip / random_direction and epsilon for ipm.
    ``shift`` is the aggregate displacement for agg_shift, in units of the
    step's Delta_max. ``phase`` selects where silent_drop goes quiet, or
    whether slander uses Accuse (default) or Eliminate.
    """

    kind: str = "honest"
    start_step: int = 0
    stop_step: int | None = None
    scale: float = 1000.0
    lag: int = 1
    period: int = 1
    inner: "AttackStrategy | None" = None
    shift: float = 0.5
    cover: bool = True
    victim: int | None = None
    phase: str = "part"

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "periodic":
            if self.inner is None or self.inner.kind == "periodic":
                raise ValueError("periodic needs a non-periodic inner strategy")
            if self.period < 1:
                raise ValueError("period must be >= 1")
        if self.kind == "delayed_gradient" and self.lag < 1:
            raise ValueError("lag must be >= 1")
        if self.phase not in ATTACK_PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")

    def active_at(self, step: int) -> "AttackStrategy | None":
        """Strategy in force at ``step`` (None means behave honestly)."""
        if self.kind == "honest" or step < self.start_step:
            return None
        if self.stop_step is not None and step >= self.stop_step:
            return None
        if self.kind == "periodic":
            if (step - self.start_step) % self.period:
                return None
            return replace(self.inner, start_step=0, stop_step=None)
        return self


def shared_direction(attack_seed: bytes, step: int, d: int) -> np.ndarray:
    """Unit vector common to all attackers at one step."""
    u = SeededStream(sha256(attack_seed + b"direction" + step.to_bytes(8, "little"))).normal(d)
    return u / np.linalg.norm(u)


def alie_z(n: int, b: int) -> float:
    """Classic z_max for the 'a little is enough' attack."""
    s = math.floor(n / 2 + 1) - b
    q = (n - s) / n
    q = min(max(q, 1e-12), 1 - 1e-12)
    return float(_normal.ppf(q))


def forge_gradient(strategy: AttackStrategy, honest_gradients, own_true_gradient, step: int, *,
                   attack_seed: bytes = b"", history: dict | None = None, wrong_gradient=None,
                   n_total: int | None = None, n_byzantine: int = 1) -> np.ndarray:
    s = strategy.active_at(step)
    g = np.asarray(own_true_gradient, dtype=np.float64)
    if s is None or s.kind not in GRADIENT_ATTACKS:
        return g.copy()
    if s.kind == "sign_flip":
        return -s.scale * g
    if s.kind == "random_direction":
        return s.scale * shared_direction(attack_seed, step, g.shape[0])
    if s.kind == "wrong_objective":
        if wrong_gradient is None:
            raise ValueError("wrong_objective needs the wrong-objective gradient")
        return np.asarray(wrong_gradient, dtype=np.float64).copy()
    if s.kind == "delayed_gradient":
        old = (history or {}).get(step - s.lag)
        return g.copy() if old is None else np.array(old, dtype=np.float64)
    honest = np.vstack([np.asarray(h, dtype=np.float64) for h in honest_gradients])
    mu = exact_mean(list(honest))
    if s.kind == "ipm":
        return -s.scale * mu
    # alie: push each coordinate down by z std, never leaving the honest range
    std = honest.std(axis=0)
    n_total = n_total if n_total is not None else honest.shape[0] + n_byzantine
    z = alie_z(n_total, n_byzantine)
    with np.errstate(divide="ignore", invalid="ignore"):
        room = np.where(std > 0, (mu - honest.min(axis=0)) / std, 0.0)
    return mu - np.minimum(z, room) * std


@dataclass
class ChecksumPlan:
    """Misreported checksums that make the forged aggregate sum to zero.

    ``owner`` is the forging aggregator, ``colluders`` the Byzantine
    co-signers of the partition (including the owner itself).
    """

    partition: int
    colluders: tuple
    active: bool = True

    def overrides(self, z_part, true_checksums: dict) -> dict:
        """Given the true s of every member, return new s for the colluders."""
        if not self.active or not self.colluders:
            return {}
        others = math.fsum(v for p, v in true_checksums.items() if p not in self.colluders)
        share = -others / len(self.colluders)
        return {p: share for p in self.colluders}


def forge_aggregate(strategy: AttackStrategy, true_output, partition: int, *, delta_max: float,
                    colluders=(), attack_seed: bytes = b"", step: int = 0):
    """Shift the partition aggregate by ``shift * delta_max`` against the true output."""
    v = np.asarray(true_output, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv > 0:
        direction = -v / nv
    else:
        direction = shared_direction(attack_seed + b"agg", step, v.shape[0])
    scale = strategy.shift * (delta_max if math.isfinite(delta_max) else 1.0)
    forged = v + scale * direction
    plan = ChecksumPlan(partition, tuple(colluders), active=strategy.cover)
    return forged, plan


def slander(accuser: int, target: int, step: int) -> tuple:
    """Payload of a false accusation (target, referenced step, reason)."""
    return (int(target), int(step), "slander")


@dataclass
class Coordinator:
    """Side channel shared by the Byzantine peers of one run."""

    strategies: dict
    attack_seed: bytes = b"attack"
    history: dict = field(default_factory=dict)

    @property
    def byzantine(self) -> set:
        return set(self.strategies)

    def active(self, peer: int, step: int):
        s = self.strategies.get(peer)
        return None if s is None else s.active_at(step)

    def remember(self, peer: int, step: int, gradient, keep: int = 64):
        h = self.history.setdefault(peer, {})
        h[step] = gradient
        for old in [k for k in h if k < step - keep]:
            del h[old]

    def gradient(self, peer, step, own_true, honest_gradients, *, wrong_gradient=None, n_total=None):
        strategy = self.strategies[peer]
        lag_keep = max(strategy.lag, (strategy.inner.lag if strategy.inner else 1)) + 1
        self.remember(peer, step, own_true, keep=lag_keep)
        n_byz = sum(1 for p, s in self.strategies.items()
                    if (a := s.active_at(step)) is not None and a.kind in GRADIENT_ATTACKS)
        return forge_gradient(strategy, honest_gradients, own_true, step, attack_seed=self.attack_seed,
                              history=self.history.get(peer), wrong_gradient=wrong_gradient,
                              n_total=n_total, n_byzantine=max(n_byz, 1))
