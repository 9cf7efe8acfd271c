"""The per-step BTARD round: hash commitments, butterfly exchange, CenteredClip
aggregation, inner-product checksums, Accuse / Eliminate / CheckAveraging,
validator election and the ban ledger.

The module has two layers. The pure layer (``collect_evidence``,
``derive_bans``, ``elect_validators`` and friends) turns the public broadcast
log of a step into bans; every honest peer and the offline auditor run it on
their own copy of the log. :class:`BtardEngine` drives peers through the
phases of a step on top of :class:`~btard.simnet.Network`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .adversary import GRADIENT_ATTACKS, Coordinator, forge_aggregate
from .cryptokit import (
    Hasher,
    KeyPair,
    MprngSession,
    Phase,
    Signer,
    canonical_bytes,
    commitment,
    derive,
    sha256,
    verify,
)
from .optim import clip_by_parts
from .robustagg import AggregationError, ClipConfig, converged_clip
from .simnet import AllBanned, ConfigError, Network, Trace
from .vecmath import PartitionLayout, SeededStream, fdot, fnorm, merge, random_unit_direction


class Kind(IntEnum):
    PART_HASH = 1
    PART = 2
    AGG_HASH = 3
    AGG_PART = 4
    CHECKSUM = 5
    NORM = 6
    CHECK_FLAG = 7
    COMMIT = 8
    REVEAL = 9
    ACCUSE = 10
    ELIMINATE = 11
    RESEND = 12


class Cause:
    GRADIENT_FRAUD = "GradientFraud"
    AGGREGATION_FRAUD = "AggregationFraud"
    FALSE_ACCUSATION = "FalseAccusation"
    PROTOCOL_VIOLATION = "ProtocolViolation"
    MUTUAL_ELIMINATE = "MutualEliminate"
    COVER_UP = "CoverUp"

    ALL = ("GradientFraud", "AggregationFraud", "FalseAccusation", "ProtocolViolation",
           "MutualEliminate", "CoverUp")


ACCUSE_REASONS = ("dispute", "sum", "validation", "slander")


# --- messages ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Message:
    step: int
    sender: int
    kind: Kind
    payload: tuple
    digest: bytes
    signature: bytes
    size: int

    def slot(self):
        """Messages sharing a slot must be identical; two different ones contradict."""
        k = self.kind
        if k in (Kind.PART, Kind.AGG_PART, Kind.RESEND):
            return (self.kind, self.payload[0])
        if k in (Kind.COMMIT, Kind.REVEAL):
            return (self.kind, self.payload[0])
        if k == Kind.ACCUSE:
            return (self.kind, self.payload[0], self.payload[1], self.payload[2])
        if k == Kind.ELIMINATE:
            return (self.kind, self.payload[0])
        return (self.kind,)


def message_body(step, sender, kind, payload) -> bytes:
    return canonical_bytes((int(step), int(sender), int(kind), payload))


def make_message(step, sender, kind, payload, signer: Signer, hasher: Hasher) -> Message:
    body = message_body(step, sender, kind, payload)
    digest = hasher.digest(body)
    sig = signer.sign(digest)
    return Message(int(step), int(sender), Kind(kind), payload, digest, sig, len(body) + len(sig))


def authentic(msg: Message, public_key: bytes, hasher: Hasher) -> bool:
    """Digest recomputed from the body and signature checked against it."""
    try:
        body = message_body(msg.step, msg.sender, msg.kind, msg.payload)
    except TypeError:
        return False
    return hasher.digest(body) == msg.digest and verify(public_key, msg.digest, msg.signature, hasher.mode)


# --- ledger -----------------------------------------------------------------


class BanRecord(NamedTuple):
    peer: int
    step: int
    cause: str
    detail: str = ""


class BanLedger:
    """Ordered ban list; two honest peers agree iff ``to_bytes`` is equal."""

    def __init__(self):
        self.entries: list = []
        self.banned: dict = {}

    def ban(self, record: BanRecord) -> bool:
        if record.peer in self.banned:
            return False
        self.banned[record.peer] = record
        self.entries.append(record)
        return True

    def is_banned(self, peer) -> bool:
        return peer in self.banned

    def counts(self) -> dict:
        out = {c: 0 for c in Cause.ALL}
        for r in self.entries:
            out[r.cause] += 1
        return out

    def to_bytes(self) -> bytes:
        return canonical_bytes(tuple((r.peer, r.step, r.cause) for r in self.entries))

    def __len__(self):
        return len(self.entries)


# --- public step context and evidence ------------------------------------------


@dataclass
class StepContext:
    """Everything every honest peer knows before the step starts."""

    step: int
    x: np.ndarray
    active: tuple
    participants: tuple
    checkers: tuple
    validations: tuple          # (checker, target) pairs for the previous step
    layout: PartitionLayout
    seeds: dict                 # peer -> public gradient seed for this step
    tau: float                  # clipping radius the checksums refer to
    delta_max: float
    lam_part: float | None      # per-part gradient clip level (clipped variant)
    eps_rel: float = 1e-6
    clip_tol: float = 1e-6

    def owner(self, j: int) -> int:
        return self.participants[j]

    def index(self, peer: int) -> int:
        return self.participants.index(peer)

    def eps(self, j: int) -> float:
        scale = self.tau if math.isfinite(self.tau) else 1.0
        return max(self.eps_rel * math.sqrt(self.layout.sizes[j]) * scale, 2 * self.clip_tol)


def expected_metadata(part, aggregate, z_part, tau: float, delta_max: float) -> tuple:
    """(norm, checksum, flag) of one part against the partition aggregate."""
    diff = np.asarray(part, dtype=np.float64) - aggregate
    nrm = fnorm(diff)
    if math.isfinite(tau) and nrm > tau:
        diff = diff * (tau / nrm)
    return nrm, fdot(z_part, diff), bool(nrm > delta_max)


@dataclass
class StepEvidence:
    ctx: StepContext
    part_hash: dict = field(default_factory=dict)      # peer -> (c, hashes)
    agg_hash: dict = field(default_factory=dict)       # j -> (h, mask)
    aggregate: dict = field(default_factory=dict)      # j -> agreed vector or None
    checksums: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    commits: list = field(default_factory=list)
    reveals: list = field(default_factory=list)
    accusations: list = field(default_factory=list)
    eliminations: list = field(default_factory=list)
    resends: dict = field(default_factory=dict)        # (j, peer) -> vector
    contradictions: set = field(default_factory=set)
    malformed: set = field(default_factory=set)
    beacon: bytes | None = None
    mprng_offenders: tuple = ()
    z: np.ndarray | None = None
    corrected: dict = field(default_factory=dict)      # j -> re-aggregated vector
    _included: dict = field(default_factory=dict, repr=False, compare=False)

    def included(self, j: int) -> tuple:
        """Peers whose part j the aggregator declared as used."""
        entry = self.agg_hash.get(j)
        if entry is None:
            return ()
        hit = self._included.get(j)
        if hit is None or hit[0] is not entry:
            hit = (entry, tuple(p for p, used in zip(self.ctx.participants, entry[1]) if used))
            self._included[j] = hit
        return hit[1]

    def z_part(self, j: int):
        return self.z[self.ctx.layout.bounds(j)]

    def reported(self, peer: int, j: int):
        try:
            return self.norms[peer][j], self.checksums[peer][j], self.flags[peer][j]
        except (KeyError, IndexError, TypeError):
            return None


def _is_digest(v) -> bool:
    return isinstance(v, bytes) and 8 <= len(v) <= 64


def _finite_vec(v, size) -> bool:
    return isinstance(v, np.ndarray) and v.shape == (size,) and bool(np.all(np.isfinite(v)))


def _well_formed(msg: Message, ctx: StepContext) -> bool:
    p, n = msg.payload, len(ctx.participants)
    if not isinstance(p, tuple):
        return False
    k = msg.kind
    try:
        if k == Kind.PART_HASH:
            return len(p) == 2 and _is_digest(p[0]) and isinstance(p[1], tuple) and len(p[1]) == n \
                and all(_is_digest(h) for h in p[1])
        if k == Kind.AGG_HASH:
            return len(p) == 2 and _is_digest(p[0]) and isinstance(p[1], tuple) and len(p[1]) == n \
                and all(isinstance(b, bool) for b in p[1])
        if k in (Kind.CHECKSUM, Kind.NORM):
            return len(p) == n and all(v is None or (isinstance(v, float) and math.isfinite(v)) for v in p)
        if k == Kind.CHECK_FLAG:
            return len(p) == n and all(v is None or isinstance(v, bool) for v in p)
        if k == Kind.COMMIT:
            return len(p) == 2 and isinstance(p[0], int) and _is_digest(p[1])
        if k == Kind.REVEAL:
            return len(p) == 3 and isinstance(p[0], int) and isinstance(p[1], bytes) and isinstance(p[2], bytes)
        if k == Kind.ACCUSE:
            return len(p) == 3 and isinstance(p[0], int) and isinstance(p[1], int) and p[2] in ACCUSE_REASONS
        if k == Kind.ELIMINATE:
            return len(p) == 2 and isinstance(p[0], int) and isinstance(p[1], str)
        if k in (Kind.RESEND, Kind.PART, Kind.AGG_PART):
            return len(p) == 2 and isinstance(p[0], int) and 0 <= p[0] < n \
                and _finite_vec(p[1], ctx.layout.sizes[p[0]])
    except TypeError:
        return False
    return False


def collect_evidence(ctx: StepContext, messages, aggregates: dict | None = None) -> StepEvidence:
    """Index one peer's view of the step's broadcasts.

    Order of ``messages`` does not matter: within a slot the message with the
    smallest digest is kept and any second, different message marks its sender
    as contradicting itself.
    """
    ev = StepEvidence(ctx=ctx)
    slots: dict = {}
    active = set(ctx.active)
    for msg in messages:
        if msg.step != ctx.step or msg.sender not in active:
            continue
        if not _well_formed(msg, ctx):
            ev.malformed.add(msg.sender)
            continue
        key = (msg.sender,) + msg.slot()
        prev = slots.get(key)
        if prev is not None and prev.digest != msg.digest:
            ev.contradictions.add(msg.sender)
            if msg.digest > prev.digest:
                continue
        slots[key] = msg
    for key in sorted(slots, key=lambda k: (k[0], int(k[1])) + tuple(repr(x) for x in k[2:])):
        msg = slots[key]
        s, p, k = msg.sender, msg.payload, msg.kind
        if k == Kind.PART_HASH:
            ev.part_hash[s] = p
        elif k == Kind.AGG_HASH:
            if s in ctx.participants:
                ev.agg_hash[ctx.index(s)] = p
        elif k == Kind.CHECKSUM:
            ev.checksums[s] = p
        elif k == Kind.NORM:
            ev.norms[s] = p
        elif k == Kind.CHECK_FLAG:
            ev.flags[s] = p
        elif k == Kind.COMMIT:
            ev.commits.append(msg)
        elif k == Kind.REVEAL:
            ev.reveals.append(msg)
        elif k == Kind.ACCUSE:
            ev.accusations.append(msg)
        elif k == Kind.ELIMINATE:
            ev.eliminations.append(msg)
        elif k == Kind.RESEND:
            ev.resends[(p[0], s)] = p[1]
    aggregates = aggregates or {}
    for j, (h, _) in ev.agg_hash.items():
        vec = aggregates.get(j)
        ev.aggregate[j] = vec if vec is not None and _hash_matches(vec, h) else None
    ev.beacon, ev.mprng_offenders = replay_mprng(ctx.active, ev.commits, ev.reveals)
    if ev.beacon is not None:
        ev.z = random_unit_direction(derive(ev.beacon, "z"), ctx.layout)
    return ev


_HASHERS: dict = {}


def _hash_matches(vec, h: bytes) -> bool:
    mode = "crypto" if len(h) == 32 else "fast-sim"
    hasher = _HASHERS.setdefault(mode, Hasher(mode))
    return hasher.of(vec) == h


def replay_mprng(active, commits, reveals) -> tuple:
    """Re-run the beacon rounds from their messages; returns (output, offenders)."""
    members = list(active)
    offenders: list = []
    rounds = sorted({m.payload[0] for m in commits} | {m.payload[0] for m in reveals}) or [0]
    for rnd in range(max(rounds) + 1):
        session = MprngSession(members, round_index=rnd)
        for m in sorted((m for m in commits if m.payload[0] == rnd), key=lambda m: m.sender):
            session.commit(m.sender, m.payload[1])
        session.close_commits()
        for m in sorted((m for m in reveals if m.payload[0] == rnd), key=lambda m: m.sender):
            session.reveal(m.sender, m.payload[1], m.payload[2])
        session.close_reveals()
        if session.phase is Phase.DONE:
            return session.output, tuple(offenders)
        bad = [p for p in session.offenders() if p in members]
        offenders.extend(bad)
        members = [p for p in members if p not in bad]
        if not members:
            break
    return None, tuple(offenders)


# --- deterministic replay ---------------------------------------------------


class ReplayOracle:
    """Recomputes any participant's gradient from public data, with caching."""

    def __init__(self, objective, hasher: Hasher, clip: ClipConfig):
        self.objective = objective
        self.hasher = hasher
        self.clip = clip
        self._cache: dict = {}

    def gradient(self, ctx: StepContext, peer: int) -> np.ndarray:
        key = (ctx.step, peer)
        g = self._cache.get(key)
        if g is None:
            g = self.objective.stochastic_grad(ctx.x, ctx.seeds[peer])
            g = clip_by_parts(g, ctx.layout, ctx.lam_part)
            self._cache[key] = g
        return g

    def consistent(self, ev: StepEvidence, peer: int) -> bool:
        """Does the committed hash set match the replayed gradient?"""
        key = (ev.ctx.step, peer, "ok")
        ok = self._cache.get(key)
        if ok is None:
            ok = False
            entry = ev.part_hash.get(peer)
            if entry is not None and peer in ev.ctx.seeds:
                g = self.gradient(ev.ctx, peer)
                c, hashes = entry
                lay = ev.ctx.layout
                ok = self.hasher.of(g) == c and all(
                    self.hasher.of(g[lay.bounds(j)]) == hashes[j] for j in range(lay.n))
            self._cache[key] = ok
        return ok

    def prune(self, keep_from: int):
        for key in [k for k in self._cache if k[0] < keep_from]:
            del self._cache[key]


def _disputed(ev: StepEvidence, accuser: int, target: int) -> bool:
    return any(m.sender == accuser and m.payload[0] == target and m.payload[1] == ev.ctx.step
               and m.payload[2] == "dispute" for m in ev.accusations)


def partition_sum(ev: StepEvidence, j: int, oracle: ReplayOracle) -> float | None:
    """Sum of checksums of partition j, disputed or missing entries replaced by replay."""
    agg = ev.aggregate.get(j)
    if agg is None or ev.z is None:
        return None
    ctx = ev.ctx
    owner = ctx.owner(j)
    sl = ctx.layout.bounds(j)
    terms = []
    for p in ev.included(j):
        rep = ev.reported(p, j)
        value = None if rep is None else rep[1]
        if value is None or (p != owner and _disputed(ev, owner, p)):
            if oracle.consistent(ev, p):
                g = oracle.gradient(ctx, p)
                value = expected_metadata(g[sl], agg, ev.z_part(j), ctx.tau, ctx.delta_max)[1]
        terms.append(0.0 if value is None else value)
    return math.fsum(terms)


def sum_fails(ev: StepEvidence, j: int, oracle: ReplayOracle) -> bool:
    total = partition_sum(ev, j, oracle)
    if total is None:
        return False
    return abs(total) > len(ev.included(j)) * ev.ctx.eps(j)


def check_averaging_triggers(ev: StepEvidence) -> list:
    """Partitions where a majority of participants flags the aggregate as too far."""
    n = len(ev.ctx.participants)
    out = []
    for j in sorted(ev.agg_hash):
        votes = sum(1 for p in ev.included(j) if (f := ev.flags.get(p)) is not None and f[j] is True)
        if votes > n / 2:
            out.append(j)
    return out


def accuse_verdict(ev: StepEvidence, target: int, oracle: ReplayOracle) -> list:
    """Bans implied by replaying ``target`` at the evidence step (empty: target is clean)."""
    ctx = ev.ctx
    if target not in ctx.participants or target not in ev.part_hash:
        return []
    if not oracle.consistent(ev, target):
        return [(target, Cause.GRADIENT_FRAUD, "replayed gradient does not match commitment")]
    bans = []
    g = oracle.gradient(ctx, target)
    lied = []
    if ev.z is not None:
        for j in range(ctx.layout.n):
            agg = ev.aggregate.get(j)
            if agg is None or target not in ev.included(j):
                continue
            exp = expected_metadata(g[ctx.layout.bounds(j)], agg, ev.z_part(j), ctx.tau, ctx.delta_max)
            if ev.reported(target, j) != exp:
                lied.append(j)
    if lied:
        bans.append((target, Cause.PROTOCOL_VIOLATION, f"misreported metadata for partitions {lied}"))
        for j in lied:
            owner = ctx.owner(j)
            if owner != target and not _disputed(ev, owner, target):
                bans.append((owner, Cause.COVER_UP, f"approved misreported metadata of {target}"))
    own = ctx.index(target)
    if sum_fails(ev, own, oracle):
        bans.append((target, Cause.AGGREGATION_FRAUD, "checksums of own partition do not cancel"))
    return bans


def public_violations(ev: StepEvidence, oracle: ReplayOracle) -> list:
    """Violations every observer can see in the broadcast log itself."""
    ctx = ev.ctx
    out = []
    for p in sorted(ev.contradictions):
        out.append((p, Cause.PROTOCOL_VIOLATION, "contradicting broadcasts"))
    for p in sorted(ev.malformed):
        out.append((p, Cause.PROTOCOL_VIOLATION, "malformed broadcast"))
    for p in ev.mprng_offenders:
        out.append((p, Cause.PROTOCOL_VIOLATION, "beacon commit/reveal violation"))
    for p in ctx.participants:
        if p not in ev.part_hash:
            out.append((p, Cause.PROTOCOL_VIOLATION, "missing gradient commitment"))
    elim = {(m.sender, m.payload[0]) for m in ev.eliminations}
    for j, owner in enumerate(ctx.participants):
        if owner not in ev.part_hash:
            continue
        if j not in ev.agg_hash:
            out.append((owner, Cause.PROTOCOL_VIOLATION, "missing aggregate commitment"))
            continue
        mask = ev.agg_hash[j][1]
        for p, used in zip(ctx.participants, mask):
            if p == owner and not used:
                out.append((owner, Cause.PROTOCOL_VIOLATION, "dropped its own part"))
            elif used and p not in ev.part_hash:
                out.append((owner, Cause.PROTOCOL_VIOLATION, f"used uncommitted part of {p}"))
            elif not used and p in ev.part_hash and (owner, p) not in elim:
                out.append((owner, Cause.PROTOCOL_VIOLATION, f"excluded {p} without eliminating it"))
    if ev.z is not None:
        for p in ctx.participants:
            if p not in ev.part_hash:
                continue
            need = [j for j in range(ctx.layout.n) if ev.aggregate.get(j) is not None and p in ev.included(j)]
            for kind, table in (("checksum", ev.checksums), ("norm", ev.norms), ("flag", ev.flags)):
                row = table.get(p)
                if row is None or any(row[j] is None for j in need):
                    out.append((p, Cause.PROTOCOL_VIOLATION, f"missing {kind} report"))
                    break
    for j in check_averaging_triggers(ev):
        members = ev.included(j)
        vecs = []
        complete = True
        for p in members:
            vec = ev.resends.get((j, p))
            if vec is None or p not in ev.part_hash or oracle.hasher.of(vec) != ev.part_hash[p][1][j]:
                out.append((p, Cause.PROTOCOL_VIOLATION, f"no valid resend for partition {j}"))
                complete = False
            else:
                vecs.append(vec)
        if vecs:
            redo = converged_clip(vecs, oracle.clip).v
            ev.corrected[j] = redo
            agg = ev.aggregate.get(j)
            tol = max(10 * oracle.clip.tol, ctx.eps(j))
            if complete and agg is not None and fnorm(redo - agg) > tol:
                out.append((ctx.owner(j), Cause.AGGREGATION_FRAUD, "re-aggregation differs from aggregate"))
    return out


def _pk_order(public_keys: dict):
    return lambda peer: public_keys.get(peer, b"")


def derive_bans(ev: StepEvidence, history: dict, oracle: ReplayOracle, public_keys: dict,
                banned_before=()) -> list:
    """All bans of one step, in the order they are applied.

    Public violations first, then Accuse messages sorted by (accuser key,
    target key, referenced step, reason), then Eliminate messages sorted by
    (sender key, target key). Messages that involve a peer banned earlier are
    skipped.
    """
    ctx = ev.ctx
    gone = set(banned_before)
    out = []

    def apply(peer, cause, detail):
        if peer not in gone:
            gone.add(peer)
            out.append(BanRecord(peer, ctx.step, cause, detail))

    for peer, cause, detail in public_violations(ev, oracle):
        apply(peer, cause, detail)

    key = _pk_order(public_keys)
    accusations = sorted(ev.accusations, key=lambda m: (key(m.sender), key(m.payload[0]), m.payload[1],
                                                        m.payload[2]))
    for msg in accusations:
        accuser, (target, ref, reason) = msg.sender, msg.payload
        if accuser in gone or target in gone:
            continue
        ref_ev = ev if ref == ctx.step else history.get(ref)
        if ref_ev is None or ref not in (ctx.step, ctx.step - 1):
            apply(accuser, Cause.PROTOCOL_VIOLATION, f"accusation references unavailable step {ref}")
            continue
        verdict = accuse_verdict(ref_ev, target, oracle)
        if verdict:
            for peer, cause, detail in verdict:
                apply(peer, cause, detail)
        else:
            apply(accuser, Cause.FALSE_ACCUSATION, f"accused clean peer {target} ({reason})")

    eliminations = sorted(ev.eliminations, key=lambda m: (key(m.sender), key(m.payload[0])))
    for msg in eliminations:
        a, b = msg.sender, msg.payload[0]
        if a in gone or b in gone or a == b or b not in ctx.active:
            continue
        apply(a, Cause.MUTUAL_ELIMINATE, f"eliminated {b}")
        apply(b, Cause.MUTUAL_ELIMINATE, f"eliminated by {a}")
    return out


def elect_validators(beacon: bytes, candidates, m: int) -> tuple:
    """(checkers, targets, m_used) drawn without replacement from the beacon."""
    candidates = list(candidates)
    m_used = min(m, len(candidates) // 2)
    if m_used <= 0:
        return (), (), 0
    stream = SeededStream(derive(beacon, "validators"))
    picked = stream.sample_without_replacement(candidates, 2 * m_used)
    return tuple(picked[:m_used]), tuple(picked[m_used:]), m_used


def next_seeds(beacon: bytes, peers) -> dict:
    return {p: sha256(beacon + int(p).to_bytes(8, "little")) for p in peers}


def initial_seeds(seed: int, peers) -> dict:
    base = int(seed).to_bytes(8, "little", signed=True)
    return {p: sha256(b"btard-seed0" + base + int(p).to_bytes(8, "little")) for p in peers}


def validate_peer(ev: StepEvidence, target: int, oracle: ReplayOracle) -> bool:
    """True when the target's commitments and reports at that step replay cleanly."""
    return not any(peer == target for peer, _, _ in accuse_verdict(ev, target, oracle))


# --- live engine ------------------------------------------------------------


def peer_keys(seed: int, n: int, mode: str) -> dict:
    """Deterministic per-peer key pairs of a simulated run."""
    base = int(seed).to_bytes(8, "little", signed=True)
    return {p: KeyPair.generate(sha256(b"btard-key" + base + p.to_bytes(8, "little")), mode) for p in range(n)}


def step_context(step, x, *, n, banned, checkers, targets, seeds, cfg, d) -> StepContext:
    """Public state at the start of a step, from the ledger and the last election."""
    active = tuple(p for p in range(n) if p not in banned)
    if not active:
        raise AllBanned(f"no peer left at step {step}")
    act = set(active)
    live_checkers = tuple(c for c in checkers if c in act)
    validations = tuple((c, u) for c, u in zip(checkers, targets) if c in act)
    participants = tuple(p for p in active if p not in set(live_checkers))
    if len(participants) > d:
        raise ConfigError("more participants than coordinates")
    layout = PartitionLayout(d, len(participants))
    lam_part = None
    if cfg.grad_clip is not None:
        lam_part = cfg.grad_clip / math.sqrt(len(participants))
    return StepContext(step=step, x=np.array(x, dtype=np.float64), active=active, participants=participants,
                       checkers=live_checkers, validations=validations, layout=layout,
                       seeds={p: seeds[p] for p in active}, tau=cfg.clip.limit_tau(),
                       delta_max=cfg.resolve_delta_max(len(participants), lam_part),
                       lam_part=lam_part, eps_rel=cfg.eps_rel, clip_tol=cfg.clip.tol)


@dataclass(frozen=True)
class ProtocolConfig:
    """Knobs of the round engine.

    ``delta_max`` is ``"noise"`` (from the noise level: (1+sqrt 3) sqrt 2 sigma / sqrt(n_k - m)),
    ``"clipped"`` (2 lambda_k), ``"off"`` or a number. ``grad_clip`` is the
    global lambda of the clipped variant; each part is clipped at
    lambda / sqrt(n_k - m).
    """

    m: int = 1
    clip: ClipConfig = ClipConfig(max_iters=10_000)
    delta_max: object = "noise"
    sigma: float = 1.0
    grad_clip: float | None = None
    eps_rel: float = 1e-6
    hash_mode: str = "crypto"
    history: int = 2
    ledger_views: str = "all"   # "all" honest peers derive bans, or "one"

    def __post_init__(self):
        if self.m < 0:
            raise ConfigError("m must be >= 0")
        if self.ledger_views not in ("all", "one"):
            raise ConfigError("ledger_views must be 'all' or 'one'")
        if isinstance(self.delta_max, str) and self.delta_max not in ("noise", "clipped", "off"):
            raise ConfigError(f"unknown delta_max policy {self.delta_max!r}")
        if self.delta_max == "clipped" and self.grad_clip is None:
            raise ConfigError("delta_max='clipped' needs grad_clip")

    def resolve_delta_max(self, n_parts: int, lam_part) -> float:
        if self.delta_max == "off":
            return math.inf
        if self.delta_max == "noise":
            return (1 + math.sqrt(3)) * math.sqrt(2) * self.sigma / math.sqrt(n_parts)
        if self.delta_max == "clipped":
            return 2 * lam_part
        return float(self.delta_max)


@dataclass
class StepReport:
    step: int
    update: np.ndarray
    participants: tuple
    active: tuple
    checkers: tuple
    bans: list
    triggers: list
    seeds: dict
    beacon: bytes
    bytes_broadcast: int
    bytes_p2p: int
    per_peer_bytes: dict
    accusations: int = 0
    eliminations: int = 0


class BtardEngine:
    """Runs BTARD steps for ``n`` simulated peers; ``byzantine`` maps peer -> AttackStrategy."""

    def __init__(self, objective, n: int, cfg: ProtocolConfig = ProtocolConfig(), *, byzantine=None,
                 seed: int = 0, trace: Trace | None = None, faults=(), attack_seed: bytes | None = None):
        if n < 1:
            raise ConfigError("need at least one peer")
        byzantine = dict(byzantine or {})
        if any(not 0 <= p < n for p in byzantine):
            raise ConfigError("Byzantine id out of range")
        self.objective = objective
        self.n = n
        self.cfg = cfg
        self.seed = seed
        self.hasher = Hasher(cfg.hash_mode)
        base = int(seed).to_bytes(8, "little", signed=True)
        self.keys = peer_keys(seed, n, cfg.hash_mode)
        self.signers = {p: Signer(k) for p, k in self.keys.items()}
        self.public_keys = {p: k.public for p, k in self.keys.items()}
        self.byzantine = set(byzantine)
        self.byzantine_strategies = byzantine
        self.coordinator = Coordinator(byzantine, attack_seed or sha256(b"attack" + base))
        self.trace = trace or Trace(enabled=False)
        self.network = Network(self.public_keys, cfg.hash_mode, self.byzantine, self.trace, faults,
                               adversary_seed=sha256(b"adversary" + base), resign=self._mutate)
        self.oracle = ReplayOracle(objective, self.hasher, cfg.clip)
        self.ledger = BanLedger()
        self.peer_ledgers = {p: BanLedger() for p in range(n) if p not in self.byzantine}
        self.seeds = initial_seeds(seed, range(n))
        self.checkers: tuple = ()
        self.targets: tuple = ()
        self.history: dict = {}
        self._private = {p: SeededStream(sha256(b"btard-private" + base + p.to_bytes(8, "little")))
                         for p in range(n)}
        self._wrong = None

    # helpers
    def _honest(self, p) -> bool:
        return p not in self.byzantine

    def _strategy(self, p, step):
        return self.coordinator.active(p, step) if p in self.byzantine else None

    def _silent(self, p, step, phase, peer=None) -> bool:
        s = self._strategy(p, step)
        if s is None or s.kind != "silent_drop" or s.phase != phase:
            return False
        return s.victim is None or peer is None or s.victim == peer

    def _msg(self, step, sender, kind, payload) -> Message:
        return make_message(step, sender, kind, payload, self.signers[sender], self.hasher)

    def _mutate(self, msg: Message) -> Message:
        """Second, different message for the same slot (Byzantine equivocation)."""
        def bump(v):
            if isinstance(v, np.ndarray):
                w = v.copy()
                w[0] += 1.0
                return w
            if isinstance(v, bytes):
                return bytes([v[0] ^ 0xFF]) + v[1:] if v else b"\x01"
            if isinstance(v, bool) or v is None:
                return v
            if isinstance(v, float):
                return v + 1.0
            return v
        p = msg.payload
        if msg.kind in (Kind.PART_HASH, Kind.AGG_HASH, Kind.COMMIT, Kind.PART, Kind.AGG_PART, Kind.RESEND):
            new = (p[0], bump(p[1])) if msg.kind in (Kind.COMMIT, Kind.PART, Kind.AGG_PART, Kind.RESEND) \
                else (bump(p[0]), p[1])
        elif msg.kind in (Kind.CHECKSUM, Kind.NORM):
            new = tuple(v + 1.0 if isinstance(v, float) else v for v in p)
        else:
            new = p + ("dup",) if isinstance(p, tuple) else p
        return self._msg(msg.step, msg.sender, msg.kind, new)

    def _wrong_objective(self):
        if self._wrong is None:
            self._wrong = self.objective.wrong()
        return self._wrong

    def _context(self, step, x) -> StepContext:
        ctx = step_context(step, x, n=self.n, banned=self.ledger.banned, checkers=self.checkers,
                           targets=self.targets, seeds=self.seeds, cfg=self.cfg, d=self.objective.d)
        if not any(self._honest(p) for p in ctx.active):
            raise AllBanned(f"no honest peer left at step {step}")
        return ctx

    def _board(self, ctx, aggregates=None) -> StepEvidence:
        return collect_evidence(ctx, self.network.log, aggregates)

    # one step
    def step(self, k: int, x) -> StepReport:
        ctx = self._context(k, x)
        net = self.network
        P, lay = ctx.participants, ctx.layout
        net.begin_step(k, ctx.active)
        self.trace.emit(t=net.time, kind="StepStart", actor=-1, step=k, active=list(ctx.active),
                        participants=list(P), checkers=list(ctx.checkers),
                        x_digest=sha256(canonical_bytes(ctx.x)).hex(),
                        x=hex_vec(ctx.x) if self.trace.full else None)

        # gradients: true ones by replay, Byzantines may forge
        true = {p: self.oracle.gradient(ctx, p) for p in P}
        honest_true = [true[p] for p in P if self._honest(p)]
        sent = {}
        for p in P:
            s = self._strategy(p, k)
            if s is not None and s.kind in GRADIENT_ATTACKS:
                wrong = None
                if s.kind == "wrong_objective":
                    wrong = clip_by_parts(self._wrong_objective().stochastic_grad(ctx.x, ctx.seeds[p]), lay,
                                          ctx.lam_part)
                sent[p] = self.coordinator.gradient(p, k, true[p], honest_true or [true[p]],
                                                    wrong_gradient=wrong, n_total=len(P))
            else:
                if p in self.byzantine:
                    self.coordinator.remember(p, k, true[p])
                sent[p] = true[p]
        parts = {p: [sent[p][lay.bounds(j)] for j in range(lay.n)] for p in P}

        # phase 1: commitments to gradients and parts
        for p in P:
            if self._silent(p, k, "part_hash"):
                continue
            hashes = tuple(self.hasher.of(v) for v in parts[p])
            net.broadcast(self._msg(k, p, Kind.PART_HASH, (self.hasher.of(sent[p]), hashes)))
        net.close_phase("part_hash", barrier="pre-aggregation")
        board = self._board(ctx)
        committed = set(board.part_hash)

        # phase 2: butterfly exchange of parts
        for p in P:
            if p not in committed:
                continue
            for j, owner in enumerate(P):
                if owner == p or owner not in committed or self._silent(p, k, "part", owner):
                    continue
                net.send(self._msg(k, p, Kind.PART, (j, parts[p][j])), owner)
        net.close_phase("exchange")

        # phase 3: aggregation of each partition by its owner
        aggregates, true_agg, plans = {}, {}, {}
        for j, owner in enumerate(P):
            if owner not in committed:
                continue
            got = {}
            for msg in net.take_inbox(owner):
                if msg.kind == Kind.PART and msg.payload[0] == j:
                    got.setdefault(msg.sender, msg.payload[1])
            inputs, mask = [], []
            for p in P:
                if p == owner:
                    inputs.append(parts[owner][j])
                    mask.append(True)
                    continue
                if p not in committed:
                    mask.append(False)
                    continue
                vec = got.get(p)
                ok = vec is not None and _finite_vec(vec, lay.sizes[j]) \
                    and self.hasher.of(vec) == board.part_hash[p][1][j]
                if not ok and self._honest(owner):
                    if vec is None:
                        self.trace.emit(t=net.time, kind="Timeout", actor=owner, step=k, peer=p, expected="Part")
                    net.broadcast(self._msg(k, owner, Kind.ELIMINATE, (p, "part" if vec is None else "bad part")))
                    mask.append(False)
                    continue
                if not ok:
                    mask.append(False)
                    continue
                inputs.append(vec)
                mask.append(True)
            try:
                value = converged_clip(inputs, self.cfg.clip).v
            except AggregationError:
                value = np.zeros(lay.sizes[j])
            true_agg[j] = value
            s = self._strategy(owner, k)
            if s is not None and s.kind == "agg_shift":
                colluders = tuple(p for p, used in zip(P, mask) if used and p in self.byzantine)
                value, plans[j] = forge_aggregate(s, value, j, delta_max=ctx.delta_max, colluders=colluders,
                                                  attack_seed=self.coordinator.attack_seed, step=k)
            aggregates[j] = value
            net.broadcast(self._msg(k, owner, Kind.AGG_HASH, (self.hasher.of(value), tuple(mask))))
        net.close_phase("agg_hash")
        board = self._board(ctx)

        # phase 4: distribute aggregated partitions; receivers verify and relay
        for j, owner in enumerate(P):
            if j not in board.agg_hash or j not in aggregates:
                continue
            for r in ctx.active:
                if r != owner and not self._silent(owner, k, "agg_part", r):
                    net.send(self._msg(k, owner, Kind.AGG_PART, (j, aggregates[j])), r)
        net.close_phase("agg_part")
        agreed = {}
        received = {r: net.take_inbox(r) for r in ctx.active}
        for j, owner in enumerate(P):
            if j not in board.agg_hash:
                continue
            h = board.agg_hash[j][0]
            valid_copy = None  # relayed from any honest peer holding a verified copy
            for r in ctx.active:
                if r == owner:
                    continue
                vec = next((m.payload[1] for m in received[r]
                            if m.kind == Kind.AGG_PART and m.sender == owner and m.payload[0] == j), None)
                ok = vec is not None and _finite_vec(vec, lay.sizes[j]) and self.hasher.of(vec) == h
                if not ok and self._honest(r):
                    if vec is None:
                        self.trace.emit(t=net.time, kind="Timeout", actor=r, step=k, peer=owner, expected="AggPart")
                    net.broadcast(self._msg(k, r, Kind.ELIMINATE, (owner, "aggregate")))
                elif ok and valid_copy is None and self._honest(r):
                    valid_copy = vec
            agreed[j] = valid_copy
        net.close_phase("agg_verify")

        # phase 5: shared random beacon (commit before reveal, after aggregates are fixed)
        beacon = self._beacon(ctx)
        z = random_unit_direction(derive(beacon, "z"), lay)

        # phase 6: checksums, norms and Verification-3 flags
        board = self._board(ctx, agreed)
        n = len(P)
        reports = {}
        for p in P:
            if p not in committed:
                continue
            norms, sums, flags = [None] * n, [None] * n, [None] * n
            for j in range(n):
                if agreed.get(j) is None or p not in board.included(j):
                    continue
                norms[j], sums[j], flags[j] = expected_metadata(parts[p][j], agreed[j], z[lay.bounds(j)],
                                                                ctx.tau, ctx.delta_max)
            reports[p] = [norms, sums, flags]
        for j, plan in plans.items():
            if agreed.get(j) is None:
                continue
            true_s = {p: reports[p][1][j] for p in board.included(j) if p in reports}
            for p, v in plan.overrides(z[lay.bounds(j)], true_s).items():
                if p in reports:
                    reports[p][1][j] = v
        for p, (norms, sums, flags) in reports.items():
            if self._silent(p, k, "checksum"):
                continue
            net.broadcast(self._msg(k, p, Kind.CHECKSUM, tuple(sums)))
            net.broadcast(self._msg(k, p, Kind.NORM, tuple(norms)))
            net.broadcast(self._msg(k, p, Kind.CHECK_FLAG, tuple(flags)))
        net.close_phase("checksum")
        board = self._board(ctx, agreed)

        # phase 7: round one (disputes), CheckAveraging resends, validations, slander
        for j, owner in enumerate(P):
            if not self._honest(owner) or agreed.get(j) is None:
                continue
            for p in board.included(j):
                if p == owner:
                    continue
                exp = expected_metadata(parts[p][j], agreed[j], z[lay.bounds(j)], ctx.tau, ctx.delta_max)
                if board.reported(p, j) != exp:
                    net.broadcast(self._msg(k, owner, Kind.ACCUSE, (p, k, "dispute")))
        triggers = check_averaging_triggers(board)
        for j in triggers:
            self.trace.emit(t=net.time, kind="Trigger", actor=-1, step=k, partition=j)
            for p in board.included(j):
                if not self._silent(p, k, "resend"):
                    net.broadcast(self._msg(k, p, Kind.RESEND, (j, parts[p][j])))
        prev = self.history.get(k - 1)
        for c, u in ctx.validations:
            if not self._honest(c) or prev is None or u not in prev.ctx.participants:
                continue
            if self.ledger.is_banned(u):
                continue
            if not validate_peer(prev, u, self.oracle):
                net.broadcast(self._msg(k, c, Kind.ACCUSE, (u, k - 1, "validation")))
        self._slander(ctx)
        net.close_phase("dispute")
        board = self._board(ctx, agreed)

        # phase 8: round two, every honest peer checks that checksums cancel
        for i in ctx.active:
            if not self._honest(i):
                continue
            for j, owner in enumerate(P):
                if owner != i and sum_fails(board, j, self.oracle):
                    net.broadcast(self._msg(k, i, Kind.ACCUSE, (owner, k, "sum")))
        net.close_phase("verify", barrier="verification")

        # ledger: each honest peer derives bans from its own view
        honest_active = [p for p in ctx.active if self._honest(p)]
        viewers = honest_active if self.cfg.ledger_views == "all" else honest_active[:1]
        banned_before = set(self.ledger.banned)
        results = []
        canonical = None
        for i in viewers:
            ev = collect_evidence(ctx, net.view(i), agreed)
            results.append(derive_bans(ev, self.history, self.oracle, self.public_keys, banned_before))
            if canonical is None:
                canonical = ev
        bans = results[0]
        for other in results[1:]:
            if other != bans:
                raise AssertionError(f"honest ledgers diverged at step {k}")
        for rec in bans:
            self.ledger.ban(rec)
            for i in viewers:
                self.peer_ledgers[i].ban(rec)
            self.trace.emit(t=net.time, kind="Ban", actor=rec.peer, step=k, cause=rec.cause, detail=rec.detail)
        if self.cfg.ledger_views == "one":
            for i in honest_active:
                if i not in viewers:
                    self.peer_ledgers[i] = self.peer_ledgers[viewers[0]]

        # the update: agreed aggregates, re-aggregated where CheckAveraging ran
        pieces = []
        for j in range(lay.n):
            v = canonical.corrected.get(j, agreed.get(j))
            pieces.append(np.zeros(lay.sizes[j]) if v is None else v)
        update = merge(pieces, lay)
        raw = merge([agreed[j] if agreed.get(j) is not None else np.zeros(lay.sizes[j]) for j in range(lay.n)], lay)
        self.trace.emit(t=net.time, kind="Update", actor=-1, step=k,
                        aggregate=hex_vec(raw), update=hex_vec(update))

        # retain history and prepare the next step
        self.history[k] = canonical
        for old in [s for s in self.history if s <= k - self.cfg.history]:
            del self.history[old]
        self.oracle.prune(k - self.cfg.history + 1)
        candidates = [p for p in P if not self.ledger.is_banned(p)]
        self.checkers, self.targets, m_used = elect_validators(beacon, candidates, self.cfg.m)
        if m_used < self.cfg.m:
            self.trace.emit(t=net.time, kind="Note", actor=-1, step=k, text=f"validators reduced to {m_used}")
        self.seeds = next_seeds(beacon, range(self.n))
        return StepReport(step=k, update=update, participants=P, active=ctx.active, checkers=ctx.checkers,
                          bans=bans, triggers=triggers, seeds=dict(ctx.seeds), beacon=beacon,
                          bytes_broadcast=net.bytes_broadcast, bytes_p2p=net.bytes_p2p,
                          per_peer_bytes=net.per_peer_bytes(), accusations=len(canonical.accusations),
                          eliminations=len(canonical.eliminations))

    def _beacon(self, ctx) -> bytes:
        net, k = self.network, ctx.step
        members = list(ctx.active)
        for rnd in range(len(ctx.active) + 1):
            secret = {}
            for p in members:
                x = self._private[p].bytes(32)
                salt = self._private[p].bytes(32)
                secret[p] = (x, salt)
                net.broadcast(self._msg(k, p, Kind.COMMIT, (rnd, commitment(p, x, salt))))
            net.close_phase("commit")
            for p in members:
                if self._silent(p, k, "reveal"):
                    continue
                net.broadcast(self._msg(k, p, Kind.REVEAL, (rnd,) + secret[p]))
            net.close_phase("reveal")
            board = self._board(ctx)
            if board.beacon is not None:
                return board.beacon
            members = [p for p in members if p not in board.mprng_offenders]
            if not members:
                break
        raise AllBanned(f"beacon could not complete at step {k}")

    def _slander(self, ctx):
        k, net = ctx.step, self.network
        for p in ctx.active:
            s = self._strategy(p, k)
            if s is None or s.kind != "slander":
                continue
            honest = [q for q in ctx.active if self._honest(q)]
            if not honest:
                continue
            victim = s.victim if s.victim in honest else honest[k % len(honest)]
            if s.phase == "eliminate":
                net.broadcast(self._msg(k, p, Kind.ELIMINATE, (victim, "slander")))
            else:
                net.broadcast(self._msg(k, p, Kind.ACCUSE, (victim, k, "slander")))


def hex_vec(v) -> list:
    return [float(a).hex() for a in np.asarray(v).ravel()]
