"""Deterministic logical-time network: signed broadcast channel, point-to-point
links, fault injection and the JSON-lines event trace.

Time is a phase counter. Every message sent during a phase is delivered when
the phase closes, in (time, sequence) order; the "predefined timeout" of the
protocol is the end of the phase. Honest links are reliable; faults may only
touch edges with a Byzantine endpoint.
"""
from __future__ import annotations

import hashlib
import heapq
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .cryptokit import verify
from .vecmath import SeededStream


class ConfigError(ValueError):
    """Invalid experiment or fault description (CLI exit code 2)."""


class AllBanned(RuntimeError):
    """No honest peer is left to continue the run (CLI exit code 3)."""


# --- events -----------------------------------------------------------------


@dataclass(order=True)
class Event:
    time: int
    seq: int
    kind: str = field(compare=False)
    message: object = field(compare=False, default=None)
    recipient: int | None = field(compare=False, default=None)


class EventQueue:
    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()

    def push(self, time, kind, message=None, recipient=None) -> Event:
        ev = Event(time, next(self._seq), kind, message, recipient)
        heapq.heappush(self._heap, ev)
        return ev

    def pop_until(self, time):
        while self._heap and self._heap[0].time <= time:
            yield heapq.heappop(self._heap)

    def __len__(self):
        return len(self._heap)


# --- payload <-> json ---------------------------------------------------------


def payload_to_json(value):
    if value is None or isinstance(value, (bool, int, str)):
        return value
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return {"f": float(value).hex()}
    if isinstance(value, (bytes, bytearray)):
        return {"b": bytes(value).hex()}
    if isinstance(value, np.ndarray):
        return {"v": [float(v).hex() for v in value.ravel()]}
    if isinstance(value, (list, tuple)):
        return [payload_to_json(v) for v in value]
    raise TypeError(f"cannot serialize {type(value).__name__}")


def payload_from_json(value):
    if value is None or isinstance(value, (bool, int, str)):
        return value
    if isinstance(value, list):
        return tuple(payload_from_json(v) for v in value)
    if isinstance(value, dict):
        if "f" in value:
            return float.fromhex(value["f"])
        if "b" in value:
            return bytes.fromhex(value["b"])
        if "v" in value:
            return np.array([float.fromhex(v) for v in value["v"]], dtype=np.float64)
    raise ValueError(f"malformed payload element {value!r}")


LIGHT_KINDS = ("Header", "StepStart", "Ban", "Trigger", "Timeout", "Note", "End")


class Trace:
    """JSON-lines event log with a running SHA-256 over the emitted lines.

    ``light`` keeps only bans, triggers, timeouts and accusation broadcasts;
    such a trace documents a run but cannot be audited.
    """

    def __init__(self, enabled: bool = True, light: bool = False):
        self.enabled = enabled
        self.light = light
        self.lines: list = []
        self._chain = hashlib.sha256()

    @property
    def full(self) -> bool:
        return self.enabled and not self.light

    def emit(self, **record):
        if not self.enabled:
            return
        if self.light and record.get("kind") not in LIGHT_KINDS and not (
                record.get("kind") == "Broadcast" and record.get("msg") in ("ACCUSE", "ELIMINATE")):
            return
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        self.lines.append(line)
        self._chain.update(line.encode())
        self._chain.update(b"\n")

    def digest(self) -> str:
        return self._chain.hexdigest()

    def write(self, path):
        with open(path, "w") as fh:
            for line in self.lines:
                fh.write(line + "\n")


# --- faults -------------------------------------------------------------------

FAULT_KINDS = ("drop", "duplicate", "reorder")


@dataclass(frozen=True)
class Fault:
    """A scheduled network fault.

    ``drop``/``duplicate`` act on messages from ``sender`` (optionally only to
    ``recipient``, of kind ``message``, at ``step``). ``mutate`` turns a
    duplicate into a second, different payload for the same slot.
    ``reorder`` permutes cross-sender broadcast order per recipient.
    """

    kind: str
    sender: int | None = None
    recipient: int | None = None
    message: str | None = None
    step: int | None = None
    mutate: bool = False

    def matches(self, msg, recipient, step) -> bool:
        if self.step is not None and self.step != step:
            return False
        if self.sender is not None and self.sender != msg.sender:
            return False
        if self.recipient is not None and recipient is not None and self.recipient != recipient:
            return False
        if self.message is not None and self.message != msg.kind.name:
            return False
        return True


def inject_fault(schedule: list, fault: Fault, byzantine) -> list:
    """Return a new schedule with ``fault`` appended after scope validation."""
    if fault.kind not in FAULT_KINDS:
        raise ConfigError(f"unknown fault kind {fault.kind!r}")
    if fault.kind in ("drop", "duplicate"):
        ends = {fault.sender, fault.recipient} - {None}
        if fault.sender is None or not ends & set(byzantine):
            raise ConfigError(f"fault {fault} touches an honest-honest link; honest links are reliable")
        if fault.mutate and fault.sender not in byzantine:
            raise ConfigError("only a Byzantine sender can emit a contradicting duplicate")
    return list(schedule) + [fault]


# --- network ------------------------------------------------------------------


class Network:
    """Delivers signed messages phase by phase and counts bytes per peer."""

    def __init__(self, public_keys: dict, hash_mode: str, byzantine=(), trace: Trace | None = None,
                 faults=(), adversary_seed: bytes = b"adversary", resign=None):
        self.public_keys = dict(public_keys)
        self.hash_mode = hash_mode
        self.byzantine = set(byzantine)
        self.trace = trace or Trace(enabled=False)
        self.faults: list = []
        for f in faults:
            self.faults = inject_fault(self.faults, f, self.byzantine)
        self.adversary_seed = adversary_seed
        self.resign = resign  # callable(msg) -> mutated, re-signed message (Byzantine senders)
        self.queue = EventQueue()
        self.time = 0
        self.step = 0
        self.active: tuple = tuple(sorted(self.public_keys))
        self.log: list = []          # broadcasts accepted this step (arrival order)
        self._seen: set = set()      # digests accepted this step
        self.inbox: dict = {}
        self.sent_bytes: dict = {}
        self.recv_bytes: dict = {}
        self.bytes_broadcast = 0
        self.bytes_p2p = 0

    # step bookkeeping
    def begin_step(self, step: int, active):
        self.step = step
        self.active = tuple(active)
        self.log = []
        self._seen = set()
        self.inbox = {p: [] for p in self.active}
        self.sent_bytes = {p: 0 for p in self.public_keys}
        self.recv_bytes = {p: 0 for p in self.public_keys}
        self.bytes_broadcast = 0
        self.bytes_p2p = 0

    def _faults_for(self, msg, recipient):
        return [f for f in self.faults if f.kind != "reorder" and f.matches(msg, recipient, self.step)]

    def _schedule(self, kind, msg, recipient=None):
        drop = dup = False
        mutated = None
        for f in self._faults_for(msg, recipient):
            if f.kind == "drop":
                drop = True
            elif f.kind == "duplicate":
                dup = True
                if f.mutate and self.resign is not None:
                    mutated = self.resign(msg)
        if drop:
            self.trace.emit(t=self.time, kind="Dropped", actor=msg.sender, digest=msg.digest.hex(),
                            msg=msg.kind.name, to=recipient, step=self.step)
            return
        self.queue.push(self.time, kind, msg, recipient)
        if dup:
            self.queue.push(self.time, kind, mutated if mutated is not None else msg, recipient)

    def broadcast(self, msg):
        self._schedule("Broadcast", msg)

    def send(self, msg, recipient: int):
        self._schedule("Deliver", msg, recipient)

    def _authentic(self, msg) -> bool:
        pk = self.public_keys.get(msg.sender)
        ok = pk is not None and verify(pk, msg.digest, msg.signature, self.hash_mode)
        if not ok:
            self.trace.emit(t=self.time, kind="Rejected", actor=msg.sender, digest=msg.digest.hex(),
                            msg=msg.kind.name, step=self.step)
        return ok

    def close_phase(self, name: str, barrier: str | None = None):
        """Deliver everything sent in this phase; returns the broadcasts accepted."""
        accepted = []
        for ev in self.queue.pop_until(self.time):
            msg = ev.message
            if not self._authentic(msg):
                continue
            size = msg.size
            if ev.kind == "Broadcast":
                if msg.digest in self._seen:
                    continue  # identical duplicate: idempotent
                self._seen.add(msg.digest)
                self.log.append(msg)
                accepted.append(msg)
                self.sent_bytes[msg.sender] = self.sent_bytes.get(msg.sender, 0) + size
                self.bytes_broadcast += size
                for p in self.active:
                    if p != msg.sender:
                        self.recv_bytes[p] += size
                        self.bytes_broadcast += size
                if self.trace.full or (self.trace.enabled and msg.kind.name in ("ACCUSE", "ELIMINATE")):
                    self.trace.emit(t=self.time, kind="Broadcast", actor=msg.sender, digest=msg.digest.hex(),
                                    msg=msg.kind.name, step=msg.step, payload=payload_to_json(msg.payload),
                                    sig=msg.signature.hex())
            else:
                if ev.recipient not in self.inbox:
                    continue
                self.inbox[ev.recipient].append(msg)
                self.sent_bytes[msg.sender] = self.sent_bytes.get(msg.sender, 0) + size
                self.recv_bytes[ev.recipient] += size
                self.bytes_p2p += 2 * size
                if self.trace.full:
                    self.trace.emit(t=self.time, kind="Deliver", actor=msg.sender, digest=msg.digest.hex(),
                                    msg=msg.kind.name, step=msg.step, to=ev.recipient)
        if barrier is not None:
            h = hashlib.sha256(b"".join(m.digest for m in self.log)).hexdigest()
            self.trace.emit(t=self.time, kind="Barrier", actor=-1, digest=h, name=barrier, step=self.step)
        self.time += 1
        return accepted

    def take_inbox(self, peer: int) -> list:
        msgs = self.inbox.get(peer, [])
        self.inbox[peer] = []
        return msgs

    def view(self, recipient: int) -> list:
        """Broadcast log as seen by ``recipient`` (possibly adversarially reordered)."""
        reorder = [f for f in self.faults if f.kind == "reorder" and (f.step is None or f.step == self.step)
                   and (f.recipient is None or f.recipient == recipient)]
        if not reorder:
            return list(self.log)
        stream = SeededStream(self.adversary_seed + b"reorder" + self.step.to_bytes(8, "little")
                              + recipient.to_bytes(8, "little"))
        order = stream.sample_without_replacement(range(len(self.log)), len(self.log))
        # keep each sender's own order: hand its slots back out in sequence
        by_sender: dict = {}
        for msg in self.log:
            by_sender.setdefault(msg.sender, []).append(msg)
        cursor = {s: 0 for s in by_sender}
        out = []
        for idx in order:
            s = self.log[idx].sender
            out.append(by_sender[s][cursor[s]])
            cursor[s] += 1
        return out

    def per_peer_bytes(self) -> dict:
        return {p: self.sent_bytes.get(p, 0) + self.recv_bytes.get(p, 0) for p in self.active}


# --- experiment driver ----------------------------------------------------------

CSV_COLUMNS = ("step", "loss_gap", "grad_norm", "active_peers", "participants", "banned_gradient_fraud",
               "banned_aggregation_fraud", "banned_false_accusation", "banned_protocol_violation",
               "banned_mutual_eliminate", "banned_cover_up", "check_averaging_triggers", "bytes_broadcast",
               "bytes_p2p")

_CAUSE_COLUMNS = {"GradientFraud": "banned_gradient_fraud", "AggregationFraud": "banned_aggregation_fraud",
                  "FalseAccusation": "banned_false_accusation", "ProtocolViolation": "banned_protocol_violation",
                  "MutualEliminate": "banned_mutual_eliminate", "CoverUp": "banned_cover_up"}


@dataclass
class RunResult:
    config: object
    rows: list
    trace: Trace
    engine: object
    x: np.ndarray
    summary: dict
    aborted: str | None = None


def protocol_config(config, objective):
    from .protocol import ProtocolConfig

    proto = config.raw["protocol"]
    grad_clip = float(proto.get("grad_clip") or 0.0) or None
    return ProtocolConfig(m=config.m, clip=config.clip_config(), delta_max=proto.get("delta_max", "noise"),
                          sigma=objective.sigma if objective.sigma > 0 else 1.0, grad_clip=grad_clip,
                          eps_rel=float(proto.get("eps_rel", 1e-6)), hash_mode=config.hash_mode,
                          ledger_views=proto.get("ledger_views", "all"))


def build_engine(config, trace: Trace | None = None):
    """Objective, engine and initial point for an ExperimentConfig."""
    from .protocol import BtardEngine

    objective = config.objective()
    pcfg = protocol_config(config, objective)
    engine = BtardEngine(objective, config.n, pcfg, byzantine=config.byzantine(), seed=config.seed,
                         trace=trace, faults=config.faults())
    return objective, engine, config.x0(objective)


def learning_rate(config, objective) -> float:
    lr = config.raw["trainer"]["lr"]
    if lr == "auto":
        from .optim import sgd_stepsize
        x0 = config.x0(objective)
        return sgd_stepsize(objective.L, max(objective.gap(x0), 1e-12), config.n - config.m,
                            max(objective.sigma, 1e-12), config.steps)
    return float(lr)


def _partner(detail: str):
    try:
        return int(detail.rsplit(" ", 1)[-1])
    except ValueError:
        return None


def summarize(config, rows, ledger, byzantine, trace, aborted=None) -> dict:
    bans = [{"peer": r.peer, "step": r.step, "cause": r.cause} for r in ledger.entries]
    starts = {p: s.start_step for p, s in byzantine.items()}
    byz_bans = [r for r in ledger.entries if r.peer in byzantine]
    honest_bans = [r for r in ledger.entries if r.peer not in byzantine]
    ban_times = sorted(r.step - starts[r.peer] for r in byz_bans)
    quant = {}
    if ban_times:
        for q in (0.0, 0.25, 0.5, 0.75, 1.0):
            quant[str(q)] = float(np.quantile(ban_times, q))
    last_ban = max((r.step for r in byz_bans), default=None)
    recovery = None
    if byzantine and rows:
        first_attack = min(starts.values())
        before = [r["loss_gap"] for r in rows if r["step"] < first_attack][-10:]
        if before and last_ban is not None:
            target = 2 * float(np.mean(before))
            recovery = next((r["step"] for r in rows if r["step"] >= last_ban and r["loss_gap"] <= target), None)
    byz_initiated = sum(1 for r in honest_bans if r.cause == "MutualEliminate" and _partner(r.detail) in byzantine)
    fractions = []
    active_byz, active = len(byzantine), config.n
    fractions.append(active_byz / active)
    for step in sorted({r.step for r in ledger.entries}):
        for r in ledger.entries:
            if r.step == step:
                active -= 1
                active_byz -= r.peer in byzantine
        if active:
            fractions.append(active_byz / active)
    nonincreasing = all(b <= a + 1e-12 for a, b in zip(fractions, fractions[1:]))
    last = rows[-1] if rows else {}
    return {
        "summary_version": 1,
        "steps_completed": len(rows),
        "aborted": aborted,
        "final_loss_gap": last.get("loss_gap"),
        "final_grad_norm": last.get("grad_norm"),
        "bans": bans,
        "byzantine": sorted(byzantine),
        "byzantine_banned": len(byz_bans),
        "honest_banned": len(honest_bans),
        "all_byzantine_banned": len(byz_bans) == len(byzantine),
        "ban_time_quantiles": quant,
        "last_ban_step": last_ban,
        "recovery_step": recovery,
        "check_averaging_triggers": int(sum(r["check_averaging_triggers"] for r in rows)),
        "bound_checks": {
            "honest_losses_within_byzantine_eliminates": len(honest_bans) <= byz_initiated,
            "byzantine_fraction_nonincreasing": nonincreasing,
        },
        "trace_digest": trace.digest() if trace.enabled else None,
        "config": config.to_dict(),
    }


def run(config, *, trace: Trace | None = None, progress=None) -> RunResult:
    """Execute one experiment; deterministic in (config, seed)."""
    from .optim import Projection, btard_sgd
    from .protocol import hex_vec

    if trace is None:
        trace = Trace(enabled=True, light=config.raw["trace"] == "light")
    objective, engine, x0 = build_engine(config, trace)
    trace.emit(t=0, kind="Header", actor=-1, config=config.to_dict(),
               public_keys={str(p): k.hex() for p, k in engine.public_keys.items()})
    lr = learning_rate(config, objective)
    radius = float(config.raw["trainer"].get("projection_radius") or 0.0)
    projection = Projection(radius if radius > 0 else None,
                            objective.x_star if radius > 0 and objective.x_star is not None else None)
    rows = []

    def record(k, x, report):
        counts = {c: 0 for c in _CAUSE_COLUMNS.values()}
        for r in engine.ledger.entries:
            counts[_CAUSE_COLUMNS[r.cause]] += 1
        rows.append({"step": k, "loss_gap": float(objective.gap(x)),
                     "grad_norm": float(np.linalg.norm(objective.grad(x))),
                     "active_peers": config.n - len(engine.ledger),
                     "participants": len(report.participants), **counts,
                     "check_averaging_triggers": len(report.triggers),
                     "bytes_broadcast": report.bytes_broadcast, "bytes_p2p": report.bytes_p2p})
        trace.emit(t=engine.network.time, kind="Advance", actor=-1, step=k, lr=float(lr).hex(),
                   radius=radius)
        if progress is not None:
            progress(k)

    aborted = None
    x = x0
    try:
        traj = btard_sgd(engine, x0, config.steps, lr, projection=projection, callback=record,
                         keep_reports=False, snapshot_every=0)
        x = traj.x
    except AllBanned as exc:
        aborted = str(exc)
    trace.emit(t=engine.network.time, kind="End", actor=-1, steps=len(rows), aborted=aborted,
               ledger=hashlib.sha256(engine.ledger.to_bytes()).hexdigest(),
               x=hex_vec(x) if trace.full else None, chain=trace.digest())
    summary = summarize(config, rows, engine.ledger, engine.byzantine_strategies, trace, aborted)
    return RunResult(config, rows, trace, engine, x, summary, aborted)
