"""Offline trace auditor.

Reads a full JSON-lines trace, checks every broadcast's digest and signature,
rebuilds the public state of each step (iterate, participants, validators,
seeds) from the header config and the recorded updates, re-derives every ban
from the broadcast evidence, and compares with the bans the run recorded.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .cryptokit import Hasher, canonical_bytes, sha256, verify
from .optim import Projection
from .protocol import (
    BanLedger,
    Kind,
    Message,
    ReplayOracle,
    collect_evidence,
    derive_bans,
    elect_validators,
    initial_seeds,
    message_body,
    next_seeds,
    peer_keys,
    step_context,
)
from .simnet import payload_from_json, protocol_config
from .vecmath import merge


class TraceError(ValueError):
    """The trace cannot be audited (truncated, light, unreadable)."""


@dataclass
class AuditReport:
    steps: int = 0
    bans: int = 0
    divergences: list = field(default_factory=list)
    digest: str = ""

    @property
    def consistent(self) -> bool:
        return not self.divergences

    def verdict(self) -> str:
        if self.consistent:
            return f"consistent, {self.bans} bans"
        return f"divergent: {len(self.divergences)} problem(s); first: {self.divergences[0]}"


def _vec(hexes) -> np.ndarray:
    return np.array([float.fromhex(h) for h in hexes], dtype=np.float64)


def read_trace(source) -> tuple:
    """(parsed events, sha256 of the raw bytes, non-empty lines)."""
    if isinstance(source, (list, tuple)):
        lines = list(source)
        raw = "".join(line + "\n" for line in lines).encode()
    else:
        with open(source, "rb") as fh:
            raw = fh.read()
        lines = raw.decode("utf-8", errors="replace").splitlines()
    events = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise TraceError(f"line {i + 1} is not valid JSON: {exc}") from exc
    return events, hashlib.sha256(raw).hexdigest(), [line for line in lines if line.strip()]


def verify_trace(source, *, resimulate: bool = False) -> AuditReport:
    events, digest, lines = read_trace(source)
    report = AuditReport(digest=digest)
    if not events or events[0].get("kind") != "Header":
        raise TraceError("trace does not start with a Header event")
    if events[-1].get("kind") != "End":
        raise TraceError("truncated trace: no End event")
    chain = hashlib.sha256()
    for line in lines[:-1]:
        chain.update(line.encode() + b"\n")
    if events[-1].get("chain") != chain.hexdigest():
        report.divergences.append("trace lines do not match the chained digest in the End event")
    config = ExperimentConfig(events[0]["config"])
    if config.raw["trace"] != "full":
        raise TraceError("light traces carry no evidence; re-run with trace = 'full'")
    public_keys = {int(p): bytes.fromhex(k) for p, k in events[0]["public_keys"].items()}
    if config.hash_mode == "fast-sim":
        # MAC stand-in keys live in the simulating process; re-derive them from the seed
        derived = {p: k.public for p, k in peer_keys(config.seed, config.n, "fast-sim").items()}
        if derived != public_keys:
            report.divergences.append("header keys do not match the keys derived from the seed")
    objective = config.objective()
    pcfg = protocol_config(config, objective)
    hasher = Hasher(config.hash_mode)
    oracle = ReplayOracle(objective, hasher, pcfg.clip)

    # group events by step
    steps: dict = {}
    order = []
    for ev in events[1:-1]:
        k = ev.get("step")
        if ev["kind"] == "StepStart":
            order.append(k)
        if k is not None:
            steps.setdefault(k, []).append(ev)

    def diverge(msg):
        report.divergences.append(msg)

    ledger = BanLedger()
    history: dict = {}
    seeds = initial_seeds(config.seed, range(config.n))
    checkers, targets = (), ()
    x = config.x0(objective)
    for k in order:
        evs = steps[k]
        start = next(e for e in evs if e["kind"] == "StepStart")
        try:
            ctx = step_context(k, x, n=config.n, banned=ledger.banned, checkers=checkers, targets=targets,
                               seeds=seeds, cfg=pcfg, d=objective.d)
        except Exception as exc:  # noqa: BLE001 - reported, not raised
            diverge(f"step {k}: cannot rebuild context: {exc}")
            break
        if list(ctx.active) != start["active"] or list(ctx.participants) != start["participants"] \
                or list(ctx.checkers) != start["checkers"]:
            diverge(f"step {k}: peer roles differ from the recorded ones")
        if sha256(canonical_bytes(ctx.x)).hex() != start["x_digest"] or \
                (start.get("x") is not None and not np.array_equal(_vec(start["x"]), ctx.x)):
            diverge(f"step {k}: iterate differs from the recorded one")

        msgs = []
        for e in evs:
            if e["kind"] != "Broadcast":
                continue
            try:
                payload = payload_from_json(e["payload"])
                kind = Kind[e["msg"]]
                body = message_body(k, e["actor"], kind, payload)
            except (KeyError, ValueError, TypeError) as exc:
                diverge(f"step {k}: unreadable broadcast from {e.get('actor')}: {exc}")
                continue
            dig = hasher.digest(body)
            sig = bytes.fromhex(e["sig"])
            if dig.hex() != e["digest"] or not verify(public_keys.get(e["actor"], b""), dig, sig, hasher.mode):
                diverge(f"step {k}: broadcast {e['digest'][:16]} from {e['actor']} fails digest/signature check")
                continue
            msgs.append(Message(k, e["actor"], kind, payload, dig, sig, len(body) + len(sig)))

        update_ev = next((e for e in evs if e["kind"] == "Update"), None)
        advance = next((e for e in evs if e["kind"] == "Advance"), None)
        if update_ev is None or advance is None:
            diverge(f"step {k}: missing Update/Advance event")
            break
        raw = _vec(update_ev["aggregate"])
        lay = ctx.layout
        aggregates = {j: raw[lay.bounds(j)].copy() for j in range(lay.n)}
        ev = collect_evidence(ctx, msgs, aggregates)
        bans = derive_bans(ev, history, oracle, public_keys, set(ledger.banned))
        recorded = [(e["actor"], e["cause"]) for e in evs if e["kind"] == "Ban"]
        if [(b.peer, b.cause) for b in bans] != recorded:
            diverge(f"step {k}: re-derived bans {[(b.peer, b.cause) for b in bans]} != recorded {recorded}")
        for b in bans:
            ledger.ban(b)
        pieces = [ev.corrected.get(j, ev.aggregate.get(j)) for j in range(lay.n)]
        expected_update = merge([np.zeros(lay.sizes[j]) if v is None else v for j, v in enumerate(pieces)], lay)
        update = _vec(update_ev["update"])
        if not np.array_equal(update, expected_update):
            diverge(f"step {k}: recorded update differs from the agreed aggregates")
        if ev.beacon is None:
            diverge(f"step {k}: beacon did not complete")
            break
        history[k] = ev
        for old in [s for s in history if s <= k - pcfg.history]:
            del history[old]
        oracle.prune(k - pcfg.history + 1)
        candidates = [p for p in ctx.participants if not ledger.is_banned(p)]
        checkers, targets, _ = elect_validators(ev.beacon, candidates, pcfg.m)
        seeds = next_seeds(ev.beacon, range(config.n))
        radius = float(advance.get("radius") or 0.0)
        proj = Projection(radius if radius > 0 else None,
                          objective.x_star if radius > 0 and objective.x_star is not None else None)
        x = proj(x - float.fromhex(advance["lr"]) * update)
        report.steps += 1

    end = events[-1]
    if hashlib.sha256(ledger.to_bytes()).hexdigest() != end.get("ledger"):
        diverge("final ledger digest differs")
    if end.get("x") is not None and not np.array_equal(_vec(end["x"]), x):
        diverge("final iterate differs")
    report.bans = len(ledger)
    if resimulate:
        from .simnet import run
        result = run(config)
        if result.trace.digest() != digest:
            diverge("re-simulation produced a different trace")
    return report
