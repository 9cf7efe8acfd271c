"""Sybil resistance: public per-peer hash-chain records, trust status, the
join queue with the t/2 cap, and the identity-splitting analysis."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cryptokit import canonical_bytes, sha256, verify


class Status(Enum):
    UNTRUSTED = "Untrusted"
    TRUSTED = "Trusted"
    BANNED = "Banned"


PENDING = "Pending"
RECALCULATED = "Recalculated"


def approved_by(validator: int) -> str:
    return f"ApprovedBy({validator})"


@dataclass
class Entry:
    step: int
    digest: bytes
    signature: bytes
    approval: str = PENDING


def entry_message(peer: int, step: int, digest: bytes) -> bytes:
    """Bytes a peer signs when it writes one gradient hash to its record."""
    return sha256(canonical_bytes(("reputation", int(peer), int(step), bytes(digest))))


@dataclass
class ReputationRecord:
    peer: int
    public_key: bytes
    threshold: int = 5
    mode: str = "crypto"
    entries: list = field(default_factory=list)
    approved_count: int = 0
    status: Status = Status.UNTRUSTED
    flagged: list = field(default_factory=list)  # (reporter, step) of ignored verdicts

    @property
    def last_step(self):
        return self.entries[-1].step if self.entries else None

    def to_json(self) -> dict:
        return {"peer": self.peer, "status": self.status.value, "approved": self.approved_count,
                "entries": [{"step": e.step, "digest": e.digest.hex(), "approval": e.approval}
                            for e in self.entries]}


def record_gradient_hash(record: ReputationRecord, step: int, digest: bytes, signature: bytes,
                         approval: str = PENDING) -> ReputationRecord:
    """Append one entry; a gap in steps or a bad signature bans the peer."""
    if record.status is Status.BANNED:
        return record
    ok = verify(record.public_key, entry_message(record.peer, step, digest), signature, record.mode)
    gap = record.last_step is not None and step != record.last_step + 1
    if not ok or gap:
        record.status = Status.BANNED
        return record
    record.entries.append(Entry(step, bytes(digest), bytes(signature), approval))
    return record


def record_recalculated(record: ReputationRecord, step: int, digest: bytes, signature: bytes):
    """A validator fills the step it skipped with the hash it recomputed."""
    return record_gradient_hash(record, step, digest, signature, approval=RECALCULATED)


def process_validation(record: ReputationRecord, step: int, validator: int, approve: bool,
                       elected: set | None = None) -> ReputationRecord:
    """Apply one validator verdict on the entry at ``step``.

    ``elected`` holds the (validator, peer, step) triples chosen by the
    beacon; a verdict outside that set is ignored and the reporter flagged.
    """
    if record.status is Status.BANNED:
        return record
    if elected is not None and (validator, record.peer, step) not in elected:
        record.flagged.append((validator, step))
        return record
    entry = next((e for e in record.entries if e.step == step), None)
    if entry is None:
        record.flagged.append((validator, step))
        return record
    if not approve:
        record.status = Status.BANNED
        return record
    if entry.approval == PENDING:
        entry.approval = approved_by(validator)
        record.approved_count += 1
    if record.approved_count >= record.threshold and record.status is Status.UNTRUSTED:
        record.status = Status.TRUSTED
    return record


def contributes(record: ReputationRecord) -> bool:
    """Only trusted peers' gradients enter aggregation."""
    return record.status is Status.TRUSTED


class JoinQueue:
    """Admission with at most floor(t/2) simultaneously active untrusted peers."""

    def __init__(self, trusted: int = 0):
        self.trusted = trusted
        self.waiting: deque = deque()
        self.untrusted: dict = {}  # peer -> None, in admission order

    @property
    def cap(self) -> int:
        return self.trusted // 2

    def request(self, peer: int):
        if peer not in self.untrusted and peer not in self.waiting:
            self.waiting.append(peer)
        self.admit()

    def admit(self) -> list:
        admitted = []
        while self.waiting and len(self.untrusted) < self.cap:
            p = self.waiting.popleft()
            self.untrusted[p] = None
            admitted.append(p)
        return admitted

    def _shed(self):
        """A shrinking cap sends the newest untrusted peers back to the head of the line."""
        while len(self.untrusted) > self.cap:
            p = next(reversed(self.untrusted))
            del self.untrusted[p]
            self.waiting.appendleft(p)

    def promote(self, peer: int):
        self.untrusted.pop(peer, None)
        self.trusted += 1
        self.admit()

    def ban(self, peer: int, was_trusted: bool = False):
        self.untrusted.pop(peer, None)
        if was_trusted:
            self.trusted -= 1
            self._shed()
        try:
            self.waiting.remove(peer)
        except ValueError:
            pass
        self.admit()

    def invariant_ok(self) -> bool:
        return len(self.untrusted) <= self.cap


class RecordStore:
    """Signed key-value store; a value is replaced only by a fresher signed one."""

    def __init__(self, mode: str = "crypto"):
        self.mode = mode
        self._data: dict = {}

    @staticmethod
    def signing_bytes(key: str, value: bytes, expiration: int) -> bytes:
        return sha256(canonical_bytes((key, bytes(value), int(expiration))))

    def put(self, key: str, value: bytes, expiration: int, public_key: bytes, signature: bytes) -> bool:
        if not verify(public_key, self.signing_bytes(key, value, expiration), signature, self.mode):
            return False
        old = self._data.get(key)
        if old is not None and (old[2] != public_key or old[1] >= expiration):
            return False
        self._data[key] = (bytes(value), int(expiration), public_key)
        return True

    def get(self, key: str, now: int = 0):
        item = self._data.get(key)
        if item is None or item[1] < now:
            return None
        return item[0]


# --- identity splitting analysis ------------------------------------------------


def sybil_expected_trusted(probabilities, T: int) -> float:
    """Expected number of identities that pass T validations: sum p_i^T."""
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(math.fsum((p ** T).tolist()))


def temporary_majority_probability(m: int, T: int) -> float:
    """Chance that m identities all pass T rounds by luck: m^(-T m)."""
    return float(m) ** (-T * m)


def simulate_split(probabilities, T: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    """Trusted-identity counts of an attacker splitting one compute unit.

    Each validation round the unit computes honestly for identity i with
    probability p_i and the others submit a random digest, which any
    validator rejects. An identity is trusted after T clean rounds.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    total = p.sum()
    if total > 1 + 1e-12:
        raise ValueError("allocation exceeds one compute unit")
    # index len(p) stands for "computed for nobody"
    probs = np.append(p, max(0.0, 1.0 - total))
    choices = rng.choice(len(probs), size=(trials, T), p=probs / probs.sum())
    counts = np.zeros(trials, dtype=np.int64)
    for i in range(len(p)):
        counts += np.all(choices == i, axis=1)
    return counts


def best_allocation_is_degenerate(T: int, trials: int, rng: np.random.Generator, k: int = 4) -> bool:
    """Random allocations over k identities never beat putting everything on one."""
    best = sybil_expected_trusted([1.0] + [0.0] * (k - 1), T)
    for _ in range(trials):
        alloc = rng.dirichlet(np.ones(k))
        if sybil_expected_trusted(alloc, T) > best + 1e-15:
            return False
    return True
