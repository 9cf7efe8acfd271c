"""Canonical serialization, hashing, signatures and the commit-reveal beacon.

Byte layout of ``canonical_bytes``: one tag byte, then

==========  ====  ==========================================================
type        tag   body
==========  ====  ==========================================================
None        0x00  (empty)
float vec   0x01  u64 length, then float64 little-endian per entry
bytes       0x02  u64 length, raw bytes
int         0x03  i64 little-endian
float       0x04  float64 little-endian
str         0x05  u64 length, utf-8
sequence    0x06  u64 count, then each element encoded recursively
bool        0x07  one byte 0/1
==========  ====  ==========================================================

All lengths are 8-byte little-endian unsigned.
"""
from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

HASH_MODES = ("crypto", "fast-sim")

_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


def canonical_bytes(value) -> bytes:
    out = bytearray()
    _encode(value, out)
    return bytes(out)


def _enc_float(value, out):
    out.append(0x04)
    out += _F64.pack(value)


def _enc_int(value, out):
    out.append(0x03)
    out += _I64.pack(value)


def _enc_bool(value, out):
    out.append(0x07)
    out.append(1 if value else 0)


def _enc_bytes(value, out):
    out.append(0x02)
    out += _U64.pack(len(value))
    out += value


def _enc_seq(value, out):
    out.append(0x06)
    out += _U64.pack(len(value))
    for item in value:
        fast = _FAST.get(type(item))
        if fast is not None:
            fast(item, out)
        else:
            _encode(item, out)


# exact builtin types skip the isinstance chain; the bytes are identical
_FAST = {float: _enc_float, int: _enc_int, bool: _enc_bool, bytes: _enc_bytes, tuple: _enc_seq, list: _enc_seq}


def _encode(value, out: bytearray):
    fast = _FAST.get(type(value))
    if fast is not None:
        fast(value, out)
    elif value is None:
        out.append(0x00)
    elif isinstance(value, np.ndarray):
        arr = np.ascontiguousarray(value, dtype="<f8").ravel()
        out.append(0x01)
        out += _U64.pack(arr.shape[0])
        out += arr.tobytes()
    elif isinstance(value, (bytes, bytearray)):
        out.append(0x02)
        out += _U64.pack(len(value))
        out += value
    elif isinstance(value, (bool, np.bool_)):
        out.append(0x07)
        out.append(1 if value else 0)
    elif isinstance(value, (int, np.integer)):
        out.append(0x03)
        out += _I64.pack(int(value))
    elif isinstance(value, (float, np.floating)):
        out.append(0x04)
        out += _F64.pack(float(value))
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(0x05)
        out += _U64.pack(len(raw))
        out += raw
    elif isinstance(value, (list, tuple)):
        out.append(0x06)
        out += _U64.pack(len(value))
        for item in value:
            _encode(item, out)
    else:
        raise TypeError(f"no canonical encoding for {type(value).__name__}")


class Hasher:
    """SHA-256 by default; ``fast-sim`` swaps in a 128-bit BLAKE2b digest.

    The fast mode exists for large Monte-Carlo runs only and is never the
    default.
    """

    def __init__(self, mode: str = "crypto"):
        if mode not in HASH_MODES:
            raise ValueError(f"unknown hash mode {mode!r}; expected one of {HASH_MODES}")
        self.mode = mode
        self.digest_size = 32 if mode == "crypto" else 16

    def digest(self, data: bytes) -> bytes:
        if self.mode == "crypto":
            return hashlib.sha256(data).digest()
        return hashlib.blake2b(data, digest_size=16).digest()

    def of(self, value) -> bytes:
        return self.digest(canonical_bytes(value))


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# --- signatures -----------------------------------------------------------

_FAST_KEYS: dict = {}


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes = field(repr=False)
    mode: str = "crypto"

    @classmethod
    def generate(cls, seed: bytes | None = None, mode: str = "crypto") -> "KeyPair":
        secret = sha256(b"btard-key" + seed) if seed is not None else os.urandom(32)
        if mode == "crypto":
            sk = Ed25519PrivateKey.from_private_bytes(secret)
            pub = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        elif mode == "fast-sim":
            # keyed-MAC stand-in: the simulator keeps the registry that makes
            # verification possible; outside the simulator this is not a
            # signature scheme.
            pub = hashlib.blake2b(secret, digest_size=32, person=b"btard-pub").digest()
            _FAST_KEYS[pub] = secret
        else:
            raise ValueError(f"unknown hash mode {mode!r}")
        return cls(pub, secret, mode)

    def sign(self, message: bytes) -> bytes:
        if self.mode == "crypto":
            return Ed25519PrivateKey.from_private_bytes(self.secret).sign(message)
        return hmac.new(self.secret, message, "blake2b").digest()[:32]


def verify(public: bytes, message: bytes, signature: bytes, mode: str = "crypto") -> bool:
    if mode == "crypto":
        try:
            Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
            return True
        except (InvalidSignature, ValueError):
            return False
    secret = _FAST_KEYS.get(public)
    if secret is None:
        return False
    expected = hmac.new(secret, message, "blake2b").digest()[:32]
    return hmac.compare_digest(expected, signature)


class Signer:
    """Caches the Ed25519 key object; signing dominates simulated message cost."""

    def __init__(self, keys: KeyPair):
        self.keys = keys
        self._sk = Ed25519PrivateKey.from_private_bytes(keys.secret) if keys.mode == "crypto" else None

    @property
    def public(self) -> bytes:
        return self.keys.public

    def sign(self, message: bytes) -> bytes:
        if self._sk is not None:
            return self._sk.sign(message)
        return self.keys.sign(message)


# --- multi-party random number generator ----------------------------------

MPRNG_BYTES = 32  # 256-bit output
SALT_BYTES = 32


class Phase(Enum):
    COMMIT = "Commit"
    REVEAL = "Reveal"
    DONE = "Done"
    ABORTED = "Aborted"


class StateError(RuntimeError):
    pass


def commitment(peer: int, x: bytes, salt: bytes) -> bytes:
    return sha256(_U64.pack(peer) + x + salt)


class MprngSession:
    """Commit-reveal XOR beacon over an ordered set of participants.

    Violations are collected as ``(peer, reason)`` pairs instead of raised, so
    the caller can ban and call :meth:`restart`.
    """

    def __init__(self, participants, k_bytes: int = MPRNG_BYTES, round_index: int = 0):
        self.participants = tuple(participants)
        if len(set(self.participants)) != len(self.participants):
            raise ValueError("duplicate participant ids")
        self.k_bytes = k_bytes
        self.round_index = round_index
        self.phase = Phase.COMMIT if self.participants else Phase.ABORTED
        self.commitments: dict = {}
        self.reveals: dict = {}
        self.violations: list = []
        self._output: bytes | None = None

    def _flag(self, peer, reason):
        self.violations.append((peer, reason))

    def commit(self, peer: int, digest: bytes) -> bool:
        if peer not in self.participants:
            self._flag(peer, "not a participant")
            return False
        if self.phase is not Phase.COMMIT:
            self._flag(peer, "commit outside commit phase")
            return False
        if peer in self.commitments:
            if self.commitments[peer] != digest:
                self._flag(peer, "contradicting commitment")
            return False
        self.commitments[peer] = digest
        if len(self.commitments) == len(self.participants):
            self.phase = Phase.REVEAL
        return True

    def close_commits(self):
        """Deadline for commitments: silent peers are flagged."""
        if self.phase is not Phase.COMMIT:
            return
        for p in self.participants:
            if p not in self.commitments:
                self._flag(p, "missing commitment")
        self.phase = Phase.ABORTED

    def reveal(self, peer: int, x: bytes, salt: bytes) -> bool:
        if self.phase not in (Phase.REVEAL, Phase.ABORTED) or peer not in self.commitments:
            self._flag(peer, "reveal before all commitments")
            return False
        if peer in self.reveals:
            if self.reveals[peer] != (x, salt):
                self._flag(peer, "contradicting reveal")
            return False
        if len(x) != self.k_bytes or commitment(peer, x, salt) != self.commitments[peer]:
            self._flag(peer, "reveal does not match commitment")
            self.phase = Phase.ABORTED
            return False
        self.reveals[peer] = (x, salt)
        if self.phase is Phase.REVEAL and len(self.reveals) == len(self.participants) and not self.violations:
            acc = bytearray(self.k_bytes)
            for p in self.participants:
                for i, byte in enumerate(self.reveals[p][0]):
                    acc[i] ^= byte
            self._output = bytes(acc)
            self.phase = Phase.DONE
        return True

    def close_reveals(self):
        """Deadline for reveals: peers that stayed silent abort the session."""
        if self.phase is Phase.DONE:
            return
        for p in self.participants:
            if p in self.commitments and p not in self.reveals:
                self._flag(p, "missing reveal")
        self.phase = Phase.ABORTED

    @property
    def output(self) -> bytes:
        if self.phase is not Phase.DONE:
            raise StateError(f"MPRNG output requested in phase {self.phase.value}")
        return self._output

    def offenders(self) -> list:
        return sorted({p for p, _ in self.violations})

    def restart(self) -> "MprngSession":
        bad = set(self.offenders())
        return MprngSession([p for p in self.participants if p not in bad], self.k_bytes,
                            self.round_index + 1)


def derive(output, tag) -> bytes:
    """Per-purpose sub-seed ``H(output || tag)``."""
    if isinstance(output, MprngSession):
        output = output.output
    if isinstance(tag, str):
        tag = tag.encode()
    return sha256(bytes(output) + bytes(tag))
