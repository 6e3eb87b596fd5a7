"""Encrypted fragment dispatch with decoy verification.

Payloads are masked with an involutive keystream XOR (the phase mask is
classical here: masking twice with the same key restores the payload).
Headers are padded to a fixed envelope size and sealed with AES-GCM-SIV
(12-byte nonce, 16-byte tag); any modification is rejected on open. A
fraction of decoy envelopes with client-known expected outcomes detects
tampering; the batch aborts when the decoy pass rate falls below
1 - eps_ver.

Keystream construction (reference for the independent XOR oracle in tests):
block i of the keystream is SHA-256(key || i as 8-byte big-endian), blocks
concatenated and truncated to the payload length.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from collections.abc import MutableMapping, Sequence
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCMSIV

from .errors import AuthenticationError, ConfigurationError, DomainError, ProtocolError

NONCE_LEN = 12
TAG_LEN = 16
LEN_FIELD = 2


@lru_cache(maxsize=128)
def _cipher(header_key: bytes) -> AESGCMSIV:
    # Key schedule setup dominates small-envelope cost; reuse per batch key.
    return AESGCMSIV(header_key)


@dataclass(frozen=True)
class SecurityParams:
    lam: int = 128
    eta: float = 0.02
    eps_ver: float = 0.1
    envelope_size: int = 288
    header_cap: int = 256

    def __post_init__(self) -> None:
        if self.lam < 2:
            raise ConfigurationError("security parameter too small")
        if not 0 <= self.eta < 1:
            raise ConfigurationError("decoy rate must be in [0,1)")
        if not 0 < self.eps_ver < 1:
            raise ConfigurationError("verification threshold must be in (0,1)")
        if self.envelope_size < NONCE_LEN + TAG_LEN + LEN_FIELD + self.header_cap:
            raise ConfigurationError("envelope too small for the header cap")

    @property
    def key_bits(self) -> int:
        """Per-fragment key length a = ceil(lam/2)."""
        return (self.lam + 1) // 2

    @property
    def padded_len(self) -> int:
        return self.envelope_size - NONCE_LEN - TAG_LEN


def keygen(params: SecurityParams, rng: np.random.Generator) -> bytes:
    """Fresh per-fragment key of exactly key_bits random bits."""
    a = params.key_bits
    nbytes = (a + 7) // 8
    raw = bytearray(rng.bytes(nbytes))
    excess = 8 * nbytes - a
    if excess:
        raw[0] &= 0xFF >> excess
    return bytes(raw)


def keystream(key: bytes, length: int) -> bytes:
    """SHA-256 counter expansion of the key to `length` bytes."""
    if not key:
        raise DomainError("empty key")
    blocks = []
    for i in range((length + 31) // 32):
        blocks.append(hashlib.sha256(key + i.to_bytes(8, "big")).digest())
    return b"".join(blocks)[:length]


def mask_payload(payload: bytes, key: bytes) -> bytes:
    """Involutive keyed mask: XOR with the key-derived keystream."""
    ks = keystream(key, len(payload))
    if not payload:
        return b""
    return np.bitwise_xor(
        np.frombuffer(payload, dtype=np.uint8), np.frombuffer(ks, dtype=np.uint8)
    ).tobytes()


def seal_header(header: bytes, header_key: bytes, nonce: bytes, params: SecurityParams) -> bytes:
    """Pad to the fixed envelope size and seal: nonce || AEAD(len || header || zeros)."""
    if len(header) > params.header_cap:
        raise DomainError(f"header of {len(header)} bytes exceeds cap {params.header_cap}")
    if len(nonce) != NONCE_LEN:
        raise DomainError(f"nonce must be {NONCE_LEN} bytes")
    padded = len(header).to_bytes(LEN_FIELD, "big") + header
    padded += b"\x00" * (params.padded_len - len(padded))
    sealed = nonce + _cipher(header_key).encrypt(nonce, padded, None)
    assert len(sealed) == params.envelope_size
    return sealed


def open_header(sealed: bytes, header_key: bytes, params: SecurityParams) -> bytes:
    """Authenticate and recover the header; rejects any modification."""
    if len(sealed) != params.envelope_size:
        raise AuthenticationError(f"sealed header has {len(sealed)} bytes, expected {params.envelope_size}")
    nonce, ct = sealed[:NONCE_LEN], sealed[NONCE_LEN:]
    try:
        padded = _cipher(header_key).decrypt(nonce, ct, None)
    except InvalidTag as exc:
        raise AuthenticationError("envelope failed authentication") from exc
    n = int.from_bytes(padded[:LEN_FIELD], "big")
    if n > params.header_cap:
        raise AuthenticationError("authenticated header declares an oversized length")
    return padded[LEN_FIELD : LEN_FIELD + n]


@dataclass(frozen=True)
class Fragment:
    fragment_id: str
    payload: bytes
    shots: int = 0


@dataclass(frozen=True)
class Envelope:
    """Wire unit. is_decoy is client bookkeeping, not part of the wire format."""

    fragment_id: str
    sealed_header: bytes
    masked_payload: bytes
    shots: int
    is_decoy: bool = False


@dataclass
class ClientRecords:
    """Client-side state needed to verify and recover a dispatched batch."""

    batch_id: str
    header_key: bytes
    keys: dict[str, bytes]
    decoy_expected: dict[str, bytes]
    original_shots: dict[str, int]


@dataclass
class AuditLog:
    """Append-only event sink; optionally mirrored to a JSON-lines file."""

    path: str | None = None
    events: list[dict] = field(default_factory=list)

    def append(self, **event: object) -> None:
        record = {"timestamp": time.time(), **event}
        self.events.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass(frozen=True)
class VerificationReport:
    decoy_pass_rate: float
    envelopes_rejected: int
    decision: str  # "accept" | "abort"

    def __post_init__(self) -> None:
        if not 0 <= self.decoy_pass_rate <= 1:
            raise DomainError("pass rate must be in [0,1]")
        if self.decision not in ("accept", "abort"):
            raise DomainError("decision must be accept or abort")


def _now_op(timings: MutableMapping[str, float] | None, op: str, start: float) -> None:
    if timings is not None:
        timings[op] = timings.get(op, 0.0) + (time.perf_counter() - start)


_warmed = False


def _warm_crypto(params: SecurityParams) -> None:
    """One-time process warmup so measured op timings reflect steady state."""
    global _warmed
    if _warmed:
        return
    key = b"\x00" * 32
    sealed = seal_header(b"", key, b"\x00" * NONCE_LEN, params)
    open_header(sealed, key, params)
    mask_payload(b"\x00" * 64, b"\x01")
    _warmed = True


def dispatch(
    fragments: Sequence[Fragment],
    params: SecurityParams,
    rng: np.random.Generator,
    batch_id: str = "batch-0",
    timings: MutableMapping[str, float] | None = None,
) -> tuple[list[Envelope], ClientRecords]:
    """Mask, seal, and shuffle a batch with floor(eta*N) decoys.

    Decoy shot counts are sampled from the real shot multiset so the padded,
    shuffled shot vector carries no positional information.
    """
    if not fragments:
        raise DomainError("nothing to dispatch")
    ids = [f.fragment_id for f in fragments]
    if len(set(ids)) != len(ids):
        raise ProtocolError("fragment ids must be unique within a batch")
    _warm_crypto(params)

    n = len(fragments)
    n_decoys = math.floor(params.eta * n)
    header_key = rng.bytes(32)
    records = ClientRecords(
        batch_id=batch_id,
        header_key=header_key,
        keys={},
        decoy_expected={},
        original_shots={f.fragment_id: f.shots for f in fragments},
    )

    work: list[tuple[str, bytes, int, bool]] = [
        (f.fragment_id, f.payload, f.shots, False) for f in fragments
    ]
    shot_pool = [f.shots for f in fragments]
    for i in range(n_decoys):
        did = f"decoy-{batch_id}-{i}"
        outcome = rng.bytes(32)
        records.decoy_expected[did] = outcome
        shots = int(shot_pool[int(rng.integers(0, len(shot_pool)))])
        work.append((did, outcome, shots, True))

    envelopes: list[Envelope] = []
    seen_nonces: set[bytes] = set()
    for fid, payload, shots, is_decoy in work:
        key = keygen(params, rng)
        records.keys[fid] = key
        t0 = time.perf_counter()
        masked = mask_payload(payload, key)
        _now_op(timings, "mask", t0)
        nonce = rng.bytes(NONCE_LEN)
        while nonce in seen_nonces:  # 96-bit space; collision is theoretical
            nonce = rng.bytes(NONCE_LEN)
        seen_nonces.add(nonce)
        header = fid.encode("utf-8")
        t0 = time.perf_counter()
        sealed = seal_header(header, header_key, nonce, params)
        _now_op(timings, "seal", t0)
        envelopes.append(
            Envelope(fragment_id=fid, sealed_header=sealed, masked_payload=masked,
                     shots=shots, is_decoy=is_decoy)
        )

    order = rng.permutation(len(envelopes))
    return [envelopes[int(i)] for i in order], records


def verify_and_recover(
    batch: Sequence[Envelope],
    params: SecurityParams,
    records: ClientRecords,
    audit: AuditLog | None = None,
    timings: MutableMapping[str, float] | None = None,
) -> tuple[VerificationReport, dict[str, bytes]]:
    """Open, unmask, and check decoys; abort below the pass-rate threshold.

    Tampered envelopes are dropped and counted; the batch-level decision
    comes only from the decoy pass rate. On abort the keys are considered
    rotated and an audit event is appended.
    """
    rejected = 0
    decoys_seen = 0
    decoys_passed = 0
    recovered: dict[str, bytes] = {}
    for env in batch:
        if env.fragment_id not in records.keys:
            raise ProtocolError(f"unknown fragment id {env.fragment_id!r}")
        t0 = time.perf_counter()
        try:
            header = open_header(env.sealed_header, records.header_key, params)
        except AuthenticationError:
            _now_op(timings, "open", t0)
            rejected += 1
            if env.fragment_id in records.decoy_expected:
                decoys_seen += 1
            continue
        _now_op(timings, "open", t0)
        fid = header.decode("utf-8")
        if fid != env.fragment_id:
            rejected += 1
            continue
        t0 = time.perf_counter()
        payload = mask_payload(env.masked_payload, records.keys[fid])
        _now_op(timings, "unmask", t0)
        if fid in records.decoy_expected:
            decoys_seen += 1
            if payload == records.decoy_expected[fid]:
                decoys_passed += 1
        else:
            recovered[fid] = payload

    pass_rate = 1.0 if decoys_seen == 0 else decoys_passed / decoys_seen
    decision = "accept" if pass_rate >= 1.0 - params.eps_ver else "abort"
    if decision == "abort":
        if audit is not None:
            audit.append(
                batch_id=records.batch_id,
                cause="decoy-pass-rate",
                pass_rate=pass_rate,
                eps_ver=params.eps_ver,
                rejected=rejected,
                content_hash=hashlib.sha256(
                    b"".join(sorted(e.sealed_header for e in batch))
                ).hexdigest(),
                keys_rotated=True,
            )
        recovered = {}
    report = VerificationReport(
        decoy_pass_rate=pass_rate, envelopes_rejected=rejected, decision=decision
    )
    return report, recovered


def detection_lower_bound(n: int, h: int, k: int) -> float:
    """Probability of catching at least one of k altered envelopes: 1-(1-h/N)^k."""
    if not 0 <= h <= n or k < 0:
        raise DomainError("need 0 <= h <= N and k >= 0")
    if n == 0:
        return 0.0
    return 1.0 - (1.0 - h / n) ** k


def accept_incorrect_bound(h: int, eps_ver: float) -> float:
    """Hoeffding bound on accepting a corrupted batch: exp(-2 h eps_ver^2)."""
    if h < 0:
        raise DomainError("decoy count must be nonnegative")
    if not 0 < eps_ver < 1:
        raise DomainError("eps_ver must be in (0,1)")
    return math.exp(-2.0 * h * eps_ver * eps_ver)
