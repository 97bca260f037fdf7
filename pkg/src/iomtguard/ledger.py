"""Single-node hash-chained ledger with HMAC-authenticated device requests.

Serialization is canonical: every field is written in declared order,
integers as 8-byte big-endian, byte strings and text as a 4-byte
big-endian length followed by the raw bytes. Block hashes are SHA-256
over that encoding, so they reproduce bit-for-bit on any platform.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import json
import os
import struct
import threading
import time
from dataclasses import dataclass, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, Iterable, List, MutableSet, Optional, Tuple, Union

HASH_LEN = 32
NONCE_LEN = 16
KEY_LEN = 32
ZERO_HASH = bytes(HASH_LEN)


class LedgerError(RuntimeError):
    pass


_LEN = struct.Struct(">I")
_HEAD = struct.Struct(">qqI")


def _u64(n: int) -> bytes:
    return struct.pack(">q", n)


def _blob(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def _text(s: str) -> bytes:
    return _blob(s.encode("utf-8", "surrogateescape"))


def system_clock() -> int:
    return time.time_ns() // 1_000_000


class LogicalClock:
    """Deterministic millisecond clock: returns start, start+step, ..."""

    def __init__(self, start: int = 1_700_000_000_000, step: int = 1):
        self._now = start
        self._step = step

    def __call__(self) -> int:
        now = self._now
        self._now += self._step
        return now


# ----------------------------------------------------------- devices

class DeviceRegistry:
    """device_id -> pre-shared 32-byte secret."""

    def __init__(self, keys: Optional[Dict[str, bytes]] = None):
        self._keys: Dict[str, bytes] = dict(keys or {})

    def enroll(self, device_id: str, rng=None) -> bytes:
        if device_id in self._keys:
            raise LedgerError(f"device {device_id!r} already enrolled")
        key = rng.bytes(KEY_LEN) if rng is not None else os.urandom(KEY_LEN)
        self._keys[device_id] = key
        return key

    def key(self, device_id: str) -> Optional[bytes]:
        return self._keys.get(device_id)

    def __contains__(self, device_id) -> bool:
        return device_id in self._keys

    def __len__(self):
        return len(self._keys)

    def devices(self) -> List[str]:
        return sorted(self._keys)

    def save(self, path) -> None:
        obj = {d: k.hex() for d, k in sorted(self._keys.items())}
        Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DeviceRegistry":
        with open(path, encoding="utf-8") as fh:
            return cls({d: bytes.fromhex(k) for d, k in json.load(fh).items()})


@dataclass(frozen=True)
class SignedRequest:
    device_id: str
    nonce: bytes
    timestamp: int
    payload: bytes
    tag: bytes = b""

    def signed_bytes(self) -> bytes:
        return _text(self.device_id) + _blob(self.nonce) + _u64(self.timestamp) + _blob(self.payload)

    def serialize(self) -> bytes:
        return self.signed_bytes() + _blob(self.tag)

    def digest(self) -> bytes:
        return hashlib.sha256(self.serialize()).digest()


class RequestVerdict(str, enum.Enum):
    VALID = "valid"
    BAD_TAG = "bad_tag"
    REPLAY = "replay"
    UNKNOWN_DEVICE = "unknown_device"


def sign_request(registry: DeviceRegistry, device_id: str, payload: bytes, rng=None,
                 clock: Callable[[], int] = system_clock) -> SignedRequest:
    key = registry.key(device_id)
    if key is None:
        raise LedgerError(f"device not enrolled: {device_id!r}")
    nonce = rng.bytes(NONCE_LEN) if rng is not None else os.urandom(NONCE_LEN)
    req = SignedRequest(device_id, nonce, int(clock()), bytes(payload))
    tag = hmac.new(key, req.signed_bytes(), hashlib.sha256).digest()
    return replace(req, tag=tag)


def verify_request(registry: DeviceRegistry, req: SignedRequest,
                   seen_nonces: MutableSet[Tuple[str, bytes]]) -> RequestVerdict:
    """Check device, MAC, then nonce freshness.

    A valid request's ``(device_id, nonce)`` is added to ``seen_nonces``,
    so presenting it again yields ``REPLAY``.
    """
    key = registry.key(req.device_id)
    if key is None:
        return RequestVerdict.UNKNOWN_DEVICE
    expected = hmac.new(key, req.signed_bytes(), hashlib.sha256).digest()
    if not hmac.compare_digest(expected, req.tag):
        return RequestVerdict.BAD_TAG
    ident = (req.device_id, req.nonce)
    if ident in seen_nonces:
        return RequestVerdict.REPLAY
    seen_nonces.add(ident)
    return RequestVerdict.VALID


# ------------------------------------------------------------- blocks

@dataclass(frozen=True)
class Block:
    index: int
    timestamp: int
    prev_hash: bytes
    payload_hash: bytes
    verdict: str
    reason: str
    countersig: bytes
    block_hash: bytes

    def body_bytes(self) -> bytes:
        verdict = self.verdict.encode("utf-8", "surrogateescape")
        reason = self.reason.encode("utf-8", "surrogateescape")
        return b"".join((
            _HEAD.pack(self.index, self.timestamp, len(self.prev_hash)), self.prev_hash,
            _LEN.pack(len(self.payload_hash)), self.payload_hash,
            _LEN.pack(len(verdict)), verdict, _LEN.pack(len(reason)), reason,
            _LEN.pack(len(self.countersig)), self.countersig,
        ))

    def compute_hash(self) -> bytes:
        return hashlib.sha256(self.body_bytes()).digest()

    @cached_property
    def body_digest(self) -> bytes:
        # frozen fields, so the digest of the body can be memoized per instance
        return self.compute_hash()

    def to_json(self) -> dict:
        return {
            "index": self.index, "timestamp": self.timestamp,
            "prev_hash": self.prev_hash.hex(), "payload_hash": self.payload_hash.hex(),
            "verdict": self.verdict, "reason": self.reason,
            "countersig": self.countersig.hex(), "block_hash": self.block_hash.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Block":
        return cls(int(obj["index"]), int(obj["timestamp"]), bytes.fromhex(obj["prev_hash"]),
                   bytes.fromhex(obj["payload_hash"]), obj["verdict"], obj["reason"],
                   bytes.fromhex(obj.get("countersig", "")), bytes.fromhex(obj["block_hash"]))


FIELD_NAMES = tuple(f.name for f in fields(Block))


def make_block(index, timestamp, prev_hash, payload_hash, verdict, reason, countersig=b"") -> Block:
    draft = Block(index, timestamp, prev_hash, payload_hash, verdict, reason, countersig, b"")
    return replace(draft, block_hash=draft.compute_hash())


GENESIS = make_block(0, 0, ZERO_HASH, hashlib.sha256(b"genesis").digest(), "accepted", "genesis")


@dataclass(frozen=True)
class ChainStatus:
    ok: bool
    broken_at: Optional[int] = None
    cause: Optional[str] = None  # hash_mismatch | link_mismatch | index_gap

    def __bool__(self):
        return self.ok


class Ledger:
    """Append-only list of blocks starting at the fixed genesis block.

    Appends go through a lock; committed blocks are immutable.
    """

    def __init__(self, blocks: Optional[Iterable[Block]] = None):
        self.blocks: List[Block] = list(blocks) if blocks is not None else [GENESIS]
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, i) -> Block:
        return self.blocks[i]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def export_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for b in self.blocks:
                fh.write(json.dumps(b.to_json(), sort_keys=True) + "\n")

    @classmethod
    def import_jsonl(cls, path) -> "Ledger":
        blocks = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        blocks.append(Block.from_json(json.loads(line)))
                    except (KeyError, ValueError) as exc:
                        raise LedgerError(f"line {lineno}: malformed block ({exc})") from None
        return cls(blocks)


def verify_chain(ledger: Union[Ledger, List[Block]]) -> ChainStatus:
    """Full scan; reports the first violation."""
    blocks = ledger.blocks if isinstance(ledger, Ledger) else ledger
    if not blocks:
        return ChainStatus(False, 0, "index_gap")
    expected_prev = ZERO_HASH
    for pos, b in enumerate(blocks):
        if b.index != pos:
            return ChainStatus(False, pos, "index_gap")
        if b.prev_hash != expected_prev:
            return ChainStatus(False, pos, "link_mismatch")
        if b.body_digest != b.block_hash:
            return ChainStatus(False, pos, "hash_mismatch")
        expected_prev = b.block_hash
    return ChainStatus(True)


def _tip_valid(ledger: Ledger) -> bool:
    tip = ledger.tip
    if tip.index != len(ledger) - 1 or tip.compute_hash() != tip.block_hash:
        return False
    if len(ledger) == 1:
        return tip.prev_hash == ZERO_HASH
    return tip.prev_hash == ledger.blocks[-2].block_hash


def append_block(ledger: Ledger, req: Optional[SignedRequest], verdict: str, reason: str = "",
                 clock: Callable[[], int] = system_clock, countersig: bytes = b"",
                 payload_hash: Optional[bytes] = None) -> Block:
    """Chain a block recording ``req`` (its SHA-256) and the verdict.

    Only the tip is re-checked here, keeping appends O(1); ``verify_chain``
    does the full audit.
    """
    if verdict not in ("accepted", "rejected"):
        raise ValueError(f"verdict must be accepted/rejected, not {verdict!r}")
    if payload_hash is None:
        if req is None:
            raise ValueError("need a request or a payload hash")
        payload_hash = req.digest()
    with ledger._lock:
        if not _tip_valid(ledger):
            raise LedgerError("chain invalid, refusing append")
        tip = ledger.tip
        block = make_block(tip.index + 1, int(clock()), tip.block_hash, payload_hash,
                           verdict, reason, countersig)
        ledger.blocks.append(block)
    return block


# ---------------------------------------------------- field mutation

def field_bytes(block: Block, name: str) -> bytes:
    """Raw serialized bytes of one field (without its length prefix)."""
    v = getattr(block, name)
    if isinstance(v, int):
        return _u64(v)
    if isinstance(v, str):
        return v.encode("utf-8", "surrogateescape")
    return v


def with_field_bytes(block: Block, name: str, raw: bytes) -> Block:
    """Copy of ``block`` whose field ``name`` decodes from ``raw``."""
    current = getattr(block, name)
    if isinstance(current, int):
        value = struct.unpack(">q", raw)[0]
    elif isinstance(current, str):
        value = raw.decode("utf-8", "surrogateescape")
    else:
        value = bytes(raw)
    return replace(block, **{name: value})
