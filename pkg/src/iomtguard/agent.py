"""Three-stage request handling: authenticate, pattern check, classify.

Every handled request appends exactly one ledger block. Accepted blocks
carry an HMAC countersignature by the agent key over the payload hash;
rejected blocks are recorded hash-only.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import hmac
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bilstm import BiLstmModel, predict_proba_sequences, to_sequences
from .data import Dataset, FeatureMask
from .ledger import (DeviceRegistry, Ledger, LogicalClock, RequestVerdict, SignedRequest,
                     append_block, sign_request, system_clock, verify_chain, verify_request)
from .metrics import confusion, detection_rate, false_alarm_rate
from .patterns import DEFAULT_K, DEFAULT_THETA, PatternStore

_U32 = struct.Struct(">I")


class Stage(str, enum.Enum):
    AUTH = "phase1_auth"
    PATTERN = "phase2_pattern"
    CLASSIFIER = "phase3_classifier"


class PayloadError(ValueError):
    pass


def encode_payload(request_id: str, features) -> bytes:
    """Length-prefixed UTF-8 id, u32 count, then big-endian float64 values."""
    x = np.asarray(features, dtype=">f8").ravel()
    rid = request_id.encode("utf-8")
    return _U32.pack(len(rid)) + rid + _U32.pack(x.size) + x.tobytes()


def decode_payload(payload: bytes, n_features: Optional[int] = None) -> Tuple[str, np.ndarray]:
    try:
        (n,) = _U32.unpack_from(payload, 0)
        rid = payload[4:4 + n].decode("utf-8")
        if len(rid.encode("utf-8")) != n:
            raise PayloadError("truncated request id")
        (count,) = _U32.unpack_from(payload, 4 + n)
    except (struct.error, UnicodeDecodeError) as exc:
        raise PayloadError(f"malformed header ({exc})") from None
    body = payload[8 + n:]
    if len(body) != 8 * count:
        raise PayloadError(f"declared {count} values, body holds {len(body)} bytes")
    if n_features is not None and count != n_features:
        raise PayloadError(f"expected {n_features} features, got {count}")
    x = np.frombuffer(body, dtype=">f8").astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise PayloadError("non-finite feature value")
    return rid, x


@dataclass
class AgentConfig:
    theta: float = DEFAULT_THETA
    k: int = DEFAULT_K
    model_path: Optional[str] = None
    mask_path: Optional[str] = None
    registry_path: Optional[str] = None
    patterns_path: Optional[str] = None
    fast_path_enabled: bool = True

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("theta must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Decision:
    request_id: str
    outcome: str  # accepted | rejected
    stage: Stage
    reason: str
    block_index: int
    probabilities: Optional[List[float]] = None
    predicted: Optional[int] = None
    pattern_id: Optional[int] = None

    @property
    def rejected(self) -> bool:
        return self.outcome == "rejected"


class SecurityAgent:
    """Holds the model, feature mask, pattern store, device registry and ledger.

    ``handle_request`` is not re-entrant; callers serialize requests.
    """

    def __init__(self, model: BiLstmModel, mask: FeatureMask, store: PatternStore,
                 registry: DeviceRegistry, agent_key: bytes, config: Optional[AgentConfig] = None,
                 ledger: Optional[Ledger] = None, clock=system_clock, benign_class: int = 0):
        self.model = model
        self.mask = mask
        self.store = store
        self.registry = registry
        self.agent_key = bytes(agent_key)
        self.config = config or AgentConfig()
        self.ledger = ledger if ledger is not None else Ledger()
        self.clock = clock
        self.benign_class = benign_class
        self.seen_nonces: set = set()
        self.classifier_calls = 0
        if len(mask) != store.dim:
            raise ValueError(f"mask length {len(mask)} != pattern dimension {store.dim}")
        if mask.count != model.n_features:
            raise ValueError(f"mask selects {mask.count} features, model expects {model.n_features}")

    @classmethod
    def from_config(cls, config: AgentConfig, agent_key: bytes, **kw) -> "SecurityAgent":
        model = BiLstmModel.load(config.model_path)
        with open(config.mask_path, encoding="utf-8") as fh:
            mask = FeatureMask(json.load(fh)["mask"])
        registry = DeviceRegistry.load(config.registry_path)
        store = PatternStore.import_jsonl(config.patterns_path)
        return cls(model, mask, store, registry, agent_key, config, benign_class=store.benign_class, **kw)

    def _finish(self, req, outcome, stage, reason, **extra) -> Decision:
        payload_hash = req.digest()
        sig = hmac.new(self.agent_key, payload_hash, hashlib.sha256).digest() if outcome == "accepted" else b""
        block = append_block(self.ledger, None, outcome, f"{stage.value}:{reason}", self.clock,
                             countersig=sig, payload_hash=payload_hash)
        return Decision(extra.pop("request_id", ""), outcome, stage, reason, block.index, **extra)

    def classify(self, x: np.ndarray) -> np.ndarray:
        self.classifier_calls += 1
        seq = to_sequences(x[self.mask.indices][None, :], self.model.seq_len)
        return predict_proba_sequences(self.model, seq)[0]

    def handle_request(self, req: SignedRequest) -> Decision:
        verdict = verify_request(self.registry, req, self.seen_nonces)
        if verdict is not RequestVerdict.VALID:
            return self._finish(req, "rejected", Stage.AUTH, verdict.value)
        try:
            rid, raw = decode_payload(req.payload, self.store.dim)
        except PayloadError:
            return self._finish(req, "rejected", Stage.AUTH, "malformed")
        x = np.clip(raw, 0.0, 1.0)

        m = self.store.match(x, self.config.theta, self.config.k)
        if m.recognized:
            if m.label != self.benign_class:
                return self._finish(req, "rejected", Stage.PATTERN, "known_attack", request_id=rid,
                                    predicted=m.label, pattern_id=m.pattern_id)
            if self.config.fast_path_enabled:
                return self._finish(req, "accepted", Stage.PATTERN, "known_benign", request_id=rid,
                                    predicted=m.label, pattern_id=m.pattern_id)

        probs = self.classify(x)
        label = int(np.argmax(probs))
        if label != self.benign_class:
            self.store.record_attack(x, label)
            return self._finish(req, "rejected", Stage.CLASSIFIER, "classified_attack", request_id=rid,
                                probabilities=probs.tolist(), predicted=label)
        return self._finish(req, "accepted", Stage.CLASSIFIER, "classified_benign", request_id=rid,
                            probabilities=probs.tolist(), predicted=label)


# ------------------------------------------------------------ streams

@dataclass
class LabeledRequest:
    request: SignedRequest
    label: int
    is_attack: bool


@dataclass
class StreamReport:
    dr: float
    far: float
    per_stage_counts: Dict[str, Dict[str, int]]
    confusion: Dict[str, int]
    n_requests: int
    attack_percentage: float
    chain_ok: bool
    ledger_blocks: int
    ledger_path: Optional[str] = None
    decisions: List[Decision] = field(default_factory=list, repr=False)
    truth: List[int] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"dr": self.dr, "far": self.far, "per_stage_counts": self.per_stage_counts,
                "confusion": self.confusion, "n_requests": self.n_requests,
                "attack_percentage": self.attack_percentage, "chain_ok": self.chain_ok,
                "ledger_blocks": self.ledger_blocks, "ledger_path": self.ledger_path}

    def write_decisions_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["request_id", "true_label", "is_attack", "outcome", "stage", "reason",
                        "predicted", "pattern_id", "block_index"])
            for d, lab in zip(self.decisions, self.truth):
                w.writerow([d.request_id, lab[0], int(lab[1]), d.outcome, d.stage.value, d.reason,
                            "" if d.predicted is None else d.predicted,
                            "" if d.pattern_id is None else d.pattern_id, d.block_index])


def _check_ap(attack_percentage: float) -> float:
    ap = float(attack_percentage)
    if not 0.0 < ap < 1.0:
        raise ValueError(f"attack_percentage must lie in (0, 1), got {attack_percentage}")
    return ap


def make_stream(pool: Dataset, n: int, attack_percentage: float, registry: DeviceRegistry,
                seed: int = 0, n_devices: int = 8, benign_class: int = 0, clock=None) -> List[LabeledRequest]:
    """Signed request stream with round(ap * n) attack rows drawn from ``pool``.

    Devices ``dev-00`` .. are enrolled into ``registry`` if missing. Rows
    are drawn without replacement while the pool lasts.
    """
    ap = _check_ap(attack_percentage)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    clock = clock or LogicalClock()
    devices = [f"dev-{i:02d}" for i in range(n_devices)]
    for dev in devices:
        if dev not in registry:
            registry.enroll(dev, rng)
    attack_idx = np.flatnonzero(pool.y != benign_class)
    benign_idx = np.flatnonzero(pool.y == benign_class)
    n_att = int(round(ap * n))
    if (n_att and attack_idx.size == 0) or (n - n_att and benign_idx.size == 0):
        raise ValueError("pool lacks attack or benign rows for the requested mix")
    rows = np.concatenate([
        rng.choice(attack_idx, n_att, replace=n_att > attack_idx.size),
        rng.choice(benign_idx, n - n_att, replace=n - n_att > benign_idx.size),
    ])
    rng.shuffle(rows)
    out = []
    for i, r in enumerate(rows):
        payload = encode_payload(f"req-{i:06d}", pool.X[r])
        dev = devices[int(rng.integers(n_devices))]
        req = sign_request(registry, dev, payload, rng, clock)
        label = int(pool.y[r])
        out.append(LabeledRequest(req, label, label != benign_class))
    return out


def replay_stream(agent: SecurityAgent, stream: Sequence[LabeledRequest],
                  attack_percentage: Optional[float] = None, ledger_path: Optional[str] = None) -> StreamReport:
    """Handle every request in order; DR/FAR treat rejection as an attack verdict.

    ``attack_percentage`` is the nominal mix the stream was built for; when
    omitted the observed attack share is reported instead.
    """
    if attack_percentage is None:
        ap = float(np.mean([item.is_attack for item in stream])) if stream else 0.0
    else:
        ap = _check_ap(attack_percentage)
    decisions = [agent.handle_request(item.request) for item in stream]
    y_true = np.array([int(item.is_attack) for item in stream])
    y_pred = np.array([int(d.rejected) for d in decisions])
    c = confusion(y_true, y_pred, 1)
    stages: Dict[str, Dict[str, int]] = {s.value: {"accepted": 0, "rejected": 0} for s in Stage}
    for d in decisions:
        stages[d.stage.value][d.outcome] += 1
    return StreamReport(
        dr=detection_rate(c), far=false_alarm_rate(c), per_stage_counts=stages,
        confusion=asdict(c), n_requests=len(decisions), attack_percentage=ap,
        chain_ok=verify_chain(agent.ledger).ok, ledger_blocks=len(agent.ledger), ledger_path=ledger_path,
        decisions=decisions, truth=[(item.label, item.is_attack) for item in stream],
    )


def simulate(agent: SecurityAgent, pool: Dataset, n: int, attack_percentage: float,
             seed: int = 0) -> StreamReport:
    stream = make_stream(pool, n, attack_percentage, agent.registry, seed,
                         benign_class=agent.benign_class, clock=agent.clock)
    return replay_stream(agent, stream, attack_percentage)


def seed_store(d: Dataset, limit: Optional[int] = None, seed: int = 0, benign_class: int = 0,
               model_path: Optional[str] = None) -> PatternStore:
    """Pattern store seeded from (normalized) labeled rows."""
    store = PatternStore(d.n_features, benign_class, model_path)
    idx = np.arange(len(d))
    if limit is not None and limit < len(d):
        idx = np.sort(np.random.default_rng(seed).choice(len(d), limit, replace=False))
    for i in idx:
        store.insert(np.clip(d.X[i], 0.0, 1.0), int(d.y[i]))
    return store
