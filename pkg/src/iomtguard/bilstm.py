"""Bidirectional LSTM classifier written directly in numpy.

Architecture: a rectified dense projection applied per timestep, then a
stack of bidirectional LSTM layers (the next layer reads the
concatenated forward/backward outputs), then a linear read-out of the
forward direction's last state and the backward direction's first
state, followed by softmax.

Tabular records become sequences by splitting the feature vector into
``seq_len`` equal chunks (zero-padded at the end).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import DataError, Dataset, FeatureMask, apply_mask, stratified_split_indices

FORMAT_NAME = "iomtguard.bilstm"
FORMAT_VERSION = 1
LOSS_FLOOR = 1e-12
GATES = ("input", "forget", "candidate", "output")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------ sequences

@dataclass
class SequenceView:
    steps: np.ndarray  # (seq_len, step_dim)

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float64)
        if self.steps.ndim != 2 or self.steps.shape[0] < 1:
            raise ValueError("sequence needs shape (length >= 1, dim)")

    @property
    def length(self) -> int:
        return self.steps.shape[0]

    @property
    def dim(self) -> int:
        return self.steps.shape[1]


def step_dim(n_features: int, seq_len: int) -> int:
    return max(1, math.ceil(n_features / seq_len))


def to_sequences(X, seq_len: int = 8) -> np.ndarray:
    """(n, F) rows -> (n, seq_len, ceil(F / seq_len)) chunk sequences."""
    X = np.asarray(X, dtype=np.float64)
    n, F = X.shape
    d = step_dim(F, seq_len)
    padded = np.zeros((n, seq_len * d))
    padded[:, :F] = X
    return padded.reshape(n, seq_len, d)


# ---------------------------------------------------------- parameters

@dataclass
class LstmCellParams:
    """One direction of one layer; gates stacked as input, forget, candidate, output."""

    W: np.ndarray  # (4H, in_dim)
    U: np.ndarray  # (4H, H) recurrent weights
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        H4 = self.U.shape[0]
        if H4 % 4 or self.U.shape != (H4, H4 // 4) or self.W.shape[0] != H4 or self.b.shape != (H4,):
            raise ValueError(f"inconsistent cell shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}")

    @property
    def units(self) -> int:
        return self.U.shape[1]

    def gate(self, name: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        k, H = GATES.index(name), self.units
        sl = slice(k * H, (k + 1) * H)
        return self.W[sl], self.U[sl], self.b[sl]


def _cell_key(layer: int, direction: str) -> str:
    return f"L{layer}{direction}"


@dataclass
class BiLstmModel:
    """Parameter tree plus the hyperparameters needed to run it.

    ``params`` maps names to arrays: ``in_W``/``in_b`` (input projection),
    ``L{l}{f|b}_{W|U|b}`` (cells), ``out_Qf``/``out_Qb``/``out_b`` (read-out).
    """

    params: Dict[str, np.ndarray]
    n_features: int
    seq_len: int
    units: int
    num_layers: int
    num_classes: int
    dropout_rate: float = 0.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("need at least one layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.params["out_b"].shape != (self.num_classes,):
            raise ValueError("output bias does not match num_classes")

    @property
    def step_dim(self) -> int:
        return step_dim(self.n_features, self.seq_len)

    def cell(self, layer: int, direction: str) -> LstmCellParams:
        k = _cell_key(layer, direction)
        return LstmCellParams(self.params[k + "_W"], self.params[k + "_U"], self.params[k + "_b"])

    def copy(self) -> "BiLstmModel":
        return BiLstmModel({k: v.copy() for k, v in self.params.items()}, self.n_features,
                           self.seq_len, self.units, self.num_layers, self.num_classes,
                           self.dropout_rate, dict(self.meta))

    # -- serialization

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "config": {
                "n_features": self.n_features, "seq_len": self.seq_len, "units": self.units,
                "num_layers": self.num_layers, "num_classes": self.num_classes,
                "dropout_rate": self.dropout_rate,
            },
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in sorted(self.params.items())},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "BiLstmModel":
        if obj.get("format") != FORMAT_NAME or obj.get("version") != FORMAT_VERSION:
            raise DataError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} model file")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in obj["params"].items()}
        return cls(params, meta=obj.get("meta", {}), **obj["config"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BiLstmModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def init_model(n_features: int, num_classes: int, units: int = 128, num_layers: int = 3,
               seq_len: int = 8, dropout_rate: float = 0.5, rng=None) -> BiLstmModel:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(rng)
    H, d = units, step_dim(n_features, seq_len)

    def uni(shape, fan_in):
        lim = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    params = {"in_W": uni((H, d), d), "in_b": np.zeros(H)}
    in_dim = H
    for layer in range(num_layers):
        for direction in "fb":
            k = _cell_key(layer, direction)
            params[k + "_W"] = uni((4 * H, in_dim), in_dim)
            params[k + "_U"] = uni((4 * H, H), H)
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            params[k + "_b"] = b
        in_dim = 2 * H
    params["out_Qf"] = uni((num_classes, H), H)
    params["out_Qb"] = uni((num_classes, H), H)
    params["out_b"] = np.zeros(num_classes)
    return BiLstmModel(params, n_features, seq_len, units, num_layers, num_classes, dropout_rate)


# ------------------------------------------------------------- forward

def _gate_activations(a, H):
    i = sigmoid(a[:, :H])
    f = sigmoid(a[:, H:2 * H])
    g = np.tanh(a[:, 2 * H:3 * H])
    o = sigmoid(a[:, 3 * H:])
    return i, f, g, o


def cell_step(params: LstmCellParams, x_t, h_prev, c_prev):
    """One LSTM step. Accepts a single vector or a batch of row vectors."""
    single = np.ndim(x_t) == 1
    x_t, h_prev, c_prev = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (x_t, h_prev, c_prev))
    H = params.units
    if x_t.shape[1] != params.W.shape[1] or h_prev.shape[1] != H or c_prev.shape[1] != H:
        raise ValueError(f"shape mismatch: x{x_t.shape} h{h_prev.shape} c{c_prev.shape} "
                         f"for W{params.W.shape}")
    a = x_t @ params.W.T + h_prev @ params.U.T + params.b
    i, f, g, o = _gate_activations(a, H)
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return (h[0], c[0]) if single else (h, c)


def _scan(cell: LstmCellParams, inp, order):
    """Run one direction over ``order``; returns outputs (B, L, H) and a per-step cache."""
    B, L, _ = inp.shape
    H = cell.units
    xw = inp @ cell.W.T + cell.b  # input contribution for every step at once
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.empty((B, L, H))
    steps = {}
    for t in order:
        a = xw[:, t] + h @ cell.U.T
        i, f, g, o = _gate_activations(a, H)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        steps[t] = (i, f, g, o, c, tc, h)
        h, c = h_new, c_new
        out[:, t] = h
    return out, steps


@dataclass
class ForwardCache:
    X: np.ndarray
    Z0: np.ndarray
    layer_inputs: List[np.ndarray]
    scans: List[dict]
    masks: List[Optional[np.ndarray]]
    final_f: np.ndarray
    final_b: np.ndarray
    probs: np.ndarray


def _as_batch(seq, model: BiLstmModel) -> np.ndarray:
    if isinstance(seq, SequenceView):
        seq = seq.steps[None]
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 2:
        seq = seq[None]
    if seq.shape[1:] != (model.seq_len, model.step_dim):
        raise ValueError(f"sequence shape {seq.shape[1:]} != ({model.seq_len}, {model.step_dim})")
    return seq


def forward(model: BiLstmModel, seq, training: bool = False, rng=None):
    """Class probabilities (B, K) for a batch of sequences (B, L, d), plus the cache for backward."""
    X = _as_batch(seq, model)
    p = model.params
    H, L = model.units, model.seq_len
    Z0 = X @ p["in_W"].T + p["in_b"]
    inp = np.maximum(Z0, 0.0)
    layer_inputs, scans, masks = [], [], []
    drop = training and model.dropout_rate > 0.0
    if drop and rng is None:
        raise ValueError("training with dropout needs a random generator")
    for layer in range(model.num_layers):
        layer_inputs.append(inp)
        hf, sf = _scan(model.cell(layer, "f"), inp, range(L))
        hb, sb = _scan(model.cell(layer, "b"), inp, range(L - 1, -1, -1))
        out = np.concatenate([hf, hb], axis=2)
        mask = None
        if drop:
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(out.shape) < keep) / keep
            out = out * mask
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"numeric overflow at layer {layer}")
        scans.append({"f": sf, "b": sb})
        masks.append(mask)
        inp = out
    final_f = inp[:, L - 1, :H]
    final_b = inp[:, 0, H:]
    logits = final_f @ p["out_Qf"].T + final_b @ p["out_Qb"].T + p["out_b"]
    probs = softmax(logits)
    if not np.all(np.isfinite(probs)):
        raise FloatingPointError("numeric overflow at output layer")
    cache = ForwardCache(X, Z0, layer_inputs, scans, masks, final_f, final_b, probs)
    return probs, cache


def loss(probabilities, label) -> float:
    """Cross-entropy -log p[label], with p floored at 1e-12."""
    return float(-math.log(max(float(probabilities[label]), LOSS_FLOOR)))


def batch_loss(probs, labels) -> float:
    picked = np.maximum(probs[np.arange(len(labels)), labels], LOSS_FLOOR)
    return float(-np.mean(np.log(picked)))


# ------------------------------------------------------------ backward

def _bptt(cell: LstmCellParams, steps: dict, inp, dH, order, grads, key):
    """Reverse-mode pass for one direction. Returns the gradient w.r.t. ``inp``."""
    B, L, _ = inp.shape
    H = cell.units
    dA = np.empty((B, L, 4 * H))
    h_prev_all = np.empty((B, L, H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(list(order)):
        i, f, g, o, c_prev, tc, h_prev = steps[t]
        dh = dH[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)
        dc_next = dc * f
        dh_next = da @ cell.U
        dA[:, t] = da
        h_prev_all[:, t] = h_prev
    flat = dA.reshape(-1, 4 * H).T
    grads[key + "_W"] = flat @ inp.reshape(B * L, -1)
    grads[key + "_U"] = flat @ h_prev_all.reshape(B * L, H)
    grads[key + "_b"] = dA.sum(axis=(0, 1))
    return dA @ cell.W


def backward(model: BiLstmModel, labels, cache: ForwardCache) -> Dict[str, np.ndarray]:
    """Exact gradients of the mean batch cross-entropy for every parameter."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B = cache.probs.shape[0]
    if labels.shape != (B,):
        raise ValueError(f"{labels.shape[0]} labels for a batch of {B}")
    if len(cache.layer_inputs) != model.num_layers or cache.probs.shape[1] != model.num_classes:
        raise ValueError("cache does not belong to this model")
    p = model.params
    H, L = model.units, model.seq_len
    grads: Dict[str, np.ndarray] = {}

    dlogits = cache.probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    grads["out_Qf"] = dlogits.T @ cache.final_f
    grads["out_Qb"] = dlogits.T @ cache.final_b
    grads["out_b"] = dlogits.sum(axis=0)

    dout = np.zeros((B, L, 2 * H))
    dout[:, L - 1, :H] = dlogits @ p["out_Qf"]
    dout[:, 0, H:] = dlogits @ p["out_Qb"]
    for layer in reversed(range(model.num_layers)):
        mask = cache.masks[layer]
        if mask is not None:
            dout = dout * mask
        inp = cache.layer_inputs[layer]
        scan = cache.scans[layer]
        d_in = _bptt(model.cell(layer, "f"), scan["f"], inp, dout[..., :H], range(L),
                     grads, _cell_key(layer, "f"))
        d_in = d_in + _bptt(model.cell(layer, "b"), scan["b"], inp, dout[..., H:],
                            range(L - 1, -1, -1), grads, _cell_key(layer, "b"))
        dout = d_in
    dZ0 = dout * (cache.Z0 > 0)
    grads["in_W"] = dZ0.reshape(-1, H).T @ cache.X.reshape(B * L, -1)
    grads["in_b"] = dZ0.sum(axis=(0, 1))
    return grads


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, t: Optional[int] = None):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``."""
    state.t = state.t + 1 if t is None else t
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        elif state.m[k].shape != g.shape:
            raise ValueError(f"optimizer state shape mismatch for {k}")
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ------------------------------------------------------------ training

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    dropout: float = 0.5
    units_per_layer: int = 128
    num_layers: int = 3
    seed: int = 0
    seq_len: int = 8
    validation_fraction: float = 0.1
    clip_norm: float = 5.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    initial_train_loss: float
    epoch: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    train_acc: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_acc: List[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
        for row in zip(self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc):
            lines.append(",".join(repr(v) for v in row))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def predict_proba_sequences(model: BiLstmModel, seqs, chunk: int = 1024) -> np.ndarray:
    out = [forward(model, seqs[i:i + chunk])[0] for i in range(0, len(seqs), chunk)]
    return np.vstack(out) if out else np.zeros((0, model.num_classes))


def _evaluate(model, seqs, y):
    if len(y) == 0:
        return math.nan, math.nan
    probs = predict_proba_sequences(model, seqs)
    return batch_loss(probs, y), float(np.mean(probs.argmax(axis=1) == y))


def fit_arrays(X, y, num_classes: int, cfg: TrainConfig) -> Tuple[BiLstmModel, TrainHistory]:
    """Train on a feature matrix already normalized and masked."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise DataError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(X.shape[1], num_classes, cfg.units_per_layer, cfg.num_layers,
                       cfg.seq_len, cfg.dropout, rng)
    seqs = to_sequences(X, cfg.seq_len)
    tr, va = np.arange(len(y)), np.arange(0)
    if cfg.validation_fraction > 0:
        try:
            tr, va = stratified_split_indices(y, cfg.validation_fraction, int(rng.integers(2**31)))
        except DataError:
            pass  # some class too small to hold out; train on everything
    Xs_tr, y_tr, Xs_va, y_va = seqs[tr], y[tr], seqs[va], y[va]

    history = TrainHistory(initial_train_loss=_evaluate(model, Xs_tr, y_tr)[0])
    state = AdamState()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y_tr))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, cache = forward(model, Xs_tr[idx], training=True, rng=rng)
            grads = backward(model, y_tr[idx], cache)
            clip_by_global_norm(grads, cfg.clip_norm)
            adam_step(model.params, grads, state, cfg.learning_rate)
        tl, ta = _evaluate(model, Xs_tr, y_tr)
        vl, vacc = _evaluate(model, Xs_va, y_va)
        history.epoch.append(epoch)
        history.train_loss.append(tl)
        history.train_acc.append(ta)
        history.val_loss.append(vl)
        history.val_acc.append(vacc)
    return model, history


def train(d: Dataset, mask: FeatureMask, cfg: TrainConfig) -> Tuple[BiLstmModel, TrainHistory]:
    """Train on ``d`` (normalized) restricted to ``mask``.

    The model records the selected feature indices and the source
    min/max ranges in ``meta`` so raw requests can be scored later.
    """
    dm = apply_mask(d, mask) if len(mask) == d.n_features else d
    model, history = fit_arrays(dm.X, dm.y, d.schema.n_classes, cfg)
    model.meta.update({
        "mask": mask.to_list(),
        "feature_names": list(d.schema.feature_names),
        "class_names": d.schema.class_names,
        "source_min": d.meta.get("source_min", d.feature_min.tolist()),
        "source_max": d.meta.get("source_max", d.feature_max.tolist()),
        "train_config": cfg.to_dict(),
    })
    return model, history


def predict(model: BiLstmModel, d: Dataset, mask: Optional[FeatureMask] = None):
    """Per row: (argmax class, probability vector). Ties go to the lower class index."""
    X = d.X
    if mask is not None and len(mask) == d.n_features:
        X = apply_mask(d, mask).X
    if X.shape[1] != model.n_features:
        raise DataError(f"model expects {model.n_features} features, got {X.shape[1]}")
    probs = predict_proba_sequences(model, to_sequences(X, model.seq_len))
    return [(int(np.argmax(p)), p) for p in probs]


# ----------------------------------------------------- estimator facade

class BiLSTMClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn classifier around :func:`fit_arrays`.

    Inputs are expected in [0, 1] (see ``MinMaxNormalizer``); feature
    selection happens upstream, e.g. with ``WOAFeatureSelector`` in a
    ``Pipeline``.
    """

    def __init__(self, units=128, num_layers=3, dropout=0.5, learning_rate=1e-3, batch_size=64,
                 epochs=100, seq_len=8, validation_fraction=0.1, clip_norm=5.0, random_state=0):
        self.units = units
        self.num_layers = num_layers
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seq_len = seq_len
        self.validation_fraction = validation_fraction
        self.clip_norm = clip_norm
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        cfg = TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.dropout,
                          self.units, self.num_layers, self.random_state, self.seq_len,
                          self.validation_fraction, self.clip_norm)
        self.model_, self.history_ = fit_arrays(X, y_idx, max(len(self.classes_), 2), cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        probs = predict_proba_sequences(self.model_, to_sequences(X, self.seq_len))
        return probs[:, : len(self.classes_)]

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
