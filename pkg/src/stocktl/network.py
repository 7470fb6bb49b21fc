"""Single-layer LSTM classifier with frozen-encoder transfer.

Parameters are float64 numpy arrays.  The encoder maps a standardized
return window to its final hidden state; a head (optional ReLU layer plus
softmax output) maps that feature vector to class probabilities.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import SequenceSet, balanced_batch_stream

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1

# position implied by each class: ternary (buy, sell, nothing), binary (down, up)
POSITION_WEIGHTS = {3: np.array([1.0, -1.0, 0.0]), 2: np.array([-1.0, 1.0])}


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, training_log=None):
        super().__init__(message)
        self.training_log = training_log or []


@dataclass
class LstmParams:
    wx: np.ndarray  # (4H, 1)
    wh: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.wh.shape[1]

    def arrays(self):
        return {"lstm.wx": self.wx, "lstm.wh": self.wh, "lstm.b": self.b}

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.wx, self.wh, self.b):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass
class HeadParams:
    w2: np.ndarray  # (C, n) output layer
    b2: np.ndarray
    w1: np.ndarray | None = None  # (n, H) hidden layer, absent on the source head
    b1: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    @property
    def n_hidden(self) -> int | None:
        return None if self.w1 is None else self.w1.shape[0]

    def arrays(self):
        out = {}
        if self.w1 is not None:
            out["head.w1"] = self.w1
            out["head.b1"] = self.b1
        out["head.w2"] = self.w2
        out["head.b2"] = self.b2
        return out


@dataclass
class ModelState:
    encoder: LstmParams
    head: HeadParams
    encoder_frozen: bool = False
    optimizer_state: dict = field(default_factory=dict)
    rng_seed: int = 0

    def arrays(self):
        out = dict(self.encoder.arrays())
        out.update(self.head.arrays())
        return out

    def trainable_names(self):
        names = list(self.head.arrays())
        if not self.encoder_frozen:
            names = list(self.encoder.arrays()) + names
        return names

    def n_trainable(self) -> int:
        arrays = self.arrays()
        return sum(arrays[k].size for k in self.trainable_names())

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


def init_params(hidden_size: int, n_classes: int = 2, n_hidden: int | None = None,
                seed: int = 0) -> ModelState:
    """Uniform(-1/sqrt(fan), 1/sqrt(fan)) weights, forget-gate bias 1."""
    if hidden_size <= 0 or n_classes <= 1 or (n_hidden is not None and n_hidden <= 0):
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    H = hidden_size
    bound = 1.0 / math.sqrt(H)
    wx = rng.uniform(-bound, bound, (4 * H, 1))
    wh = rng.uniform(-bound, bound, (4 * H, H))
    b = rng.uniform(-bound, bound, 4 * H)
    b[H:2 * H] = 1.0
    head = _init_head(rng, H, n_classes, n_hidden)
    return ModelState(LstmParams(wx, wh, b), head, rng_seed=seed)


def _init_head(rng, hidden_size, n_classes, n_hidden):
    if n_hidden is None:
        bound = 1.0 / math.sqrt(hidden_size)
        return HeadParams(rng.uniform(-bound, bound, (n_classes, hidden_size)),
                          rng.uniform(-bound, bound, n_classes))
    b1_bound = 1.0 / math.sqrt(hidden_size)
    w1 = rng.uniform(-b1_bound, b1_bound, (n_hidden, hidden_size))
    b1 = rng.uniform(-b1_bound, b1_bound, n_hidden)
    b2_bound = 1.0 / math.sqrt(n_hidden)
    w2 = rng.uniform(-b2_bound, b2_bound, (n_classes, n_hidden))
    b2 = rng.uniform(-b2_bound, b2_bound, n_classes)
    return HeadParams(w2, b2, w1, b1)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def lstm_forward(window, params: LstmParams):
    """Run one window through the encoder; returns ``(feature, cache)``."""
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("lstm_forward expects a single 1-D window")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in input window")
    hs, cs, acts = kernels.lstm_forward(x[None, :], params.wx, params.wh, params.b)
    return hs[-1, 0].copy(), (x[None, :], hs, cs, acts)


def extract_features(windows, encoder: LstmParams) -> np.ndarray:
    """Final hidden state of the encoder for each row of ``windows``."""
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        return np.zeros((0, encoder.hidden_size))
    return kernels.lstm_final_state(x, encoder.wx, encoder.wh, encoder.b)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _head_forward_cached(features, head: HeadParams):
    h = np.atleast_2d(features)
    if head.w1 is None:
        z1 = a1 = None
        logits = h @ head.w2.T + head.b2
    else:
        z1 = h @ head.w1.T + head.b1
        a1 = np.maximum(z1, 0.0)
        logits = a1 @ head.w2.T + head.b2
    return softmax(logits), (h, z1, a1)


def head_forward(features, head: HeadParams) -> np.ndarray:
    probs, _ = _head_forward_cached(features, head)
    return probs[0] if np.ndim(features) == 1 else probs


def predict_proba(model: ModelState, windows=None, features=None) -> np.ndarray:
    if features is None:
        features = extract_features(windows, model.encoder)
    return head_forward(np.atleast_2d(features), model.head)


# ---------------------------------------------------------------------------
# losses (per sample; gradients are w.r.t. logits)
# ---------------------------------------------------------------------------

def loss_cross_entropy(probs, label):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(label)
    p = np.atleast_2d(probs)
    lab = np.atleast_1d(labels)
    picked = p[np.arange(len(lab)), lab]
    loss = -np.log(np.maximum(picked, PROB_FLOOR))
    grad = p.copy()
    grad[np.arange(len(lab)), lab] -= 1.0
    if probs.ndim == 1:
        return float(loss[0]), grad[0]
    return loss, grad


def captured_return(probs, next_return):
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    w = POSITION_WEIGHTS[p.shape[1]]
    r = (p @ w) * np.atleast_1d(next_return)
    return float(r[0]) if np.ndim(probs) == 1 else r


def loss_return(probs, next_return):
    """Negative captured return ``-(p_buy - p_sell) * r`` and its logit gradient."""
    probs = np.asarray(probs, dtype=np.float64)
    p = np.atleast_2d(probs)
    r = np.atleast_1d(np.asarray(next_return, dtype=np.float64))
    w = POSITION_WEIGHTS[p.shape[1]]
    position = p @ w
    loss = -position * r
    grad = -(r * 1.0)[:, None] * p * (w[None, :] - position[:, None])
    if probs.ndim == 1:
        return float(loss[0]), grad[0]
    return loss, grad


def loss_combined(probs, label, next_return, alpha):
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    ce, _ = loss_cross_entropy(probs, label)
    if alpha == 0:
        return ce
    ret, _ = loss_return(probs, next_return)
    return ce + alpha * ret


# ---------------------------------------------------------------------------
# batch objective and gradients
# ---------------------------------------------------------------------------

@dataclass
class BatchResult:
    loss: float
    ce_mean: float
    return_mean: float
    grads: dict
    probs: np.ndarray


def batch_loss(model: ModelState, labels, next_returns, loss_kind="CE", alpha=0.0,
               windows=None, features=None, with_grad=True) -> BatchResult:
    """Mean batch loss ``CE - alpha * mean(R)`` and gradients of trainable params.

    When the encoder is frozen, ``features`` may be passed directly and no
    encoder gradient is produced.
    """
    labels = np.asarray(labels)
    r = np.asarray(next_returns, dtype=np.float64)
    use_return = loss_kind == "R+CE" and alpha != 0
    lstm_cache = None
    if features is None:
        x = np.asarray(windows, dtype=np.float64)
        if with_grad and not model.encoder_frozen:
            hs, cs, acts = kernels.lstm_forward(x, model.encoder.wx, model.encoder.wh,
                                                model.encoder.b)
            features = hs[-1]
            lstm_cache = (x, hs, cs, acts)
        else:
            features = extract_features(x, model.encoder)
    elif with_grad and not model.encoder_frozen:
        raise ValueError("unfrozen encoder needs windows, not features")
    probs, (h, z1, a1) = _head_forward_cached(features, model.head)
    n = len(labels)
    ce, dlogits = loss_cross_entropy(probs, labels)
    ret_loss, dret = loss_return(probs, r)
    ce_mean = float(ce.mean())
    return_mean = float(-ret_loss.mean())
    loss = ce_mean - alpha * return_mean if use_return else ce_mean
    if not with_grad:
        return BatchResult(loss, ce_mean, return_mean, {}, probs)
    if use_return:
        dlogits = dlogits + alpha * dret
    dlogits = dlogits / n

    head = model.head
    grads = {}
    if head.w1 is None:
        grads["head.w2"] = dlogits.T @ h
        grads["head.b2"] = dlogits.sum(axis=0)
        dh = dlogits @ head.w2
    else:
        grads["head.w2"] = dlogits.T @ a1
        grads["head.b2"] = dlogits.sum(axis=0)
        dz1 = (dlogits @ head.w2) * (z1 > 0)
        grads["head.w1"] = dz1.T @ h
        grads["head.b1"] = dz1.sum(axis=0)
        dh = dz1 @ head.w1
    if lstm_cache is not None:
        x, hs, cs, acts = lstm_cache
        dwx, dwh, db = kernels.lstm_backward(x, model.encoder.wh, hs, cs, acts, dh)
        grads["lstm.wx"] = dwx
        grads["lstm.wh"] = dwh
        grads["lstm.b"] = db
    return BatchResult(loss, ce_mean, return_mean, grads, probs)


def backward(model: ModelState, labels, next_returns, loss_kind="CE", alpha=0.0,
             windows=None, features=None) -> dict:
    res = batch_loss(model, labels, next_returns, loss_kind, alpha, windows, features)
    for name, g in res.grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {name}")
    return res.grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def rmsprop_step(model: ModelState, grads: dict, learning_rate=1e-3, rho=0.9, eps=1e-8):
    """In-place RMSProp update of every parameter present in ``grads``."""
    arrays = model.arrays()
    trainable = set(model.trainable_names())
    for name, g in grads.items():
        if name not in trainable:
            continue
        v = model.optimizer_state.get(name)
        if v is None:
            v = np.zeros_like(arrays[name])
        v = rho * v + (1.0 - rho) * g * g
        model.optimizer_state[name] = v
        arrays[name] -= learning_rate * g / (np.sqrt(v) + eps)
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    patience: int = 10
    max_epochs: int = 100
    loss_kind: str = "CE"
    alpha: float | None = None  # None -> auto-balance on the first epoch
    seed: int = 0
    rho: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.loss_kind not in ("CE", "R+CE"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass
class TrainingData:
    labels: np.ndarray
    next_return: np.ndarray
    windows: np.ndarray | None = None
    features: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_sequences(cls, seqs: SequenceSet, target: str = "binary"):
        labels = seqs.binary_label if target == "binary" else seqs.ternary_label
        if np.any(labels < 0):
            raise ValueError(f"missing {target} labels in sequence set")
        return cls(labels=labels, next_return=seqs.next_return, windows=seqs.windows)

    def take(self, idx):
        return TrainingData(
            self.labels[idx], self.next_return[idx],
            None if self.windows is None else self.windows[idx],
            None if self.features is None else self.features[idx])

    def with_features(self, encoder: LstmParams) -> "TrainingData":
        if self.features is not None:
            return self
        return TrainingData(self.labels, self.next_return, self.windows,
                            extract_features(self.windows, encoder))


def evaluate(model: ModelState, data: TrainingData, loss_kind="CE", alpha=0.0, chunk=8192):
    """Loss and accuracy of ``model`` on ``data`` (no gradients)."""
    n = len(data)
    if n == 0:
        return math.nan, math.nan
    total = 0.0
    correct = 0
    for start in range(0, n, chunk):
        part = data.take(slice(start, start + chunk))
        res = batch_loss(model, part.labels, part.next_return, loss_kind, alpha,
                         windows=part.windows, features=part.features, with_grad=False)
        total += res.loss * len(part)
        correct += int(np.sum(res.probs.argmax(axis=1) == part.labels))
    return total / n, correct / n


def _auto_alpha(model, data, batches, loss_kind):
    ce_abs = []
    ret_abs = []
    for idx in batches:
        part = data.take(idx)
        res = batch_loss(model, part.labels, part.next_return, loss_kind, 0.0,
                         windows=part.windows, features=part.features, with_grad=False)
        probs = res.probs
        ce, _ = loss_cross_entropy(probs, part.labels)
        ret = captured_return(probs, part.next_return)
        ce_abs.append(np.abs(ce))
        ret_abs.append(np.abs(ret))
    ce_mean = float(np.mean(np.concatenate(ce_abs)))
    ret_mean = float(np.mean(np.concatenate(ret_abs)))
    alpha = ce_mean / ret_mean if ret_mean > 1e-15 else 0.0
    return alpha, ce_mean, ret_mean


def train(model: ModelState, train_data: TrainingData, val_data: TrainingData,
          config: TrainConfig):
    """Balanced mini-batch RMSProp with early stopping on validation loss.

    Returns ``(best_model, log)``; ``log`` is a list of per-epoch dicts.  The
    input model is not modified.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation sets must be non-empty")
    model = model.copy()
    if model.encoder_frozen:
        train_data = train_data.with_features(model.encoder)
        val_data = val_data.with_features(model.encoder)
    elif train_data.windows is None:
        raise ValueError("an unfrozen encoder needs window inputs")

    n_classes = model.head.n_classes
    rng = np.random.default_rng(config.seed)

    def epoch_batches():
        return list(balanced_batch_stream(train_data.labels, config.batch_size,
                                          n_classes=n_classes, rng=rng))

    first_batches = epoch_batches()
    alpha = 0.0
    alpha_info = {}
    if config.loss_kind == "R+CE":
        if config.alpha is None:
            alpha, ce_m, ret_m = _auto_alpha(model, train_data, first_batches, config.loss_kind)
            alpha_info = {"alpha_ce_mean": ce_m, "alpha_return_mean": ret_m}
        else:
            alpha = float(config.alpha)

    best = model.copy()
    best_val = math.inf
    wait = 0
    training_log = []
    for epoch in range(1, config.max_epochs + 1):
        batches = first_batches if epoch == 1 else epoch_batches()
        losses = []
        for idx in batches:
            part = train_data.take(idx)
            res = batch_loss(model, part.labels, part.next_return, config.loss_kind, alpha,
                             windows=None if model.encoder_frozen else part.windows,
                             features=part.features if model.encoder_frozen else None)
            if not math.isfinite(res.loss) or not all(
                    np.all(np.isfinite(g)) for g in res.grads.values()):
                entry = {"epoch": epoch, "train_loss": res.loss, "diverged": True}
                training_log.append(entry)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", training_log)
            rmsprop_step(model, res.grads, config.learning_rate, config.rho, config.eps)
            losses.append(res.loss)
        val_loss, val_acc = evaluate(model, val_data, config.loss_kind, alpha)
        if not math.isfinite(val_loss):
            training_log.append({"epoch": epoch, "val_loss": val_loss, "diverged": True})
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}",
                                        training_log)
        improved = val_loss < best_val
        if improved:
            best_val = val_loss
            best = model.copy()
            wait = 0
        else:
            wait += 1
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
                 "val_accuracy": val_acc, "alpha": alpha, "improved": improved, **alpha_info}
        training_log.append(entry)
        log.debug("epoch %d train %.5f val %.5f acc %.4f", epoch, entry["train_loss"],
                  val_loss, val_acc)
        if wait >= config.patience:
            break
    return best, training_log


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------

def transfer(source: ModelState, n_hidden: int, seed: int, n_classes: int = 3) -> ModelState:
    """Copy the encoder (frozen) and attach a fresh ReLU layer plus softmax head."""
    if source.head.n_classes != 2:
        raise ValueError("transfer expects a source model with a 2-class head")
    rng = np.random.default_rng(seed)
    encoder = LstmParams(source.encoder.wx.copy(), source.encoder.wh.copy(),
                         source.encoder.b.copy())
    head = _init_head(rng, encoder.hidden_size, n_classes, n_hidden)
    return ModelState(encoder, head, encoder_frozen=True, optimizer_state={}, rng_seed=seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _encode_array(a):
    return {"shape": list(a.shape), "data": [float(v).hex() for v in np.ravel(a)]}


def _decode_array(d):
    values = np.array([float.fromhex(v) for v in d["data"]], dtype=np.float64)
    return values.reshape(d["shape"])


def save_checkpoint(model: ModelState, path, config_hash: str = "", extra=None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "hidden_size": model.encoder.hidden_size,
        "n_classes": model.head.n_classes,
        "n_hidden": model.head.n_hidden,
        "encoder_frozen": model.encoder_frozen,
        "seed": model.rng_seed,
        "config_hash": config_hash,
        "params": {k: _encode_array(v) for k, v in model.arrays().items()},
        "optimizer_state": {k: _encode_array(v) for k, v in
                            sorted(model.optimizer_state.items())},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Returns ``(model, metadata)``."""
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    p = {k: _decode_array(v) for k, v in payload["params"].items()}
    encoder = LstmParams(p["lstm.wx"], p["lstm.wh"], p["lstm.b"])
    head = HeadParams(p["head.w2"], p["head.b2"], p.get("head.w1"), p.get("head.b1"))
    opt = {k: _decode_array(v) for k, v in payload["optimizer_state"].items()}
    model = ModelState(encoder, head, payload["encoder_frozen"], opt, payload["seed"])
    meta = {k: payload[k] for k in ("config_hash", "extra", "version")}
    return model, meta


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
