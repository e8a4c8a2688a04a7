"""Single-layer LSTM loss-pattern predictor with a loss counter head.

The network reads one block (``b`` bits) per timestep, maps the final hidden
state to ``b`` per-packet loss probabilities, and the counter turns those
into an integer number of lost packets. Training is minibatch Adam on the
mean binary cross-entropy of the per-packet probabilities, with gradients
from backpropagation through time.

Checkpoint layout (all little-endian)::

    8 bytes   magic  b"LSTMCKPT"
    uint32    format version (1)
    uint32    input_dim
    uint32    hidden_dim
    uint32    b
    float64[] parameters in PARAM_ORDER, each flattened row-major
"""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .channel import atomic_write

log = logging.getLogger(__name__)

GATES = ("f", "i", "o", "g")
PARAM_ORDER = ("W_f", "W_i", "W_o", "W_g", "b_f", "b_i", "b_o", "b_g", "W_y", "b_y")
CKPT_MAGIC = b"LSTMCKPT"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sIIII")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


class CheckpointError(ValueError):
    pass


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class LSTMModel:
    input_dim: int
    hidden_dim: int
    b: int
    params: dict

    def __post_init__(self):
        shapes = self.param_shapes()
        for name in PARAM_ORDER:
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
            self.params[name] = arr

    def param_shapes(self) -> dict:
        return _shapes(self.input_dim, self.hidden_dim, self.b)

    def copy(self) -> "LSTMModel":
        return LSTMModel(self.input_dim, self.hidden_dim, self.b,
                         {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())

    def predict_probs(self, histories) -> np.ndarray:
        return forward(self, histories)

    def predict_counts(self, histories) -> np.ndarray:
        return count_from_probs(forward(self, histories))

    @classmethod
    def zeros(cls, b: int, hidden_dim: int = 32) -> "LSTMModel":
        return cls(b, hidden_dim, b, {k: np.zeros(s) for k, s in _shapes(b, hidden_dim, b).items()})


def _shapes(input_dim, hidden_dim, b):
    h, z = hidden_dim, input_dim + hidden_dim
    shapes = {f"W_{g}": (h, z) for g in GATES}
    shapes.update({f"b_{g}": (h,) for g in GATES})
    shapes["W_y"] = (b, h)
    shapes["b_y"] = (b,)
    return shapes


def init_model(b: int = 6, hidden_dim: int = 32, seed: int = 0,
               init_scale: float = 0.08, forget_bias: float = 1.0) -> LSTMModel:
    """Uniform(-init_scale, init_scale) weights, zero biases except the forget gate."""
    rng = np.random.default_rng(seed)
    params = {}
    shapes = _shapes(b, hidden_dim, b)
    for name in PARAM_ORDER:
        shape = shapes[name]
        if name.startswith("W_"):
            params[name] = rng.uniform(-init_scale, init_scale, size=shape)
        else:
            params[name] = np.zeros(shape)
    params["b_f"] += forget_bias
    return LSTMModel(b, hidden_dim, b, params)


def _as_batch(model: LSTMModel, histories) -> tuple:
    x = np.asarray(histories, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != model.input_dim:
        raise ValueError(f"history must be (T, {model.input_dim}) or (N, T, {model.input_dim}), got {x.shape}")
    if x.shape[1] < 1:
        raise ValueError("history needs at least one timestep")
    return x, single


def _stacked(model):
    p = model.params
    W = np.concatenate([p[f"W_{g}"] for g in GATES], axis=0)
    bias = np.concatenate([p[f"b_{g}"] for g in GATES])
    return W, bias


def _run(model, x):
    """Forward pass over a batch; returns output logits and the per-step cache."""
    n, steps, _ = x.shape
    hd = model.hidden_dim
    W, bias = _stacked(model)
    h = np.zeros((n, hd))
    c = np.zeros((n, hd))
    cache = []
    for t in range(steps):
        z = np.concatenate([x[:, t, :], h], axis=1)
        a = z @ W.T + bias
        f = sigmoid(a[:, :hd])
        i = sigmoid(a[:, hd:2 * hd])
        o = sigmoid(a[:, 2 * hd:3 * hd])
        g = np.tanh(a[:, 3 * hd:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.append((z, f, i, o, g, c_prev, tc))
    logits = h @ model.params["W_y"].T + model.params["b_y"]
    return logits, h, cache


def forward(model: LSTMModel, histories) -> np.ndarray:
    """Per-packet loss probabilities for one history (T, b) or a batch (N, T, b)."""
    x, single = _as_batch(model, histories)
    logits, _, _ = _run(model, x)
    probs = sigmoid(logits)
    return probs[0] if single else probs


def bce_loss(model: LSTMModel, histories, labels) -> float:
    x, _ = _as_batch(model, histories)
    y = np.asarray(labels, dtype=np.float64).reshape(x.shape[0], model.b)
    logits, _, _ = _run(model, x)
    return float(np.mean(softplus(logits) - y * logits))


def backward(model: LSTMModel, histories, labels) -> tuple:
    """Mean binary cross-entropy over the batch and its gradient for every parameter.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``model.params``.
    """
    x, _ = _as_batch(model, histories)
    n = x.shape[0]
    y = np.asarray(labels, dtype=np.float64).reshape(n, model.b)
    hd, din = model.hidden_dim, model.input_dim
    logits, h_last, cache = _run(model, x)
    loss = float(np.mean(softplus(logits) - y * logits))

    d_logits = (sigmoid(logits) - y) / (n * model.b)
    grads = {"W_y": d_logits.T @ h_last, "b_y": d_logits.sum(axis=0)}
    W, _ = _stacked(model)
    dW = np.zeros_like(W)
    dbias = np.zeros(4 * hd)

    dh = d_logits @ model.params["W_y"]
    dc = np.zeros((n, hd))
    for z, f, i, o, g, c_prev, tc in reversed(cache):
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        df = dc * c_prev
        di = dc * g
        dg = dc * i
        da = np.concatenate([
            df * f * (1.0 - f),
            di * i * (1.0 - i),
            do * o * (1.0 - o),
            dg * (1.0 - g * g),
        ], axis=1)
        dW += da.T @ z
        dbias += da.sum(axis=0)
        dz = da @ W
        dh = dz[:, din:]
        dc = dc * f

    for k, gname in enumerate(GATES):
        grads[f"W_{gname}"] = dW[k * hd:(k + 1) * hd]
        grads[f"b_{gname}"] = dbias[k * hd:(k + 1) * hd]
    return loss, grads


# --- loss counter and redundancy decision -------------------------------------------


def count_from_probs(probs) -> np.ndarray:
    """Vectorised loss counter: round-half-up of the row sums, clamped to [0, b]."""
    p = np.asarray(probs, dtype=np.float64)
    b = p.shape[-1]
    total = p.sum(axis=-1)
    return np.clip(np.floor(total + 0.5), 0, b).astype(np.int64)


def loss_counter(probs) -> int:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("loss_counter takes one probability vector")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return int(count_from_probs(p))


def decide_redundancy(count: int, b: int, safety_margin: int = 0) -> int:
    if not 0 <= count <= b:
        raise ValueError(f"count must be in [0, {b}], got {count}")
    return int(min(max(count + safety_margin, 0), b))


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    count: int
    k_decided: int


def predict(model: LSTMModel, history, safety_margin: int = 0) -> Prediction:
    probs = forward(model, history)
    count = loss_counter(probs)
    return Prediction(probs, count, decide_redundancy(count, model.b, safety_margin))


# --- optimisation --------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in PARAM_ORDER:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    init_seed: int = 0
    shuffle_seed: int = 0
    hidden_dim: int = 32
    init_scale: float = 0.08
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_zero_error: float


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_zero_error"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_zero_error)])
        return buf.getvalue()


def train(model: LSTMModel, split, config: TrainingConfig = TrainingConfig()) -> tuple:
    """Fit ``model`` on ``split.train``, early-stopping on ``split.validation`` loss.

    Returns ``(best_model, TrainingLog)``; the input model is not modified.
    Raises NumericalError if the loss or parameters stop being finite.
    """
    tr, va = split.train, split.validation
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("training and validation partitions must be nonempty")
    if tr.history.shape[2] != model.input_dim:
        raise ValueError(f"samples have b={tr.history.shape[2]}, model expects {model.input_dim}")

    model = model.copy()
    opt = Adam(model.params, config.learning_rate, config.betas, config.eps)
    rng = np.random.default_rng(config.shuffle_seed)
    xtr = tr.history.astype(np.float64)
    ytr = tr.labels.astype(np.float64)
    xva = va.history.astype(np.float64)
    yva = va.labels.astype(np.float64)
    va_counts = va.label_counts

    best = model.copy()
    best_loss = math.inf
    tlog = TrainingLog()
    bad_epochs = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(tr))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = backward(model, xtr[idx], ytr[idx])
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}; try a smaller learning rate "
                    f"(currently {config.learning_rate})")
            opt.step(model.params, grads)
            total += loss * len(idx)
        if not model.all_finite():
            raise NumericalError(
                f"non-finite parameters at epoch {epoch}; try a smaller learning rate "
                f"(currently {config.learning_rate})")

        logits, _, _ = _run(model, xva)
        probs = sigmoid(logits)
        val_loss = float(np.mean(softplus(logits) - yva * logits))
        val_zero = float(np.mean(count_from_probs(probs) == va_counts))
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        tlog.epochs.append(EpochRecord(epoch, total / len(tr), val_loss, val_zero))
        log.debug("epoch %d train %.5f val %.5f zero-err %.4f", epoch, total / len(tr), val_loss, val_zero)

        if val_loss < best_loss:
            best_loss = val_loss
            best = model.copy()
            tlog.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                tlog.stopped_early = True
                break
    return best, tlog


# --- evaluation ----------------------------------------------------------------------


@dataclass
class ErrorReport:
    zero_error_rate: float
    histogram: dict  # error (predicted - actual) -> count
    n: int

    def cdf(self) -> list:
        """[(error, cumulative fraction)] over the observed error values."""
        acc = 0
        out = []
        for e in sorted(self.histogram):
            acc += self.histogram[e]
            out.append((e, acc / self.n))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["error", "count", "fraction", "cdf"])
        cdf = dict(self.cdf())
        for e in sorted(self.histogram):
            w.writerow([e, self.histogram[e], repr(self.histogram[e] / self.n), repr(cdf[e])])
        return buf.getvalue()


def zero_error_rate(predictor, samples) -> ErrorReport:
    """Score any object with ``predict_counts(histories)`` on a SampleSet."""
    if len(samples) == 0:
        raise ValueError("empty test set")
    pred = np.asarray(predictor.predict_counts(samples.history))
    err = pred - samples.label_counts
    vals, counts = np.unique(err, return_counts=True)
    hist = {int(v): int(c) for v, c in zip(vals, counts)}
    return ErrorReport(float(np.mean(err == 0)), hist, len(samples))


class ConstantPredictor:
    """Always predicts the same count; the natural baseline for the zero-error rate."""

    def __init__(self, count: int):
        self.count = int(count)

    def predict_counts(self, histories):
        return np.full(len(histories), self.count, dtype=np.int64)

    @classmethod
    def fit(cls, samples) -> "ConstantPredictor":
        counts = np.bincount(samples.label_counts, minlength=1)
        return cls(int(np.argmax(counts)))


# --- checkpoints ---------------------------------------------------------------------


def checkpoint_bytes(model: LSTMModel) -> bytes:
    parts = [_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.input_dim, model.hidden_dim, model.b)]
    for name in PARAM_ORDER:
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> LSTMModel:
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint truncated in header")
    magic, version, din, hd, b = _HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError("not an LSTM checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    shapes = _shapes(din, hd, b)
    need = sum(int(np.prod(s)) for s in shapes.values()) * 8
    body = data[_HEADER.size:]
    if len(body) != need:
        raise CheckpointError(f"expected {need} parameter bytes, found {len(body)}")
    params = {}
    off = 0
    for name in PARAM_ORDER:
        size = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shapes[name]).astype(np.float64)
        off += size * 8
    return LSTMModel(din, hd, b, params)


def save_checkpoint(path, model: LSTMModel) -> None:
    atomic_write(path, checkpoint_bytes(model))


def load_checkpoint(path) -> LSTMModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
