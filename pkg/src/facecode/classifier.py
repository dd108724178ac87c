"""Recurrent deception classifier over per-frame code vectors.

A single tanh RNN layer (128 units) reads the sequence; two sigmoid outputs on
the last hidden state score the classes truth (0) and deception (1).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CODE_DIM

logger = logging.getLogger(__name__)

HIDDEN = 128
N_CLASSES = 2
CLIP_NORM = 5.0
PARAM_NAMES = ("w_in", "w_rec", "b_h", "w_out", "b_out")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class RnnModel:
    w_in: np.ndarray
    w_rec: np.ndarray
    b_h: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h = self.w_rec.shape[0]
        shapes = {"w_in": (h, self.w_in.shape[1]), "w_rec": (h, h), "b_h": (h,), "w_out": (N_CLASSES, h), "b_out": (N_CLASSES,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def input_size(self) -> int:
        return self.w_in.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.w_rec.shape[0]

    @classmethod
    def zeros(cls, input_size: int = CODE_DIM, hidden_size: int = HIDDEN):
        return cls(np.zeros((hidden_size, input_size)), np.zeros((hidden_size, hidden_size)), np.zeros(hidden_size),
                   np.zeros((N_CLASSES, hidden_size)), np.zeros(N_CLASSES))

    @classmethod
    def initialize(cls, seed: int, input_size: int = CODE_DIM, hidden_size: int = HIDDEN):
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        rng = np.random.default_rng(seed)
        a_in = 1.0 / np.sqrt(input_size)
        a_h = 1.0 / np.sqrt(hidden_size)
        return cls(
            rng.uniform(-a_in, a_in, (hidden_size, input_size)),
            rng.uniform(-a_h, a_h, (hidden_size, hidden_size)),
            np.zeros(hidden_size),
            rng.uniform(-a_h, a_h, (N_CLASSES, hidden_size)),
            np.zeros(N_CLASSES),
            seed=seed,
        )

    def params(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "RnnModel":
        return RnnModel(*(p.copy() for p in self.params()), seed=self.seed, epoch=self.epoch)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


@dataclass
class SequenceSample:
    features: np.ndarray
    label: int
    video_id: str = ""
    subject_id: str = ""

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.features.shape[0] < 1:
            raise ValueError("a sequence needs at least one frame")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    feature_standardization: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = CLIP_NORM

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_width(model: RnnModel, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.input_size:
        raise ValueError(f"feature width {x.shape[1]} does not match model input {model.input_size}")
    return x


def rnn_forward(model: RnnModel, features):
    """Returns ``(probs, hidden)``; ``hidden`` has ``F + 1`` rows starting with h_0 = 0."""
    x = _check_width(model, features)
    pre = x @ model.w_in.T + model.b_h
    hs = np.zeros((x.shape[0] + 1, model.hidden_size))
    for t in range(x.shape[0]):
        hs[t + 1] = np.tanh(pre[t] + model.w_rec @ hs[t])
    return _sigmoid(model.w_out @ hs[-1] + model.b_out), hs


def classifier_loss(pred, label: int) -> float:
    target = np.zeros(N_CLASSES)
    target[int(label)] = 1.0
    d = target - np.asarray(pred, dtype=np.float64)
    return float(d @ d)


def rnn_backward(model: RnnModel, features, label: int):
    """Loss and BPTT gradients (same order as ``RnnModel.params()``) for one sequence."""
    x = _check_width(model, features)
    probs, hs = rnn_forward(model, x)
    target = np.zeros(N_CLASSES)
    target[int(label)] = 1.0
    loss = float(np.sum((target - probs) ** 2))
    dz = -2.0 * (target - probs) * probs * (1.0 - probs)
    g_out = np.outer(dz, hs[-1])
    g_bout = dz
    g_in = np.zeros_like(model.w_in)
    g_rec = np.zeros_like(model.w_rec)
    g_bh = np.zeros_like(model.b_h)
    dh = model.w_out.T @ dz
    for t in range(x.shape[0] - 1, -1, -1):
        da = dh * (1.0 - hs[t + 1] ** 2)
        g_in += np.outer(da, x[t])
        g_rec += np.outer(da, hs[t])
        g_bh += da
        dh = model.w_rec.T @ da
    return loss, [g_in, g_rec, g_bh, g_out, g_bout]


def predict(model: RnnModel, features):
    """Argmax class and the two probabilities; an exact tie goes to class 0."""
    probs, _ = rnn_forward(model, features)
    return (1 if probs[1] > probs[0] else 0), probs


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: RnnModel
    loss_history: list = field(default_factory=list)


def _standardizer(samples):
    x = np.concatenate([s.features for s in samples])
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mu)), sd, 1.0)
    return mu, sd


def _fold_standardization(model: RnnModel, mu, sd) -> RnnModel:
    # W (x - mu) / sd + b  ==  (W / sd) x + (b - (W / sd) mu)
    out = model.copy()
    out.w_in = model.w_in / sd
    out.b_h = model.b_h - out.w_in @ mu
    return out


def _clip(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def train(samples, config: TrainConfig | None = None) -> TrainResult:
    """Mini-batch Adam on the summed squared-error loss with BPTT.

    With standardization on, training runs on standardized features and the
    transform is folded into the input layer of the returned model, so it
    accepts raw features.
    """
    config = config or TrainConfig()
    samples = list(samples)
    labels = {s.label for s in samples}
    if labels != {0, 1}:
        raise ValueError("training needs samples of both classes")
    width = samples[0].features.shape[1]
    if any(s.features.shape[1] != width for s in samples):
        raise ValueError("all samples must share one feature width")
    if config.feature_standardization:
        mu, sd = _standardizer(samples)
        data = [((s.features - mu) / sd, s.label) for s in samples]
    else:
        data = [(s.features, s.label) for s in samples]

    model = RnnModel.initialize(config.seed, width)
    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(config.seed)
    step = 0
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            grads = [np.zeros_like(p) for p in params]
            for i in order[start:start + config.batch_size]:
                loss, g = rnn_backward(model, *data[i])
                total += loss
                for acc, gi in zip(grads, g):
                    acc += gi
            grads, _ = _clip(grads, config.clip_norm)
            step += 1
            for p, mi, vi, g in zip(params, m, v, grads):
                mi *= config.beta1
                mi += (1 - config.beta1) * g
                vi *= config.beta2
                vi += (1 - config.beta2) * g * g
                p -= config.learning_rate * (mi / (1 - config.beta1**step)) / (np.sqrt(vi / (1 - config.beta2**step)) + config.epsilon)
        history.append(total / len(data))
        logger.debug("epoch %d mean loss %.5f", epoch + 1, history[-1])
        if not model.is_finite():
            raise FloatingPointError(f"non-finite weights after epoch {epoch + 1}")
    model.epoch = config.epochs
    if config.feature_standardization:
        model = _fold_standardization(model, mu, sd)
    return TrainResult(model, history)


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Confusion:
    """Counts with deception (label 1) as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_labels(cls, y_true, y_pred):
        t = np.asarray(y_true, dtype=int)
        p = np.asarray(y_pred, dtype=int)
        if t.shape != p.shape:
            raise ValueError("label arrays differ in length")
        return cls(int(np.sum((t == 1) & (p == 1))), int(np.sum((t == 0) & (p == 1))),
                   int(np.sum((t == 0) & (p == 0))), int(np.sum((t == 1) & (p == 0))))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    # NaN when undefined (no positive predictions / no positive samples)
    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else float("nan")

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    def as_dict(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall}


def evaluate(model: RnnModel, samples) -> Confusion:
    samples = list(samples)
    return Confusion.from_labels([s.label for s in samples], [predict(model, s.features)[0] for s in samples])


@dataclass
class FoldResult:
    subject_id: str
    iteration: int
    test: Confusion | None
    validation: Confusion | None
    n_train: int
    skipped: str = ""


@dataclass
class LopoReport:
    folds: list

    def _mean(self, attr):
        """Mean over folds and iterations, skipping folds where the metric is undefined."""
        vals = [getattr(f.test, attr) for f in self.folds if f.test is not None]
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def accuracy(self) -> float:
        return self._mean("accuracy")

    @property
    def precision(self) -> float:
        return self._mean("precision")

    @property
    def recall(self) -> float:
        return self._mean("recall")

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "folds": [
                {"subject_id": f.subject_id, "iteration": f.iteration, "n_train": f.n_train, "skipped": f.skipped,
                 "test": f.test.as_dict() if f.test else None,
                 "validation": f.validation.as_dict() if f.validation else None}
                for f in self.folds
            ],
        }


def _balance(samples, rng):
    by = {0: [s for s in samples if s.label == 0], 1: [s for s in samples if s.label == 1]}
    n = min(len(by[0]), len(by[1]))
    keep = []
    for lab in (0, 1):
        idx = np.sort(rng.choice(len(by[lab]), size=n, replace=False))
        keep += [by[lab][i] for i in idx]
    return keep


def lopo_evaluate(samples, config: TrainConfig | None = None, iterations: int = 1, n_validation: int = 5,
                  trainer=train) -> LopoReport:
    """Leave-one-subject-out folds, repeated ``iterations`` times with fresh sampling.

    Per fold: the held-out subject's videos form the test set, ``n_validation``
    videos drawn from the rest form a validation set, and the majority class of
    the remaining training videos is randomly downsampled to the minority count.
    """
    config = config or TrainConfig()
    samples = list(samples)
    subjects = sorted({s.subject_id for s in samples})
    if len(subjects) < 2:
        raise ValueError("LOPO needs at least two distinct subjects")
    rng = np.random.default_rng(config.seed)
    folds = []
    for it in range(iterations):
        for subj in subjects:
            test = [s for s in samples if s.subject_id == subj]
            rest = [s for s in samples if s.subject_id != subj]
            n_val = min(n_validation, max(len(rest) - 2, 0))
            val_idx = set(rng.choice(len(rest), size=n_val, replace=False).tolist()) if n_val else set()
            val = [s for i, s in enumerate(rest) if i in val_idx]
            pool = [s for i, s in enumerate(rest) if i not in val_idx]
            if len({s.label for s in pool}) < 2:
                folds.append(FoldResult(subj, it, None, None, 0, "training split has a single class"))
                logger.warning("fold %s/%d skipped: single-class training split", subj, it)
                continue
            tr = _balance(pool, rng)
            fold_cfg = TrainConfig(**{**config.__dict__, "seed": int(rng.integers(2**31))})
            model = trainer(tr, fold_cfg).model
            folds.append(FoldResult(subj, it, evaluate(model, test), evaluate(model, val) if val else None, len(tr)))
    return LopoReport(folds)


# --------------------------------------------------------------------------
# FRNN1 checkpoint

CHECKPOINT_MAGIC = b"FRNN1\x00\x00\x00"
_CK_HEADER = struct.Struct("<8s3I")
_CK_TAIL = struct.Struct("<QI")


def save_model(path, model: RnnModel) -> None:
    with open(path, "wb") as fh:
        fh.write(_CK_HEADER.pack(CHECKPOINT_MAGIC, model.input_size, model.hidden_size, N_CLASSES))
        for p in model.params():
            fh.write(np.asarray(p, dtype="<f4").tobytes())
        fh.write(_CK_TAIL.pack(int(model.seed) % 2**64, int(model.epoch)))


def load_model(path) -> RnnModel:
    data = Path(path).read_bytes()
    if len(data) < _CK_HEADER.size:
        raise CheckpointFormatError("file too short for FRNN1 header")
    magic, n_in, n_h, n_out = _CK_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if n_out != N_CLASSES:
        raise CheckpointFormatError(f"expected {N_CLASSES} outputs, got {n_out}")
    shapes = [(n_h, n_in), (n_h, n_h), (n_h,), (n_out, n_h), (n_out,)]
    need = _CK_HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes) + _CK_TAIL.size
    if len(data) != need:
        raise CheckpointFormatError(f"expected {need} bytes, got {len(data)}")
    off = _CK_HEADER.size
    arrays = []
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(s))
        off += 4 * n
    seed, epoch = _CK_TAIL.unpack_from(data, off)
    return RnnModel(*arrays, seed=int(seed), epoch=int(epoch))
