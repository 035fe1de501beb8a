"""Recurrent flow classifier with initial training and fully fine-tuning.

A :class:`ModelCheckpoint` is treated as immutable: :func:`train` and
:func:`fine_tune` copy the parameter vector and return a new checkpoint.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gru
from .flows import DEFAULT_SEQ_LEN, FeatureVector
from .metrics import Metrics, metrics_from_predictions

log = logging.getLogger(__name__)

PREDICT_CHUNK = 4096


class ClassifierError(ValueError):
    pass


class EmptyDatasetError(ClassifierError):
    pass


@dataclass(frozen=True)
class Arch:
    hidden_dim: int = 64
    seq_len: int = DEFAULT_SEQ_LEN

    def __post_init__(self):
        if self.hidden_dim < 1 or self.seq_len < 1:
            raise ClassifierError("hidden_dim and seq_len must be >= 1")


@dataclass(frozen=True)
class Hyperparams:
    """Training settings. ``optimizer`` is ``"adam"``, ``"amsgrad"`` or ``"sgd"``; gradients
    are clipped to global norm ``clip_norm`` before every step. ``precision``
    is the working dtype during optimization; checkpoints always hold
    float64."""

    epochs: int = 50
    batch_size: int = 500
    learning_rate: float = 0.0025
    seed: int = 0
    optimizer: str = "adam"
    clip_norm: float = 5.0
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ClassifierError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ClassifierError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ClassifierError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "amsgrad", "sgd"):
            raise ClassifierError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("float32", "float64"):
            raise ClassifierError(f"unknown precision {self.precision!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class ConfidenceVector:
    probs: np.ndarray
    argmax: int
    max_prob: float

    @classmethod
    def from_probs(cls, probs) -> "ConfidenceVector":
        probs = np.asarray(probs, dtype=np.float64)
        k = int(np.argmax(probs))  # first maximum, i.e. lowest class id on ties
        return cls(probs, k, float(probs[k]))


@dataclass(eq=False)
class ModelCheckpoint:
    version_id: str
    lineage_level: int
    parent_version: str | None
    num_classes: int
    arch: Arch
    parameters: np.ndarray
    label_dict: dict[str, int] = field(default_factory=dict)
    created_ts: float = 0.0
    train_provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.lineage_level == 0) != (self.parent_version is None):
            raise ClassifierError("lineage level 0 iff no parent version")
        expected = gru.param_count(self.arch.hidden_dim, self.num_classes)
        if self.parameters.shape != (expected,):
            raise ClassifierError(f"expected {expected} parameters, got {self.parameters.shape}")

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return (
            self.header() == other.header()
            and self.parameters.dtype == other.parameters.dtype
            and np.array_equal(self.parameters, other.parameters)
        )

    def header(self) -> dict:
        """All non-parameter fields as JSON-ready data."""
        return {
            "version_id": self.version_id,
            "lineage_level": self.lineage_level,
            "parent_version": self.parent_version,
            "num_classes": self.num_classes,
            "arch": asdict(self.arch),
            "label_dict": dict(self.label_dict),
            "created_ts": self.created_ts,
            "train_provenance": self.train_provenance,
        }

    def blocks(self) -> dict[str, np.ndarray]:
        return gru.unpack(self.parameters, self.arch.hidden_dim, self.num_classes)


def _version_id(params: np.ndarray, level: int, parent: str | None) -> str:
    h = hashlib.sha256(params.astype("<f8").tobytes())
    h.update(f"{level}|{parent}".encode())
    return f"L{level}-{h.hexdigest()[:12]}"


def dataset_digest(X: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256(np.ascontiguousarray(X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<i8").tobytes())
    return h.hexdigest()


def init_model(num_classes: int, arch: Arch = Arch(), seed: int = 0, label_dict=None) -> ModelCheckpoint:
    if num_classes < 2:
        raise ClassifierError("num_classes must be >= 2")
    n = gru.param_count(arch.hidden_dim, num_classes)
    s = 1.0 / np.sqrt(arch.hidden_dim)
    params = np.random.default_rng(seed).uniform(-s, s, size=n)
    return ModelCheckpoint(
        _version_id(params, 0, None), 0, None, num_classes, arch, params,
        dict(label_dict or {}), 0.0, {"init_seed": seed},
    )


def _check_features(model: ModelCheckpoint, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.arch.seq_len:
        raise ClassifierError(f"expected features of shape (n, {model.arch.seq_len}), got {X.shape}")
    return X


def predict_proba(model: ModelCheckpoint, X) -> np.ndarray:
    X = _check_features(model, X)
    out = np.empty((X.shape[0], model.num_classes))
    for start in range(0, X.shape[0], PREDICT_CHUNK):
        chunk = X[start:start + PREDICT_CHUNK]
        logits, _ = gru.forward(model.parameters, chunk, model.arch.hidden_dim, model.num_classes)
        out[start:start + PREDICT_CHUNK] = gru.softmax(logits)
    return out


def predict(model: ModelCheckpoint, x: FeatureVector) -> ConfidenceVector:
    values = np.asarray(x.values if isinstance(x, FeatureVector) else x, dtype=np.float64)
    if values.shape != (model.arch.seq_len,):
        raise ClassifierError(f"expected {model.arch.seq_len} features, got {values.shape}")
    return ConfidenceVector.from_probs(predict_proba(model, values[None, :])[0])


def _validate_dataset(model: ModelCheckpoint, X, y, what="dataset"):
    X = _check_features(model, X)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise EmptyDatasetError(f"{what} is empty")
    if y.shape != (X.shape[0],):
        raise ClassifierError("labels do not match features")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ClassifierError(f"label out of range [0, {model.num_classes})")
    return X, y


def _optimize(model: ModelCheckpoint, X, y, hyper: Hyperparams):
    dtype = np.dtype(hyper.precision)
    params = model.parameters.astype(dtype)
    X = X.astype(dtype)
    rng = np.random.default_rng(hyper.seed)
    h_dim, c = model.arch.hidden_dim, model.num_classes
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    v_max = np.zeros_like(params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    curve = []
    n = X.shape[0]
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss, grad = gru.loss_and_grad(params, X[idx], y[idx], h_dim, c)
            total += loss * idx.shape[0]
            norm = np.sqrt(grad @ grad)
            if norm > hyper.clip_norm:
                grad *= hyper.clip_norm / norm
            step += 1
            if hyper.optimizer == "sgd":
                params -= hyper.learning_rate * grad
            else:
                m = beta1 * m + (1 - beta1) * grad
                v = beta2 * v + (1 - beta2) * grad * grad
                if hyper.optimizer == "amsgrad":
                    v_max = np.maximum(v_max, v)
                    denom = v_max
                else:
                    denom = v
                m_hat = m / (1 - beta1 ** step)
                v_hat = denom / (1 - beta2 ** step)
                params -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        curve.append(total / n)
        log.debug("epoch %d loss %.5f", epoch + 1, curve[-1])
    return params.astype(np.float64), curve


def _provenance(X, y, hyper: Hyperparams, mode: str, curve) -> dict:
    return {
        "mode": mode,
        "dataset_digest": dataset_digest(X, y),
        "n_samples": int(X.shape[0]),
        "hyper": asdict(hyper),
        "loss_curve": [float(v) for v in curve],
    }


def train(model: ModelCheckpoint, X, y, hyper: Hyperparams = Hyperparams(), ts: float | None = None) -> ModelCheckpoint:
    """Minibatch training on cross-entropy. Lineage is left unchanged.

    ``ts`` is the logical creation time of the result (stream seconds); it
    defaults to the input checkpoint's.
    """
    X, y = _validate_dataset(model, X, y)
    params, curve = _optimize(model, X, y, hyper)
    level, parent = model.lineage_level, model.parent_version
    return replace(
        model,
        version_id=_version_id(params, level, parent),
        parameters=params,
        created_ts=model.created_ts if ts is None else float(ts),
        train_provenance=_provenance(X, y, hyper, "train", curve),
    )


def fine_tune(model: ModelCheckpoint, X, y, hyper: Hyperparams = Hyperparams(), ts: float | None = None) -> ModelCheckpoint:
    """Fully fine-tune every parameter on silver samples; lineage + 1."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyDatasetError("nothing to evolve on: silver set is empty")
    X, y = _validate_dataset(model, X, y, "silver set")
    params, curve = _optimize(model, X, y, hyper)
    level = model.lineage_level + 1
    return replace(
        model,
        version_id=_version_id(params, level, model.version_id),
        lineage_level=level,
        parent_version=model.version_id,
        parameters=params,
        created_ts=model.created_ts if ts is None else float(ts),
        train_provenance=_provenance(X, y, hyper, "fine_tune", curve),
    )


def evaluate(model: ModelCheckpoint, X, y) -> Metrics:
    X, y = _validate_dataset(model, X, y)
    pred = np.argmax(predict_proba(model, X), axis=1)
    return metrics_from_predictions(y, pred, model.num_classes)
