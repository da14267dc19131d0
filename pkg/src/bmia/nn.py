"""Small fully connected networks trained with deterministic SGD.

Covers the target and reference classifiers, the regression network used by the
toy demonstration, and the quantile network used by the quantile-regression
attack. Everything is plain numpy with an explicit backward pass.
"""
from __future__ import annotations

import dataclasses
import json
import math
from collections.abc import Sequence
from typing import Any

import numpy as np

from bmia.numkit import RngState

ACTIVATIONS = ("relu", "tanh")
TASKS = ("classification", "regression", "quantile")
CHECKPOINT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class MlpArchitecture:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    task: str = "classification"
    taus: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ValueError(f"layer_widths needs >= 2 positive entries, got {self.layer_widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "quantile":
            if not self.taus or any(not 0.0 < t < 1.0 for t in self.taus):
                raise ValueError("quantile task needs taus in (0, 1)")
            if len(self.taus) != self.output_width:
                raise ValueError("quantile network needs one output per tau")
        elif self.taus:
            raise ValueError("taus only apply to the quantile task")

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]


@dataclasses.dataclass
class MlpModel:
    architecture: MlpArchitecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        widths = self.architecture.layer_widths
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ValueError("layer count does not match architecture")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}, {b.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def last_layer_augmented(self) -> np.ndarray:
        """Last-layer weights with the bias appended as a final column, ``O x (H+1)``."""
        return np.hstack([self.weights[-1], self.biases[-1][:, None]])

    def with_last_layer(self, w_aug: np.ndarray) -> MlpModel:
        weights = [w.copy() for w in self.weights]
        biases = [b.copy() for b in self.biases]
        weights[-1] = np.array(w_aug[:, :-1], dtype=np.float64)
        biases[-1] = np.array(w_aug[:, -1], dtype=np.float64)
        return MlpModel(self.architecture, weights, biases)

    def copy(self) -> MlpModel:
        return MlpModel(self.architecture, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 120
    milestone_epochs: tuple[int, ...] = (50, 100)
    milestone_factor: float = 0.1
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestone_epochs", tuple(int(m) for m in self.milestone_epochs))
        if self.learning_rate <= 0 or self.milestone_factor <= 0:
            raise ValueError("learning_rate and milestone_factor must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid weight_decay, batch_size or epochs")
        ms = self.milestone_epochs
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestone_epochs must be strictly increasing")
        if ms and (ms[0] < 0 or (self.epochs > 0 and ms[-1] >= self.epochs)):
            raise ValueError("milestone_epochs must lie in [0, epochs)")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestone_epochs if m <= epoch)
        return self.learning_rate * self.milestone_factor**passed


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def weight_init(architecture: MlpArchitecture, seed: int) -> MlpModel:
    """Uniform ``[-sqrt(6/fan_in), sqrt(6/fan_in)]`` weights and zero biases."""
    widths = architecture.layer_widths
    root = RngState(seed).child("weight_init")
    weights, biases = [], []
    for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(root.child(layer).uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(architecture, weights, biases)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (model.architecture.input_width,) or x.ndim > 2:
        raise ValueError(f"input shape {x.shape} does not match input width "
                         f"{model.architecture.input_width}")
    return x


def _hidden_pass(model: MlpModel, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        acts.append(_activate(acts[-1] @ w.T + b, model.architecture.activation))
    return acts


def _augment(h: np.ndarray) -> np.ndarray:
    return np.concatenate([h, np.ones(h.shape[:-1] + (1,))], axis=-1)


def last_layer_features(model: MlpModel, x) -> np.ndarray:
    """Penultimate activations with a constant 1 appended (length ``H+1``).

    Accepts a single feature vector or an ``(N, I)`` batch.
    """
    x = _check_input(model, x)
    return _augment(_hidden_pass(model, x)[-1])


def forward(model: MlpModel, x) -> np.ndarray:
    """Network output for one input vector or an ``(N, I)`` batch.

    The last layer is applied as ``W_aug @ h`` on the bias-augmented features so
    the result is bit-identical to composing :func:`last_layer_features` with
    :meth:`MlpModel.last_layer_augmented`.
    """
    h = last_layer_features(model, x)
    return h @ model.last_layer_augmented().T


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def pinball_loss(pred: np.ndarray, target: np.ndarray, taus: Sequence[float]) -> np.ndarray:
    """Per-example pinball loss summed over quantile levels.

    ``pred`` is ``(N, len(taus))``, ``target`` is ``(N,)``.
    """
    diff = np.asarray(target, dtype=np.float64)[:, None] - pred
    taus = np.asarray(taus, dtype=np.float64)
    return np.maximum(taus * diff, (taus - 1.0) * diff).sum(axis=1)


def _data_term(model: MlpModel, out: np.ndarray, targets: np.ndarray):
    """Mean data loss and its gradient with respect to the network output."""
    arch = model.architecture
    n = out.shape[0]
    if arch.task == "classification":
        labels = np.asarray(targets)
        if labels.ndim != 1 or labels.shape[0] != n:
            raise ValueError("classification targets must be a label vector")
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= arch.output_width:
            raise ValueError(f"label out of range [0, {arch.output_width})")
        logp = log_softmax(out)
        loss = -logp[np.arange(n), labels].mean()
        dout = np.exp(logp)
        dout[np.arange(n), labels] -= 1.0
        return loss, dout / n
    targets = np.asarray(targets, dtype=np.float64)
    if arch.task == "regression":
        targets = targets.reshape(n, -1)
        resid = out - targets
        return 0.5 * (resid**2).sum(axis=1).mean(), resid / n
    targets = targets.reshape(n)
    taus = np.asarray(arch.taus)
    diff = targets[:, None] - out
    loss = pinball_loss(out, targets, taus).mean()
    dout = np.where(diff > 0, -taus, np.where(diff < 0, 1.0 - taus, 0.0))
    return loss, dout / n


def data_loss(model: MlpModel, features, targets) -> float:
    """Mean data term of the training objective, without weight decay."""
    out = forward(model, features)
    return float(_data_term(model, np.atleast_2d(out), targets)[0])


def loss_and_grad(model: MlpModel, features, targets, weight_decay: float = 0.0):
    """Training objective ``mean data loss + (weight_decay/2)*||params||^2`` and its gradient.

    The data term is softmax cross-entropy, half squared error, or summed
    pinball loss depending on ``model.architecture.task``.

    Returns:
      ``(loss, grads)`` with ``grads`` a list of ``(dW, db)`` per layer.
    """
    x = _check_input(model, features)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("loss_and_grad needs a non-empty (N, I) batch")
    acts = _hidden_pass(model, x)
    w_aug = model.last_layer_augmented()
    h_aug = _augment(acts[-1])
    out = h_aug @ w_aug.T
    loss, dout = _data_term(model, out, targets)

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    d_aug = dout.T @ h_aug
    grads.append((d_aug[:, :-1], d_aug[:, -1].copy()))
    delta = dout @ model.weights[-1]
    for layer in range(model.n_layers - 2, -1, -1):
        a = acts[layer + 1]
        if model.architecture.activation == "relu":
            delta = delta * (a > 0.0)
        else:
            delta = delta * (1.0 - a * a)
        grads.append((delta.T @ acts[layer], delta.sum(axis=0)))
        if layer > 0:
            delta = delta @ model.weights[layer]
    grads.reverse()

    if weight_decay:
        sq = sum(float((w * w).sum() + (b * b).sum()) for w, b in zip(model.weights, model.biases))
        loss += 0.5 * weight_decay * sq
        grads = [(gw + weight_decay * w, gb + weight_decay * b)
                 for (gw, gb), w, b in zip(grads, model.weights, model.biases)]
    return float(loss), grads


def sgd_train(init: MlpModel, data, config: TrainConfig, rng: RngState | None = None,
              history: list[float] | None = None) -> MlpModel:
    """Mini-batch SGD with classical momentum and step learning-rate decay.

    ``data`` is anything with ``features`` and ``labels`` arrays. Each epoch is a
    full shuffle drawn from ``rng`` (default: a stream derived from
    ``config.seed``); the last partial batch is kept. When ``history`` is given,
    the mean training objective of every epoch is appended to it.

    Raises:
      TrainingDivergedError: the loss became non-finite.
    """
    features = np.asarray(data.features, dtype=np.float64)
    targets = np.asarray(data.labels)
    n = features.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if targets.shape[0] != n:
        raise ValueError("features and labels disagree on the number of examples")
    if rng is None:
        rng = RngState(config.seed).child("sgd_shuffle")
    model = init.copy()
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(model.weights, model.biases)]
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for batch, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grad(model, features[idx], targets[idx], config.weight_decay)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, batch, loss)
            total += loss * idx.size
            for i, (gw, gb) in enumerate(grads):
                vw, vb = velocity[i]
                vw *= config.momentum
                vw += gw
                vb *= config.momentum
                vb += gb
                model.weights[i] -= lr * vw
                model.biases[i] -= lr * vb
        if history is not None:
            history.append(total / n)
    return model


def accuracy(model: MlpModel, features, labels) -> float:
    pred = np.argmax(forward(model, features), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# Checkpoints -----------------------------------------------------------------

def _config_dict(config: TrainConfig | None) -> dict[str, Any] | None:
    if config is None:
        return None
    d = dataclasses.asdict(config)
    d["milestone_epochs"] = list(config.milestone_epochs)
    return d


def model_to_dict(model: MlpModel, config: TrainConfig | None = None,
                  seed: int | None = None) -> dict[str, Any]:
    arch = model.architecture
    return {
        "format_version": CHECKPOINT_VERSION,
        "architecture": {
            "layer_widths": list(arch.layer_widths),
            "activation": arch.activation,
            "task": arch.task,
            "taus": list(arch.taus),
        },
        "layers": [{"weight": w.tolist(), "bias": b.tolist()}
                   for w, b in zip(model.weights, model.biases)],
        "train_config": _config_dict(config),
        "seed": seed,
    }


def model_from_dict(d: dict[str, Any]) -> MlpModel:
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported model checkpoint version {d.get('format_version')}")
    arch = MlpArchitecture(**d["architecture"])
    weights = [np.array(layer["weight"], dtype=np.float64).reshape(o, i)
               for layer, i, o in zip(d["layers"], arch.layer_widths[:-1], arch.layer_widths[1:])]
    biases = [np.array(layer["bias"], dtype=np.float64) for layer in d["layers"]]
    return MlpModel(arch, weights, biases)


def dumps_model(model: MlpModel, config: TrainConfig | None = None, seed: int | None = None) -> str:
    # json writes floats with repr(), which round-trips float64 exactly.
    return json.dumps(model_to_dict(model, config, seed), indent=1, sort_keys=True) + "\n"


def save_model(path, model: MlpModel, config: TrainConfig | None = None,
               seed: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_model(model, config, seed))


def load_model(path) -> MlpModel:
    with open(path, encoding="utf-8") as f:
        return model_from_dict(json.load(f))


def load_checkpoint(path) -> tuple[MlpModel, TrainConfig | None, int | None]:
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    cfg = TrainConfig(**d["train_config"]) if d.get("train_config") else None
    return model_from_dict(d), cfg, d.get("seed")
