"""Small reference classifier whose per-epoch outputs form the training dynamics.

A one-hidden-layer tanh MLP with a softmax head, trained by mini-batch SGD
with momentum and step learning-rate drops. After every epoch a full forward
sweep records each sample's given-label probability.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dyndetect.dynamics import DynamicsTable, LabeledDataset
from dyndetect.errors import DivergenceError, InvalidArgumentError, ParseError


# --------------------------------------------------------------------------- data


def make_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    label_overlap_fraction: float = 0.0,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Gaussian clusters with unit covariance; returns ``(train, test)``.

    Centers are ``+-e_k * separation / sqrt(2)`` under a random rotation, so
    every pair of centers is at distance ``separation`` (orthogonal pair) or
    ``sqrt(2) * separation`` (antipodal pair). This fits at most ``2 * dim``
    classes.

    ``label_overlap_fraction`` of the samples are drawn halfway between their
    own center and a random other one; they keep their own label, making them
    hard but not mislabeled.
    """
    if num_classes < 2:
        raise InvalidArgumentError("num_classes must be >= 2")
    if per_class < 1:
        raise InvalidArgumentError("per_class must be >= 1")
    if not separation > 0:
        raise InvalidArgumentError("separation must be positive")
    if num_classes > 2 * dim:
        raise InvalidArgumentError(
            f"dim={dim} too small to place {num_classes} centers {separation} apart (need dim >= {math.ceil(num_classes / 2)})"
        )
    if not 0.0 <= label_overlap_fraction <= 1.0:
        raise InvalidArgumentError("label_overlap_fraction must be in [0, 1]")

    rng = np.random.default_rng(seed)
    centers = _centers(rng, num_classes, dim, separation)

    labels = np.repeat(np.arange(num_classes), per_class)
    n = labels.size
    means = centers[labels].copy()
    n_overlap = math.floor(label_overlap_fraction * n)
    if n_overlap:
        idx = rng.choice(n, size=n_overlap, replace=False)
        other = (labels[idx] + rng.integers(1, num_classes, size=n_overlap)) % num_classes
        means[idx] = 0.5 * (centers[labels[idx]] + centers[other])
    features = means + rng.standard_normal((n, dim))

    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    train = LabeledDataset(features[train_idx], labels[train_idx], num_classes)
    test = LabeledDataset(features[test_idx], labels[test_idx], num_classes)
    return train, test


def _centers(rng, num_classes, dim, separation):
    rotation, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    radius = separation / math.sqrt(2.0)
    signs = np.where(np.arange(num_classes) % 2 == 0, 1.0, -1.0)
    return signs[:, None] * radius * rotation[:, np.arange(num_classes) // 2].T


def blob_centers(num_classes: int, dim: int, separation: float, seed: int) -> np.ndarray:
    """The centers :func:`make_blobs` uses for the same arguments."""
    return _centers(np.random.default_rng(seed), num_classes, dim, separation)


# -------------------------------------------------------------------------- model


@dataclass
class ClassifierModel:
    w1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, C)
    b2: np.ndarray  # (C,)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(**{k: v.copy() for k, v in self.params().items()})

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "num_classes": self.num_classes,
            "activation": "tanh",
            "w1": self.w1.ravel().tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.ravel().tolist(),
            "b2": self.b2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierModel":
        try:
            di, h, c = int(d["input_dim"]), int(d["hidden"]), int(d["num_classes"])
            return cls(
                w1=np.array(d["w1"], dtype=np.float64).reshape(di, h),
                b1=np.array(d["b1"], dtype=np.float64).reshape(h),
                w2=np.array(d["w2"], dtype=np.float64).reshape(h, c),
                b2=np.array(d["b2"], dtype=np.float64).reshape(c),
            )
        except (KeyError, ValueError) as exc:
            raise ParseError(f"malformed classifier checkpoint: {exc}") from None

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_classifier(input_dim: int, hidden: int, num_classes: int, rng: np.random.Generator) -> ClassifierModel:
    # head starts at zero so the untrained model outputs exactly 1/C
    bound = 1.0 / math.sqrt(input_dim)
    return ClassifierModel(
        w1=rng.uniform(-bound, bound, size=(input_dim, hidden)),
        b1=rng.uniform(-bound, bound, size=hidden),
        w2=np.zeros((hidden, num_classes)),
        b2=np.zeros(num_classes),
    )


def loss_and_grad(model: ClassifierModel, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient."""
    a = np.tanh(x @ model.w1 + model.b1)
    z = a @ model.w2 + model.b2
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = x.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), y]))

    dz = np.exp(z - logsum[:, None])
    dz[np.arange(n), y] -= 1.0
    dz /= n
    da = dz @ model.w2.T
    dpre = da * (1.0 - a * a)
    grads = {
        "w1": x.T @ dpre,
        "b1": dpre.sum(axis=0),
        "w2": a.T @ dz,
        "b2": dz.sum(axis=0),
    }
    return loss, grads


# ----------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_drop_epochs: list[int] = field(default_factory=lambda: [30, 45])
    lr_drop_factor: float = 0.1
    hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 2:
            raise InvalidArgumentError("epochs must be >= 2")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError("momentum must be in [0, 1)")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise InvalidArgumentError("learning_rate and weight_decay must be non-negative")
        drops = list(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])) or any(e < 0 or e >= self.epochs for e in drops):
            raise InvalidArgumentError("lr_drop_epochs must be strictly increasing and < epochs")
        self.lr_drop_epochs = [int(e) for e in drops]

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_drop_epochs if e <= epoch)
        return self.learning_rate * self.lr_drop_factor**drops

    def schedule_str(self) -> str:
        drops = "/".join(str(e) for e in self.lr_drop_epochs)
        return f"sgd lr={self.learning_rate} mom={self.momentum} drops={drops}x{self.lr_drop_factor} T={self.epochs}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def scaled(cls, epochs: int, **kwargs) -> "TrainConfig":
        """Schedule with drops at 50% and 75% of ``epochs`` (the 200/100/150 shape)."""
        return cls(epochs=epochs, lr_drop_epochs=scaled_drops(epochs), **kwargs)


def scaled_drops(epochs: int) -> list[int]:
    """Drop epochs at 50% and 75% of the run; collapsed when the run is too short."""
    return sorted({d for d in (round(epochs * 0.5), round(epochs * 0.75)) if 0 < d < epochs})


def given_label_probs(model: ClassifierModel, dataset: LabeledDataset) -> np.ndarray:
    p = model.predict_proba(dataset.features)
    return p[np.arange(len(dataset)), dataset.labels]


def train_classifier(
    dataset: LabeledDataset,
    config: TrainConfig,
    model: ClassifierModel | None = None,
) -> tuple[ClassifierModel, DynamicsTable]:
    """Train on the given labels and record the per-epoch dynamics table."""
    n = len(dataset)
    if n == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_classifier(dataset.dim, config.hidden, dataset.num_classes, rng)
    else:
        model = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    x, y = dataset.features, dataset.labels
    batch = min(config.batch_size, n)
    dynamics = np.empty((n, config.epochs))

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, grads = loss_and_grad(model, x[idx], y[idx])
            total += loss * idx.size
            if lr == 0.0:
                continue
            for name, param in model.params().items():
                g = grads[name]
                if config.weight_decay:
                    g = g + config.weight_decay * param
                v = velocity[name]
                v *= config.momentum
                v += g
                param -= lr * v
        if not math.isfinite(total):
            raise DivergenceError(epoch + 1)
        dynamics[:, epoch] = given_label_probs(model, dataset)

    meta = {
        "num_classes": dataset.num_classes,
        "seed": config.seed,
        "schedule": config.schedule_str(),
        "generator": "dyndetect.reftrain",
    }
    table = DynamicsTable(np.clip(dynamics, 0.0, 1.0), dataset.labels, dataset.true_labels, dataset.flags, meta)
    return model, table


def evaluate_classifier(model: ClassifierModel, test: LabeledDataset) -> float:
    """Top-1 accuracy against the test split's labels."""
    if len(test) == 0:
        raise InvalidArgumentError("empty test set")
    return float(np.mean(model.predict(test.features) == test.labels))
