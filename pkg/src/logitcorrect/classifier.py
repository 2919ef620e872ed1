"""The attacked model f: training, logits extraction, accuracy, selected sets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn

log = logging.getLogger(__name__)

EVAL_CHUNK = 250  # fixed so batched results never depend on caller batch sizes


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.size and (img.min() < 0 or img.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images (N, H, W, ch) in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if imgs.shape[0] != labels.shape[0]:
            raise ValueError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
        if imgs.size and (imgs.min() < 0 or imgs.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> LabeledExample:
        return LabeledExample(self.images[i], int(self.labels[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    @classmethod
    def from_examples(cls, examples, num_classes=10) -> "Dataset":
        examples = list(examples)
        if not examples:
            raise ValueError("empty dataset")
        shapes = {np.shape(e.image) for e in examples}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent image shapes {sorted(shapes)}")
        return cls(np.stack([e.image for e in examples]),
                   np.array([e.label for e in examples]), num_classes)


@dataclass
class ClassifierSpec:
    arch: str = "cnn-small"  # or "mlp-2h"
    widths: tuple = ()  # empty -> architecture default
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0


def arch_string(spec: ClassifierSpec, input_shape, num_classes: int) -> str:
    if spec.arch == "mlp-2h":
        h1, h2 = spec.widths or (256, 128)
        n_in = int(np.prod(input_shape))
        return f"dense({n_in},{h1}) relu dense({h1},{h2}) relu dense({h2},{num_classes})"
    if spec.arch == "cnn-small":
        c1, c2, h = spec.widths or (16, 32, 128)
        hh, ww, ch = input_shape
        if hh % 4 or ww % 4:
            raise ValueError(f"cnn-small needs H, W divisible by 4, got {input_shape}")
        flat = (hh // 4) * (ww // 4) * c2
        return (f"conv2d({ch},{c1},3) relu maxpool2x2 conv2d({c1},{c2},3) relu maxpool2x2 "
                f"dense({flat},{h}) relu dense({h},{num_classes})")
    raise ValueError(f"unknown architecture {spec.arch!r}")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # dicts: epoch, loss, accuracy

    def add(self, **row):
        self.rows.append(row)
        log.info("epoch %(epoch)d loss %(loss).4f acc %(accuracy).4f", row)


def train_classifier(data: Dataset, spec: ClassifierSpec, history: TrainLog | None = None) -> nn.Network:
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    input_shape = data.images.shape[1:]
    net = nn.build_network(arch_string(spec, input_shape, data.num_classes),
                           data.num_classes, spec.seed, input_shape)
    state = nn.OptimizerState("adam", lr=spec.lr, weight_decay=spec.weight_decay)
    rng = np.random.default_rng([spec.seed, 1])
    history = history if history is not None else TrainLog()
    n = len(data)
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            tr = nn.forward(net, data.images[idx], "train", rng=rng)
            loss, g = nn.softmax_cross_entropy(tr.logits, data.labels[idx])
            grads, _ = nn.backward(net, tr, g)
            params, state = nn.optimizer_step(state, net.params(), grads)
            net = net.with_params(params)
            total += loss * len(idx)
            correct += int((nn.predict(tr.logits) == data.labels[idx]).sum())
        history.add(epoch=epoch, loss=total / n, accuracy=correct / n)
    return net


def batch_logits(net: nn.Network, images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        return np.zeros((0, net.num_classes), np.float32)
    return np.concatenate([nn.logits(net, images[s:s + EVAL_CHUNK])
                           for s in range(0, len(images), EVAL_CHUNK)])


def predict_logits(net: nn.Network, image) -> np.ndarray:
    """Raw pre-softmax scores for one image."""
    image = np.asarray(image, dtype=np.float32)
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return nn.logits(net, image[None])[0]


@dataclass(frozen=True)
class Accuracy:
    correct: int
    total: int

    @property
    def value(self) -> float:
        return self.correct / self.total

    def __float__(self):
        return self.value


def evaluate_accuracy(net: nn.Network, data: Dataset) -> Accuracy:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = nn.predict(batch_logits(net, data.images))
    return Accuracy(int((pred == data.labels).sum()), len(data))


def select_correct_subset(net: nn.Network, data: Dataset, n_per_class: int):
    """First ``n_per_class`` correctly classified examples of each class, in dataset order.

    Returns (subset, manifest); classes with no correct example are listed
    under "missing_classes" rather than raising.
    """
    pred = nn.predict(batch_logits(net, data.images))
    counts = np.zeros(data.num_classes, dtype=np.int64)
    keep = []
    for i, (p, y) in enumerate(zip(pred, data.labels)):
        if p == y and counts[y] < n_per_class:
            keep.append(i)
            counts[y] += 1
    manifest = {"indices": keep, "per_class": counts.tolist(),
                "missing_classes": [int(c) for c in np.flatnonzero(counts == 0)]}
    if manifest["missing_classes"]:
        log.warning("no correctly classified examples for classes %s", manifest["missing_classes"])
    return data.subset(keep), manifest
