"""The fixed small convolutional classifier and its training primitives.

One architecture is used everywhere so results stay comparable across runs:
conv3x3(16)-ReLU-maxpool2-conv3x3(32)-ReLU-maxpool2-dense(classes), batch
leading, channels last, float64 throughout. Model states are immutable;
``sgd_step`` returns a fresh state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import rng_for

CHECKPOINT_MAGIC = b"PLAB1"


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor for the small CNN."""

    height: int
    width: int
    channels: int
    classes: int
    conv1: int = 16
    conv2: int = 32

    @property
    def dense_in(self) -> int:
        return (self.height // 2 // 2) * (self.width // 2 // 2) * self.conv2

    def param_shapes(self):
        return (
            (3, 3, self.channels, self.conv1),
            (self.conv1,),
            (3, 3, self.conv1, self.conv2),
            (self.conv2,),
            (self.dense_in, self.classes),
            (self.classes,),
        )

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "classes": self.classes,
            "conv1": self.conv1,
            "conv2": self.conv2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


@dataclass(frozen=True)
class ModelState:
    """Architecture plus an ordered tuple of parameter arrays.

    Parameter order is fixed: conv1 kernel, conv1 bias, conv2 kernel,
    conv2 bias, dense weight, dense bias. Treat the arrays as read-only;
    updates go through :func:`sgd_step`.
    """

    arch: Architecture
    params: tuple

    def logits(self, batch) -> np.ndarray:
        return _forward_nodes(self, batch)[2].value

    def predict(self, batch) -> np.ndarray:
        return self.logits(batch).argmax(axis=1)

    def loss(self, batch, labels) -> float:
        return loss_softmax_xent(self.logits(batch), labels)

    def loss_and_grads(self, batch, labels):
        """One forward/backward pass.

        Returns ``(loss, param_grads, input_grad)``; the input gradient is
        what input-space attacks consume.
        """
        x, ps, logits = _forward_nodes(self, batch)
        loss = T.softmax_xent(logits, labels)
        T.backward(loss)
        return float(loss.value), tuple(p.grad for p in ps), x.grad

    def accuracy(self, images, labels, batch_size: int = 256) -> float:
        images = np.asarray(images)
        labels = np.asarray(labels)
        hits = 0
        for lo in range(0, len(images), batch_size):
            chunk = images[lo:lo + batch_size]
            hits += int((self.predict(chunk) == labels[lo:lo + batch_size]).sum())
        return hits / len(images)


def init_model(arch: Architecture, seed: int) -> ModelState:
    """Kaiming-style uniform init for weights, zeros for biases."""
    rng = rng_for(seed, "init")
    params = []
    for shape in arch.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-bound, bound, size=shape))
    return ModelState(arch, tuple(params))


def _forward_nodes(model: ModelState, batch):
    batch = np.asarray(batch, dtype=np.float64)
    a = model.arch
    expect = (a.height, a.width, a.channels)
    if batch.ndim != 4 or batch.shape[1:] != expect:
        raise ValueError(
            f"input layer: expected batch shaped (N, {a.height}, {a.width}, "
            f"{a.channels}), got {batch.shape}"
        )
    x = T.leaf(batch)
    ps = tuple(T.leaf(p) for p in model.params)
    w1, b1, w2, b2, wd, bd = ps
    h = T.maxpool2(T.relu(T.conv2d(x, w1, b1)))
    h = T.maxpool2(T.relu(T.conv2d(h, w2, b2)))
    h = T.flatten(h)
    if h.value.shape[1] != wd.value.shape[0]:
        raise ValueError(
            f"dense layer: expected {wd.value.shape[0]} input features, "
            f"got {h.value.shape[1]}"
        )
    logits = T.add(T.matmul(h, wd), bd)
    return x, ps, logits


def forward(model: ModelState, batch) -> np.ndarray:
    """Logits for a batch; deterministic for fixed model and batch."""
    return model.logits(batch)


def loss_softmax_xent(logits, labels) -> float:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    return float(T.softmax_xent(T.leaf(logits), labels).value)


def sgd_step(model: ModelState, grads, lr: float) -> ModelState:
    """Plain gradient step: each parameter becomes ``p - lr * g`` exactly."""
    if len(grads) != len(model.params):
        raise ValueError(f"expected {len(model.params)} gradients, got {len(grads)}")
    new = []
    for p, g in zip(model.params, grads):
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        new.append(p - lr * g)
    return ModelState(model.arch, tuple(new))


def save_model(model: ModelState, path) -> None:
    """Checkpoint layout: magic, length-prefixed JSON descriptor, then raw
    little-endian float64 parameters in declaration order."""
    desc = json.dumps(model.arch.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        for p in model.params:
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path) -> ModelState:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")
        (n,) = struct.unpack("<I", f.read(4))
        arch = Architecture.from_dict(json.loads(f.read(n).decode()))
        params = []
        for shape in arch.param_shapes():
            count = int(np.prod(shape))
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError("truncated checkpoint")
            params.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
    return ModelState(arch, tuple(params))
