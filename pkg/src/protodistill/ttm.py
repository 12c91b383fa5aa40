"""Teacher training and soft-label student training on distilled data.

Students never see hard labels in the soft-label path: every epoch, each
augmented minibatch view is passed through the frozen teacher and the student
minimizes the temperature-scaled KL divergence to the teacher's prediction on
that same view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autoencoder import TrainingDiverged
from .dataio import ImageDataset
from .numerics import MLP, AdamW, NonFiniteGradient, Tensor, cosine_lr, grad, ops, stream
from .numerics.nn import iterate_minibatches, shapes_from_state


# ---------------------------------------------------------------- augmentation

def random_resized_crop_boxes(n: int, height: int, width: int, rng: np.random.Generator,
                              scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    """``(n, 4)`` integer boxes ``(top, left, h, w)``; up to 10 tries, then the full image."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    boxes = np.empty((n, 4), dtype=np.int64)
    for k in range(n):
        for _ in range(10):
            target = area * rng.uniform(*scale)
            aspect = math.exp(rng.uniform(*log_ratio))
            w = int(round(math.sqrt(target * aspect)))
            h = int(round(math.sqrt(target / aspect)))
            if 0 < w <= width and 0 < h <= height:
                top = int(rng.integers(0, height - h + 1))
                left = int(rng.integers(0, width - w + 1))
                boxes[k] = (top, left, h, w)
                break
        else:
            boxes[k] = (0, 0, height, width)
    return boxes


def crop_and_resize(images: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Bilinear resize of each box back to the full image size (half-pixel centers)."""
    n, H, W = images.shape[:3]
    top, left, h, w = (boxes[:, i][:, None].astype(np.float64) for i in range(4))
    ys = np.clip((np.arange(H)[None, :] + 0.5) * h / H - 0.5, 0, h - 1) + top
    xs = np.clip((np.arange(W)[None, :] + 0.5) * w / W - 0.5, 0, w - 1) + left
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, :, None, None]
    wx = (xs - x0)[:, None, :, None]
    idx = np.arange(n)[:, None, None]

    def at(yy, xx):
        return images[idx, yy[:, :, None], xx[:, None, :]]

    top_row = at(y0, x0) * (1 - wx) + at(y0, x1) * wx
    bottom_row = at(y1, x0) * (1 - wx) + at(y1, x1) * wx
    return top_row * (1 - wy) + bottom_row * wy


def augment(images01: np.ndarray, rng: np.random.Generator, scale=(0.08, 1.0),
            ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    n, H, W = images01.shape[:3]
    return crop_and_resize(images01, random_resized_crop_boxes(n, H, W, rng, scale, ratio))


# ---------------------------------------------------------------- classifier

class ClassifierNet:
    def __init__(self, image_shape, K: int, hidden=(256, 64), seed: int = 0, name: str = "net"):
        self.image_shape = tuple(image_shape)
        self.K = K
        self.mlp = MLP([int(np.prod(image_shape)), *hidden, K], stream(seed, name, "init"),
                       activation="silu")

    def _flat(self, images01: np.ndarray) -> np.ndarray:
        images01 = np.asarray(images01, dtype=np.float64)
        if images01.shape[1:] != self.image_shape:
            raise ValueError(f"images of shape {images01.shape[1:]} do not match {self.image_shape}")
        return images01.reshape(len(images01), -1)

    def forward(self, images01: np.ndarray) -> Tensor:
        return self.mlp(Tensor(self._flat(images01)))

    def logits(self, images01: np.ndarray) -> np.ndarray:
        return self.forward(images01).data

    def features(self, images01: np.ndarray) -> np.ndarray:
        """Penultimate activations."""
        return self.mlp(Tensor(self._flat(images01)), return_hidden=True)[1].data

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = self.mlp.state_dict(prefix)
        out[f"{prefix}.image_shape"] = np.array(self.image_shape, dtype=np.float64)
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray], prefix: str) -> "ClassifierNet":
        widths = shapes_from_state(state, prefix)
        shape = tuple(int(v) for v in state[f"{prefix}.image_shape"])
        net = cls(shape, widths[-1], hidden=tuple(widths[1:-1]))
        net.mlp.load_state_dict(state, prefix)
        return net

    def copy(self) -> "ClassifierNet":
        other = ClassifierNet(self.image_shape, self.K, hidden=tuple(self.mlp.widths[1:-1]))
        other.mlp.load_state_dict(self.mlp.state_dict("m"), "m")
        return other


def images01(ds: ImageDataset) -> np.ndarray:
    return ds.images.astype(np.float64) / 255.0


# ---------------------------------------------------------------- losses

def soft_labels(teacher: ClassifierNet, images: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return ops.softmax(Tensor(teacher.logits(images) / temperature)).data


def kd_loss(teacher_logits, student_logits, temperature: float) -> Tensor:
    """``tau^2 * KL(softmax(t/tau) || softmax(s/tau))``, averaged over the batch."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t = teacher_logits if isinstance(teacher_logits, Tensor) else Tensor(teacher_logits)
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    inv = 1.0 / temperature
    kl = ops.kl_divergence(ops.log_softmax(ops.mul(t, inv)), ops.log_softmax(ops.mul(s, inv)))
    return ops.mul(kl, temperature * temperature)


def cross_entropy(logits: Tensor, labels: np.ndarray, K: int) -> Tensor:
    onehot = Tensor(np.eye(K)[np.asarray(labels)])
    return ops.mul(ops.mean(ops.sum(ops.mul(ops.log_softmax(logits), onehot), axis=1)), -1.0)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    """Settings shared by teacher and student loops."""
    epochs: int = 500
    batch_size: int = 100
    lr: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 0.01
    hidden: tuple[int, ...] = (256, 64)
    augment: bool = True
    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)


@dataclass
class KDConfig(TrainConfig):
    temperature: float = 20.0


def teacher_config() -> TrainConfig:
    return TrainConfig(epochs=30, batch_size=100, augment=False)


@dataclass
class TrainResult:
    net: ClassifierNet
    history: list[float] = field(default_factory=list)


def _fit(net: ClassifierNet, x: np.ndarray, config: TrainConfig, seed: int, tag: str,
         batch_loss: Callable[[np.ndarray, np.ndarray, np.ndarray], Tensor]) -> list[float]:
    """Generic epoch loop; ``batch_loss(view, idx, logits_tensor)`` builds the loss."""
    params = net.parameters()
    opt = AdamW(params, lr=max(config.lr, 1e-12), weight_decay=config.weight_decay)
    shuffle = stream(seed, tag, "shuffle")
    crops = stream(seed, tag, "crops")
    total = config.epochs * math.ceil(len(x) / config.batch_size)
    history = []
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for idx in iterate_minibatches(len(x), config.batch_size, shuffle):
            view = x[idx]
            if config.augment:
                view = augment(view, crops, config.crop_scale, config.crop_ratio)
            loss = batch_loss(view, idx, net.forward(view))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"{tag} loss is NaN at epoch {epoch}")
            lr = cosine_lr(step, total, config.lr, config.lr_min)
            if lr > 0:
                try:
                    opt.step(grad(loss, params), lr=lr)
                except NonFiniteGradient as exc:
                    raise TrainingDiverged(f"{tag} diverged at epoch {epoch}: {exc}") from exc
            losses.append(value)
            step += 1
        history.append(float(np.mean(losses)))
    return history


def train_teacher(real: ImageDataset, config: TrainConfig | None = None, seed: int = 0) -> TrainResult:
    config = config or teacher_config()
    net = ClassifierNet(real.image_shape, real.K, config.hidden, seed, name="teacher")
    labels = real.labels
    hist = _fit(net, images01(real), config, seed, "teacher",
                lambda view, idx, logits: cross_entropy(logits, labels[idx], real.K))
    return TrainResult(net, hist)


def train_student(distilled: ImageDataset, teacher: ClassifierNet, config: KDConfig | None = None,
                  seed: int = 0, init: ClassifierNet | None = None) -> TrainResult:
    """Soft-label training: KD loss against the teacher on every augmented view."""
    config = config or KDConfig()
    if teacher.K != distilled.K:
        raise ValueError(f"teacher has {teacher.K} outputs but dataset has K={distilled.K}")
    net = init.copy() if init is not None else ClassifierNet(
        distilled.image_shape, distilled.K, config.hidden, seed, name="student")
    hist = _fit(net, images01(distilled), config, seed, "student",
                lambda view, idx, logits: kd_loss(teacher.logits(view), logits, config.temperature))
    return TrainResult(net, hist)


def train_student_hard(distilled: ImageDataset, config: KDConfig | None = None, seed: int = 0,
                       init: ClassifierNet | None = None) -> TrainResult:
    """Same loop as ``train_student`` with cross-entropy on the hard labels."""
    config = config or KDConfig()
    net = init.copy() if init is not None else ClassifierNet(
        distilled.image_shape, distilled.K, config.hidden, seed, name="student")
    labels = distilled.labels
    hist = _fit(net, images01(distilled), config, seed, "student",
                lambda view, idx, logits: cross_entropy(logits, labels[idx], distilled.K))
    return TrainResult(net, hist)


def accuracy(net: ClassifierNet, ds: ImageDataset) -> float:
    if net.K != ds.K:
        raise ValueError(f"network has {net.K} outputs but dataset has K={ds.K}")
    return float(np.mean(np.argmax(net.logits(images01(ds)), axis=1) == ds.labels))
