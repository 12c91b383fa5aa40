"""MLP autoencoder that defines the latent space, plus a linear latent probe."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import ImageDataset
from .numerics import MLP, AdamW, NonFiniteGradient, Tensor, cosine_lr, grad, ops, stream
from .numerics.nn import iterate_minibatches, shapes_from_state


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class LatentBatch:
    z: np.ndarray           # (N, d_z) float64
    labels: np.ndarray      # (N,) int64

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.z.ndim != 2 or len(self.z) != len(self.labels):
            raise ValueError(f"latents {self.z.shape} do not match labels {self.labels.shape}")

    def __len__(self):
        return len(self.z)

    def of_category(self, k: int) -> np.ndarray:
        return self.z[self.labels == k]


@dataclass
class AEConfig:
    latent_dim: int = 32
    hidden: tuple[int, ...] = (256, 128)
    epochs: int = 60
    batch_size: int = 32
    lr: float = 3e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4


@dataclass
class AePair:
    encoder: MLP
    decoder: MLP
    image_shape: tuple[int, int, int]
    latent_mean: np.ndarray
    latent_std: np.ndarray
    history: list[float] = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_features

    def _check_images(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.image_shape:
            raise ValueError(f"images of shape {x.shape[1:]} do not match trained shape {self.image_shape}")
        return x.reshape(len(x), -1)

    def encode_array(self, images01: np.ndarray) -> np.ndarray:
        """Raw (unstandardized) latents for images with pixels in [0, 1]."""
        return self.encoder(Tensor(self._check_images(images01))).data

    def encode(self, ds: ImageDataset) -> LatentBatch:
        return LatentBatch(self.encode_array(ds.images.astype(np.float64) / 255.0), ds.labels)

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Images in [0, 1] with the trained image shape."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.latent_dim:
            raise ValueError(f"latent width {z.shape[1]} != trained width {self.latent_dim}")
        out = self.decoder(Tensor(z)).data
        return np.clip(out, 0.0, 1.0).reshape((len(z),) + self.image_shape)

    def standardize(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) - self.latent_mean) / self.latent_std

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.latent_std + self.latent_mean

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.encoder.state_dict("ae.enc"))
        out.update(self.decoder.state_dict("ae.dec"))
        out["ae.latent_mean"] = self.latent_mean
        out["ae.latent_std"] = self.latent_std
        out["ae.image_shape"] = np.array(self.image_shape, dtype=np.float64)
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "AePair":
        rng = stream(0, "ae-load")
        enc = MLP(shapes_from_state(state, "ae.enc"), rng, activation="silu")
        dec = MLP(shapes_from_state(state, "ae.dec"), rng, activation="silu",
                  output_activation="sigmoid")
        enc.load_state_dict(state, "ae.enc")
        dec.load_state_dict(state, "ae.dec")
        shape = tuple(int(v) for v in state["ae.image_shape"])
        return cls(enc, dec, shape,
                   np.asarray(state["ae.latent_mean"], np.float64),
                   np.asarray(state["ae.latent_std"], np.float64))


def init_autoencoder(image_shape, config: AEConfig, seed: int) -> AePair:
    n_in = int(np.prod(image_shape))
    rng = stream(seed, "ae", "init")
    enc = MLP([n_in, *config.hidden, config.latent_dim], rng, activation="silu")
    dec = MLP([config.latent_dim, *reversed(config.hidden), n_in], rng, activation="silu",
              output_activation="sigmoid")
    d = config.latent_dim
    return AePair(enc, dec, tuple(image_shape), np.zeros(d), np.ones(d))


def reconstruction_mse(ae: AePair, images01: np.ndarray) -> float:
    z = ae.encode_array(images01)
    return float(np.mean((ae.decode(z) - images01) ** 2))


def train_autoencoder(ds: ImageDataset, config: AEConfig | None = None, seed: int = 0) -> AePair:
    """Plain MSE reconstruction training.

    ``history`` holds the mean per-batch loss of each epoch. After training
    the latent standardization statistics are taken over ``ds``.
    """
    config = config or AEConfig()
    ae = init_autoencoder(ds.image_shape, config, seed)
    x = ds.flat()
    params = ae.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    shuffle = stream(seed, "ae", "shuffle")
    steps_per_epoch = math.ceil(len(x) / config.batch_size)
    total = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for idx in iterate_minibatches(len(x), config.batch_size, shuffle):
            batch = Tensor(x[idx])
            loss = ops.mse_loss(ae.decoder(ae.encoder(batch)), batch)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"autoencoder loss is NaN at epoch {epoch}")
            try:
                opt.step(grad(loss, params), lr=cosine_lr(step, total, config.lr, config.lr_min))
            except NonFiniteGradient as exc:
                raise TrainingDiverged(f"autoencoder diverged at epoch {epoch}: {exc}") from exc
            losses.append(loss.item())
            step += 1
        ae.history.append(float(np.mean(losses)))
    z = ae.encode_array(x.reshape((len(x),) + ds.image_shape))
    ae.latent_mean = z.mean(axis=0)
    std = z.std(axis=0)
    ae.latent_std = np.where(std > 1e-8, std, 1.0)
    return ae


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray

    def predict(self, z: np.ndarray) -> np.ndarray:
        logits = np.asarray(z, dtype=np.float64) @ self.weight + self.bias
        return np.argmax(logits, axis=1)

    def accuracy(self, z: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(z) == np.asarray(labels)))


def fit_linear_probe(z: np.ndarray, labels: np.ndarray, K: int, seed: int = 0,
                     steps: int = 300, lr: float = 0.05) -> LinearProbe:
    """Multinomial logistic regression, full-batch AdamW."""
    z = np.asarray(z, dtype=np.float64)
    rng = stream(seed, "probe")
    w = Tensor(rng.normal(0, 0.01, size=(z.shape[1], K)), requires_grad=True)
    b = Tensor(np.zeros(K), requires_grad=True)
    onehot = Tensor(np.eye(K)[np.asarray(labels)])
    x = Tensor(z)
    opt = AdamW([w, b], lr=lr, weight_decay=0.0)
    for _ in range(steps):
        logp = ops.log_softmax(ops.affine(x, w, b))
        loss = ops.mul(ops.mean(ops.sum(ops.mul(logp, onehot), axis=1)), -1.0)
        opt.step(grad(loss, [w, b]))
    return LinearProbe(w.data.copy(), b.data.copy())
