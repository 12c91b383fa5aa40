"""Label-conditioned latent diffusion: noising, denoiser training, guided DDIM.

The denoiser is an MLP over ``concat(z_t, time_embedding(t), label_embedding)``.
The label table has one extra row (index K) acting as the null condition, so
the same network provides both halves of classifier-free guidance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autoencoder import LatentBatch, TrainingDiverged
from .numerics import MLP, AdamW, NonFiniteGradient, Tensor, cosine_lr, grad, ops, stream
from .numerics.nn import shapes_from_state

TIME_DIM = 32
COND_DIM = 32


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        betas = np.concatenate([[0.0], np.linspace(self.beta_start, self.beta_end, self.T)])
        # index 0 is the clean signal: alpha_bar_0 = 1
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T) or not np.issubdtype(t.dtype, np.integer):
            raise ValueError(f"timestep must be an integer in [0, {self.T}], got {t}")
        return t


def q_sample(schedule: NoiseSchedule, z0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Closed-form forward noising; ``t`` is a scalar or one timestep per row."""
    t = schedule.check_t(t)
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {noise.shape} != z0 shape {z0.shape}")
    ab = schedule.alpha_bars[t]
    if np.ndim(ab) == 1 and z0.ndim == 2:
        ab = ab[:, None]
    if np.all(ab == 1.0):
        return z0.copy()
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise


def time_embedding(t, dim: int = TIME_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class CondEmbedder:
    """Learned table with K label rows plus the null row at index K.

    With ``unconditional`` set every label resolves to the null row; training
    with all labels dropped produces such an embedder.
    """

    def __init__(self, K: int, rng: np.random.Generator, dim: int = COND_DIM):
        self.K = K
        self.table = Tensor(rng.normal(0.0, 1.0, size=(K + 1, dim)), requires_grad=True)
        self.unconditional = False

    @property
    def null_index(self) -> int:
        return self.K

    def check_labels(self, labels) -> np.ndarray:
        labels = np.atleast_1d(np.asarray(labels))
        if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() > self.K:
            raise ValueError(f"label must be an integer in [0, {self.K}] ({self.K} is null), got {labels}")
        return labels

    def __call__(self, labels) -> Tensor:
        labels = self.check_labels(labels)
        if self.unconditional:
            labels = np.full_like(labels, self.K)
        return ops.matmul(Tensor(np.eye(self.K + 1)[labels]), self.table)


@dataclass
class DenoiserConfig:
    hidden: tuple[int, ...] = (256, 256)
    steps: int = 6000
    batch_size: int = 128
    lr: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 0.0
    p_drop: float = 0.1


@dataclass
class ConditionalDenoiser:
    net: MLP
    embedder: CondEmbedder
    history: list[float] = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.net.out_features

    @property
    def K(self) -> int:
        return self.embedder.K

    def forward(self, z_t: Tensor, t, labels) -> Tensor:
        temb = Tensor(time_embedding(t))
        if temb.shape[0] == 1 and z_t.shape[0] > 1:
            temb = Tensor(np.repeat(temb.data, z_t.shape[0], axis=0))
        return self.net(ops.concat([z_t, temb, self.embedder(labels)], axis=-1))

    def predict(self, z_t: np.ndarray, t, labels) -> np.ndarray:
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        if z_t.shape[1] != self.latent_dim:
            raise ValueError(f"latent width {z_t.shape[1]} != denoiser width {self.latent_dim}")
        labels = np.broadcast_to(np.asarray(labels), (len(z_t),))
        return self.forward(Tensor(z_t), t, labels).data

    def parameters(self) -> list[Tensor]:
        return self.net.parameters() + [self.embedder.table]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.net.state_dict("diff.net")
        out["cond.table"] = self.embedder.table.data
        out["cond.unconditional"] = np.array(float(self.embedder.unconditional))
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "ConditionalDenoiser":
        rng = stream(0, "diff-load")
        net = MLP(shapes_from_state(state, "diff.net"), rng, activation="silu")
        net.load_state_dict(state, "diff.net")
        table = np.asarray(state["cond.table"], dtype=np.float64)
        emb = CondEmbedder(table.shape[0] - 1, rng, dim=table.shape[1])
        emb.table.data = table.copy()
        emb.unconditional = bool(state["cond.unconditional"])
        return cls(net, emb)


def init_denoiser(latent_dim: int, K: int, config: DenoiserConfig, seed: int) -> ConditionalDenoiser:
    rng = stream(seed, "diff", "init")
    net = MLP([latent_dim + TIME_DIM + COND_DIM, *config.hidden, latent_dim], rng, activation="silu")
    return ConditionalDenoiser(net, CondEmbedder(K, rng))


def denoising_loss(model: ConditionalDenoiser, schedule: NoiseSchedule, z0: np.ndarray,
                   labels: np.ndarray, t: np.ndarray, noise: np.ndarray) -> Tensor:
    z_t = q_sample(schedule, z0, t, noise)
    return ops.mse_loss(model.forward(Tensor(z_t), t, labels), Tensor(noise))


def evaluation_loss(model: ConditionalDenoiser, schedule: NoiseSchedule, latents: LatentBatch,
                    seed: int = 0) -> float:
    """Denoising loss on ``latents`` with seeded timesteps and noise, no label dropping."""
    rng = stream(seed, "diff", "eval")
    t = rng.integers(1, schedule.T + 1, size=len(latents))
    noise = rng.normal(size=latents.z.shape)
    return denoising_loss(model, schedule, latents.z, latents.labels, t, noise).item()


def train_denoiser(latents: LatentBatch, K: int, schedule: NoiseSchedule,
                   config: DenoiserConfig | None = None, seed: int = 0) -> ConditionalDenoiser:
    """Noise-prediction training with random label dropping.

    ``latents`` should already be standardized. ``history`` records the loss
    of every step.
    """
    config = config or DenoiserConfig()
    if not 0.0 <= config.p_drop <= 1.0:
        raise ValueError(f"p_drop must be in [0, 1], got {config.p_drop}")
    model = init_denoiser(latents.z.shape[1], K, config, seed)
    if config.p_drop >= 1.0:
        model.embedder.unconditional = True
    params = model.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = stream(seed, "diff", "train")
    n = len(latents)
    order = rng.permutation(n)
    cursor = 0
    for step in range(config.steps):
        if cursor + config.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        b = len(idx)
        t = rng.integers(1, schedule.T + 1, size=b)
        noise = rng.normal(size=(b, latents.z.shape[1]))
        labels = np.where(rng.random(b) < config.p_drop, K, latents.labels[idx])
        loss = denoising_loss(model, schedule, latents.z[idx], labels, t, noise)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(f"denoiser loss is NaN at step {step}")
        try:
            opt.step(grad(loss, params), lr=cosine_lr(step, config.steps, config.lr, config.lr_min))
        except NonFiniteGradient as exc:
            raise TrainingDiverged(f"denoiser diverged at step {step}: {exc}") from exc
        model.history.append(loss.item())
    return model


def cfg_predict(model: ConditionalDenoiser, z_t: np.ndarray, t: int, label: int,
                guidance: float) -> np.ndarray:
    """Guided noise estimate ``eps_null + g * (eps_label - eps_null)``."""
    if guidance < 1:
        raise ValueError(f"guidance scale must be >= 1, got {guidance}")
    model.embedder.check_labels(label)
    eps_label = model.predict(z_t, t, label)
    if guidance == 1 or label == model.K:
        return eps_label
    eps_null = model.predict(z_t, t, model.K)
    return eps_null + guidance * (eps_label - eps_null)


@dataclass(frozen=True)
class SamplerConfig:
    strength: float = 0.7
    guidance: float = 8.0
    steps: int = 50
    seed: int = 0

    def validate(self, schedule: NoiseSchedule) -> None:
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must be in [0, 1], got {self.strength}")
        if self.guidance < 1:
            raise ValueError(f"guidance scale must be >= 1, got {self.guidance}")
        if not 1 <= self.steps <= schedule.T:
            raise ValueError(f"DDIM steps must be in [1, {schedule.T}], got {self.steps}")


def timestep_chain(schedule: NoiseSchedule, cfg: SamplerConfig) -> list[int]:
    """Timesteps visited by the sampler, starting at the noising level and ending at 0.

    The full grid has ``steps`` evenly spaced integers from T down to 1. The
    sampler runs the last ``round(strength * steps)`` of them, with the first
    one replaced by the actual noising level ``round(strength * T)``.
    """
    used = round_half_away(cfg.strength * cfg.steps)
    if used == 0:
        return []
    grid = [round_half_away(v) for v in np.linspace(schedule.T, 1, cfg.steps)]
    t_enc = round_half_away(cfg.strength * schedule.T)
    chain = [t_enc]
    for t in grid[cfg.steps - used + 1:] + [0]:
        if t < chain[-1]:
            chain.append(t)
    if chain[-1] != 0:
        chain.append(0)
    return chain


def ddim_step(schedule: NoiseSchedule, z_t: np.ndarray, eps: np.ndarray, t: int, t_next: int
              ) -> np.ndarray:
    ab, ab_next = schedule.alpha_bars[t], schedule.alpha_bars[t_next]
    z0_hat = (z_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    return math.sqrt(ab_next) * z0_hat + math.sqrt(1.0 - ab_next) * eps


def sample_from_prototype(model: ConditionalDenoiser, schedule: NoiseSchedule,
                          prototype: np.ndarray, label: int, cfg: SamplerConfig) -> np.ndarray:
    """Noise a prototype to ``round(strength * T)`` and denoise it with guided DDIM."""
    cfg.validate(schedule)
    if not (isinstance(label, (int, np.integer)) and 0 <= label < model.K):
        raise ValueError(f"label must be a category in [0, {model.K}), got {label}")
    z = np.asarray(prototype, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != model.latent_dim:
        raise ValueError(f"prototype width {z.shape[1]} != denoiser width {model.latent_dim}")
    chain = timestep_chain(schedule, cfg)
    if not chain:
        return z[0].copy()
    noise = stream(cfg.seed, "sampler", "noise").normal(size=z.shape)
    z = q_sample(schedule, z, chain[0], noise)
    for t, t_next in zip(chain[:-1], chain[1:]):
        eps = cfg_predict(model, z, t, int(label), cfg.guidance)
        z = ddim_step(schedule, z, eps, t, t_next)
    return z[0]
