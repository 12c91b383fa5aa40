"""End-to-end distillation: encode, cluster, synthesize from prototypes, decode."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autoencoder import AePair, LatentBatch
from .dataio import ImageDataset
from .diffusion import ConditionalDenoiser, NoiseSchedule, SamplerConfig, sample_from_prototype
from .numerics import derive_seed, stream
from .prototypes import PrototypeSet, learn_prototypes


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class DistillConfig:
    C: int = 10
    ipc: int = 10
    strength: float = 0.7
    guidance: float = 8.0
    steps: int = 50
    seed: int = 0
    kmeans_passes: int = 5
    kmeans_batch_size: int = 64

    def validate(self) -> None:
        if self.C < 1:
            raise ValueError(f"C must be >= 1, got {self.C}")
        if self.ipc < 1:
            raise ValueError(f"ipc must be >= 1, got {self.ipc}")
        if self.ipc > self.C and self.ipc % self.C:
            raise ValueError(f"ipc={self.ipc} exceeds C={self.C} but is not a multiple of it")

    @property
    def replicas(self) -> int:
        return self.ipc // self.C if self.ipc > self.C else 1

    @property
    def prototypes_used(self) -> int:
        return min(self.ipc, self.C)

    def sampler(self, seed: int) -> SamplerConfig:
        return SamplerConfig(self.strength, self.guidance, self.steps, seed)


@dataclass(frozen=True)
class Provenance:
    index: int
    category: int
    prototype: int
    replica: int
    seed: int


@dataclass
class DistilledDataset:
    dataset: ImageDataset
    provenance: list[Provenance]
    soft_labels: np.ndarray | None = None

    def provenance_text(self) -> str:
        lines = ["index category prototype seed"]
        lines += [f"{p.index} {p.category} {p.prototype} {p.seed}" for p in self.provenance]
        return "\n".join(lines) + "\n"

    def write_provenance(self, path) -> None:
        Path(path).write_text(self.provenance_text(), encoding="utf-8")


def read_provenance(path) -> list[tuple[int, int, int, int]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        idx, cat, proto, seed = (int(v) for v in line.split())
        rows.append((idx, cat, proto, seed))
    return rows


def quantize(images01: np.ndarray) -> np.ndarray:
    """[0, 1] floats to u8, rounding half up."""
    return np.floor(np.clip(images01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render(ae: AePair, model: ConditionalDenoiser, schedule: NoiseSchedule, prototype: np.ndarray,
           label: int, sampler: SamplerConfig) -> np.ndarray:
    """One u8 image from one (standardized) prototype latent."""
    z = sample_from_prototype(model, schedule, prototype, int(label), sampler)
    return quantize(ae.decode(ae.destandardize(z[None, :])))[0]


def synthesize(prototypes: PrototypeSet, ae: AePair, model: ConditionalDenoiser,
               schedule: NoiseSchedule, cfg: DistillConfig, category_names: list[str]
               ) -> DistilledDataset:
    """Sample and decode images from per-category prototypes.

    Output order is (category, prototype index, replica), so the result does
    not depend on the order in which samples are produced.
    """
    cfg.validate()
    K = len(category_names)
    images, labels, prov = [], [], []
    for k in range(K):
        order = np.argsort(prototypes.index[prototypes.labels == k], kind="stable")
        protos = prototypes.of_category(k)[order]
        if len(protos) < cfg.prototypes_used:
            raise StageError("synthesize", f"category {k} has {len(protos)} prototypes, need {cfg.prototypes_used}")
        for p in range(cfg.prototypes_used):
            for r in range(cfg.replicas):
                seed = derive_seed(cfg.seed, "distill", k, p, r)
                try:
                    img = render(ae, model, schedule, protos[p], k, cfg.sampler(seed))
                except ValueError as exc:
                    raise StageError("synthesize", str(exc)) from exc
                prov.append(Provenance(len(images), k, p, r, seed))
                images.append(img)
                labels.append(k)
    ds = ImageDataset(np.stack(images), np.array(labels), list(category_names))
    return DistilledDataset(ds, prov)


def replay(record: Provenance | tuple, prototypes: PrototypeSet, ae: AePair,
           model: ConditionalDenoiser, schedule: NoiseSchedule, cfg: DistillConfig) -> np.ndarray:
    """Rebuild one distilled image from its provenance record."""
    if isinstance(record, tuple):
        _, category, proto, seed = record
    else:
        category, proto, seed = record.category, record.prototype, record.seed
    mask = (prototypes.labels == category) & (prototypes.index == proto)
    return render(ae, model, schedule, prototypes.centers[mask][0], category, cfg.sampler(seed))


def encode_standardized(ae: AePair, real: ImageDataset) -> LatentBatch:
    try:
        lat = ae.encode(real)
    except ValueError as exc:
        raise StageError("encode", str(exc)) from exc
    return LatentBatch(ae.standardize(lat.z), lat.labels)


def cluster(ae: AePair, real: ImageDataset, cfg: DistillConfig) -> PrototypeSet:
    latents = encode_standardized(ae, real)
    try:
        return learn_prototypes(latents, real.K, cfg.C, seed=derive_seed(cfg.seed, "prototypes"),
                                passes=cfg.kmeans_passes, batch_size=cfg.kmeans_batch_size)
    except ValueError as exc:
        raise StageError("cluster", str(exc)) from exc


def random_prototypes(K: int, C: int, latent_dim: int, seed: int) -> PrototypeSet:
    """Standard-normal latents standing in for learned prototypes."""
    centers = stream(seed, "random-init").normal(size=(K * C, latent_dim))
    labels = np.repeat(np.arange(K), C)
    return PrototypeSet(centers, labels, np.tile(np.arange(C), K))


def distill(real: ImageDataset, ae: AePair, model: ConditionalDenoiser, schedule: NoiseSchedule,
            cfg: DistillConfig) -> DistilledDataset:
    cfg.validate()
    prototypes = cluster(ae, real, cfg)
    return synthesize(prototypes, ae, model, schedule, cfg, real.category_names)


def distill_random_init(real: ImageDataset, ae: AePair, model: ConditionalDenoiser,
                        schedule: NoiseSchedule, cfg: DistillConfig) -> DistilledDataset:
    """Ablation: identical synthesis, but starting from random latents instead of prototypes."""
    cfg.validate()
    prototypes = random_prototypes(real.K, cfg.C, ae.latent_dim, cfg.seed)
    return synthesize(prototypes, ae, model, schedule, cfg, real.category_names)
