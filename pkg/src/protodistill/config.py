"""Flat ``key = value`` run configuration.

Precedence, lowest to highest: built-in defaults, the config file, the
``D4M_OUT_DIR`` environment variable (``out_dir`` only), command-line flags.
Lines starting with ``#`` are comments. Unknown keys are errors. The
resolved config echoed into an output tree leaves out ``out_dir`` so that
identical runs produce identical trees wherever they are written.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .autoencoder import AEConfig
from .diffusion import DenoiserConfig, NoiseSchedule
from .distiller import DistillConfig
from .ttm import KDConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    default: object
    kind: type
    doc: str


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


SCHEMA: dict[str, Key] = {
    "seed": Key(1, int, "global seed; every stage derives its own substream from it"),
    "out_dir": Key("out", str, "output root; relative paths resolve against the working directory"),
    "data.K": Key(4, int, "number of shape categories"),
    "data.n_per_category": Key(500, int, "training images per category"),
    "data.test_per_category": Key(250, int, "held-out images per category"),
    "data.size": Key(32, int, "image side length"),
    "data.noise_std": Key(8.0, float, "pixel noise std (0-255 scale)"),
    "ae.latent_dim": Key(32, int, "latent width"),
    "ae.hidden": Key((256, 128), _ints, "encoder hidden widths; decoder mirrors them"),
    "ae.epochs": Key(60, int, "autoencoder epochs"),
    "ae.batch_size": Key(32, int, "autoencoder batch size"),
    "ae.lr": Key(3e-3, float, "autoencoder peak learning rate (cosine decay)"),
    "ae.weight_decay": Key(1e-4, float, "autoencoder AdamW weight decay"),
    "diff.T": Key(1000, int, "diffusion timesteps"),
    "diff.beta_start": Key(1e-4, float, "first beta of the linear schedule"),
    "diff.beta_end": Key(0.02, float, "last beta of the linear schedule"),
    "diff.hidden": Key((256, 256), _ints, "denoiser hidden widths"),
    "diff.steps": Key(6000, int, "denoiser optimizer steps"),
    "diff.batch_size": Key(128, int, "denoiser batch size"),
    "diff.lr": Key(1e-3, float, "denoiser peak learning rate (cosine decay)"),
    "diff.weight_decay": Key(0.0, float, "denoiser AdamW weight decay"),
    "diff.p_drop": Key(0.1, float, "probability of replacing the label by the null condition"),
    "proto.C": Key(10, int, "prototypes per category"),
    "proto.passes": Key(5, int, "mini-batch k-means passes over each category"),
    "proto.batch_size": Key(64, int, "mini-batch k-means batch size"),
    "distill.ipc": Key(10, int, "images per category in the distilled set"),
    "distill.strength": Key(0.7, float, "fraction of the noising trajectory applied to prototypes"),
    "distill.guidance": Key(8.0, float, "classifier-free guidance scale"),
    "distill.steps": Key(50, int, "DDIM grid length"),
    "ttm.temperature": Key(20.0, float, "KD temperature"),
    "ttm.epochs": Key(500, int, "student epochs"),
    "ttm.batch_size": Key(100, int, "student batch size"),
    "ttm.lr": Key(1e-3, float, "student peak learning rate (cosine decay)"),
    "ttm.weight_decay": Key(0.01, float, "student AdamW weight decay"),
    "ttm.hidden": Key((256, 64), _ints, "classifier hidden widths (teacher and student)"),
    "ttm.crop_min_scale": Key(0.08, float, "RandomResizedCrop minimum area fraction"),
    "ttm.teacher_epochs": Key(30, int, "teacher epochs (no augmentation)"),
    "eval.splits": Key(1, int, "chunks for the inception-score analog"),
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key].kind(text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text.strip()!r} ({exc})") from None


def parse_pairs(text: str, source: str = "config") -> dict[str, object]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


class RunConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self.values = {k: spec.default for k, spec in SCHEMA.items()}
        for key, value in (values or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = value

    def __getitem__(self, key: str):
        return self.values[key]

    def override(self, pairs: dict[str, object]) -> "RunConfig":
        merged = dict(self.values)
        merged.update(pairs)
        return RunConfig(merged)

    def to_text(self, skip: tuple[str, ...] = ()) -> str:
        lines = []
        for key, spec in SCHEMA.items():
            if key in skip:
                continue
            lines.append(f"# {spec.doc}")
            lines.append(f"{key} = {_format(self.values[key])}")
        return "\n".join(lines) + "\n"

    # -- stage configs

    def ae(self) -> AEConfig:
        v = self.values
        return AEConfig(latent_dim=v["ae.latent_dim"], hidden=v["ae.hidden"], epochs=v["ae.epochs"],
                        batch_size=v["ae.batch_size"], lr=v["ae.lr"], weight_decay=v["ae.weight_decay"])

    def schedule(self) -> NoiseSchedule:
        v = self.values
        return NoiseSchedule(v["diff.T"], v["diff.beta_start"], v["diff.beta_end"])

    def denoiser(self) -> DenoiserConfig:
        v = self.values
        return DenoiserConfig(hidden=v["diff.hidden"], steps=v["diff.steps"], batch_size=v["diff.batch_size"],
                              lr=v["diff.lr"], weight_decay=v["diff.weight_decay"], p_drop=v["diff.p_drop"])

    def distill(self) -> DistillConfig:
        v = self.values
        return DistillConfig(C=v["proto.C"], ipc=v["distill.ipc"], strength=v["distill.strength"],
                             guidance=v["distill.guidance"], steps=v["distill.steps"], seed=v["seed"],
                             kmeans_passes=v["proto.passes"], kmeans_batch_size=v["proto.batch_size"])

    def teacher(self) -> TrainConfig:
        v = self.values
        return TrainConfig(epochs=v["ttm.teacher_epochs"], batch_size=v["ttm.batch_size"], lr=v["ttm.lr"],
                           weight_decay=v["ttm.weight_decay"], hidden=v["ttm.hidden"], augment=False)

    def student(self) -> KDConfig:
        v = self.values
        return KDConfig(epochs=v["ttm.epochs"], batch_size=v["ttm.batch_size"], lr=v["ttm.lr"],
                        weight_decay=v["ttm.weight_decay"], hidden=v["ttm.hidden"],
                        crop_scale=(v["ttm.crop_min_scale"], 1.0), temperature=v["ttm.temperature"])


def resolve(config_path=None, overrides: dict[str, object] | None = None, environ=None) -> RunConfig:
    values = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} not found")
        values.update(parse_pairs(path.read_text(encoding="utf-8"), str(path)))
    if environ and environ.get("D4M_OUT_DIR"):
        values["out_dir"] = environ["D4M_OUT_DIR"]
    values.update(overrides or {})
    return RunConfig(values)
