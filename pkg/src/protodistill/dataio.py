"""Dataset and checkpoint files, plus the procedural shapes dataset.

Both binary formats are little-endian and versioned::

    dataset     "D4MD" u32 version, u32 N, u16 H, u16 W, u8 channels, u16 K,
                K x (u16 len, utf-8 name), N x u16 label, N*H*W*channels x u8
    checkpoint  "D4MW" u32 version, u32 count,
                count x (u16 len, utf-8 name, u8 rank, rank x u32 dim, f32 data)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .numerics.rng import stream

DATASET_MAGIC = b"D4MD"
CHECKPOINT_MAGIC = b"D4MW"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

SHAPE_NAMES = ("disk", "square", "cross", "hstripes", "diagonal", "ring")


class FormatError(ValueError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray          # (N, H, W, C) uint8
    labels: np.ndarray          # (N,) int64
    category_names: list[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) < 1:
            raise ValueError("dataset must contain at least one image")
        if self.labels.shape != (len(self.images),):
            raise ValueError(f"{len(self.images)} images but labels of shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.K:
            raise ValueError(f"labels must lie in [0, {self.K})")

    @property
    def K(self) -> int:
        return len(self.category_names)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def flat(self) -> np.ndarray:
        """Pixels as float64 rows in [0, 1]."""
        return self.images.reshape(len(self), -1).astype(np.float64) / 255.0

    def subset(self, idx) -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels[idx], list(self.category_names))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageDataset):
            return NotImplemented
        return (self.category_names == other.category_names
                and np.array_equal(self.labels, other.labels)
                and self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images))


# ---------------------------------------------------------------- shapes

def _render(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mid = (size - 1) / 2.0
    cy, cx = mid + rng.uniform(-3, 3, size=2)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        r = rng.uniform(6, 10)
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        h = rng.uniform(5, 8.5)
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    if kind == "cross":
        w, arm = rng.uniform(1.5, 2.5), rng.uniform(7, 11)
        return ((np.abs(dx) <= w) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= w) & (np.abs(dx) <= arm))
    if kind == "hstripes":
        half, period = rng.uniform(8, 12), rng.uniform(5, 7)
        box = (np.abs(dy) <= half) & (np.abs(dx) <= half)
        return box & (np.mod(dy + half, period) < period / 2)
    if kind == "diagonal":
        w, length = rng.uniform(2, 3.5), rng.uniform(9, 13)
        u, v = (dx - dy) / np.sqrt(2), (dx + dy) / np.sqrt(2)
        return (np.abs(u) <= w) & (np.abs(v) <= length)
    if kind == "ring":
        outer = rng.uniform(8, 11)
        inner = outer - rng.uniform(2, 3)
        d2 = dy**2 + dx**2
        return (d2 <= outer**2) & (d2 >= inner**2)
    raise ValueError(f"unknown shape {kind!r}")


def generate_shapes(n_per_category: int, K: int = 4, size: int = 32, noise_std: float = 8.0,
                    seed: int = 0, background: float = 20.0, foreground: float = 220.0
                    ) -> ImageDataset:
    """Balanced grayscale toy dataset of ``K`` jittered shape categories."""
    if not 2 <= K <= len(SHAPE_NAMES):
        raise ValueError(f"K must be in [2, {len(SHAPE_NAMES)}], got {K}")
    if n_per_category < 1:
        raise ValueError(f"n_per_category must be >= 1, got {n_per_category}")
    geom = stream(seed, "shapes", "geometry")
    noise = stream(seed, "shapes", "noise")
    n = K * n_per_category
    images = np.empty((n, size, size, 1), dtype=np.uint8)
    labels = np.arange(n) % K
    for i, k in enumerate(labels):
        mask = _render(SHAPE_NAMES[k], geom, size)
        img = np.where(mask, foreground, background)
        if noise_std > 0:
            img = img + noise.normal(0.0, noise_std, size=img.shape)
        images[i, :, :, 0] = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return ImageDataset(images, labels, list(SHAPE_NAMES[:K]))


# ---------------------------------------------------------------- binary reader

class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated at offset {self.pos}: expected {n} more bytes "
                f"(file length {self.pos + n} needed), found {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals if len(vals) > 1 else vals[0]

    def string(self) -> str:
        n = self.unpack("H")
        return self.take(n).decode("utf-8")

    def header(self, magic: bytes, version: int) -> None:
        got = self.take(4)
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r} at offset 0, expected {magic!r}")
        v = self.unpack("I")
        if v != version:
            raise FormatError(f"{self.what}: unsupported version {v} at offset 4, expected {version}")

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes at offset {self.pos}")


def _string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"name too long ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


# ---------------------------------------------------------------- datasets

def dataset_to_bytes(ds: ImageDataset) -> bytes:
    n, h, w, c = ds.images.shape
    if ds.K > 0xFFFF:
        raise ValueError(f"too many categories for u16 labels: {ds.K}")
    parts = [DATASET_MAGIC, struct.pack("<IIHHBH", DATASET_VERSION, n, h, w, c, ds.K)]
    parts += [_string(name) for name in ds.category_names]
    parts.append(ds.labels.astype("<u2").tobytes())
    parts.append(np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> ImageDataset:
    r = _Reader(buf, "dataset")
    r.header(DATASET_MAGIC, DATASET_VERSION)
    n, h, w, c, k = r.unpack("IHHBH")
    names = [r.string() for _ in range(k)]
    labels = np.frombuffer(r.take(2 * n), dtype="<u2").astype(np.int64)
    pixels = np.frombuffer(r.take(n * h * w * c), dtype=np.uint8).reshape(n, h, w, c)
    r.finish()
    if n and labels.max() >= k:
        raise FormatError(f"dataset: label {labels.max()} out of range for K={k}")
    return ImageDataset(pixels.copy(), labels, names)


def save_dataset(path, ds: ImageDataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> ImageDataset:
    return dataset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- checkpoints

def checkpoint_to_bytes(tensors: Mapping[str, np.ndarray] | list[tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen: set[str] = set()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(items))]
    for name, arr in items:
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank {arr.ndim} exceeds 255")
        parts.append(_string(name))
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf, "checkpoint")
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    count = r.unpack("I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string()
        if name in out:
            raise FormatError(f"checkpoint: duplicate tensor name {name!r} at offset {r.pos}")
        rank = r.unpack("B")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    r.finish()
    return out


def save_checkpoint(path, tensors) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- image dumps

def to_pnm(image: np.ndarray) -> str:
    """Plain-ASCII PGM (P2) for one channel, PPM (P3) for three."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {c}")
    lines = ["P2" if c == 1 else "P3", f"{w} {h}", "255"]
    for row in image:
        lines.append(" ".join(str(v) for v in row.reshape(-1)))
    return "\n".join(lines) + "\n"


def write_pnm(path, image: np.ndarray) -> None:
    Path(path).write_text(to_pnm(image), encoding="ascii")


def read_pnm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    kind, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if kind not in ("P2", "P3") or maxval != 255:
        raise FormatError(f"unsupported PNM header {tokens[:4]}")
    c = 1 if kind == "P2" else 3
    vals = np.array(tokens[4:], dtype=np.int64)
    if vals.size != h * w * c:
        raise FormatError(f"PNM: expected {h * w * c} samples, found {vals.size}")
    return vals.astype(np.uint8).reshape(h, w, c)
