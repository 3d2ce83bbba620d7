"""Image datasets, query sampling, and secret generation.

All operations are pure given (inputs, seed): repeated calls are
bit-identical. Images are float32 CHW tensors in [0, 1].
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, FormatError


@dataclass(frozen=True)
class DatasetLayout:
    """Raw-binary record layout: optional label byte + H*W*3 pixel bytes."""

    size: int
    channel_order: str = "chw"  # "chw" or "hwc"
    label_byte: bool = False

    def __post_init__(self):
        if self.channel_order not in ("chw", "hwc"):
            raise FormatError(f"unsupported channel order {self.channel_order!r}")
        if self.size < 1:
            raise FormatError("image size must be positive")

    @property
    def record_bytes(self) -> int:
        return (1 if self.label_byte else 0) + 3 * self.size * self.size


@dataclass
class ImageDataset:
    """Ordered image collection with stable integer ids."""

    images: torch.Tensor  # (N, 3, H, W) float32 in [0, 1]
    ids: np.ndarray  # (N,) int64, unique
    source: str
    split: str = "fingerprint-train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise FormatError(f"expected (N,3,H,W) images, got {tuple(self.images.shape)}")
        if self.images.numel() and (self.images.min() < 0 or self.images.max() > 1):
            raise FormatError("pixel values outside [0, 1]")
        if len(np.unique(self.ids)) != len(self.ids):
            raise FormatError("image ids are not unique")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class SecretVector:
    """L-length bit string; the payload and verification token."""

    bits: np.ndarray  # (L,) float32, each exactly 0.0 or 1.0
    seed_tag: str = ""

    def __post_init__(self):
        if not np.isin(self.bits, (0.0, 1.0)).all():
            raise FormatError("secret bits must be exactly 0 or 1")

    def __len__(self) -> int:
        return len(self.bits)


def load_image_dataset(path, layout: DatasetLayout, split: str = "fingerprint-train") -> ImageDataset:
    """Load a raw-binary dataset; pixels are bytes 0..255, scaled to [0,1]."""
    if not os.path.exists(path):
        raise FormatError(f"dataset file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    rec = layout.record_bytes
    if raw.size == 0 or raw.size % rec != 0:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of record size {rec}")
    n = raw.size // rec
    records = raw.reshape(n, rec)
    pixels = records[:, 1:] if layout.label_byte else records
    s = layout.size
    if layout.channel_order == "chw":
        imgs = pixels.reshape(n, 3, s, s)
    else:
        imgs = pixels.reshape(n, s, s, 3).transpose(0, 3, 1, 2)
    images = torch.from_numpy(imgs.astype(np.float32) / 255.0)
    return ImageDataset(images, np.arange(n, dtype=np.int64), source=str(path), split=split)


def save_raw_dataset(dataset: ImageDataset, path) -> None:
    """Cache a dataset as the raw-binary CHW layout plus a JSON sidecar."""
    arr = (dataset.images.numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    arr.tofile(path)
    meta = {
        "size": int(dataset.images.shape[-1]),
        "channel_order": "chw",
        "label_byte": False,
        "count": len(dataset),
        "source": dataset.source,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)


def synth_dataset(seed: int, n: int, size: int = 32, split: str = "fingerprint-train") -> ImageDataset:
    """Procedural images: smooth gradients + geometric shapes + texture noise."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if size < 8:
        raise ConfigError("size must be >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        # smooth gradient base per channel
        img = np.empty((3, size, size), dtype=np.float64)
        for c in range(3):
            a, b = rng.uniform(-0.6, 0.6, 2)
            bias = rng.uniform(0.25, 0.75)
            img[c] = bias + a * (xx - 0.5) + b * (yy - 0.5)
        # 1..3 random shapes
        for _ in range(rng.integers(1, 4)):
            color = rng.uniform(0.0, 1.0, 3)
            cy, cx = rng.uniform(0.1, 0.9, 2)
            if rng.random() < 0.5:
                r = rng.uniform(0.08, 0.3)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
            else:
                hy, hx = rng.uniform(0.05, 0.25, 2)
                mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
            alpha = rng.uniform(0.4, 1.0)
            img = np.where(mask[None], (1 - alpha) * img + alpha * color[:, None, None], img)
        img += rng.normal(0.0, 0.03, (3, size, size))
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(
        torch.from_numpy(images),
        np.arange(n, dtype=np.int64),
        source=f"synth:seed={seed},n={n},size={size}",
        split=split,
    )


def sample_query_set(dataset: ImageDataset, n: int, seed: int) -> ImageDataset:
    """Uniform sample without replacement; ids are a subset of the input's."""
    if n > len(dataset):
        raise ConfigError(f"cannot sample {n} items from dataset of {len(dataset)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=n, replace=False)
    return ImageDataset(
        dataset.images[idx].clone(),
        dataset.ids[idx].copy(),
        source=dataset.source,
        split="query",
    )


def gen_secret(length: int, seed: int, seed_tag: str = "") -> SecretVector:
    """i.i.d. uniform bits; no correspondence between secret and image."""
    if length < 1:
        raise ConfigError("secret length must be >= 1")
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=length).astype(np.float32)
    return SecretVector(bits, seed_tag=seed_tag)


def gen_secret_batch(count: int, length: int, rng: np.random.Generator) -> torch.Tensor:
    """Batch of fresh uniform secrets as a (count, L) float32 tensor."""
    bits = rng.integers(0, 2, size=(count, length)).astype(np.float32)
    return torch.from_numpy(bits)
