"""Small convolutional encoders, contrastive pre-training, and the
black-box embedding oracle.

Encoders are conv stacks (4/6/8 blocks with pooling) ending in global
average pooling and a linear head to the embedding width D. Normalization
layers use stored running statistics at inference so embedding is a pure
function of the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import ImageDataset
from .errors import ConfigError, FormatError, TrainingError, VersionError
from .serialization import ENCODER_MAGIC, canonical_digest, read_container, write_container

# channels per block; pooling after the first three blocks
_ARCH_CHANNELS = {
    "conv-small": [32, 64, 128, 128],
    "conv-wide": [48, 96, 192, 192, 192, 192],
    "conv-deep": [32, 64, 64, 128, 128, 128, 128, 128],
}
_POOL_AFTER = {0, 1, 2}


@dataclass(frozen=True)
class EncoderSpec:
    arch: str = "conv-small"
    embed_dim: int = 128
    activation: str = "relu"
    width: float = 1.0

    def __post_init__(self):
        if self.arch not in _ARCH_CHANNELS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.embed_dim < 16:
            raise ConfigError("embed_dim must be >= 16")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.width <= 0:
            raise ConfigError("width multiplier must be positive")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "embed_dim": self.embed_dim,
            "activation": self.activation,
            "width": self.width,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderSpec":
        return EncoderSpec(d["arch"], d["embed_dim"], d["activation"], d["width"])


class ConvEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        act = nn.ReLU if spec.activation == "relu" else nn.GELU
        layers = []
        c_in = 3
        for i, base in enumerate(_ARCH_CHANNELS[spec.arch]):
            c_out = max(4, int(round(base * spec.width)))
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), act()]
            if i in _POOL_AFTER:
                layers.append(nn.MaxPool2d(2))
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, spec.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.features(x)
        pooled = feats.mean(dim=(2, 3))
        return self.head(pooled)


@dataclass
class Encoder:
    """An encoder network plus its spec and provenance record."""

    spec: EncoderSpec
    module: ConvEncoder
    provenance: dict = field(default_factory=dict)

    @property
    def embed_dim(self) -> int:
        return self.spec.embed_dim

    def param_checksum(self) -> str:
        blobs = [p.detach().numpy().tobytes() for p in self.module.state_dict().values()]
        return canonical_digest([b.hex() for b in blobs])


def make_provenance(kind: str, config: dict) -> dict:
    """Provenance with a digest reproducibly hashing (kind, config)."""
    return {"kind": kind, "config": config, "digest": canonical_digest({"kind": kind, "config": config})}


def build_encoder(spec: EncoderSpec, seed: int, kind: str = "independent") -> Encoder:
    """Fan-in-scaled uniform initialization (torch default), seeded."""
    torch.manual_seed(seed)
    module = ConvEncoder(spec)
    module.eval()
    prov = make_provenance(kind, {"spec": spec.to_dict(), "seed": seed, "trained": False})
    return Encoder(spec, module, prov)


# ---------------------------------------------------------------------------
# Black-box oracle


class EncoderOracle:
    """Images -> embeddings, nothing else. Parameter access is forbidden
    through this interface; attack wrappers compose around it."""

    def __init__(self, encoder: Encoder, tag: str = ""):
        self.__module = encoder.module
        self.__module.eval()
        self.tag = tag or encoder.provenance.get("digest", "")
        self.embed_dim = encoder.embed_dim
        self.queries = 0
        self.provenance_digest = encoder.provenance.get("digest", "")

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise FormatError(f"expected (N,3,H,W) batch, got {tuple(images.shape)}")
        self.queries += images.shape[0]
        with torch.no_grad():
            return self.__module(images)


# ---------------------------------------------------------------------------
# SimCLR-style pre-training


@dataclass
class SSLConfig:
    epochs: int = 30
    batch_size: int = 256
    temperature: float = 0.5
    lr: float = 1e-3
    seed: int = 0
    proj_dim: int = 64


def _augment(batch: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random crop-resize, horizontal flip, brightness/contrast jitter,
    random grayscale; all draws from the supplied generator."""
    n, _, h, w = batch.shape
    out = batch.clone()
    # crop-resize
    scales = 0.6 + 0.4 * torch.rand(n, generator=gen)
    for i in range(n):
        ch = max(8, int(round(h * scales[i].item())))
        top = int(torch.randint(0, h - ch + 1, (1,), generator=gen))
        left = int(torch.randint(0, w - ch + 1, (1,), generator=gen))
        crop = out[i : i + 1, :, top : top + ch, left : left + ch]
        out[i] = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)[0]
    # horizontal flip
    flip = torch.rand(n, generator=gen) < 0.5
    out[flip] = out[flip].flip(-1)
    # brightness/contrast jitter
    brightness = 0.8 + 0.4 * torch.rand(n, 1, 1, 1, generator=gen)
    contrast = 0.8 + 0.4 * torch.rand(n, 1, 1, 1, generator=gen)
    mean = out.mean(dim=(1, 2, 3), keepdim=True)
    out = (out - mean) * contrast + mean * brightness
    # random grayscale
    gray_mask = torch.rand(n, generator=gen) < 0.2
    if gray_mask.any():
        g = out[gray_mask].mean(dim=1, keepdim=True)
        out[gray_mask] = g.expand(-1, 3, -1, -1)
    return out.clamp(0.0, 1.0)


def _nt_xent(z1: torch.Tensor, z2: torch.Tensor, temperature: float) -> torch.Tensor:
    z = F.normalize(torch.cat([z1, z2], dim=0), dim=1)
    n = z1.shape[0]
    sim = z @ z.t() / temperature
    sim.fill_diagonal_(float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, targets)


def pretrain_ssl(encoder: Encoder, dataset: ImageDataset, cfg: SSLConfig) -> Encoder:
    """Contrastive pre-training; returns the encoder with updated parameters
    and a per-epoch loss log in its provenance. The projection head used
    during training is discarded."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    module = encoder.module
    if cfg.epochs == 0:
        return encoder
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    head = nn.Sequential(
        nn.Linear(encoder.embed_dim, encoder.embed_dim),
        nn.ReLU(),
        nn.Linear(encoder.embed_dim, cfg.proj_dim),
    )
    module.train()
    opt = torch.optim.Adam(list(module.parameters()) + list(head.parameters()), lr=cfg.lr)
    losses = []
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n - bs + 1, bs):
            idx = perm[start : start + bs]
            x = dataset.images[idx]
            v1 = _augment(x, gen)
            v2 = _augment(x, gen)
            z1 = head(module(v1))
            z2 = head(module(v2))
            loss = _nt_xent(z1, z2, cfg.temperature)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite contrastive loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        losses.append(epoch_loss / max(1, batches))
    module.eval()
    config = {
        "spec": encoder.spec.to_dict(),
        "seed": cfg.seed,
        "dataset": dataset.source,
        "ssl": {"epochs": cfg.epochs, "batch_size": cfg.batch_size,
                "temperature": cfg.temperature, "lr": cfg.lr},
    }
    kind = encoder.provenance.get("kind", "independent")
    prov = make_provenance(kind, config)
    prov["loss_curve"] = losses
    return Encoder(encoder.spec, module, prov)


# ---------------------------------------------------------------------------
# Persistence


def save_encoder(encoder: Encoder, path) -> None:
    header = {
        "format_version": 1,
        "spec": encoder.spec.to_dict(),
        "provenance": encoder.provenance,
    }
    write_container(path, ENCODER_MAGIC, header, dict(encoder.module.state_dict()))


def load_encoder(path) -> Encoder:
    header, tensors = read_container(path, ENCODER_MAGIC)
    if header.get("format_version") != 1:
        raise VersionError(f"{path}: unsupported format version")
    prov = header["provenance"]
    expected = canonical_digest({"kind": prov.get("kind"), "config": prov.get("config")})
    if prov.get("digest") != expected:
        raise VersionError(f"{path}: provenance digest mismatch")
    spec = EncoderSpec.from_dict(header["spec"])
    module = ConvEncoder(spec)
    state = {k: v.reshape(module.state_dict()[k].shape) for k, v in tensors.items()
             if k in module.state_dict()}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise VersionError(f"{path}: missing tensors {sorted(missing)[:3]}")
    # integer buffers (num_batches_tracked) are stored as float32
    for k, v in state.items():
        state[k] = v.to(module.state_dict()[k].dtype)
    module.load_state_dict(state)
    module.eval()
    return Encoder(spec, module, prov)
