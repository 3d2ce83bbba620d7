"""Secrets embedder/extractor networks and the frequency-attention block.

The embedder hides an L-bit secret in an image by broadcasting each bit to
a constant spatial plane, concatenating those planes with conv features,
and gating channels with DCT-domain attention. The extractor recovers the
bits from an encoder's embedding with two rectified affine layers.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, FormatError

DCT_GRID = 7  # pooled grid side; 49 frequency components


def dct_basis(grid: int = DCT_GRID) -> torch.Tensor:
    """(grid*grid, grid, grid) cosine basis; row k holds frequency (k//grid, k%grid)."""
    h = torch.arange(grid, dtype=torch.float64)
    basis = torch.empty(grid * grid, grid, grid, dtype=torch.float64)
    for k in range(grid * grid):
        u, v = divmod(k, grid)
        row = torch.cos(math.pi * (h + 0.5) * u / grid)
        col = torch.cos(math.pi * (h + 0.5) * v / grid)
        basis[k] = row[:, None] * col[None, :]
    return basis


def dct_grid_coeffs(grid_map: torch.Tensor) -> torch.Tensor:
    """49-vector of 2D-DCT coefficients of a 7x7 map; coefficient k is the
    inner product with basis frequency (k//7, k%7)."""
    if grid_map.shape != (DCT_GRID, DCT_GRID):
        raise FormatError(f"expected {DCT_GRID}x{DCT_GRID} grid, got {tuple(grid_map.shape)}")
    basis = dct_basis().to(grid_map.dtype)
    return torch.einsum("hw,khw->k", grid_map, basis)


class FcaEmb(nn.Module):
    """Frequency-domain channel attention: per-channel sigmoid gates driven
    by the channel-mean 49-component pooled-grid DCT spectrum."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.fc = nn.Linear(DCT_GRID * DCT_GRID, channels)
        self.register_buffer("basis", dct_basis().to(torch.float32))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(f"expected {self.channels} channels, got {x.shape[1]}")
        pooled = F.adaptive_avg_pool2d(x, DCT_GRID)
        coeffs = torch.einsum("nchw,khw->nck", pooled, self.basis.to(x.dtype))
        freq = coeffs.mean(dim=1)  # shared 49-vector across channels
        gates = torch.sigmoid(self.fc(freq))
        return x * gates[:, :, None, None]


def _conv_bn_relu(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(),
    )


class SecretEmbedder(nn.Module):
    """Residual-free stego network: three conv stages with secret planes
    concatenated at stages two and three, frequency attention after each
    of those stages, and a final conv back to 3 channels."""

    def __init__(self, secret_len: int, hidden: int = 64, use_fca: bool = True):
        super().__init__()
        if secret_len < 1:
            raise ConfigError("secret length must be >= 1")
        self.secret_len = secret_len
        self.hidden = hidden
        self.use_fca = use_fca
        self.stage_a = _conv_bn_relu(3, hidden)
        self.stage_b = _conv_bn_relu(hidden + secret_len, hidden)
        self.stage_c = _conv_bn_relu(hidden + hidden + secret_len, hidden)
        self.fca1 = FcaEmb(hidden) if use_fca else nn.Identity()
        self.fca2 = FcaEmb(hidden) if use_fca else nn.Identity()
        self.out_conv = nn.Conv2d(hidden + 3, 3, 3, padding=1)
        # channel bookkeeping: stages consume 3, hidden+L, 2*hidden+L channels
        assert self.stage_b[0].in_channels == hidden + secret_len
        assert self.stage_c[0].in_channels == 2 * hidden + secret_len

    def forward(self, images: torch.Tensor, secrets: torch.Tensor) -> torch.Tensor:
        if images.shape[0] != secrets.shape[0]:
            raise ConfigError("batch sizes of images and secrets differ")
        if secrets.shape[1] != self.secret_len:
            raise ConfigError(f"expected secrets of length {self.secret_len}, got {secrets.shape[1]}")
        h, w = images.shape[-2:]
        planes = secrets[:, :, None, None].expand(-1, -1, h, w).to(images.dtype)
        f_a = self.stage_a(images)
        f_b = self.fca1(self.stage_b(torch.cat([f_a, planes], dim=1)))
        f_c = self.fca2(self.stage_c(torch.cat([f_b, planes, f_a], dim=1)))
        return self.out_conv(torch.cat([f_c, images], dim=1))


class SecretExtractor(nn.Module):
    """Two rectified affine layers: embedding (D) -> 256 -> L.

    Inputs pass through a fixed whitening transform before the first
    layer. The transform is stored in frozen buffers (identity by default,
    set once from victim embeddings via ``set_input_stats``), so the
    network stays a composition of two rectified affine maps — the
    whitening folds into the first layer — but optimizes far better when
    the embedding covariance is ill-conditioned, as it is for encoders
    whose data-manifold variance concentrates in a few directions while
    their perturbation response spans many more."""

    def __init__(self, embed_dim: int, secret_len: int, hidden: int = 256):
        super().__init__()
        self.embed_dim = embed_dim
        self.secret_len = secret_len
        self.fc1 = nn.Linear(embed_dim, hidden)
        self.fc2 = nn.Linear(hidden, secret_len)
        self.register_buffer("in_mean", torch.zeros(embed_dim))
        self.register_buffer("in_whiten", torch.eye(embed_dim))

    def set_input_stats(self, embeddings: torch.Tensor, eps: float = 1e-3,
                        rank: int = 0) -> None:
        """Fix the input whitening (ZCA with relative ridge) from a sample
        of embeddings. With ``rank > 0`` the transform projects onto the
        top-``rank`` principal directions of the sample, discarding the
        low-variance directions entirely — those are exactly the directions
        that derivative encoders (pruned, fine-tuned, extracted) do not
        preserve, so restricting the extractor to the top subspace keeps the
        fingerprint readable through them."""
        if embeddings.ndim != 2 or embeddings.shape[-1] != self.embed_dim:
            raise ConfigError(f"expected (N, {self.embed_dim}) embeddings")
        if rank < 0 or rank > self.embed_dim:
            raise ConfigError(f"rank must be in [0, {self.embed_dim}]")
        with torch.no_grad():
            mu = embeddings.mean(dim=0)
            centered = embeddings - mu
            cov = centered.T @ centered / max(len(embeddings) - 1, 1)
            lam, vecs = torch.linalg.eigh(cov)  # ascending eigenvalues
            lam = lam.clamp_min(0) + eps * lam.mean().clamp_min(1e-12)
            if rank:
                lam = lam[-rank:]
                vecs = vecs[:, -rank:]
            self.in_mean.copy_(mu)
            self.in_whiten.copy_(vecs @ torch.diag(lam.rsqrt()) @ vecs.T)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        if embeddings.shape[-1] != self.embed_dim:
            raise ConfigError(
                f"extractor expects width {self.embed_dim}, got {embeddings.shape[-1]}"
            )
        z = (embeddings - self.in_mean) @ self.in_whiten
        return F.relu(self.fc2(F.relu(self.fc1(z))))


def embed_secrets(embedder: SecretEmbedder, images: torch.Tensor, secrets: torch.Tensor,
                  clamp: bool = True) -> torch.Tensor:
    """Eval-mode embedding; clamped to [0,1] so stego outputs are valid images."""
    was_training = embedder.training
    embedder.eval()
    try:
        with torch.no_grad():
            stego = embedder(images, secrets)
    finally:
        embedder.train(was_training)
    return stego.clamp(0.0, 1.0) if clamp else stego


def binarize(logits: torch.Tensor) -> torch.Tensor:
    """Decision rule: bit = 1 iff logit >= 0.5."""
    if not torch.isfinite(logits).all():
        raise FormatError("non-finite extractor logits")
    return (logits >= 0.5).to(torch.float32)
