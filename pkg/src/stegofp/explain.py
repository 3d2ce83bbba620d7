"""Explanation and stego-quality metrics: encoder-adapted GradCAM driven by
the clean-vs-stego embedding distance, plus PSNR and SSIM."""

from __future__ import annotations

import json
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import Encoder
from .errors import ConfigError, FormatError

PSNR_CAP_DB = 99.0


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0,1]-range images."""
    if x.shape != y.shape:
        raise FormatError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = ((x.double() - y.double()) ** 2).mean().item()
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def ssim(x: torch.Tensor, y: torch.Tensor, window: int = 8) -> float:
    """Mean local structural similarity over non-overlapping windows,
    averaged over channels. Standard stabilizers for unit dynamic range."""
    if x.shape != y.shape:
        raise FormatError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    c1, c2 = 0.01**2, 0.03**2
    xs = x.reshape(-1, *x.shape[-2:]).double()
    ys = y.reshape(-1, *y.shape[-2:]).double()
    scores = []
    h, w = xs.shape[-2:]
    for c in range(xs.shape[0]):
        for i in range(0, h - window + 1, window):
            for j in range(0, w - window + 1, window):
                a = xs[c, i : i + window, j : j + window]
                b = ys[c, i : i + window, j : j + window]
                mu_a, mu_b = a.mean(), b.mean()
                var_a, var_b = a.var(unbiased=False), b.var(unbiased=False)
                cov = ((a - mu_a) * (b - mu_b)).mean()
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
                scores.append((num / den).item())
    return float(np.mean(scores))


def conv_layer_tags(encoder: Encoder) -> list[str]:
    """Names of conv layers usable as GradCAM targets."""
    return [name for name, m in encoder.module.named_modules() if isinstance(m, nn.Conv2d)]


def gradcam_stego(encoder: Encoder, x: torch.Tensor, x_stego: torch.Tensor,
                  layer: str | None = None) -> tuple[np.ndarray, float]:
    """Heat map of where the embedding moved: objective is the squared
    distance between clean and stego embeddings; channel weights are the
    spatial means of its gradient at the target conv layer on the stego
    input. Returns (HxW map normalized to [0,1], objective value)."""
    module = encoder.module
    tags = conv_layer_tags(encoder)
    if layer is None:
        layer = tags[-1]
    if layer not in tags:
        raise ConfigError(f"unknown layer tag {layer!r}; choose from {tags}")
    target = dict(module.named_modules())[layer]

    captured = {}

    def hook(_m, _inp, out):
        captured["act"] = out
        out.retain_grad()

    module.eval()
    with torch.no_grad():
        clean_embed = module(x[None] if x.ndim == 3 else x)
    handle = target.register_forward_hook(hook)
    try:
        stego_in = (x_stego[None] if x_stego.ndim == 3 else x_stego).clone().requires_grad_(True)
        stego_embed = module(stego_in)
        d = ((stego_embed - clean_embed) ** 2).sum()
        module.zero_grad()
        d.backward()
    finally:
        handle.remove()

    acts = captured["act"]
    grads = acts.grad
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * acts).sum(dim=1, keepdim=True))
    h, w = x.shape[-2:]
    cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    cam = cam.detach().numpy()
    lo, hi = cam.min(), cam.max()
    if hi - lo < 1e-12:
        return np.zeros_like(cam), float(d.item())
    return (cam - lo) / (hi - lo), float(d.item())


def heatmap_iou(map_a: np.ndarray, map_b: np.ndarray, top_fraction: float = 0.10) -> float:
    """IoU of the top-mass regions of two normalized heat maps."""
    if map_a.shape != map_b.shape:
        raise FormatError("heat map shapes differ")
    k = max(1, int(round(top_fraction * map_a.size)))
    a_top = np.zeros(map_a.size, dtype=bool)
    a_top[np.argsort(map_a.ravel())[-k:]] = True
    b_top = np.zeros(map_b.size, dtype=bool)
    b_top[np.argsort(map_b.ravel())[-k:]] = True
    union = (a_top | b_top).sum()
    return float((a_top & b_top).sum() / union) if union else 0.0


def write_heatmap_pgm(path, heatmap: np.ndarray, sidecar: dict | None = None) -> None:
    """8-bit grayscale PGM plus a JSON sidecar with provenance."""
    arr = np.clip(np.round(heatmap * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())
    if sidecar is not None:
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2)
