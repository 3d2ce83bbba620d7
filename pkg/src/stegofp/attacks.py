"""Adversary simulation: model extraction, fine-tuning, L1 filter pruning,
and output-perturbing oracle wrappers (noising, shuffle)."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import ImageDataset
from .encoders import (Encoder, EncoderOracle, EncoderSpec, ConvEncoder,
                       SSLConfig, make_provenance, pretrain_ssl)
from .errors import ConfigError, TrainingError
from . import seeds

FINETUNE_MODES = ("ft-same", "ft-other", "ftal", "rtal")


@dataclass
class AttackConfig:
    kind: str
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    prune_rate: float = 0.0
    noise_eps: float = 0.0
    shuffle_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.prune_rate < 1.0:
            raise ConfigError("prune rate must be in [0, 1)")
        if self.noise_eps < 0:
            raise ConfigError("noise scale must be >= 0")
        if not 0.0 <= self.shuffle_fraction <= 1.0:
            raise ConfigError("shuffle fraction must be in [0, 1]")


def _piracy_provenance(base: Encoder, attack: str, params: dict) -> dict:
    return make_provenance("piracy", {
        "attack": attack,
        "params": params,
        "base_digest": base.provenance.get("digest", ""),
    })


def extract_model(victim: EncoderOracle, surrogate_spec: EncoderSpec,
                  surrogate_data: ImageDataset, cfg: AttackConfig) -> Encoder:
    """Train a surrogate by regressing its embeddings onto the victim's
    black-box outputs (MSE). Touches the victim only through the oracle."""
    if surrogate_spec.embed_dim != victim.embed_dim:
        raise ConfigError(
            f"surrogate width {surrogate_spec.embed_dim} != victim width {victim.embed_dim}"
        )
    torch.manual_seed(seeds.substream(cfg.seed, seeds.INIT))
    module = ConvEncoder(surrogate_spec)
    # one labelling pass over the surrogate data
    targets = victim.embed(surrogate_data.images)
    gen = torch.Generator().manual_seed(seeds.substream(cfg.seed, seeds.ATTACK))
    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr)
    n = len(surrogate_data)
    bs = min(cfg.batch_size, n)
    module.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n - bs + 1, bs):
            idx = perm[start : start + bs]
            pred = module(surrogate_data.images[idx])
            loss = ((pred - targets[idx]) ** 2).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite extraction loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    module.eval()
    prov = make_provenance("piracy", {
        "attack": "extract",
        "params": {"epochs": cfg.epochs, "lr": cfg.lr, "seed": cfg.seed,
                   "spec": surrogate_spec.to_dict(), "data": surrogate_data.source},
        "victim_tag": victim.tag,
        "victim_queries": victim.queries,
    })
    return Encoder(surrogate_spec, module, prov)


def finetune(encoder: Encoder, data: ImageDataset, mode: str, epochs: int,
             seed: int = 0, batch_size: int = 256, lr: float = 1e-4) -> Encoder:
    """White-box fine-tuning. ft-same/ftal continue the contrastive objective
    on the pre-training data; ft-other uses a different dataset; rtal
    re-initializes the projection head first. The default learning rate is a
    tenth of the pre-training rate: a pirate fine-tunes gently to keep the
    stolen encoder's utility, not to retrain it from scratch."""
    if mode not in FINETUNE_MODES:
        raise ConfigError(f"unknown fine-tune mode {mode!r}")
    module = copy.deepcopy(encoder.module)
    if epochs > 0 and mode == "rtal":
        torch.manual_seed(seeds.substream(seed, seeds.INIT))
        module.head = nn.Linear(module.head.in_features, module.head.out_features)
    clone = Encoder(encoder.spec, module, dict(encoder.provenance))
    if epochs > 0:
        clone = pretrain_ssl(clone, data, SSLConfig(
            epochs=epochs, batch_size=batch_size, lr=lr,
            seed=seeds.substream(seed, seeds.ATTACK)))
    clone.provenance = _piracy_provenance(encoder, "finetune", {
        "mode": mode, "epochs": epochs, "seed": seed, "lr": lr, "data": data.source})
    return clone


def prune(encoder: Encoder, rate: float) -> Encoder:
    """Zero the fraction ``rate`` of conv filters with smallest L1 norm,
    per layer; shapes are unchanged so oracles stay compatible."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError("prune rate must be in [0, 1)")
    module = copy.deepcopy(encoder.module)
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, nn.Conv2d):
                norms = layer.weight.abs().sum(dim=(1, 2, 3))
                k = int(rate * norms.numel())
                if k == 0:
                    continue
                drop = torch.argsort(norms, stable=True)[:k]
                layer.weight[drop] = 0.0
                if layer.bias is not None:
                    layer.bias[drop] = 0.0
    return Encoder(encoder.spec, module,
                   _piracy_provenance(encoder, "prune", {"rate": rate}))


class NoisyOracle(EncoderOracle):
    """Adds seeded Gaussian noise of scale eps to every returned embedding."""

    def __init__(self, inner: EncoderOracle, eps: float, seed: int):
        if eps < 0:
            raise ConfigError("noise scale must be >= 0")
        self._inner = inner
        self._eps = eps
        self._gen = torch.Generator().manual_seed(seeds.substream(seed, seeds.ATTACK))
        self.tag = f"{inner.tag}+noise({eps})"
        self.embed_dim = inner.embed_dim
        self.provenance_digest = inner.provenance_digest

    @property
    def queries(self) -> int:
        return self._inner.queries

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        h = self._inner.embed(images)
        if self._eps == 0.0:
            return h
        noise = torch.randn(h.shape, generator=self._gen)
        return h + self._eps * noise


class ShuffledOracle(EncoderOracle):
    """Permutes a random coordinate subset of each embedding; fresh subset
    and permutation per query."""

    def __init__(self, inner: EncoderOracle, fraction: float, seed: int):
        if not 0.0 <= fraction <= 1.0:
            raise ConfigError("shuffle fraction must be in [0, 1]")
        self._inner = inner
        self._fraction = fraction
        self._rng = np.random.default_rng(seeds.substream(seed, seeds.ATTACK))
        self.tag = f"{inner.tag}+shuffle({fraction})"
        self.embed_dim = inner.embed_dim
        self.provenance_digest = inner.provenance_digest

    @property
    def queries(self) -> int:
        return self._inner.queries

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        h = self._inner.embed(images)
        k = int(np.ceil(self._fraction * self.embed_dim))
        if k < 2:
            return h
        out = h.clone()
        for row in range(out.shape[0]):
            coords = self._rng.choice(self.embed_dim, size=k, replace=False)
            perm = self._rng.permutation(k)
            out[row, coords] = out[row, coords[perm]]
        return out
