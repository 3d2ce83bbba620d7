"""Joint training of the secrets embedder and extractor against a frozen
victim encoder, and the persistable fingerprint bundle."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .data import ImageDataset, gen_secret_batch
from .encoders import Encoder
from .errors import ConfigError, TrainingError, VersionError
from .serialization import BUNDLE_MAGIC, canonical_digest, read_container, write_container
from .stego import SecretEmbedder, SecretExtractor, binarize
from . import seeds


def loss_secret(bits: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Mean squared error between embedded bits and extractor logits."""
    if bits.shape != logits.shape:
        raise ConfigError(f"shape mismatch {tuple(bits.shape)} vs {tuple(logits.shape)}")
    return ((bits - logits) ** 2).mean()


def loss_image(x: torch.Tensor, x_stego: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixel entries."""
    if x.shape != x_stego.shape:
        raise ConfigError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_stego.shape)}")
    return ((x - x_stego) ** 2).mean()


def total_loss(l_image: torch.Tensor, l_secret: torch.Tensor, alpha: float) -> torch.Tensor:
    """Joint objective: image loss plus alpha-weighted secret loss."""
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    return l_image + alpha * l_secret


@dataclass
class TrainConfig:
    alpha: float = 0.7
    secret_len: int = 64
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    extractor_lr: float = 3e-3  # 0/None: reuse lr
    stop_ebr: float = 0.05  # stop when the true training bit-error rate drops below
    warmup_gate: float = 0.0  # >0: train secret loss only until train ebr < gate
    warmup_max: int = 0  # >0: start the ramp after this many epochs regardless
    ramp_epochs: int = 0  # epochs over which the image-loss weight ramps 0 -> 1
    whiten_eps: float = 0.05  # ridge for the extractor input whitening
    whiten_rank: int = 0  # >0: restrict the extractor to the top-k subspace
    channel_noise: float = 0.0  # train-time Gaussian noise on victim embeddings
    seed: int = 0
    embedder_hidden: int = 64
    use_fca: bool = True
    direction: str = "forward"  # "reverse" maximizes bit error instead

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not 0 < self.stop_ebr < 0.5:
            raise ConfigError("stop_ebr must be in (0, 0.5)")
        if not 0 <= self.warmup_gate < 0.5:
            raise ConfigError("warmup_gate must be in [0, 0.5)")
        if self.ramp_epochs < 0:
            raise ConfigError("ramp_epochs must be non-negative")
        if self.warmup_max < 0:
            raise ConfigError("warmup_max must be non-negative")
        if self.whiten_eps <= 0:
            raise ConfigError("whiten_eps must be positive")
        if self.whiten_rank < 0:
            raise ConfigError("whiten_rank must be non-negative")
        if self.channel_noise < 0:
            raise ConfigError("channel_noise must be non-negative")
        if self.direction not in ("forward", "reverse"):
            raise ConfigError(f"unknown direction {self.direction!r}")


@dataclass
class FingerprintBundle:
    """Trained embedder + extractor bound to one victim encoder."""

    embedder: SecretEmbedder
    extractor: SecretExtractor
    config: TrainConfig
    victim_digest: str
    curve: list = field(default_factory=list)  # per-epoch dicts

    @property
    def secret_len(self) -> int:
        return self.config.secret_len

    @property
    def embed_dim(self) -> int:
        return self.extractor.embed_dim

    def digest(self) -> str:
        blobs = [p.detach().numpy().tobytes().hex()
                 for m in (self.embedder, self.extractor)
                 for p in m.state_dict().values()]
        return canonical_digest({"victim": self.victim_digest, "params": blobs})


def train_fingerprint(victim: Encoder, dataset: ImageDataset, cfg: TrainConfig,
                      progress=None) -> FingerprintBundle:
    """Alternate over batches: fresh random secrets, embed, query the frozen
    victim (gradients flow through it, parameters do not move), extract,
    joint MSE losses, Adam step on embedder+extractor only. Stops when the
    epoch-mean thresholded bit-error rate drops below ``cfg.stop_ebr``.

    With ``cfg.warmup_gate > 0`` the image loss is held at weight zero until
    the training bit-error rate first drops below the gate (or, if set,
    ``cfg.warmup_max`` epochs have elapsed), then its weight ramps linearly
    to one over ``cfg.ramp_epochs`` epochs, after which the
    objective is the standard joint loss. Early stopping on ``stop_ebr`` only
    applies once the image-loss weight has reached one."""
    if len(dataset) == 0:
        raise ConfigError("fingerprint training dataset is empty")
    victim_before = victim.param_checksum()
    victim.module.eval()
    for p in victim.module.parameters():
        p.requires_grad_(False)

    torch.manual_seed(seeds.substream(cfg.seed, seeds.INIT))
    embedder = SecretEmbedder(cfg.secret_len, hidden=cfg.embedder_hidden, use_fca=cfg.use_fca)
    extractor = SecretExtractor(victim.embed_dim, cfg.secret_len)
    with torch.no_grad():
        ref = victim.module(dataset.images[: min(len(dataset), 256)])
    extractor.set_input_stats(ref, eps=cfg.whiten_eps, rank=cfg.whiten_rank)
    opt = torch.optim.Adam([
        {"params": embedder.parameters(), "lr": cfg.lr},
        {"params": extractor.parameters(), "lr": cfg.extractor_lr or cfg.lr},
    ])
    data_rng = torch.Generator().manual_seed(seeds.substream(cfg.seed, seeds.DATA))
    secret_rng = np.random.default_rng(seeds.substream(cfg.seed, seeds.SECRETS))
    noise_rng = torch.Generator().manual_seed(seeds.substream(cfg.seed, "channel-noise"))

    sign = 1.0 if cfg.direction == "forward" else -1.0
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    curve = []
    ramp_start = None if cfg.warmup_gate > 0 else 0
    for epoch in range(cfg.epochs):
        if ramp_start is None:
            w_img = 0.0
        elif cfg.ramp_epochs > 0:
            w_img = min(1.0, (epoch - ramp_start) / cfg.ramp_epochs)
        else:
            w_img = 1.0
        perm = torch.randperm(n, generator=data_rng)
        sums = {"loss_secret": 0.0, "loss_image": 0.0, "total": 0.0, "ebr": 0.0}
        batches = 0
        embedder.train()
        for start in range(0, n - bs + 1, bs):
            idx = perm[start : start + bs]
            x = dataset.images[idx]
            bits = gen_secret_batch(len(idx), cfg.secret_len, secret_rng)
            stego = embedder(x, bits)
            y = victim.module(stego)
            if cfg.channel_noise > 0:
                # regularizer: the extractor must read the secret through a
                # perturbed channel, which keeps the fingerprint in embedding
                # directions that survive derivative encoders
                y = y + cfg.channel_noise * torch.randn(y.shape, generator=noise_rng)
            logits = extractor(y)
            l_s = loss_secret(bits, logits)
            l_i = loss_image(x, stego)
            loss = total_loss(w_img * l_i, sign * l_s, cfg.alpha)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batches}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                err = (binarize(logits) != bits).float().mean().item()
            sums["loss_secret"] += l_s.item()
            sums["loss_image"] += l_i.item()
            sums["total"] += (l_i + cfg.alpha * l_s).item()
            sums["ebr"] += err
            batches += 1
        record = {k: v / batches for k, v in sums.items()}
        record["epoch"] = epoch
        curve.append(record)
        if progress is not None:
            progress(record)
        target = record["ebr"] if cfg.direction == "forward" else 1.0 - record["ebr"]
        if ramp_start is None and (target < cfg.warmup_gate
                                   or (cfg.warmup_max and epoch + 1 >= cfg.warmup_max)):
            ramp_start = epoch + 1
        if w_img >= 1.0 and target < cfg.stop_ebr:
            break
    embedder.eval()
    extractor.eval()

    if victim.param_checksum() != victim_before:
        raise TrainingError("victim parameters changed during fingerprint training")
    return FingerprintBundle(
        embedder=embedder,
        extractor=extractor,
        config=cfg,
        victim_digest=victim.provenance.get("digest", ""),
        curve=curve,
    )


def save_bundle(bundle: FingerprintBundle, path) -> None:
    header = {
        "format_version": 1,
        "config": asdict(bundle.config),
        "embed_dim": bundle.embed_dim,
        "victim_digest": bundle.victim_digest,
        "curve": bundle.curve,
    }
    tensors = {}
    for prefix, module in (("embedder", bundle.embedder), ("extractor", bundle.extractor)):
        for k, v in module.state_dict().items():
            tensors[f"{prefix}.{k}"] = v
    write_container(path, BUNDLE_MAGIC, header, tensors)


def load_bundle(path) -> FingerprintBundle:
    header, tensors = read_container(path, BUNDLE_MAGIC)
    if header.get("format_version") != 1:
        raise VersionError(f"{path}: unsupported format version")
    cfg = TrainConfig(**header["config"])
    embedder = SecretEmbedder(cfg.secret_len, hidden=cfg.embedder_hidden, use_fca=cfg.use_fca)
    extractor = SecretExtractor(header["embed_dim"], cfg.secret_len)
    for prefix, module in (("embedder", embedder), ("extractor", extractor)):
        ref = module.state_dict()
        state = {}
        for k, target in ref.items():
            full = f"{prefix}.{k}"
            if full not in tensors:
                raise VersionError(f"{path}: missing tensor {full}")
            state[k] = tensors[full].reshape(target.shape).to(target.dtype)
        module.load_state_dict(state)
        module.eval()
    return FingerprintBundle(embedder, extractor, cfg, header["victim_digest"], header["curve"])
