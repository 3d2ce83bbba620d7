"""Black-box ownership verification: embed secrets into query images,
query the suspect oracle, extract, compute the erroneous bit rate, and
render a piracy/independent verdict plus Welch t-test evidence."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .data import ImageDataset, gen_secret_batch
from .encoders import EncoderOracle
from .errors import CalibrationError, ConfigError, IncompatibleOracleError
from .fingerprint import FingerprintBundle
from .stego import binarize
from . import seeds


def compute_ebr(embedded: torch.Tensor, extracted: torch.Tensor) -> float:
    """Fraction of mismatched bits over all N*L positions."""
    if embedded.shape != extracted.shape:
        raise ConfigError(f"shape mismatch {tuple(embedded.shape)} vs {tuple(extracted.shape)}")
    mismatched = (embedded != extracted).sum().item()
    return mismatched / embedded.numel()


@dataclass
class QueryRun:
    """Per-query verification records against one suspect oracle."""

    image_ids: np.ndarray
    embedded: torch.Tensor  # (N, L) bits
    extracted: torch.Tensor  # (N, L) bits
    suspect_tag: str
    bundle_digest: str

    @property
    def matched(self) -> np.ndarray:
        """c_j: matched-bit count per query."""
        return (self.embedded == self.extracted).sum(dim=1).numpy()

    @property
    def secret_len(self) -> int:
        return self.embedded.shape[1]

    def statistics(self) -> np.ndarray:
        """Smoothed per-query log-odds of bit agreement."""
        c = self.matched.astype(np.float64)
        L = self.secret_len
        return np.log((c + 1.0) / (L - c + 1.0))


@dataclass
class VerificationReport:
    ebr: float
    threshold: float
    verdict: str  # "piracy" | "independent"
    n_queries: int
    secret_len: int
    suspect_tag: str
    bundle_digest: str
    seed: int
    query_ids: list
    p_value: float | None = None
    delta_mu: float | None = None
    timestamp: float = field(default_factory=time.time)

    def to_json(self) -> str:
        d = {
            "bundle_digest": self.bundle_digest,
            "suspect_tag": self.suspect_tag,
            "N": self.n_queries,
            "L": self.secret_len,
            "ebr": self.ebr,
            "T": self.threshold,
            "verdict": self.verdict,
            "p_value": self.p_value,
            "delta_mu": self.delta_mu,
            "seed": self.seed,
            "query_ids": self.query_ids,
            "timestamp": self.timestamp,
        }
        return json.dumps(d, indent=2)


def run_queries(bundle: FingerprintBundle, suspect: EncoderOracle, queries: ImageDataset,
                seed: int) -> QueryRun:
    """One fresh secret per query image; exactly |queries| oracle queries."""
    if suspect.embed_dim != bundle.embed_dim:
        raise IncompatibleOracleError(
            f"suspect width {suspect.embed_dim} != fingerprint width {bundle.embed_dim}"
        )
    if len(queries) < 1:
        raise ConfigError("query set is empty")
    rng = np.random.default_rng(seeds.substream(seed, seeds.SECRETS))
    bits = gen_secret_batch(len(queries), bundle.secret_len, rng)
    bundle.embedder.eval()
    bundle.extractor.eval()
    with torch.no_grad():
        stego = bundle.embedder(queries.images, bits).clamp(0.0, 1.0)
    embeddings = suspect.embed(stego)
    with torch.no_grad():
        logits = bundle.extractor(embeddings)
    return QueryRun(
        image_ids=queries.ids.copy(),
        embedded=bits,
        extracted=binarize(logits),
        suspect_tag=suspect.tag,
        bundle_digest=bundle.digest(),
    )


def verify(bundle: FingerprintBundle, suspect: EncoderOracle, queries: ImageDataset,
           threshold: float, seed: int = 0, panel_runs: list[QueryRun] | None = None,
           significance: float = 0.05) -> VerificationReport:
    run = run_queries(bundle, suspect, queries, seed)
    ebr = compute_ebr(run.embedded, run.extracted)
    p_value = delta_mu = None
    if panel_runs:
        p_value, delta_mu = ttest_piracy(run, panel_runs, significance)
    return VerificationReport(
        ebr=ebr,
        threshold=threshold,
        verdict="piracy" if ebr < threshold else "independent",
        n_queries=len(queries),
        secret_len=bundle.secret_len,
        suspect_tag=run.suspect_tag,
        bundle_digest=run.bundle_digest,
        seed=seed,
        query_ids=[int(i) for i in run.image_ids],
        p_value=p_value,
        delta_mu=delta_mu,
    )


def calibrate_threshold(bundle: FingerprintBundle, victim: EncoderOracle,
                        panel: list[EncoderOracle], holdout: ImageDataset,
                        seed: int = 0) -> float:
    """Midpoint between the victim's holdout ebr and the minimum panel ebr,
    clipped to (0.05, 0.45)."""
    if not panel:
        raise ConfigError("panel must have at least one member")
    victim_run = run_queries(bundle, victim, holdout, seed)
    victim_ebr = compute_ebr(victim_run.embedded, victim_run.extracted)
    panel_ebrs = []
    for member in panel:
        run = run_queries(bundle, member, holdout, seed)
        panel_ebrs.append(compute_ebr(run.embedded, run.extracted))
    min_panel = min(panel_ebrs)
    if victim_ebr >= min_panel:
        raise CalibrationError(
            f"victim ebr {victim_ebr:.3f} >= panel minimum {min_panel:.3f}; fingerprint unusable"
        )
    return float(np.clip((victim_ebr + min_panel) / 2.0, 0.05, 0.45))


def ttest_piracy(suspect_run: QueryRun, panel_runs: list[QueryRun],
                 significance: float = 0.05) -> tuple[float, float]:
    """One-sided Welch test of mean suspect agreement exceeding the pooled
    independent panel's; returns (p_value, delta_mu)."""
    if not panel_runs:
        raise ConfigError("panel is empty")
    omega = suspect_run.statistics()
    omega_indep = np.concatenate([r.statistics() for r in panel_runs])
    if len(omega) < 2 or len(omega_indep) < 2:
        raise ConfigError("each side needs at least 2 queries")
    delta_mu = float(omega.mean() - omega_indep.mean())
    if omega.std(ddof=1) < 1e-12 and omega_indep.std(ddof=1) < 1e-12:
        # degenerate variance on both sides: exact comparison fallback
        return (0.0 if delta_mu > 0 else 1.0), delta_mu
    result = stats.ttest_ind(omega, omega_indep, equal_var=False, alternative="greater")
    return float(result.pvalue), delta_mu
