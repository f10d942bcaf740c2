"""Training objectives.

Both model variants share the prediction and VAE terms and differ only in the
intra-class diversity term:

* ``protovae``: orthonormality of the mean-subtracted class prototypes.
* ``panvae``: volumetric loss, the mean over classes of the inverse square
  root of the Gramian ``det(Phi_k^T Phi_k)``.

Every function works on any floating dtype so gradient checks can run in
float64. Inactive (pruned) prototypes are left out of every term.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import ConfigurationError, NumericalDegeneracyError, TrainingDivergenceError
from .model import PosteriorParams, PrototypeBank

VARIANTS = ("protovae", "panvae")
PROB_FLOOR = 1e-12
JITTER_RETRIES = 3


@dataclass
class LossWeights:
    w_pred: float = 1.0
    w_vae_recon: float = 0.1
    w_vae_kl: float = 1.0
    w_div: float = 1.0
    jitter: float = 1e-8

    def __post_init__(self):
        for name in ("w_pred", "w_vae_recon", "w_vae_kl", "w_div"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigurationError(f"{name} must be a finite nonnegative number, got {v}")
        if not 1e-12 <= self.jitter <= 1e-3:
            raise ConfigurationError(f"jitter must lie in [1e-12, 1e-3], got {self.jitter}")


@dataclass
class LossBreakdown:
    """Per-batch loss components. Tensors keep their graph; ``total`` is what gets backpropagated."""

    pred: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    diversity: torch.Tensor
    total: torch.Tensor
    per_class_volume: torch.Tensor = field(default_factory=lambda: torch.zeros(0))

    def as_dict(self) -> dict[str, float]:
        row = {k: float(getattr(self, k).detach()) for k in ("pred", "recon", "kl", "diversity", "total")}
        for k, v in enumerate(self.per_class_volume.detach().tolist()):
            row[f"volume_class_{k}"] = v
        return row


# -- prediction / VAE ----------------------------------------------------------


def prediction_loss(predictions: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy between probability rows and one-hot label rows."""
    logp = torch.log(predictions.clamp_min(PROB_FLOOR))
    return -(labels * logp).sum(-1).mean()


def kl_diag_gaussian_to_unit(mu: torch.Tensor, sigma: torch.Tensor, center: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(center, I)), summed over the last axis.

    Broadcasts, so ``mu`` of shape (B, 1, 1, d) against prototypes (K, M, d)
    yields a (B, K, M) table.
    """
    var = sigma * sigma
    return 0.5 * (var + (mu - center) ** 2 - 1.0 - torch.log(var)).sum(-1)


def similarity_weights(s: torch.Tensor, active_mask: torch.Tensor) -> torch.Tensor:
    """Normalise similarities over the active prototypes of each class: (B, K, M) -> (B, K, M)."""
    s = s * active_mask.to(s.dtype)
    return s / s.sum(-1, keepdim=True)


def vae_loss(
    images: torch.Tensor,
    reconstructions: torch.Tensor,
    posterior: PosteriorParams,
    similarities: torch.Tensor,
    labels: torch.Tensor,
    bank: PrototypeBank,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(recon, kl)``.

    ``recon`` is the squared error summed over pixels and averaged over the
    batch. ``kl`` is, per image, the similarity-weighted KL divergence to each
    active prototype of its true class, averaged over the batch.
    """
    recon = ((images - reconstructions) ** 2).flatten(1).sum(-1).mean()
    kl_table = kl_diag_gaussian_to_unit(posterior.mu[:, None, None, :], posterior.sigma[:, None, None, :], bank.phi)
    w = similarity_weights(similarities, bank.active_mask)
    kl = (labels[:, :, None] * w * kl_table).sum((1, 2)).mean()
    return recon, kl


# -- diversity terms ---------------------------------------------------------------


def orthonormality_loss(bank: PrototypeBank) -> torch.Tensor:
    """Sum over classes of ``||Pbar^T Pbar - I||_F^2`` with mean-subtracted active prototypes as columns."""
    total = bank.phi.new_zeros(())
    for k in range(bank.num_classes):
        P = bank.active(k).T  # (d, M_k)
        P = P - P.mean(1, keepdim=True)
        G = P.T @ P
        eye = torch.eye(G.shape[0], dtype=G.dtype, device=G.device)
        total = total + ((G - eye) ** 2).sum()
    return total


def gramian(bank: PrototypeBank, k: int, jitter: float = 1e-8) -> tuple[torch.Tensor, torch.Tensor]:
    """Jittered Gram matrix of class ``k`` and its log-determinant via Cholesky.

    The jitter is raised tenfold up to three times if factorisation fails.
    """
    P = bank.active(k).T  # (d, M_k)
    m = P.shape[1]
    if P.shape[0] < m:
        raise ConfigurationError(f"class {k}: latent_dim {P.shape[0]} < active prototypes {m}")
    G0 = P.T @ P
    eye = torch.eye(m, dtype=P.dtype, device=P.device)
    j = jitter
    for _ in range(JITTER_RETRIES + 1):
        G = G0 + j * eye
        L, info = torch.linalg.cholesky_ex(G)
        if int(info) == 0 and bool(torch.isfinite(L).all()):
            log_det = 2.0 * torch.log(torch.diagonal(L)).sum()
            return G, log_det
        j *= 10.0
    raise NumericalDegeneracyError(
        f"Gram matrix of class {k} is not positive definite even with jitter {j / 10:g}", class_index=k
    )


def volumetric_loss(bank: PrototypeBank, jitter: float = 1e-8) -> tuple[torch.Tensor, torch.Tensor]:
    """``(1/K) sum_k det(G_k)^(-1/2)`` evaluated in the log domain, plus per-class volumes ``det(G_k)^(1/2)``."""
    log_dets = torch.stack([gramian(bank, k, jitter)[1] for k in range(bank.num_classes)])
    loss = torch.exp(-0.5 * log_dets).mean()
    return loss, torch.exp(0.5 * log_dets)


def class_volumes(bank: PrototypeBank, jitter: float = 1e-8) -> torch.Tensor:
    with torch.no_grad():
        return volumetric_loss(bank, jitter)[1]


def diversity_loss(variant: str, bank: PrototypeBank, jitter: float = 1e-8) -> tuple[torch.Tensor, torch.Tensor]:
    """Diversity term for ``variant`` and the per-class volumes (the latter detached for protovae)."""
    if variant == "panvae":
        return volumetric_loss(bank, jitter)
    if variant == "protovae":
        return orthonormality_loss(bank), class_volumes(bank, jitter)
    raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def total_loss(
    variant: str,
    components: dict[str, torch.Tensor],
    weights: LossWeights,
    per_class_volume: torch.Tensor | None = None,
    step: int | None = None,
) -> LossBreakdown:
    """Weighted sum of ``pred``, ``recon``, ``kl`` and ``diversity``.

    ``diversity`` must already be the term matching ``variant``.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    for name in ("pred", "recon", "kl", "diversity"):
        v = torch.as_tensor(components[name])
        if not bool(torch.isfinite(v).all()):
            raise TrainingDivergenceError(name, step)
    c = {k: torch.as_tensor(components[k]) for k in ("pred", "recon", "kl", "diversity")}
    total = (
        weights.w_pred * c["pred"]
        + weights.w_vae_recon * c["recon"]
        + weights.w_vae_kl * c["kl"]
        + weights.w_div * c["diversity"]
    )
    if per_class_volume is None:
        per_class_volume = torch.zeros(0)
    return LossBreakdown(c["pred"], c["recon"], c["kl"], c["diversity"], total, per_class_volume.detach())


class LossLog:
    """Appends one CSV row per step: step, pred, recon, kl, diversity, total, volume_class_*."""

    def __init__(self, path: str | Path, num_classes: int):
        self.path = Path(path)
        self.columns = ["step", "pred", "recon", "kl", "diversity", "total"] + [
            f"volume_class_{k}" for k in range(num_classes)
        ]
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.columns)

    def append(self, step: int, breakdown: LossBreakdown):
        row = {"step": step, **breakdown.as_dict()}
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([repr(row[c]) if isinstance(row.get(c), float) else row.get(c, "")
                                    for c in self.columns])
