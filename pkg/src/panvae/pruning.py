"""Post-training elimination of prototypes that represent no training image.

A prototype is *responsible* for a training image of class k when it has the
largest similarity among the active class-k prototypes. Prototypes that are
responsible for nothing have drifted out of distribution and get masked.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError
from .model import PrototypeBank

logger = logging.getLogger(__name__)


@dataclass
class ResponsibilityCount:
    counts: np.ndarray  # (K, M) int

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


def counts_from_embeddings(
    embeddings: np.ndarray, labels: np.ndarray, bank: PrototypeBank, epsilon: float
) -> ResponsibilityCount:
    """Responsibility counts from precomputed deterministic embeddings (posterior means)."""
    phi = bank.phi.detach().cpu().double().numpy()
    mask = bank.active_mask.cpu().numpy()
    K, M, _ = phi.shape
    labels = np.asarray(labels)
    z = np.asarray(embeddings, dtype=np.float64)
    counts = np.zeros((K, M), dtype=np.int64)
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        if len(idx) == 0:
            raise DataError(f"class {k} has no training images")
        d2 = ((z[idx, None, :] - phi[k][None]) ** 2).sum(-1)
        s = np.log(d2 + 1.0) - np.log(d2 + epsilon)
        s[:, ~mask[k]] = -np.inf
        winners = np.argmax(s, axis=1)  # first maximum wins ties
        counts[k] = np.bincount(winners, minlength=M)
    return ResponsibilityCount(counts)


@torch.no_grad()
def embed(model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Posterior means for ``images`` (no sampling)."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i:i + batch_size])
        out.append(model.encode(x).mu.double().numpy())
    model.train(was_training)
    return np.concatenate(out)


def responsibility_counts(model, dataset) -> ResponsibilityCount:
    """Count, per prototype, the training images it represents best within their true class."""
    z = embed(model, dataset.images)
    return counts_from_embeddings(z, dataset.labels, model.bank, model.config.epsilon)


def prune(counts: ResponsibilityCount, bank: PrototypeBank) -> PrototypeBank:
    """New bank with every active zero-count prototype deactivated.

    The last active prototype of a class is never removed; a warning is
    logged instead.
    """
    mask = bank.active_mask.clone()
    c = torch.as_tensor(counts.counts)
    for k in range(bank.num_classes):
        drop = mask[k] & (c[k] == 0)
        if not drop.any():
            continue
        keep = mask[k] & ~drop
        if not keep.any():
            first = int(torch.nonzero(mask[k])[0])
            drop[first] = False
            logger.warning("class %d: every prototype has zero responsibility; keeping prototype %d", k, first)
        mask[k] &= ~drop
    return PrototypeBank(bank.phi, mask)


def write_prune_report(path, counts: ResponsibilityCount, before: PrototypeBank, after: PrototypeBank):
    """CSV with columns class, prototype_index, count, pruned."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "prototype_index", "count", "pruned"])
        K, M = counts.counts.shape
        for k in range(K):
            for j in range(M):
                pruned = bool(before.active_mask[k, j]) and not bool(after.active_mask[k, j])
                w.writerow([k, j, int(counts.counts[k, j]), str(pruned).lower()])
