"""Optimisation loop, evaluation and checkpoint I/O."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .data import Dataset, batches
from .errors import CheckpointError, ChecksumError, ConfigurationError, DataError, DegenerateGeometryError
from .metrics import MetricsReport, accuracy_gap, assign_clusters, combinatorial_diversity, db_index, prototype_group_distribution
from .model import ModelConfig, PrototypeVAE
from .pruning import embed

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "panvae-ckpt-v1"


@dataclass
class TrainConfig:
    variant: str = "panvae"
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    checkpoint_dir: str | None = None
    eval_every: int = 1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if self.variant not in L.VARIANTS:
            raise ConfigurationError(f"variant must be one of {L.VARIANTS}, got {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.eval_every < 0:
            raise ConfigurationError("eval_every must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    accuracy: float | None = None
    db: float | None = None
    per_class_volume: list[float] = field(default_factory=list)
    active_counts: list[int] = field(default_factory=list)
    wall_clock: float = field(default=0.0, compare=False)


@dataclass
class RunRecord:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_totals: list[float] = field(default_factory=list)

    def db_series(self) -> list[float | None]:
        return [e.db for e in self.epochs]

    def write_csv(self, path):
        if not self.epochs:
            return
        K = len(self.epochs[0].per_class_volume)
        loss_keys = ["pred", "recon", "kl", "diversity", "total"]
        header = (["epoch"] + loss_keys + ["accuracy", "db"] + [f"volume_class_{k}" for k in range(K)]
                  + [f"active_class_{k}" for k in range(K)] + ["wall_clock"])
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for e in self.epochs:
                w.writerow([e.epoch] + [repr(e.losses[k]) for k in loss_keys]
                           + ["" if e.accuracy is None else repr(e.accuracy), "" if e.db is None else repr(e.db)]
                           + [repr(v) for v in e.per_class_volume] + list(e.active_counts)
                           + [f"{e.wall_clock:.3f}"])


def _epoch_rng_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def batch_losses(model: PrototypeVAE, variant: str, weights: L.LossWeights, x, y_onehot, noise=None, step=None):
    out = model(x, noise)
    pred = L.prediction_loss(out.prediction, y_onehot)
    recon, kl = L.vae_loss(x, out.reconstruction, out.posterior, out.similarities, y_onehot, model.bank)
    div, vols = L.diversity_loss(variant, model.bank, weights.jitter)
    comps = {"pred": pred, "recon": recon, "kl": kl, "diversity": div}
    return L.total_loss(variant, comps, weights, vols, step=step), out


def train(
    config: TrainConfig,
    data: Dataset,
    model_config: ModelConfig | None = None,
    eval_data: Dataset | None = None,
    model: PrototypeVAE | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[PrototypeVAE, RunRecord]:
    """Fit a model with Adam on the selected objective.

    Evaluation after each ``eval_every`` epochs runs on ``eval_data`` (the
    training data if omitted) with deterministic embeddings.
    """
    if len(data) == 0:
        raise DataError("training set is empty")
    if model is None:
        if model_config is None:
            model_config = ModelConfig(num_classes=data.num_classes, input_shape=data.input_shape, seed=config.seed)
        model = PrototypeVAE(model_config)
    cfg = model.config
    if data.input_shape != cfg.input_shape:
        raise ConfigurationError(f"data shape {data.input_shape} != model input shape {cfg.input_shape}")
    if data.labels.max() >= cfg.num_classes:
        raise DataError(f"label {data.labels.max()} out of range for {cfg.num_classes} classes")

    out_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    loss_log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "run_config.json", "w") as f:
            json.dump({"train": asdict(config), "model": cfg.to_dict()}, f, indent=2, sort_keys=True)
        loss_log = L.LossLog(out_dir / "losses.csv", cfg.num_classes)

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    noise_gen = torch.Generator().manual_seed(config.seed)
    images = torch.as_tensor(data.images)
    onehot = F.one_hot(torch.as_tensor(data.labels), cfg.num_classes).to(images.dtype)
    record = RunRecord()
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        sums: dict[str, float] = {}
        n_seen = 0
        for idx in batches(len(data), config.batch_size, _epoch_rng_seed(config.seed, epoch)):
            idx = torch.as_tensor(idx)
            x, y = images[idx], onehot[idx]
            noise = torch.randn(len(idx), cfg.latent_dim, generator=noise_gen)
            breakdown, _ = batch_losses(model, config.variant, config.weights, x, y, noise, step)
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()
            row = breakdown.as_dict()
            for k in ("pred", "recon", "kl", "diversity", "total"):
                sums[k] = sums.get(k, 0.0) + row[k] * len(idx)
            n_seen += len(idx)
            record.step_totals.append(row["total"])
            if loss_log is not None:
                loss_log.append(step, breakdown)
            step += 1
        rec = EpochRecord(epoch, {k: v / n_seen for k, v in sums.items()})
        if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs):
            acc, report = evaluate(model, eval_data if eval_data is not None else data, config.weights.jitter)
            rec.accuracy, rec.db = acc, report.db
            rec.per_class_volume, rec.active_counts = report.per_class_volume, report.active_counts
        rec.wall_clock = time.perf_counter() - t0
        record.epochs.append(rec)
        logger.info("epoch=%d total=%.4f accuracy=%s db=%s", epoch, rec.losses["total"], rec.accuracy, rec.db)
        if on_epoch is not None:
            on_epoch(rec)

    if out_dir is not None:
        record.write_csv(out_dir / "run_record.csv")
        save_checkpoint(model, out_dir / "model.ckpt", variant=config.variant)
    return model, record


@torch.no_grad()
def predict(model: PrototypeVAE, images: np.ndarray, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and posterior means with z = mu."""
    model.eval()
    probs, mus = [], []
    for i in range(0, len(images), batch_size):
        out = model(torch.as_tensor(images[i:i + batch_size]))
        probs.append(out.prediction.double().numpy())
        mus.append(out.posterior.mu.double().numpy())
    return np.concatenate(probs), np.concatenate(mus)


def active_prototypes(model: PrototypeVAE) -> tuple[np.ndarray, np.ndarray]:
    """Active prototype rows (P, d) as float64 and their class labels (P,)."""
    rows, idx = model.bank.active_flat()
    return rows.detach().double().numpy(), np.array([k for k, _ in idx])


def evaluate(model: PrototypeVAE, data: Dataset, jitter: float = 1e-8) -> tuple[float, MetricsReport]:
    """Accuracy and prototype metrics with deterministic embeddings."""
    probs, z = predict(model, data.images)
    acc = float((probs.argmax(1) == data.labels).mean())
    protos, _ = active_prototypes(model)
    try:
        db = db_index(z, protos, assign_clusters(z, protos, model.config.epsilon))
        db_value, excluded = db.value, db.excluded
    except DegenerateGeometryError as exc:
        logger.warning("DB index undefined: %s", exc)
        db_value, excluded = None, []
    vols = L.class_volumes(model.bank, jitter).double().tolist()
    report = MetricsReport(acc, db_value, vols, model.active_mask.sum(1).tolist(), excluded)
    if data.group_labels is not None:
        dist = prototype_group_distribution(z, data.group_labels, protos, model.config.epsilon)
        report.group_distribution = dist.tolist()
        report.entropy = combinatorial_diversity(dist)
        groups = np.unique(data.group_labels)
        report.accuracy_gaps = {
            f"{a}-{b}": accuracy_gap(probs, data.labels, data.group_labels, a, b)
            for i, a in enumerate(groups) for b in groups[i + 1:]
        }
    return acc, report


# -- checkpoints ---------------------------------------------------------------------


class LoadedCheckpoint(NamedTuple):
    model: PrototypeVAE
    variant: str | None
    notes: list[str]


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(model: PrototypeVAE, path, variant: str | None = None):
    """Single ``.npz`` archive: weights keyed by module path plus a JSON ``__meta__`` record."""
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items() if k != "active_mask"}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "active_mask": model.active_mask.cpu().int().tolist(),
        "variant": variant,
        "sha256": _digest(arrays),
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, variant: str | None = None) -> LoadedCheckpoint:
    """Restore a model; ``variant`` different from the stored one is allowed and noted."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
    except (zipfile.BadZipFile, EOFError) as exc:
        raise ChecksumError(f"{path}: corrupted checkpoint archive ({exc})") from exc
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint ({exc})") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: format tag {meta.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    if _digest(arrays) != meta.get("sha256"):
        raise ChecksumError(f"{path}: weight checksum mismatch")
    model = PrototypeVAE(ModelConfig.from_dict(meta["model_config"]))
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    state["active_mask"] = torch.tensor(meta["active_mask"], dtype=torch.bool)
    model.load_state_dict(state)
    notes = []
    stored = meta.get("variant")
    if variant is not None and stored is not None and variant != stored:
        notes.append(f"variant switch: checkpoint trained as {stored}, loaded as {variant}")
        logger.info(notes[-1])
    return LoadedCheckpoint(model, variant or stored, notes)
