"""Dataset containers, IDX / array-archive I/O and synthetic fixtures."""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
ARCHIVE_FORMAT = "panvae-array-archive-v1"


@dataclass
class Dataset:
    """Images (N, C, H, W) as float32 in [0, 1], integer labels and optional group labels."""

    images: np.ndarray
    labels: np.ndarray
    group_labels: np.ndarray | None = None
    split_tag: str = "train"
    label_names: list[str] | None = field(default=None, repr=False)
    group_names: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0:
            raise DataError("labels must be nonnegative")
        if self.group_labels is not None:
            self.group_labels = np.asarray(self.group_labels, dtype=np.int64)
            if len(self.group_labels) != len(self.labels):
                raise DataError("group_labels length differs from labels")
        if self.split_tag not in ("train", "test"):
            raise DataError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, index, split_tag: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.images[index], self.labels[index],
            None if self.group_labels is None else self.group_labels[index],
            split_tag or self.split_tag, self.label_names, self.group_names,
        )

    def of_class(self, k: int) -> "Dataset":
        idx = np.flatnonzero(self.labels == k)
        if len(idx) == 0:
            raise DataError(f"class {k} has no samples")
        return self.subset(idx)


def one_hot(label: int, num_classes: int) -> np.ndarray:
    if not 0 <= label < num_classes:
        raise DataError(f"label {label} outside [0, {num_classes})")
    v = np.zeros(num_classes)
    v[label] = 1.0
    return v


# -- IDX ------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise FormatError(f"{what}: file too short for magic number", offset=len(buf))
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    if len(buf) < header:
        raise FormatError(f"{what}: truncated header", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = header + int(np.prod(dims))
    if len(buf) < expected:
        raise FormatError(f"{what}: truncated payload, expected {expected} bytes, got {len(buf)}", offset=len(buf))
    if len(buf) > expected:
        raise FormatError(f"{what}: {len(buf) - expected} trailing bytes", offset=expected)
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split_tag: str = "train") -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped) into a normalised Dataset."""
    imgs = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if len(imgs) != len(labels):
        raise FormatError(f"count mismatch: {len(imgs)} images vs {len(labels)} labels", offset=4)
    if len(imgs) == 0:
        raise DataError("IDX files contain zero items")
    images = (imgs.astype(np.float32) / 255.0)[:, None]
    return Dataset(images, labels.astype(np.int64), split_tag=split_tag)


def write_idx(dataset: Dataset, images_path, labels_path):
    """Inverse of ``load_idx`` for single-channel datasets whose pixels are multiples of 1/255."""
    if dataset.images.shape[1] != 1:
        raise DataError("IDX export supports single-channel images only")
    px = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    n, h, w = px.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(px.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# -- array archive --------------------------------------------------------------


def save_array_archive(dataset: Dataset, path):
    """Write ``dataset`` as an ``.npz`` container with a JSON manifest entry.

    Members: ``images`` (uint8 or float32), ``labels``, optional ``group_labels``
    and ``manifest`` (JSON text: format, shape, dtype, label_map, group_map).
    """
    manifest = {
        "format": ARCHIVE_FORMAT,
        "shape": list(dataset.images.shape),
        "dtype": "float32",
        "split": dataset.split_tag,
        "label_map": dataset.label_names,
        "group_map": dataset.group_names,
    }
    arrays = {"images": dataset.images, "labels": dataset.labels}
    if dataset.group_labels is not None:
        arrays["group_labels"] = dataset.group_labels
    np.savez(path, manifest=np.array(json.dumps(manifest)), **arrays)


def load_array_archive(path) -> Dataset:
    try:
        with np.load(path, allow_pickle=False) as z:
            manifest = json.loads(str(z["manifest"]))
            images = z["images"]
            labels = z["labels"]
            groups = z["group_labels"] if "group_labels" in z.files else None
    except (KeyError, ValueError, OSError) as exc:
        raise DataError(f"cannot read array archive {path}: {exc}") from exc
    if manifest.get("format") != ARCHIVE_FORMAT:
        raise DataError(f"{path}: unknown archive format {manifest.get('format')!r}")
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    if images.ndim == 3:
        images = images[:, None]
    if list(images.shape) != list(manifest["shape"]):
        raise DataError(f"{path}: manifest shape {manifest['shape']} != stored {list(images.shape)}")
    return Dataset(images, labels, groups, manifest.get("split", "train"),
                   manifest.get("label_map"), manifest.get("group_map"))


def load_group_csv(path, n: int) -> np.ndarray:
    """Group-label sidecar: CSV with columns ``index,group``, one row per sample."""
    groups = np.full(n, -1, dtype=np.int64)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            i = int(row["index"])
            if not 0 <= i < n:
                raise DataError(f"{path}: index {i} out of range")
            groups[i] = int(row["group"])
    if (groups < 0).any():
        raise DataError(f"{path}: missing group labels for {(groups < 0).sum()} samples")
    return groups


def load_dataset(path, split: str = "train") -> Dataset:
    """Load from an ``.npz`` archive or a directory of IDX files.

    Directory layout follows the MNIST distribution names (``train-images-idx3-ubyte``,
    ``t10k-images-idx3-ubyte`` ...). A ``{split}-groups.csv`` next to them is
    picked up as group labels.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"data path {path} does not exist")
    if path.is_file():
        ds = load_array_archive(path)
        ds.split_tag = split
        return ds
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        imgs = path / f"{prefix}-images-idx3-ubyte{suffix}"
        labs = path / f"{prefix}-labels-idx1-ubyte{suffix}"
        if imgs.exists() and labs.exists():
            ds = load_idx(imgs, labs, split_tag=split)
            sidecar = path / f"{split}-groups.csv"
            if sidecar.exists():
                ds.group_labels = load_group_csv(sidecar, len(ds))
            return ds
    raise DataError(f"no {split} IDX files found in {path}")


# -- splits and batching -----------------------------------------------------------


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded partition of ``range(n)`` into (first, second) with ``round(n*fraction)`` in the second."""
    perm = np.random.default_rng(seed).permutation(n)
    m = int(round(n * fraction))
    return np.sort(perm[m:]), np.sort(perm[:m])


def take_subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """First ``n`` samples of a seeded permutation (the whole set if ``n`` >= len)."""
    if n >= len(dataset):
        return dataset
    idx = np.random.default_rng(seed).permutation(len(dataset))[:n]
    return dataset.subset(np.sort(idx))


# -- synthetic fixtures ---------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Per-class Gaussian modes.

    ``mode_centers[k]`` holds the centres of class ``k``'s modes (2-D or d-D);
    ``mode_scales`` is one standard deviation per class or per mode.
    """

    modes_per_class: list[int]
    mode_centers: list[list[list[float]]]
    mode_scales: list[float] | list[list[float]] = 0.5
    samples_per_mode: int = 100
    seed: int = 0

    def __post_init__(self):
        if len(self.mode_centers) != len(self.modes_per_class):
            raise DataError("mode_centers must list one entry per class")
        for k, (m, c) in enumerate(zip(self.modes_per_class, self.mode_centers)):
            if m < 1 or len(c) != m:
                raise DataError(f"class {k}: expected {m} mode centres, got {len(c)}")
        if self.samples_per_mode < 1:
            raise DataError("samples_per_mode must be positive")

    def scale(self, k: int, m: int) -> float:
        s = self.mode_scales
        if np.isscalar(s):
            return float(s)
        s = s[k]
        return float(s) if np.isscalar(s) else float(s[m])


def synthetic_points(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw samples ``(points, labels, mode_index)``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    pts, labels, modes = [], [], []
    for k, centers in enumerate(spec.mode_centers):
        for m, c in enumerate(centers):
            c = np.asarray(c, dtype=np.float64)
            pts.append(c + spec.scale(k, m) * rng.standard_normal((spec.samples_per_mode, c.size)))
            labels.append(np.full(spec.samples_per_mode, k))
            modes.append(np.full(spec.samples_per_mode, m))
    return np.concatenate(pts), np.concatenate(labels), np.concatenate(modes)


def render_blobs(points: np.ndarray, size: int = 16, extent: float | None = None, width: float = 1.5) -> np.ndarray:
    """Draw each 2-D point as a Gaussian blob on a ``size`` x ``size`` canvas, (N, 1, size, size)."""
    if points.shape[1] != 2:
        raise DataError("blob rendering needs 2-D mode centres")
    if extent is None:
        extent = float(np.abs(points).max()) * 1.1
    pix = (points / extent * 0.5 + 0.5) * (size - 1)
    grid = np.arange(size, dtype=np.float64)
    gx = np.exp(-((grid[None, :] - pix[:, 0:1]) ** 2) / (2 * width**2))
    gy = np.exp(-((grid[None, :] - pix[:, 1:2]) ** 2) / (2 * width**2))
    img = gy[:, :, None] * gx[:, None, :]
    return img[:, None].astype(np.float32)


def make_synthetic(spec: SyntheticSpec, render: str = "vectors", image_size: int = 16) -> Dataset:
    """Gaussian-mode dataset; group labels are the mode index within the class.

    ``render='vectors'`` stores each raw point as a (1, 1, D) "image" squashed
    into [0, 1] with a logistic map (monotone, so geometry is kept up to a
    smooth warp); ``render='blobs'`` draws 2-D points as blob images.
    """
    pts, labels, modes = synthetic_points(spec)
    if render == "vectors":
        images = (1.0 / (1.0 + np.exp(-pts / 4.0)))[:, None, None, :].astype(np.float32)
    elif render == "blobs":
        images = render_blobs(pts, image_size)
    else:
        raise DataError(f"unknown render mode {render!r}")
    return Dataset(images, labels, modes)


def batches(n: int, batch_size: int, seed: int | None):
    """Yield index arrays covering ``range(n)``; shuffled deterministically when ``seed`` is given."""
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]
