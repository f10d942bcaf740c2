"""Diversity and representativity measures for learned prototypes.

All functions here are plain numpy over float64 snapshots; callers extract
embeddings (posterior means) and active prototypes from a model first.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError, DegenerateGeometryError, ProjectionError


def np_similarity(z: np.ndarray, prototypes: np.ndarray, epsilon: float) -> np.ndarray:
    """(N, d) x (P, d) -> (N, P) log-ratio similarities."""
    d2 = ((z[:, None, :] - prototypes[None, :, :]) ** 2).sum(-1)
    return np.log(d2 + 1.0) - np.log(d2 + epsilon)


# -- cluster assignment / Davies-Bouldin -----------------------------------------------


@dataclass
class ClusterAssignment:
    assignment: np.ndarray
    member_lists: list[np.ndarray]


def assign_clusters(
    embeddings: np.ndarray,
    prototypes: np.ndarray,
    epsilon: float,
    labels: np.ndarray | None = None,
    prototype_classes: np.ndarray | None = None,
) -> ClusterAssignment:
    """Assign each observation to its maximal-similarity prototype (first index on ties).

    With ``labels`` and ``prototype_classes`` given, observations only compete
    among the prototypes of their own class (the per-class variant).
    """
    s = np_similarity(np.asarray(embeddings, float), np.asarray(prototypes, float), epsilon)
    if labels is not None:
        if prototype_classes is None:
            raise ValueError("per-class assignment needs prototype_classes")
        allowed = np.asarray(labels)[:, None] == np.asarray(prototype_classes)[None, :]
        if not allowed.any(1).all():
            raise DataError("some observations have no prototype of their class")
        s = np.where(allowed, s, -np.inf)
    a = np.argmax(s, axis=1)
    members = [np.flatnonzero(a == i) for i in range(len(prototypes))]
    return ClusterAssignment(a, members)


class DBScore(NamedTuple):
    value: float
    clusters: list[int]
    excluded: list[int]


def db_index(embeddings: np.ndarray, prototypes: np.ndarray, assignment: ClusterAssignment) -> DBScore:
    """Davies-Bouldin index with prototypes as cluster representatives.

    Cluster size is the mean distance from a prototype to its members and the
    separation is the prototype-to-prototype distance; each cluster takes its
    worst ratio over the *other* clusters. Prototypes without members are
    dropped and listed in ``excluded``.
    """
    X = np.asarray(embeddings, float)
    P = np.asarray(prototypes, float)
    used = [i for i, m in enumerate(assignment.member_lists) if len(m) > 0]
    excluded = [i for i, m in enumerate(assignment.member_lists) if len(m) == 0]
    if len(used) < 2:
        raise DegenerateGeometryError(f"DB index needs >= 2 non-empty clusters, got {len(used)}")
    size = np.array([np.linalg.norm(X[assignment.member_lists[i]] - P[i], axis=1).mean() for i in used])
    C = P[used]
    sep = np.linalg.norm(C[:, None] - C[None], axis=-1)
    np.fill_diagonal(sep, np.inf)
    if (sep == 0).any():
        a, b = np.argwhere(sep == 0)[0]
        raise DegenerateGeometryError(f"prototypes {used[a]} and {used[b]} coincide")
    R = (size[:, None] + size[None, :]) / sep
    return DBScore(float(R.max(1).mean()), used, excluded)


# -- projection and hulls ------------------------------------------------------


def pca_2d(X: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Top-two principal component scores.

    Each axis is flipped so its largest-magnitude loading is positive.
    """
    X = np.asarray(X, float)
    if len(X) < 3:
        raise ProjectionError(f"projection needs >= 3 points, got {len(X)}")
    Xc = X - X.mean(0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    if len(s) < 2 or s[0] == 0 or s[1] <= rtol * s[0]:
        raise ProjectionError("input has fewer than two informative directions")
    V = vt[:2]
    flip = np.sign(V[np.arange(2), np.abs(V).argmax(1)])
    return Xc @ (V * flip[:, None]).T


def load_coordinates(path) -> np.ndarray:
    """2-D coordinates from ``.npy`` or a CSV with columns ``x,y`` (header optional)."""
    path = Path(path)
    if path.suffix == ".npy":
        xy = np.load(path)
    else:
        with open(path, newline="") as f:
            rows = [r for r in csv.reader(f) if r]
        if rows and not _is_number(rows[0][0]):
            rows = rows[1:]
        xy = np.array([[float(v) for v in r[:2]] for r in rows])
    xy = np.asarray(xy, float)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise DataError(f"{path}: expected an (N, 2) coordinate table, got shape {xy.shape}")
    return xy


def save_coordinates(path, xy: np.ndarray):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y"])
        for x, y in np.asarray(xy, float):
            w.writerow([repr(float(x)), repr(float(y))])


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def project_2d(embeddings: np.ndarray, method: str = "pca", path=None) -> np.ndarray:
    if method == "pca":
        return pca_2d(embeddings)
    if method == "external":
        if path is None:
            raise ValueError("external projection needs a coordinate file")
        xy = load_coordinates(path)
        if len(xy) != len(embeddings):
            raise DataError(f"{path}: {len(xy)} coordinates for {len(embeddings)} embeddings")
        return xy
    raise ValueError(f"unknown projection method {method!r}")


@dataclass
class HullPolygon:
    vertices: np.ndarray
    area: float


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def shoelace_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def convex_hull(points: np.ndarray) -> HullPolygon:
    """Andrew's monotone chain; counter-clockwise vertices without collinear points."""
    pts = np.unique(np.asarray(points, float).reshape(-1, 2), axis=0)  # lexicographic sort + dedup
    if len(pts) < 3:
        raise DegenerateGeometryError(f"hull needs >= 3 distinct points, got {len(pts)}")
    pts = [tuple(p) for p in pts]
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    verts = np.array(lower[:-1] + upper[:-1])
    if len(verts) < 3:
        raise DegenerateGeometryError("all points are collinear; hull has zero area")
    area = shoelace_area(verts)
    if area <= 0:
        raise DegenerateGeometryError("all points are collinear; hull has zero area")
    return HullPolygon(verts, area)


@dataclass
class CoverageResult:
    ratio: float
    coords: np.ndarray
    selected: np.ndarray
    class_hull: HullPolygon
    sample_hull: HullPolygon


def nearest_by_similarity(embeddings: np.ndarray, prototypes: np.ndarray, n_nearest: int, epsilon: float) -> np.ndarray:
    """Sorted union of the ``n_nearest`` most similar observations of every prototype."""
    if n_nearest < 1:
        raise ValueError("n_nearest must be positive")
    s = np_similarity(np.asarray(embeddings, float), np.asarray(prototypes, float), epsilon)
    n = min(n_nearest, len(s))
    picked = set()
    for col in s.T:
        picked.update(np.argsort(-col, kind="stable")[:n].tolist())
    return np.array(sorted(picked), dtype=np.int64)


def coverage_ratio(
    class_embeddings: np.ndarray,
    prototypes: np.ndarray,
    n_nearest: int = 100,
    epsilon: float = 1e-4,
    coords: np.ndarray | None = None,
) -> CoverageResult:
    """Area of the hull of prototype-selected observations over the hull of the whole class.

    Neighbourhoods are chosen with the full latent similarity; areas are
    measured on ``coords`` (a 2-D projection of the class, PCA by default).
    """
    X = np.asarray(class_embeddings, float)
    if len(X) < 3:
        raise DataError(f"coverage needs >= 3 class observations, got {len(X)}")
    if coords is None:
        coords = pca_2d(X)
    selected = nearest_by_similarity(X, prototypes, n_nearest, epsilon)
    full = convex_hull(coords)
    if len(selected) == len(X):
        sample = full
    else:
        sample = convex_hull(coords[selected])
    return CoverageResult(sample.area / full.area, coords, selected, full, sample)


# -- demographic diversity -----------------------------------------------------------


def combinatorial_diversity(p) -> float:
    """Shannon entropy in nats, with 0 log 0 taken as 0."""
    p = np.asarray(p, float)
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("not a probability distribution")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def prototype_group_distribution(
    embeddings: np.ndarray,
    group_labels: np.ndarray,
    prototypes: np.ndarray,
    epsilon: float,
    num_groups: int | None = None,
) -> np.ndarray:
    """Group distribution of the most similar evaluation image of each prototype."""
    if group_labels is None:
        raise DataError("group labels are required")
    g = np.asarray(group_labels)
    if len(g) != len(embeddings) or (g < 0).any():
        raise DataError("group labels missing or misaligned with embeddings")
    s = np_similarity(np.asarray(embeddings, float), np.asarray(prototypes, float), epsilon)
    nearest = np.argmax(s, axis=0)
    k = int(num_groups if num_groups is not None else g.max() + 1)
    counts = np.bincount(g[nearest], minlength=k).astype(float)
    return counts / counts.sum()


def accuracy_gap(predictions, labels, groups, group_a, group_b) -> float:
    """accuracy(group_a) - accuracy(group_b); ``predictions`` are class indices or probability rows."""
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = pred.argmax(1)
    labels, groups = np.asarray(labels), np.asarray(groups)
    correct = pred == labels
    accs = []
    for g in (group_a, group_b):
        m = groups == g
        if not m.any():
            raise DataError(f"group {g} is empty")
        accs.append(correct[m].mean())
    return float(accs[0] - accs[1])


# -- report --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    db: float | None
    per_class_volume: list[float]
    active_counts: list[int]
    db_excluded: list[int] = field(default_factory=list)
    entropy: float | None = None
    group_distribution: list[float] | None = None
    accuracy_gaps: dict[str, float] | None = None

    def to_dict(self) -> dict:
        """Group-diversity fields are omitted when absent; ``db`` is kept (``None`` when undefined)."""
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None or k == "db"}

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_csv(self, path):
        """Flat ``metric,value`` rows."""
        rows = [("accuracy", self.accuracy)]
        if self.db is not None:
            rows.append(("db", self.db))
        rows += [(f"volume_class_{k}", v) for k, v in enumerate(self.per_class_volume)]
        rows += [(f"active_class_{k}", v) for k, v in enumerate(self.active_counts)]
        if self.entropy is not None:
            rows.append(("entropy", self.entropy))
        for key, v in (self.accuracy_gaps or {}).items():
            rows.append((f"acc_gap_{key}", v))
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            for k, v in rows:
                w.writerow([k, repr(float(v)) if isinstance(v, float) and math.isfinite(v) else v])
