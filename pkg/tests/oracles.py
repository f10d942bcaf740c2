"""Slow, independent reference implementations used only by the tests.

Nothing here imports the package code paths it checks.
"""

import itertools
import math

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, entry by entry."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def cofactor_det(A) -> float:
    """Laplace expansion along the first row."""
    A = [list(map(float, r)) for r in A]
    n = len(A)
    if n == 1:
        return A[0][0]
    if n == 2:
        return A[0][0] * A[1][1] - A[0][1] * A[1][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in A[1:]]
        total += (-1) ** j * A[0][j] * cofactor_det(minor)
    return total


def brute_db(X, P, assign) -> float:
    """Davies-Bouldin by explicit loops over all cluster pairs (non-empty clusters only)."""
    clusters = [i for i in range(len(P)) if any(a == i for a in assign)]
    size = {}
    for i in clusters:
        ds = [math.dist(X[n], P[i]) for n in range(len(X)) if assign[n] == i]
        size[i] = sum(ds) / len(ds)
    total = 0.0
    for i in clusters:
        worst = -math.inf
        for j in clusters:
            if j != i:
                worst = max(worst, (size[i] + size[j]) / math.dist(P[i], P[j]))
        total += worst
    return total / len(clusters)


def brute_nearest(X, P):
    """Index of the nearest prototype for each observation, first index on ties."""
    out = []
    for x in X:
        best, best_d = 0, math.inf
        for i, p in enumerate(P):
            d = sum((a - b) ** 2 for a, b in zip(x, p))
            if d < best_d:
                best, best_d = i, d
        out.append(best)
    return np.array(out)


def brute_hull_vertices(points) -> set:
    """Extreme points: p is a vertex iff some other point q makes every point lie
    on one side of line pq with the others strictly inside or on the segment.

    O(n^3): for every ordered pair (p, q) check all points are left of or on pq
    and collect p, q when none is strictly right; then drop points lying strictly
    inside a collected edge.
    """
    pts = sorted(set(map(tuple, np.asarray(points, float))))
    edges = []
    for p, q in itertools.permutations(pts, 2):
        ok = True
        for r in pts:
            c = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
            if c < 0:
                ok = False
                break
        if ok:
            edges.append((p, q))
    verts = set()
    for p, q in edges:
        # keep only the extreme endpoints along the supporting line
        on_line = [r for r in pts if (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]) == 0]
        d = (q[0] - p[0], q[1] - p[1])
        proj = [(r[0] * d[0] + r[1] * d[1], r) for r in on_line]
        verts.add(min(proj)[1])
        verts.add(max(proj)[1])
    return verts


def point_in_hull(vertices_ccw, r, tol=1e-9) -> bool:
    n = len(vertices_ccw)
    for i in range(n):
        p, q = vertices_ccw[i], vertices_ccw[(i + 1) % n]
        c = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
        if c < -tol:
            return False
    return True


def polygon_area_triangles(vertices_ccw) -> float:
    """Fan triangulation from vertex 0."""
    v = vertices_ccw
    a = 0.0
    for i in range(1, len(v) - 1):
        (x0, y0), (x1, y1), (x2, y2) = v[0], v[i], v[i + 1]
        a += 0.5 * ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))
    return a


def monte_carlo_kl(mu, sigma, center, n, rng):
    """KL(N(mu, diag sigma^2) || N(center, I)) as the sample mean of log q - log p.

    Returns (estimate, standard error).
    """
    mu, sigma, center = (np.asarray(a, float) for a in (mu, sigma, center))
    x = mu + sigma * rng.standard_normal((n, mu.size))
    log_q = -0.5 * (((x - mu) / sigma) ** 2).sum(1) - np.log(sigma).sum()
    log_p = -0.5 * ((x - center) ** 2).sum(1)
    diff = log_q - log_p
    return diff.mean(), diff.std(ddof=1) / math.sqrt(n)


def nearest_image_tally(Z, groups, P, num_groups):
    """Group of the closest image to each prototype, by exhaustive search."""
    counts = [0] * num_groups
    for p in P:
        best, best_d = None, math.inf
        for n, z in enumerate(Z):
            d = sum((a - b) ** 2 for a, b in zip(z, p))
            if d < best_d:
                best, best_d = n, d
        counts[groups[best]] += 1
    total = sum(counts)
    return [c / total for c in counts]


def nearest_centroid_accuracy(X, y) -> float:
    classes = sorted(set(y.tolist()))
    cents = np.stack([X[y == c].mean(0) for c in classes])
    pred = np.argmin(((X[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    return float((np.array(classes)[pred] == y).mean())
