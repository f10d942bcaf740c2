import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from panvae import metrics as Mt
from panvae.errors import DataError, DegenerateGeometryError, ProjectionError

from oracles import (
    brute_db,
    brute_hull_vertices,
    brute_nearest,
    nearest_image_tally,
    point_in_hull,
    polygon_area_triangles,
)


def unit_ring(center, n=8):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.asarray(center) + np.stack([np.cos(t), np.sin(t)], 1)


class TestDB:
    def test_hand_example(self):
        P = np.array([[0.0, 0.0], [10.0, 0.0]])
        X = np.concatenate([unit_ring(P[0]), unit_ring(P[1])])
        a = Mt.assign_clusters(X, P, 1e-4)
        score = Mt.db_index(X, P, a)
        assert score.value == pytest.approx(0.2, abs=1e-12)

    @pytest.mark.parametrize("c", [0.01, 3.0, 250.0])
    def test_scale_invariant(self, c):
        rng = np.random.default_rng(1)
        P, X = rng.normal(size=(3, 4)) * 3, rng.normal(size=(40, 4)) * 3
        a = Mt.assign_clusters(X, P, 1e-4)
        # the similarity is not scale invariant, so keep the assignment fixed
        assert Mt.db_index(c * X, c * P, a).value == pytest.approx(Mt.db_index(X, P, a).value, rel=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 4), st.integers(8, 50))
    def test_brute_force(self, seed, nproto, n):
        rng = np.random.default_rng(seed)
        P, X = rng.normal(size=(nproto, 3)) * 2, rng.normal(size=(n, 3)) * 2
        a = Mt.assign_clusters(X, P, 1e-4)
        assert a.assignment.tolist() == brute_nearest(X, P).tolist()
        if sum(len(m) > 0 for m in a.member_lists) < 2:
            return
        assert Mt.db_index(X, P, a).value == pytest.approx(brute_db(X, P, a.assignment), abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_isometry_invariant(self, seed):
        rng = np.random.default_rng(seed)
        P, X = rng.normal(size=(3, 5)) * 2, rng.normal(size=(30, 5)) * 2
        Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        t = rng.normal(size=5) * 10
        a = Mt.assign_clusters(X, P, 1e-4)
        a2 = Mt.assign_clusters(X @ Q.T + t, P @ Q.T + t, 1e-4)
        assert a.assignment.tolist() == a2.assignment.tolist()
        if sum(len(m) > 0 for m in a.member_lists) >= 2:
            assert Mt.db_index(X @ Q.T + t, P @ Q.T + t, a2).value == pytest.approx(Mt.db_index(X, P, a).value,
                                                                                  rel=1e-9)

    def test_empty_cluster_excluded(self):
        P = np.array([[0.0, 0.0], [10.0, 0.0], [100.0, 100.0]])
        X = np.concatenate([unit_ring(P[0]), unit_ring(P[1])])
        score = Mt.db_index(X, P, Mt.assign_clusters(X, P, 1e-4))
        assert score.excluded == [2] and score.clusters == [0, 1]
        assert score.value == pytest.approx(0.2)

    def test_degenerate(self):
        P = np.array([[0.0, 0.0], [10.0, 0.0]])
        X = unit_ring(P[0])
        with pytest.raises(DegenerateGeometryError):
            Mt.db_index(X, P, Mt.assign_clusters(X, P, 1e-4))
        P = np.array([[0.0, 0.0], [0.0, 0.0]])
        a = Mt.ClusterAssignment(np.array([0, 1]), [np.array([0]), np.array([1])])
        with pytest.raises(DegenerateGeometryError, match="prototypes 0 and 1"):
            Mt.db_index(np.ones((2, 2)), P, a)

    def test_per_class_assignment(self):
        P = np.array([[0.0, 0.0], [1.0, 0.0]])
        X = np.array([[0.1, 0.0], [0.9, 0.0]])
        a = Mt.assign_clusters(X, P, 1e-4, labels=np.array([1, 0]), prototype_classes=np.array([0, 1]))
        assert a.assignment.tolist() == [1, 0]


class TestProjection:
    def test_2d_is_rigid(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 2)) * [3, 1]
        Y = Mt.pca_2d(X)
        d = lambda A: np.linalg.norm(A[:, None] - A[None], axis=-1)
        np.testing.assert_allclose(d(Y), d(X), atol=1e-9)

    def test_sign_convention(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(40, 5))
        np.testing.assert_allclose(Mt.pca_2d(X), Mt.pca_2d(X * 1.0), atol=0)
        Xc = X - X.mean(0)
        Y = Mt.pca_2d(X)
        V = np.linalg.lstsq(Xc, Y, rcond=None)[0].T  # recovered loadings
        for v in V:
            assert v[np.abs(v).argmax()] > 0

    @pytest.mark.parametrize("X", [np.ones((5, 3)), np.zeros((2, 3)), np.outer(np.arange(6.0), [1, 2, 3])])
    def test_degenerate(self, X):
        with pytest.raises(ProjectionError):
            Mt.pca_2d(X)

    @pytest.mark.parametrize("suffix", [".csv", ".npy"])
    def test_external_round_trip(self, tmp_path, suffix):
        xy = np.random.default_rng(3).normal(size=(7, 2))
        p = tmp_path / f"c{suffix}"
        if suffix == ".npy":
            np.save(p, xy)
        else:
            Mt.save_coordinates(p, xy)
        out = Mt.project_2d(np.zeros((7, 9)), "external", p)
        assert np.array_equal(out, xy)

    def test_external_length_mismatch(self, tmp_path):
        Mt.save_coordinates(tmp_path / "c.csv", np.zeros((3, 2)))
        with pytest.raises(DataError):
            Mt.project_2d(np.zeros((4, 2)), "external", tmp_path / "c.csv")


class TestHull:
    def test_square_and_triangle(self):
        sq = Mt.convex_hull(np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]]))
        assert sq.area == pytest.approx(1.0) and len(sq.vertices) == 4
        assert Mt.convex_hull(np.array([[0, 0], [1, 0], [0, 1]])).area == pytest.approx(0.5)

    def test_ccw_and_collinear_dropped(self):
        h = Mt.convex_hull(np.array([[0, 0], [2, 0], [1, 0], [2, 2], [0, 2], [1, 2]]))
        assert len(h.vertices) == 4
        assert h.area == pytest.approx(Mt.shoelace_area(h.vertices)) and h.area > 0

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_200(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(200, 2))
        h = Mt.convex_hull(pts)
        assert set(map(tuple, h.vertices)) == brute_hull_vertices(pts)
        verts = [tuple(v) for v in h.vertices]
        assert all(point_in_hull(verts, p) for p in pts)
        assert h.area == pytest.approx(polygon_area_triangles(verts), rel=1e-12)

    def test_integer_grid_matches_brute_force(self):
        pts = np.random.default_rng(9).integers(0, 6, size=(60, 2)).astype(float)
        assert set(map(tuple, Mt.convex_hull(pts).vertices)) == brute_hull_vertices(pts)

    @pytest.mark.parametrize("pts", [[[0, 0], [1, 1], [2, 2], [3, 3]], [[1, 1], [1, 1], [1, 1]], [[0, 0], [1, 0]]])
    def test_degenerate(self, pts):
        with pytest.raises(DegenerateGeometryError):
            Mt.convex_hull(np.array(pts, float))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(3, 40), st.integers(0, 20))
    def test_permutation_duplication_inclusion(self, seed, n, extra):
        rng = np.random.default_rng(seed)
        S = rng.normal(size=(n, 2))
        try:
            a = Mt.convex_hull(S).area
        except DegenerateGeometryError:
            return
        perm = rng.permutation(n)
        assert Mt.convex_hull(S[perm]).area == pytest.approx(a, rel=1e-12)
        assert Mt.convex_hull(np.concatenate([S, S[: max(1, n // 2)]])).area == pytest.approx(a, rel=1e-12)
        T = rng.normal(size=(extra, 2)) * 2
        assert Mt.convex_hull(np.concatenate([S, T])).area >= a * (1 - 1e-12)


class TestCoverage:
    def test_full_set_is_exactly_one(self):
        X = np.random.default_rng(0).normal(size=(50, 4))
        res = Mt.coverage_ratio(X, X[:2], n_nearest=100)
        assert res.ratio == 1.0

    def test_all_vertices_covered(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(60, 2))
        coords = Mt.pca_2d(X)
        verts = set(map(tuple, Mt.convex_hull(coords).vertices))
        vidx = [i for i, c in enumerate(map(tuple, coords)) if c in verts]
        res = Mt.coverage_ratio(X, X[vidx], n_nearest=1, coords=coords)
        assert res.ratio == pytest.approx(1.0, abs=1e-12)

    def test_centroid_prototype_brute_force(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(400, 2))
        proto = X.mean(0, keepdims=True)
        res = Mt.coverage_ratio(X, proto, n_nearest=50)
        order = sorted(range(len(X)), key=lambda i: (sum((X[i] - proto[0]) ** 2), i))[:50]
        coords = Mt.pca_2d(X)
        sub = brute_hull_vertices(coords[order])
        full = brute_hull_vertices(coords)
        ccw = lambda vs: sorted(vs, key=lambda v: math.atan2(v[1] - np.mean([u[1] for u in vs]),
                                                              v[0] - np.mean([u[0] for u in vs])))
        expected = polygon_area_triangles(ccw(sub)) / polygon_area_triangles(ccw(full))
        assert sorted(res.selected.tolist()) == sorted(order)
        assert res.ratio < 1
        assert res.ratio == pytest.approx(expected, rel=1e-10)

    def test_union_not_double_counted(self):
        X = np.random.default_rng(3).normal(size=(30, 3))
        sel = Mt.nearest_by_similarity(X, np.stack([X[0], X[0]]), 5, 1e-4)
        assert len(sel) == 5

    def test_too_few(self):
        with pytest.raises(DataError):
            Mt.coverage_ratio(np.zeros((2, 2)), np.zeros((1, 2)))


class TestEntropy:
    def test_examples(self):
        assert Mt.combinatorial_diversity([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)
        assert Mt.combinatorial_diversity([0.25] * 4) == pytest.approx(1.3863, abs=1e-4)
        assert Mt.combinatorial_diversity([1.0, 0.0]) == 0.0
        assert Mt.combinatorial_diversity([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), abs=1e-12)
        assert Mt.combinatorial_diversity([0.5, 0.25, 0.25]) == pytest.approx(1.0397, abs=1e-4)

    def test_invalid(self):
        with pytest.raises(ValueError):
            Mt.combinatorial_diversity([0.5, 0.4])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 20), min_size=1, max_size=8).filter(lambda c: sum(c) > 0))
    def test_bounds(self, counts):
        p = np.array(counts, float) / sum(counts)
        p[-1] = 1.0 - p[:-1].sum()
        if p[-1] < 0:
            return
        H = Mt.combinatorial_diversity(p)
        assert -1e-12 <= H <= math.log(len(p)) + 1e-12
        if (p == p[0]).all():
            assert H == pytest.approx(math.log(len(p)))


class TestGroups:
    def test_single_group(self):
        Z = np.array([[0.0, 0], [5, 5], [10, 0]])
        g = np.array([0, 1, 1])
        P = np.array([[0.1, 0], [-0.1, 0]])
        dist = Mt.prototype_group_distribution(Z, g, P, 1e-4, num_groups=2)
        assert dist.tolist() == [1.0, 0.0]
        assert Mt.combinatorial_diversity(dist) == 0.0

    def test_even_split(self):
        Z = np.array([[0.0, 0], [5, 5], [10, 0], [0, 10]])
        g = np.array([0, 1, 2, 3])
        dist = Mt.prototype_group_distribution(Z, g, Z + 0.01, 1e-4)
        np.testing.assert_allclose(dist, 0.25)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        Z, P = rng.normal(size=(30, 3)), rng.normal(size=(6, 3))
        g = rng.integers(0, 3, 30)
        np.testing.assert_allclose(Mt.prototype_group_distribution(Z, g, P, 1e-4, 3),
                                   nearest_image_tally(Z, g, P, 3), atol=1e-15)

    def test_missing_groups(self):
        with pytest.raises(DataError):
            Mt.prototype_group_distribution(np.zeros((2, 2)), None, np.zeros((1, 2)), 1e-4)


class TestAccuracyGap:
    def test_examples(self):
        labels = np.array([0, 1, 0, 1])
        groups = np.array([0, 0, 1, 1])
        assert Mt.accuracy_gap(labels, labels, groups, 0, 1) == 0.0
        pred = np.array([0, 1, 1, 0])
        assert Mt.accuracy_gap(pred, labels, groups, 0, 1) == 1.0
        assert Mt.accuracy_gap(pred, labels, groups, 1, 0) == -1.0
        probs = np.eye(2)[pred]
        assert Mt.accuracy_gap(probs, labels, groups, 0, 1) == 1.0

    def test_empty_group(self):
        with pytest.raises(DataError):
            Mt.accuracy_gap([0], [0], [0], 0, 1)


def test_report_serialisation(tmp_path):
    import json
    r = Mt.MetricsReport(0.9, 1.25, [1.0, 2.0], [5, 4], entropy=0.5, accuracy_gaps={"0-1": 0.1})
    r.write_json(tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["db"] == 1.25 and "group_distribution" not in d
    assert Mt.MetricsReport(0.5, None, [], []).to_dict()["db"] is None
    r.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "metric,value" and "db,1.25" in lines and "acc_gap_0-1,0.1" in lines
