import itertools

import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from gradmask import _pykernels, kernels
from gradmask.graphs import Graph
from gradmask.structure import (
    HopMatrix,
    curvature_edge_weights,
    curvature_index,
    feature_similarity_index,
    forman_curvature,
    load_index_cache,
    rwse,
    save_index_cache,
    shortest_path_hops,
    structural_index,
)


def random_graph(rng, n, p):
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return Graph(n, np.stack([iu[keep], ju[keep]], axis=1), rng.standard_normal((n, 3)))


def floyd_warshall(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    d = np.where(a > 0, 1.0, np.inf)
    np.fill_diagonal(d, 0.0)
    for k in range(n):
        for i in range(n):
            for j in range(n):
                if d[i, k] + d[k, j] < d[i, j]:
                    d[i, j] = d[i, k] + d[k, j]
    return d


def rwse_by_enumeration(g: Graph, k: int) -> np.ndarray:
    a = g.adjacency()
    deg = a.sum(axis=1)
    nbrs = [np.nonzero(a[i])[0].tolist() for i in range(g.n)]
    out = np.zeros((g.n, k))
    for i in range(g.n):
        if deg[i] == 0:
            continue
        # walks as (current node, probability)
        frontier = [(i, 1.0)]
        for t in range(1, k + 1):
            nxt = []
            for node, prob in frontier:
                for v in nbrs[node]:
                    nxt.append((v, prob / deg[node]))
            frontier = nxt
            out[i, t - 1] = sum(p for v, p in frontier if v == i)
    return out


class TestShortestPath:
    def test_path(self):
        g = Graph(3, [[0, 1], [1, 2]], np.zeros((3, 1)))
        assert shortest_path_hops(g).values[0, 2] == 2

    def test_two_components(self):
        g = Graph(4, [[0, 1], [2, 3]], np.zeros((4, 1)))
        h = shortest_path_hops(g)
        assert np.isinf(h.values[0, 2]) and np.isinf(h.values[1, 3])
        assert not h.is_connected
        assert h.max_finite() == 1

    def test_sentinel_iff_disconnected(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            g = random_graph(rng, int(rng.integers(2, 12)), 0.3)
            h = shortest_path_hops(g)
            hops_conn = np.isfinite(h.values).all()
            import scipy.sparse.csgraph as cg

            ncomp = cg.connected_components(csr_matrix(g.adjacency()), directed=False)[0]
            assert hops_conn == (ncomp == 1)

    @pytest.mark.parametrize("impl", [None, _pykernels])
    def test_matches_floyd_warshall(self, impl):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 21))
            g = random_graph(rng, n, float(rng.uniform(0.05, 0.5)))
            ip, ix = g.csr()
            got = kernels.bfs_all_pairs(ip, ix, g.n, impl=impl)
            assert np.array_equal(got, floyd_warshall(g.adjacency()))

    def test_metric_properties(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            d = shortest_path_hops(random_graph(rng, 10, 0.3)).values
            assert np.array_equal(d, d.T) and not np.diag(d).any()
            for i, j, k in itertools.product(range(10), repeat=3):
                if np.isfinite(d[i, j]) and np.isfinite(d[j, k]):
                    assert d[i, k] <= d[i, j] + d[j, k]


class TestCurvature:
    def test_forman_values(self):
        # triangle with a pendant: edge (0,1) has deg 2 and 3 and one triangle
        g = Graph(4, [[0, 1], [1, 2], [0, 2], [2, 3]], np.zeros((4, 1)))
        c = dict(zip(map(tuple, g.edges.tolist()), forman_curvature(g)))
        assert c[(0, 1)] == 4 - 2 - 2 + 3
        assert c[(1, 2)] == 4 - 2 - 3 + 3
        assert c[(2, 3)] == 4 - 3 - 1

    def test_weights_in_range(self):
        g = Graph(4, [[0, 1], [1, 2], [0, 2], [2, 3]], np.zeros((4, 1)))
        w = curvature_edge_weights(g)
        assert w.min() == pytest.approx(1.0) and w.max() < 2.0

    def test_triangle_free_regular_is_sph(self):
        cycle = Graph(6, [[i, (i + 1) % 6] for i in range(6)], np.zeros((6, 1)))
        sph = shortest_path_hops(cycle).values
        curve = curvature_index(cycle).values
        ratio = curve[sph > 0] / sph[sph > 0]
        np.testing.assert_allclose(ratio, ratio[0], rtol=0, atol=1e-9)
        assert ratio[0] > 0

    def test_triangle_equal_distances(self):
        g = Graph(3, [[0, 1], [1, 2], [0, 2]], np.zeros((3, 1)))
        d = curvature_index(g).values
        off = d[~np.eye(3, dtype=bool)]
        assert np.allclose(off, off[0])

    def test_single_node(self):
        assert np.array_equal(curvature_index(Graph(1, [], np.zeros((1, 1)))).values, np.zeros((1, 1)))

    @pytest.mark.parametrize("impl", [None, _pykernels])
    def test_weighted_paths_match_dijkstra(self, impl):
        rng = np.random.default_rng(7)
        for _ in range(50):
            g = random_graph(rng, int(rng.integers(2, 16)), 0.35)
            if not g.num_edges:
                continue
            w = curvature_edge_weights(g)
            dense = np.zeros((g.n, g.n))
            dense[g.edges[:, 0], g.edges[:, 1]] = w
            dense[g.edges[:, 1], g.edges[:, 0]] = w
            oracle = dijkstra(csr_matrix(dense), directed=False)
            ip, ix = g.csr()
            lookup = {(int(u), int(v)): dense[u, v] for u in range(g.n) for v in range(g.n) if dense[u, v]}
            src = np.repeat(np.arange(g.n), np.diff(ip))
            cw = np.array([lookup[(int(s), int(t))] for s, t in zip(src, ix)])
            got = kernels.dijkstra_all_pairs(ip, ix, cw, g.n, impl=impl)
            fin = np.isfinite(oracle)
            assert np.array_equal(fin, np.isfinite(got))
            np.testing.assert_allclose(got[fin], oracle[fin], rtol=0, atol=1e-9)

    def test_mean_matches_sph(self):
        rng = np.random.default_rng(8)
        g = random_graph(rng, 12, 0.3)
        sph = shortest_path_hops(g).values
        cur = curvature_index(g).values
        off = ~np.eye(12, dtype=bool) & np.isfinite(sph)
        assert cur[off].mean() == pytest.approx(sph[off].mean(), rel=1e-12)
        assert np.array_equal(np.isfinite(cur), np.isfinite(sph))


class TestFeatureSimilarity:
    def test_identical_features(self):
        assert not feature_similarity_index(np.ones((4, 3))).any()

    def test_orthogonal_pair(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        g = Graph(3, [[0, 1], [1, 2]], x)
        sph = shortest_path_hops(g)
        d = feature_similarity_index(x, sph)
        raw = feature_similarity_index(x)
        scale = d[0, 2] / raw[0, 2]
        assert d[0, 1] == pytest.approx(scale)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.standard_normal((7, 5))
            d = feature_similarity_index(x)
            for i in range(7):
                for j in range(7):
                    cos = float(np.dot(x[i], x[j]) / (np.linalg.norm(x[i]) * np.linalg.norm(x[j])))
                    want = 0.0 if i == j else 1.0 - cos
                    assert abs(d[i, j] - want) <= 1e-12

    def test_zero_norm_row(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        d = feature_similarity_index(x)
        assert d[0, 1] == 1.0 and d[0, 0] == 0.0 and d[1, 2] == pytest.approx(0.0)

    def test_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(5)
        g = random_graph(rng, 9, 0.4)
        for kind in ("sph", "curve", "fs"):
            v = structural_index(g, kind).values
            fin = np.where(np.isfinite(v), v, -1)
            assert np.allclose(fin, fin.T) and not np.diag(v).any()


class TestRwse:
    def test_first_column_zero(self):
        rng = np.random.default_rng(0)
        assert not rwse(random_graph(rng, 8, 0.4), 3)[:, 0].any()

    def test_triangle_two_steps(self):
        g = Graph(3, [[0, 1], [1, 2], [0, 2]], np.zeros((3, 1)))
        np.testing.assert_allclose(rwse(g, 2)[:, 1], 0.5, rtol=0, atol=1e-15)

    def test_isolated_node_zero_row(self):
        g = Graph(3, [[0, 1]], np.zeros((3, 1)))
        assert not rwse(g, 4)[2].any()

    def test_matches_enumeration(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            g = random_graph(rng, int(rng.integers(1, 7)), 0.5)
            k = int(rng.integers(1, 5))
            np.testing.assert_allclose(rwse(g, k), rwse_by_enumeration(g, k), rtol=0, atol=1e-12)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(3)
        r = rwse(random_graph(rng, 15, 0.3), 20)
        assert r.min() >= 0 and r.max() <= 1


def test_index_cache_round_trip(tmp_path):
    from gradmask.graphs import synth_triangle_task

    ds = synth_triangle_task(12, seed=0, p_edge=0.1)
    mats = [shortest_path_hops(g) for g in ds]
    path = tmp_path / "sph.cache.jsonl"
    save_index_cache(path, ds, "sph", mats)
    back = load_index_cache(path, ds, "sph")
    assert all(np.array_equal(a.values, b.values) for a, b in zip(mats, back))
    assert load_index_cache(path, ds, "curve") is None
    ds.graphs[0].x[0, 0] += 1
    assert load_index_cache(path, ds, "sph") is None


def test_unknown_index():
    with pytest.raises(ValueError):
        structural_index(Graph(1, [], np.zeros((1, 1))), "ricci")
