"""Compiled vs pure-Python all-pairs kernels on random sparse graphs.

    python3 benchmarks/bench_kernels.py [--sizes 16 64 256] [--repeats 5]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from gradmask import _pykernels, kernels
from gradmask.graphs import Graph
from gradmask.structure import curvature_edge_weights

try:
    from gradmask import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None


def random_graph(rng: np.random.Generator, n: int, avg_degree: float = 4.0) -> Graph:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < avg_degree / max(n - 1, 1)
    return Graph(n, np.stack([iu[keep], ju[keep]], axis=1), np.zeros((n, 1)))


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 256])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':>10} {'n':>5} {'python_ms':>10} {'cython_ms':>10} {'speedup':>8}")
    for n in args.sizes:
        g = random_graph(rng, n)
        ip, ix = g.csr()
        w_edge = curvature_edge_weights(g)
        lookup = {}
        for (u, v), w in zip(g.edges.tolist(), w_edge.tolist()):
            lookup[(u, v)] = lookup[(v, u)] = w
        src = np.repeat(np.arange(n), np.diff(ip))
        w = np.array([lookup[(int(s), int(t))] for s, t in zip(src, ix)])
        for name, call in (
            ("bfs", lambda impl: kernels.bfs_all_pairs(ip, ix, n, impl=impl)),
            ("dijkstra", lambda impl: kernels.dijkstra_all_pairs(ip, ix, w, n, impl=impl)),
        ):
            a, b = call(_ckernels), call(_pykernels)
            if not np.allclose(a, b, rtol=0, atol=1e-12, equal_nan=False):
                raise SystemExit(f"{name}: backends disagree at n={n}")
            py = best_of(lambda: call(_pykernels), args.repeats)
            cy = best_of(lambda: call(_ckernels), args.repeats)
            print(f"{name:>10} {n:>5} {py * 1e3:>10.3f} {cy * 1e3:>10.3f} {py / cy:>7.1f}x")


if __name__ == "__main__":
    main()
