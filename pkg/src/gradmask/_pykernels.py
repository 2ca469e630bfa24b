"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``."""
from __future__ import annotations

import heapq
from collections import deque

import numpy as np


def bfs_all_pairs(indptr: np.ndarray, indices: np.ndarray, n: int) -> np.ndarray:
    ptr = indptr.tolist()
    nbr = indices.tolist()
    dist = np.full((n, n), np.inf)
    for src in range(n):
        row = [-1] * n
        row[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            du = row[u] + 1
            for k in range(ptr[u], ptr[u + 1]):
                v = nbr[k]
                if row[v] < 0:
                    row[v] = du
                    queue.append(v)
        for v, d in enumerate(row):
            if d >= 0:
                dist[src, v] = d
    return dist


def dijkstra_all_pairs(indptr: np.ndarray, indices: np.ndarray, weights: np.ndarray, n: int) -> np.ndarray:
    ptr = indptr.tolist()
    nbr = indices.tolist()
    w = weights.tolist()
    dist = np.full((n, n), np.inf)
    for src in range(n):
        best = [float("inf")] * n
        best[src] = 0.0
        heap = [(0.0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > best[u]:
                continue
            for k in range(ptr[u], ptr[u + 1]):
                v = nbr[k]
                nd = d + w[k]
                if nd < best[v]:
                    best[v] = nd
                    heapq.heappush(heap, (nd, v))
        dist[src] = best
    return dist
