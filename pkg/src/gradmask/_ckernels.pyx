# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled all-pairs shortest-path kernels over CSR adjacency."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def bfs_all_pairs(const long long[::1] indptr, const long long[::1] indices, Py_ssize_t n):
    cdef double[:, ::1] dist = np.full((n, n), INFINITY, dtype=np.float64)
    cdef long long[::1] queue = np.empty(max(n, 1), dtype=np.int64)
    cdef Py_ssize_t src, head, tail, u, v, k
    cdef double du
    for src in range(n):
        dist[src, src] = 0.0
        queue[0] = src
        head = 0
        tail = 1
        while head < tail:
            u = queue[head]
            head += 1
            du = dist[src, u] + 1.0
            for k in range(indptr[u], indptr[u + 1]):
                v = indices[k]
                if dist[src, v] == INFINITY:
                    dist[src, v] = du
                    queue[tail] = v
                    tail += 1
    return np.asarray(dist)


def dijkstra_all_pairs(const long long[::1] indptr, const long long[::1] indices,
                       const double[::1] weights, Py_ssize_t n):
    # dense O(n^2) selection per source; graphs here are small
    cdef double[:, ::1] dist = np.full((n, n), INFINITY, dtype=np.float64)
    cdef unsigned char[::1] done = np.zeros(max(n, 1), dtype=np.uint8)
    cdef Py_ssize_t src, it, u, v, k, best
    cdef double bestd, nd
    for src in range(n):
        done[:] = 0
        dist[src, src] = 0.0
        for it in range(n):
            best = -1
            bestd = INFINITY
            for u in range(n):
                if not done[u] and dist[src, u] < bestd:
                    bestd = dist[src, u]
                    best = u
            if best < 0:
                break
            done[best] = 1
            for k in range(indptr[best], indptr[best + 1]):
                v = indices[k]
                nd = bestd + weights[k]
                if nd < dist[src, v]:
                    dist[src, v] = nd
    return np.asarray(dist)
