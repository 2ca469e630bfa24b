"""Pairwise structural indices and random-walk structural encodings."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .graphs import Dataset, Graph

# Unreachable pairs carry +inf. Never a negative number: a value like -1
# would pass through relu(psi - sp) as 0 and grant full attention.
UNREACHABLE = float("inf")

INDEX_KINDS = ("sph", "curve", "fs")
CACHE_VERSION = 1


@dataclass(eq=False)
class HopMatrix:
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def reachable(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def is_connected(self) -> bool:
        return bool(self.reachable.all())

    def max_finite(self) -> float:
        v = self.values[self.reachable]
        return float(v.max()) if v.size else 0.0


def shortest_path_hops(g: Graph) -> HopMatrix:
    indptr, indices = g.csr()
    return HopMatrix(kernels.bfs_all_pairs(indptr, indices, g.n))


def _mean_offdiag_finite(d: np.ndarray) -> float | None:
    n = d.shape[0]
    off = ~np.eye(n, dtype=bool) & np.isfinite(d)
    return float(d[off].mean()) if off.any() else None


def forman_curvature(g: Graph) -> np.ndarray:
    """Per-edge ``4 - deg(u) - deg(v) + 3 * triangles(u, v)``, in ``g.edges`` order."""
    if not g.num_edges:
        return np.zeros(0)
    a = g.adjacency()
    deg = a.sum(axis=1)
    u, v = g.edges[:, 0], g.edges[:, 1]
    tri = (a[u] * a[v]).sum(axis=1)
    return 4.0 - deg[u] - deg[v] + 3.0 * tri


def curvature_edge_weights(g: Graph, eps: float = 1e-9) -> np.ndarray:
    """Map curvatures to weights in [1, 2): higher curvature, shorter edge."""
    c = forman_curvature(g)
    if not c.size:
        return c
    return 1.0 + (c.max() - c) / (c.max() - c.min() + eps)


def curvature_index(g: Graph, eps: float = 1e-9) -> HopMatrix:
    """Curvature-weighted shortest paths, rescaled to the mean hop distance."""
    if g.n == 1:
        return HopMatrix(np.zeros((1, 1)))
    w = curvature_edge_weights(g, eps)
    indptr, indices = g.csr()
    # CSR neighbour order differs from g.edges; look weights up per directed pair
    lookup = {}
    for (u, v), wt in zip(g.edges.tolist(), w.tolist()):
        lookup[(u, v)] = wt
        lookup[(v, u)] = wt
    src = np.repeat(np.arange(g.n), np.diff(indptr))
    csr_w = np.array([lookup[(s, t)] for s, t in zip(src.tolist(), indices.tolist())], dtype=np.float64)
    dist = kernels.dijkstra_all_pairs(indptr, indices, csr_w, g.n)
    target = _mean_offdiag_finite(kernels.bfs_all_pairs(indptr, indices, g.n))
    current = _mean_offdiag_finite(dist)
    if target is not None and current:
        dist = dist * (target / current)
    return HopMatrix(dist)


def feature_similarity_index(x: np.ndarray, reference: HopMatrix | None = None) -> np.ndarray:
    """``(1 - cos(x_i, x_j)) * scale`` with a zero diagonal.

    Rows with zero norm have similarity 0 to everything. ``scale`` makes the
    off-diagonal mean equal the mean finite distance of ``reference`` (or 1
    when there is no reference or nothing to match).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe[:, None]
    cos = unit @ unit.T
    cos[norms == 0, :] = 0.0
    cos[:, norms == 0] = 0.0
    d = np.clip(1.0 - cos, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    scale = 1.0
    if reference is not None and n > 1:
        target = _mean_offdiag_finite(reference.values)
        current = d[~np.eye(n, dtype=bool)].mean()
        if target is not None and current > 0:
            scale = target / current
    return d * scale


def structural_index(g: Graph, kind: str = "sph") -> HopMatrix:
    if kind == "sph":
        return shortest_path_hops(g)
    if kind == "curve":
        return curvature_index(g)
    if kind == "fs":
        return HopMatrix(feature_similarity_index(g.x, shortest_path_hops(g)))
    raise ValueError(f"unknown structural index {kind!r}; expected one of {INDEX_KINDS}")


def random_walk_matrix(g: Graph) -> np.ndarray:
    a = g.adjacency()
    deg = a.sum(axis=1, keepdims=True)
    return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)


def rwse(g: Graph, k: int) -> np.ndarray:
    """Return probabilities: column ``t-1`` is ``diag(P^t)`` for ``P = D^-1 A``."""
    if k < 1:
        raise ValueError("rwse needs k >= 1")
    p = random_walk_matrix(g)
    out = np.zeros((g.n, k))
    power = np.eye(g.n)
    for t in range(k):
        power = power @ p
        out[:, t] = np.diag(power)
    return out


# ---------------------------------------------------------------------------
# optional on-disk cache of index matrices


def save_index_cache(path, ds: Dataset, kind: str, matrices) -> None:
    path = Path(path)
    header = {"format": "gradmask-index-cache", "version": CACHE_VERSION, "kind": kind, "dataset_sha256": ds.content_hash()}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for i, m in enumerate(matrices):
            vals = getattr(m, "values", m)
            rows = [[None if not np.isfinite(v) else float(v) for v in row] for row in vals]
            fh.write(json.dumps({"graph": i, "psi": rows}) + "\n")


def load_index_cache(path, ds: Dataset, kind: str) -> list[HopMatrix] | None:
    """Matrices from ``path`` or ``None`` when the cache is stale or absent."""
    path = Path(path)
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if (
            header.get("version") != CACHE_VERSION
            or header.get("kind") != kind
            or header.get("dataset_sha256") != ds.content_hash()
        ):
            return None
        out = []
        for line in fh:
            rec = json.loads(line)
            vals = np.array([[UNREACHABLE if v is None else v for v in row] for row in rec["psi"]], dtype=np.float64)
            out.append(HopMatrix(vals))
    return out if len(out) == len(ds) else None
