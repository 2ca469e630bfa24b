"""Graph data model, JSON-lines ingestion, splits, batching and synthetic tasks."""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .rng import make_rng

FORMAT_NAME = "gradmask-graphs"
FORMAT_VERSION = 1
TASKS = ("graph_cls", "graph_reg", "node_cls")

_HEADER_KEYS = {"format", "version", "task", "d_in", "num_classes"}
_GRAPH_KEYS = {"n", "edges", "x", "y"}


class GraphFormatError(ValueError):
    """Base for dataset ingestion errors; carries the 1-based line number."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class ParseError(GraphFormatError):
    pass


class SchemaError(GraphFormatError):
    pass


class GraphValidationError(GraphFormatError):
    pass


class GenerationError(RuntimeError):
    pass


def _canonical_edges(edges, n: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        raise GraphValidationError(f"edge endpoint out of range [0, {n})")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise GraphValidationError("self-loops are not allowed")
    arr = np.sort(arr, axis=1)
    if arr.size:
        arr = np.unique(arr, axis=0)
    return arr


@dataclass(eq=False)
class Graph:
    """Undirected simple graph with node features and a task label.

    ``edges`` is stored canonically: each pair as ``(u, v)`` with ``u < v``,
    rows sorted and deduplicated.
    """

    n: int
    edges: np.ndarray
    x: np.ndarray
    y: object = None

    def __post_init__(self):
        if self.n < 1:
            raise GraphValidationError("graph needs at least one node")
        self.edges = _canonical_edges(self.edges, self.n)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] != self.n:
            raise GraphValidationError(f"feature matrix has shape {self.x.shape}, expected ({self.n}, d)")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n)

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Symmetric CSR (indptr, indices) with neighbours in ascending order."""
        if not self.num_edges:
            return np.zeros(self.n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        return np.cumsum(indptr), dst

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.n)
        y = self.y
        if isinstance(y, (list, np.ndarray)):
            y = [int(v) for v in np.asarray(y)[perm]]
        return Graph(self.n, inv[self.edges] if self.num_edges else self.edges, self.x[perm], y)

    def same_as(self, other: "Graph") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.x, other.x)
            and _label_json(self.y) == _label_json(other.y)
        )


def _label_json(y):
    if isinstance(y, np.ndarray):
        return [int(v) for v in y]
    if isinstance(y, (np.integer,)):
        return int(y)
    if isinstance(y, np.floating):
        return float(y)
    return y


@dataclass(eq=False)
class Dataset:
    task: str
    d_in: int
    graphs: list[Graph] = field(default_factory=list)
    num_classes: int | None = None

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i) -> Graph:
        return self.graphs[i]

    def __iter__(self):
        return iter(self.graphs)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.task, self.d_in, [self.graphs[i] for i in indices], self.num_classes)

    def header(self) -> dict:
        h = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "task": self.task, "d_in": self.d_in}
        if self.num_classes is not None:
            h["num_classes"] = self.num_classes
        return h

    def content_hash(self) -> str:
        buf = io.StringIO()
        write_jsonl(self, buf)
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()


# ---------------------------------------------------------------------------
# JSON-lines format


def _check_label(y, task: str, n: int, num_classes: int | None, line: int):
    if task == "graph_reg":
        if isinstance(y, bool) or not isinstance(y, (int, float)):
            raise SchemaError("graph_reg label must be a number", line)
        if not math.isfinite(y):
            raise GraphValidationError("regression target is not finite", line)
        return float(y)
    if task == "graph_cls":
        if isinstance(y, bool) or not isinstance(y, int):
            raise SchemaError("graph_cls label must be an int", line)
        if num_classes is not None and not 0 <= y < num_classes:
            raise GraphValidationError(f"label {y} outside [0, {num_classes})", line)
        return y
    if not isinstance(y, list) or len(y) != n or not all(isinstance(v, int) and not isinstance(v, bool) for v in y):
        raise SchemaError("node_cls label must be a list of n ints", line)
    if num_classes is not None and any(not 0 <= v < num_classes for v in y):
        raise GraphValidationError(f"node label outside [0, {num_classes})", line)
    return list(y)


def _parse_header(obj, line: int) -> dict:
    if not isinstance(obj, dict):
        raise SchemaError("header must be a JSON object", line)
    unknown = set(obj) - _HEADER_KEYS
    if unknown:
        raise SchemaError(f"unknown header keys {sorted(unknown)}", line)
    if obj.get("format") != FORMAT_NAME:
        raise SchemaError(f"expected format {FORMAT_NAME!r}, got {obj.get('format')!r}", line)
    if obj.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported version {obj.get('version')!r}", line)
    if obj.get("task") not in TASKS:
        raise SchemaError(f"task must be one of {TASKS}", line)
    d_in = obj.get("d_in")
    if not isinstance(d_in, int) or isinstance(d_in, bool) or d_in < 1:
        raise SchemaError("d_in must be a positive int", line)
    nc = obj.get("num_classes")
    if obj["task"] != "graph_reg" and (not isinstance(nc, int) or nc < 2):
        raise SchemaError("classification tasks need num_classes >= 2", line)
    return obj


def parse_graph_record(obj, header: dict, line: int) -> Graph:
    if not isinstance(obj, dict):
        raise SchemaError("graph record must be a JSON object", line)
    unknown = set(obj) - _GRAPH_KEYS
    if unknown:
        raise SchemaError(f"unknown keys {sorted(unknown)}", line)
    missing = _GRAPH_KEYS - set(obj)
    if missing:
        raise SchemaError(f"missing keys {sorted(missing)}", line)
    n = obj["n"]
    if not isinstance(n, int) or n < 1:
        raise SchemaError("n must be a positive int", line)
    edges = obj["edges"]
    if not isinstance(edges, list) or any(not isinstance(e, list) or len(e) != 2 for e in edges):
        raise SchemaError("edges must be a list of [u, v] pairs", line)
    if any(not isinstance(v, int) or isinstance(v, bool) for e in edges for v in e):
        raise SchemaError("edge endpoints must be ints", line)
    x = obj["x"]
    if not isinstance(x, list) or len(x) != n:
        raise SchemaError("x must hold one feature row per node", line)
    d_in = header["d_in"]
    if any(not isinstance(row, list) or len(row) != d_in for row in x):
        raise SchemaError(f"every feature row must have d_in={d_in} entries", line)
    y = _check_label(obj["y"], header["task"], n, header.get("num_classes"), line)
    try:
        xa = np.array(x, dtype=np.float64)
        return Graph(n, edges, xa, y)
    except GraphValidationError as exc:
        raise GraphValidationError(str(exc), line) from None
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad feature values: {exc}", line) from None


def read_jsonl(stream) -> Dataset:
    header = None
    graphs = []
    for lineno, raw in enumerate(stream, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if header is None:
            header = _parse_header(obj, lineno)
            continue
        graphs.append(parse_graph_record(obj, header, lineno))
    if header is None:
        raise SchemaError("empty file: missing header line")
    return Dataset(header["task"], header["d_in"], graphs, header.get("num_classes"))


def load_graph_dataset(path) -> Dataset:
    with open(path, encoding="utf-8", newline="\n") as fh:
        return read_jsonl(fh)


def graph_record(g: Graph) -> dict:
    return {
        "n": int(g.n),
        "edges": g.edges.tolist(),
        "x": g.x.tolist(),
        "y": _label_json(g.y),
    }


def write_jsonl(ds: Dataset, stream) -> None:
    stream.write(json.dumps(ds.header()) + "\n")
    for g in ds.graphs:
        stream.write(json.dumps(graph_record(g)) + "\n")


def save_graph_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_jsonl(ds, fh)


# ---------------------------------------------------------------------------
# splits


def split_dataset(ds: Dataset, seed: int, sizes: tuple[int, int, int] | None = None):
    """Seeded disjoint train/val/test split, 8:1:1 unless ``sizes`` is given."""
    total = len(ds)
    if sizes is None:
        if total < 10:
            raise ValueError(f"split_dataset needs at least 10 graphs, got {total}")
        n_val = n_test = total // 10
        n_train = total - n_val - n_test
    else:
        n_train, n_val, n_test = sizes
        if min(sizes) < 1 or sum(sizes) > total:
            raise ValueError(f"split sizes {sizes} do not fit a dataset of {total}")
    perm = make_rng(seed).permutation(total)
    tr = np.sort(perm[:n_train])
    va = np.sort(perm[n_train : n_train + n_val])
    te = np.sort(perm[n_train + n_val : n_train + n_val + n_test])
    return ds.subset(tr), ds.subset(va), ds.subset(te)


def subsample_low_resource(train: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ``ceil(fraction * len)`` graphs: a prefix of one seeded permutation,
    so smaller fractions are subsets of larger ones under the same seed."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    total = len(train)
    keep = min(total, math.ceil(round(fraction * total, 9)))
    perm = make_rng(seed).permutation(total)
    return train.subset(np.sort(perm[:keep]))


# ---------------------------------------------------------------------------
# batching


@dataclass(eq=False)
class GraphBatch:
    """Graphs padded to a shared node count.

    ``psi`` keeps the raw structural index with ``inf`` for unreachable
    pairs and for every pair touching a padded node; ``valid`` tells the two
    apart.
    """

    x: np.ndarray  # (B, n_max, d_in)
    valid: np.ndarray  # (B, n_max) bool
    psi: np.ndarray  # (B, n_max, n_max)
    adj: np.ndarray  # (B, n_max, n_max)
    counts: np.ndarray  # (B,)
    y: np.ndarray
    pe: np.ndarray | None = None  # (B, n_max, k)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def n_max(self) -> int:
        return self.x.shape[1]

    def gcn_norm(self) -> np.ndarray:
        """D^-1/2 (A + I) D^-1/2 per graph, zero on padded rows/columns."""
        eye = np.eye(self.n_max)[None] * self.valid[:, :, None]
        a_hat = self.adj + eye
        deg = a_hat.sum(axis=-1)
        inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
        return inv[:, :, None] * a_hat * inv[:, None, :]


def make_batch(graphs: Sequence[Graph], hop_matrices: Sequence, pe: Sequence[np.ndarray] | None = None) -> GraphBatch:
    if not graphs:
        raise ValueError("make_batch needs at least one graph")
    if len(hop_matrices) != len(graphs):
        raise ValueError("one hop matrix per graph is required")
    dims = {g.x.shape[1] for g in graphs}
    if len(dims) != 1:
        raise ValueError(f"graphs disagree on feature dimension: {sorted(dims)}")
    d_in = dims.pop()
    b = len(graphs)
    n_max = max(g.n for g in graphs)
    x = np.zeros((b, n_max, d_in))
    valid = np.zeros((b, n_max), dtype=bool)
    psi = np.full((b, n_max, n_max), np.inf)
    adj = np.zeros((b, n_max, n_max))
    counts = np.array([g.n for g in graphs], dtype=np.int64)
    pe_arr = None
    if pe is not None:
        pe_arr = np.zeros((b, n_max, pe[0].shape[1]))
    for i, (g, hm) in enumerate(zip(graphs, hop_matrices)):
        n = g.n
        x[i, :n] = g.x
        valid[i, :n] = True
        psi[i, :n, :n] = getattr(hm, "values", hm)
        adj[i, :n, :n] = g.adjacency()
        if pe_arr is not None:
            pe_arr[i, :n] = pe[i]
    y0 = graphs[0].y
    if isinstance(y0, (list, np.ndarray)):
        y = np.full((b, n_max), -1, dtype=np.int64)
        for i, g in enumerate(graphs):
            y[i, : g.n] = g.y
    elif isinstance(y0, (int, np.integer)) and not isinstance(y0, bool):
        y = np.array([int(g.y) for g in graphs], dtype=np.int64)
    elif y0 is None:
        y = np.zeros(b)
    else:
        y = np.array([float(g.y) for g in graphs], dtype=np.float64)
    return GraphBatch(x, valid, psi, adj, counts, y, pe_arr)


# ---------------------------------------------------------------------------
# synthetic tasks


def degree_features(g_edges: np.ndarray, n: int, d_in: int) -> np.ndarray:
    """One-hot degree, capped at ``d_in - 1``."""
    deg = np.bincount(np.asarray(g_edges).reshape(-1), minlength=n) if len(g_edges) else np.zeros(n, dtype=np.int64)
    x = np.zeros((n, d_in))
    x[np.arange(n), np.minimum(deg, d_in - 1)] = 1.0
    return x


def has_triangle(adj: np.ndarray) -> bool:
    return bool(np.trace(adj @ adj @ adj) > 0.5)


def _erdos_renyi(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return np.stack([iu[keep], ju[keep]], axis=1)


def synth_triangle_task(
    count: int,
    n_range: tuple[int, int] = (8, 16),
    p_edge: float = 0.15,
    seed: int = 0,
    d_in: int = 8,
    max_tries: int | None = None,
) -> Dataset:
    """Erdős–Rényi graphs labelled 1 iff they contain a triangle.

    Classes are balanced by rejection: half the slots (rounded down) go to
    positives, and graphs of an already-full class are discarded.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = n_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad node range {n_range}")
    rng = make_rng(seed)
    want = {1: count // 2, 0: count - count // 2}
    have = {0: 0, 1: 0}
    graphs: list[Graph] = []
    budget = max_tries if max_tries is not None else 200 * count + 1000
    for _ in range(budget):
        if len(graphs) == count:
            break
        n = int(rng.integers(lo, hi + 1))
        edges = _erdos_renyi(rng, n, p_edge)
        g = Graph(n, edges, degree_features(edges, n, d_in))
        label = int(has_triangle(g.adjacency()))
        if have[label] >= want[label]:
            continue
        have[label] += 1
        g.y = label
        graphs.append(g)
    if len(graphs) < count:
        raise GenerationError(f"could not balance classes after {budget} draws (have {have})")
    return Dataset("graph_cls", d_in, graphs, num_classes=2)


def mean_connected_distance(g: Graph) -> float:
    """Average hop distance over connected unordered pairs (0 if none)."""
    indptr, indices = g.csr()
    dist = kernels.bfs_all_pairs(indptr, indices, g.n)
    iu = np.triu_indices(g.n, k=1)
    d = dist[iu]
    d = d[np.isfinite(d)]
    return float(d.mean()) if d.size else 0.0


def synth_hopcount_regression(
    count: int,
    n_range: tuple[int, int] = (8, 16),
    p_edge: float = 0.2,
    seed: int = 0,
    d_in: int = 8,
    max_tries: int | None = None,
) -> Dataset:
    """Regression target: mean shortest-path length among connected pairs.

    Edgeless draws are rejected since the target would be undefined.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = n_range
    rng = make_rng(seed)
    graphs: list[Graph] = []
    budget = max_tries if max_tries is not None else 100 * count + 1000
    for _ in range(budget):
        if len(graphs) == count:
            break
        n = int(rng.integers(lo, hi + 1))
        edges = _erdos_renyi(rng, n, p_edge)
        if not len(edges):
            continue
        g = Graph(n, edges, degree_features(edges, n, d_in))
        g.y = mean_connected_distance(g)
        graphs.append(g)
    if len(graphs) < count:
        raise GenerationError(f"only generated {len(graphs)} of {count} graphs")
    return Dataset("graph_reg", d_in, graphs)


def homophily_ratio(g: Graph, node_labels) -> float:
    """Fraction of edges whose two endpoints carry the same label."""
    labels = np.asarray(node_labels)
    if labels.shape != (g.n,):
        raise ValueError(f"expected {g.n} labels, got shape {labels.shape}")
    if g.num_edges == 0:
        raise ValueError("homophily ratio is undefined for a graph without edges")
    same = labels[g.edges[:, 0]] == labels[g.edges[:, 1]]
    return float(same.mean())
