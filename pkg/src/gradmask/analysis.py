"""Attention inspection helpers and the gradient-check harness."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graphs import Graph, GraphBatch, degree_features, make_batch
from .mask import build_exponential_mask, exponential_mask_sp_grad
from .model import ModelConfig, encoder_forward, forward, init_params, loss_and_metrics, start_point_names
from .rng import make_rng
from .structure import rwse, structural_index

KINK_TOL = 1e-3


def run_with_attention(batch: GraphBatch, cfg: ModelConfig, params) -> list[dict]:
    """Eval-mode forward returning per-layer ``attn`` (B,h,n,n), ``mask`` and ``psi``."""
    record: list[dict] = []
    with T.no_grad():
        encoder_forward(batch, cfg, params, training=False, record=record)
    return record


def distance_buckets(psi: np.ndarray, max_bucket: int = 6) -> np.ndarray:
    """Integer bucket per pair: rounded index, capped at ``max_bucket``."""
    return np.minimum(np.rint(np.where(np.isfinite(psi), psi, max_bucket)), max_bucket).astype(int)


def attention_mass_by_distance(attn: np.ndarray, psi: np.ndarray, valid: np.ndarray, max_bucket: int = 6) -> np.ndarray:
    """Mean over valid query nodes of the attention mass landing in each distance bucket.

    ``attn`` is (B, h, n, n); returns (h, max_bucket + 1).
    """
    buckets = distance_buckets(psi, max_bucket)
    b, h, n, _ = attn.shape
    out = np.zeros((h, max_bucket + 1))
    rows = valid.sum()
    for k in range(max_bucket + 1):
        sel = (buckets == k) & valid[:, :, None] & valid[:, None, :]
        out[:, k] = (attn * sel[:, None]).sum(axis=(0, 2, 3)) / rows
    return out


def far_mass(attn: np.ndarray, psi: np.ndarray, valid: np.ndarray, threshold: float = 3.0) -> float:
    """Mean (over valid rows and heads) attention mass on pairs with ``psi >= threshold``."""
    pair = valid[:, :, None] & valid[:, None, :] & (psi >= threshold)
    per_row = (attn * pair[:, None]).sum(axis=-1)  # (B, h, n)
    return float(per_row.sum() / (valid.sum() * attn.shape[1]))


# ---------------------------------------------------------------------------
# gradient check harness


@dataclass
class GradcheckResult:
    model_error: float
    per_param: dict
    mask_sp_error: float
    attempts: int

    def passed(self, tol: float = 1e-4, mask_tol: float = 1e-6) -> bool:
        return self.model_error <= tol and self.mask_sp_error <= mask_tol


def probe_graph(n: int = 6, seed: int = 0, d_in: int = 4, p_edge: float = 0.5) -> Graph:
    """A connected random graph used as the gradient-check probe."""
    rng = make_rng(seed)
    while True:
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.size) < p_edge
        edges = np.stack([iu[keep], ju[keep]], axis=1)
        g = Graph(n, edges, degree_features(edges, n, d_in))
        if structural_index(g).is_connected:
            g.x = g.x + 0.1 * rng.standard_normal(g.x.shape)
            g.y = 1
            return g


def near_kink(loss: T.Tensor, tol: float = KINK_TOL) -> bool:
    """True if any relu/abs input on the tape sits within ``tol`` of its kink."""
    for node in T.topological_order(loss):
        if node.op in ("relu", "abs"):
            src = node._parents[0].data
            if np.any(np.abs(src) < tol):
                return True
    return False


def model_gradcheck(cfg: ModelConfig, graph: Graph | None = None, seed: int = 0, h: float = 1e-6, max_attempts: int = 20) -> GradcheckResult:
    """Central-difference check over every weight tensor and every start point.

    Start points are nudged off integer distances and the probe is redrawn
    (new weights) while any relu/abs input on the tape is within 1e-3 of 0.
    """
    graph = graph or probe_graph(seed=seed, d_in=cfg.d_in)
    psi = structural_index(graph, cfg.decay.index if cfg.decay else "sph")
    pe = [rwse(graph, cfg.pe_dim)] if cfg.pe == "rwse" else None
    batch = make_batch([graph], [psi], pe)
    for attempt in range(1, max_attempts + 1):
        params = init_params(cfg, seed + attempt)
        jitter = make_rng(seed, attempt)
        for _, _, name in start_point_names(cfg):
            params[name].data = np.asarray(params[name].data + jitter.uniform(0.2, 0.8))

        def f():
            pred = forward(batch, cfg, params, training=False)
            return loss_and_metrics(pred, batch, cfg)[0]

        loss = f()
        if not near_kink(loss):
            break
    per = {name: T.gradcheck(f, [p], h) for name, p in params.items()}
    mask_err = mask_sp_gradcheck(seed=seed)
    return GradcheckResult(max(per.values()), per, mask_err, attempt)


def mask_sp_gradcheck(seed: int = 0, trials: int = 50, h: float = 1e-6) -> float:
    """Closed-form and autodiff dM/dsp against central differences, away from kinks."""
    rng = make_rng(seed, 7)
    worst = 0.0
    for _ in range(trials):
        psi = rng.integers(0, 6, size=(5, 5)).astype(float)
        lam = float(rng.uniform(0.05, 0.95))
        sp = float(rng.uniform(-1.0, 5.0))
        if np.min(np.abs(psi - sp)) < KINK_TOL:
            continue
        plus = build_exponential_mask(psi, lam, sp + h).data
        minus = build_exponential_mask(psi, lam, sp - h).data
        fd = (plus - minus) / (2 * h)
        closed = exponential_mask_sp_grad(psi, lam, sp)
        # autodiff: one backward per entry via a weighted sum
        sp_t = T.Tensor(np.array(sp), requires_grad=True)
        wts = rng.standard_normal(psi.shape)
        m = build_exponential_mask(psi, lam, sp_t)
        T.backward(T.sum_(T.mul(m, T.Tensor(wts))))
        ad = float(sp_t.grad)
        worst = max(
            worst,
            float(np.max(np.abs(closed - fd) / np.maximum(1.0, np.abs(fd)))),
            abs(ad - float((wts * fd).sum())) / max(1.0, abs(ad)),
        )
    return worst
