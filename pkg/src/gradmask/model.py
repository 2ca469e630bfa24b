"""Graph transformer with decay-masked multi-head attention.

Each layer is pre-norm::

    h   = LN1(H)
    H1  = H + drop(MHA(h, masks)) [+ drop(act(A_norm h Wg))]
    H'  = H1 + drop(FFN(LN2(H1)))

followed by a final LayerNorm and a task readout. Parameters live in a flat
ordered ``dict[str, Tensor]`` so optimisers and checkpoints can walk them
in declaration order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .graphs import GraphBatch
from .mask import ConfigError, DecayConfig, initial_start_points, per_head_masks
from .rng import make_rng
from .tensor import Tensor

PE_KINDS = ("none", "rwse")
MPNN_KINDS = ("none", "gcn")
ACTIVATIONS = ("sigmoid", "relu")


class NumericalError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    d_in: int
    task: str = "graph_cls"
    num_classes: int = 2
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn_mult: int = 2
    dropout: float = 0.0
    attn_dropout: float = 0.5
    pe: str = "rwse"
    pe_dim: int = 20
    mpnn: str = "gcn"
    gcn_activation: str = "sigmoid"
    ln_eps: float = 1e-5
    # None gives a plain, unmasked graph transformer
    decay: DecayConfig | None = field(default_factory=DecayConfig)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def input_dim(self) -> int:
        return self.d_in + (self.pe_dim if self.pe == "rwse" else 0)

    @property
    def out_dim(self) -> int:
        return 1 if self.task == "graph_reg" else self.num_classes

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError("model.layers must be >= 1")
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"model.hidden ({self.hidden}) must be divisible by model.heads ({self.heads})")
        if self.pe not in PE_KINDS:
            raise ConfigError(f"model.pe must be one of {PE_KINDS}")
        if self.mpnn not in MPNN_KINDS:
            raise ConfigError(f"model.mpnn must be one of {MPNN_KINDS}")
        if self.gcn_activation not in ACTIVATIONS:
            raise ConfigError(f"model.gcn_activation must be one of {ACTIVATIONS}")
        if self.task not in ("graph_cls", "graph_reg", "node_cls"):
            raise ConfigError(f"unknown task {self.task!r}")
        for name in ("dropout", "attn_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"model.{name} must lie in [0, 1)")
        if self.decay is not None:
            self.decay.validate()


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _const(value, shape) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=True)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    cfg.validate()
    rng = make_rng(seed)
    d, f = cfg.hidden, cfg.ffn_mult * cfg.hidden
    p: dict[str, Tensor] = {}
    p["in.W"] = _uniform(rng, cfg.input_dim, (cfg.input_dim, d))
    p["in.b"] = _uniform(rng, cfg.input_dim, (d,))
    sp0 = initial_start_points(cfg.heads)
    for l in range(cfg.layers):
        pre = f"layer{l}."
        p[pre + "ln1.g"] = _const(1.0, (d,))
        p[pre + "ln1.b"] = _const(0.0, (d,))
        for name in ("Wq", "Wk", "Wv", "Wo"):
            p[pre + name] = _uniform(rng, d, (d, d))
        p[pre + "bo"] = _uniform(rng, d, (d,))
        if cfg.decay is not None:
            for h in range(cfg.heads):
                p[pre + f"sp{h}"] = Tensor(np.array(sp0[h]), requires_grad=True)
        if cfg.mpnn == "gcn":
            p[pre + "Wg"] = _uniform(rng, d, (d, d))
        p[pre + "ln2.g"] = _const(1.0, (d,))
        p[pre + "ln2.b"] = _const(0.0, (d,))
        p[pre + "ffn.W1"] = _uniform(rng, d, (d, f))
        p[pre + "ffn.b1"] = _uniform(rng, d, (f,))
        p[pre + "ffn.W2"] = _uniform(rng, f, (f, d))
        p[pre + "ffn.b2"] = _uniform(rng, f, (d,))
    p["final_ln.g"] = _const(1.0, (d,))
    p["final_ln.b"] = _const(0.0, (d,))
    p["head.W"] = _uniform(rng, d, (d, cfg.out_dim))
    p["head.b"] = _uniform(rng, d, (cfg.out_dim,))
    return p


def start_point_names(cfg: ModelConfig) -> list[tuple[int, int, str]]:
    if cfg.decay is None:
        return []
    return [(l, h, f"layer{l}.sp{h}") for l in range(cfg.layers) for h in range(cfg.heads)]


def strip_decay(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Same weights without start points, for a plain transformer config."""
    return {k: v for k, v in params.items() if ".sp" not in k}


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis of an arbitrary-rank input."""
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = T.matmul(flat, w)
    if b is not None:
        out = T.add(out, T.expand(b, out.shape))
    return T.reshape(out, lead + (w.shape[1],)) if x.ndim != 2 else out


def masked_attention_head(
    h: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    mask: Tensor | None,
    exclude: np.ndarray | None = None,
    *,
    attn_dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    record: dict | None = None,
) -> Tensor:
    """Single head on one graph: ``softmax((QK^T / sqrt(d)) * M) V``.

    ``mask=None`` is the unmasked head. ``exclude`` removes pairs from the
    softmax support.
    """
    q, k, v = T.matmul(h, wq), T.matmul(h, wk), T.matmul(h, wv)
    s = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(wq.shape[1]))
    if mask is not None:
        s = T.mul(s, mask)
    a = T.softmax_rows(s, exclude)
    if record is not None:
        record["attn"] = a.data
    a = T.dropout(a, attn_dropout, rng, training)
    return T.matmul(a, v)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dk))


def multi_head_block(
    h: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
    masks: Tensor | None,
    exclude: np.ndarray,
    *,
    rng=None,
    training: bool = False,
    record: dict | None = None,
) -> Tensor:
    """All heads of one layer on a padded batch, concatenated and projected.

    ``h`` is the already-normalised input (B, n, d); ``masks`` is
    (B, heads, n, n) or None; ``exclude`` broadcasts against the scores.
    """
    q = split_heads(linear(h, params[prefix + "Wq"]), cfg.heads)
    k = split_heads(linear(h, params[prefix + "Wk"]), cfg.heads)
    v = split_heads(linear(h, params[prefix + "Wv"]), cfg.heads)
    s = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(cfg.head_dim))
    if masks is not None:
        s = T.mul(s, masks)
    a = T.softmax_rows(s, exclude)
    if record is not None:
        record["attn"] = a.data
        record["mask"] = None if masks is None else masks.data
    a = T.dropout(a, cfg.attn_dropout, rng, training)
    out = merge_heads(T.matmul(a, v))
    return linear(out, params[prefix + "Wo"], params[prefix + "bo"])


def gcn_branch(h: Tensor, a_norm: np.ndarray, w: Tensor, activation: str = "sigmoid") -> Tensor:
    """``act(A_norm @ H @ W)`` with ``A_norm = D^-1/2 (A + I) D^-1/2``."""
    agg = T.matmul(Tensor(a_norm), h)
    z = linear(agg, w)
    return T.sigmoid(z) if activation == "sigmoid" else T.relu(z)


# ---------------------------------------------------------------------------
# masks on a padded batch


def batch_structure(batch: GraphBatch, decay: DecayConfig | None):
    """Resolved psi (padding set to 0) and the pair-exclusion mask.

    Padded query rows keep only their own diagonal so no softmax row is
    empty; padded key columns are always excluded from valid rows.
    """
    valid = batch.valid
    pair_ok = valid[:, :, None] & valid[:, None, :]
    eye = np.eye(batch.n_max, dtype=bool)[None]
    exclude = ~(pair_ok | (eye & ~valid[:, :, None]))
    psi = np.where(pair_ok, batch.psi, 0.0)
    unreachable = pair_ok & ~np.isfinite(batch.psi)
    if unreachable.any():
        policy = decay.unreachable_policy if decay is not None else "max_plus_one"
        finite = np.where(pair_ok & np.isfinite(batch.psi), batch.psi, -np.inf)
        top = np.maximum(finite.max(axis=(1, 2)), 1.0)[:, None, None]
        if policy == "fixed":
            fill = np.broadcast_to(float(decay.unreachable_value), psi.shape)
        else:
            fill = np.broadcast_to(top + 1.0, psi.shape)
        psi = np.where(unreachable, fill, psi)
        if policy == "exclude":
            exclude = exclude | unreachable
    return psi, exclude


def layer_masks(psi: np.ndarray, params: dict[str, Tensor], layer: int, cfg: ModelConfig) -> Tensor | None:
    if cfg.decay is None:
        return None
    sps = [params[f"layer{layer}.sp{h}"] for h in range(cfg.heads)]
    return per_head_masks(psi, cfg.decay, sps, cfg.heads)


# ---------------------------------------------------------------------------
# forward


def input_features(batch: GraphBatch, cfg: ModelConfig) -> np.ndarray:
    if cfg.pe == "rwse":
        if batch.pe is None or batch.pe.shape[-1] != cfg.pe_dim:
            raise ConfigError(f"batch lacks RWSE features of width {cfg.pe_dim}")
        return np.concatenate([batch.x, batch.pe], axis=-1)
    return batch.x


def encoder_forward(
    batch: GraphBatch,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    record: list | None = None,
) -> Tensor:
    """Node embeddings (B, n_max, hidden); padded rows carry no meaning."""
    x = Tensor(input_features(batch, cfg))
    h = linear(x, params["in.W"], params["in.b"])
    psi, exclude = batch_structure(batch, cfg.decay)
    ex4 = exclude[:, None, :, :]
    a_norm = batch.gcn_norm() if cfg.mpnn == "gcn" else None
    for l in range(cfg.layers):
        pre = f"layer{l}."
        hn = T.layer_norm(h, params[pre + "ln1.g"], params[pre + "ln1.b"], cfg.ln_eps)
        masks = layer_masks(psi, params, l, cfg)
        ex = ex4
        if masks is not None and cfg.decay.zero_mode == "exclusion":
            ex = ex4 | (masks.data == 0.0)
        rec = {} if record is not None else None
        attn = multi_head_block(hn, params, pre, cfg, masks, ex, rng=rng, training=training, record=rec)
        h1 = T.add(h, T.dropout(attn, cfg.dropout, rng, training))
        if a_norm is not None:
            g = gcn_branch(hn, a_norm, params[pre + "Wg"], cfg.gcn_activation)
            h1 = T.add(h1, T.dropout(g, cfg.dropout, rng, training))
        hn2 = T.layer_norm(h1, params[pre + "ln2.g"], params[pre + "ln2.b"], cfg.ln_eps)
        ff = linear(T.relu(linear(hn2, params[pre + "ffn.W1"], params[pre + "ffn.b1"])), params[pre + "ffn.W2"], params[pre + "ffn.b2"])
        h = T.add(h1, T.dropout(ff, cfg.dropout, rng, training))
        if record is not None:
            rec["psi"] = psi
            record.append(rec)
    return T.layer_norm(h, params["final_ln.g"], params["final_ln.b"], cfg.ln_eps)


def readout(h: Tensor, batch: GraphBatch, cfg: ModelConfig, params: dict[str, Tensor]) -> Tensor:
    """Graph tasks: masked mean pool then affine head -> (B, out). Node tasks: (B, n, C)."""
    if cfg.task == "node_cls":
        return linear(h, params["head.W"], params["head.b"])
    if cfg.task not in ("graph_cls", "graph_reg"):
        raise ConfigError(f"unknown task {cfg.task!r}")
    b, n, d = h.shape
    w = np.broadcast_to((batch.valid / batch.counts[:, None])[:, :, None], (b, n, d))
    pooled = T.sum_(T.mul(h, Tensor(np.ascontiguousarray(w))), axis=1)
    return linear(pooled, params["head.W"], params["head.b"])


def forward(batch: GraphBatch, cfg: ModelConfig, params, **kw) -> Tensor:
    return readout(encoder_forward(batch, cfg, params, **kw), batch, cfg, params)


# ---------------------------------------------------------------------------
# losses and metrics


def auroc(scores, labels) -> float:
    """Rank-based ROC AUC with average ranks for ties (0.5 when one class is absent)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def loss_and_metrics(pred: Tensor, batch: GraphBatch, cfg: ModelConfig) -> tuple[Tensor, dict]:
    if not np.isfinite(pred.data).all():
        raise NumericalError("model produced non-finite predictions")
    if cfg.task == "graph_reg":
        out = T.reshape(pred, (pred.shape[0],))
        err = T.abs_(T.sub(out, Tensor(batch.y.astype(np.float64))))
        loss = T.mean(err)
        return loss, {"mae": float(loss.data), "n": int(pred.shape[0]), "abs_err_sum": float(err.data.sum())}
    if cfg.task == "graph_cls":
        logits, y, weight = pred, batch.y, np.ones(pred.shape[0])
    else:
        b, n, c = pred.shape
        logits = T.reshape(pred, (b * n, c))
        y = batch.y.reshape(-1)
        weight = (y >= 0).astype(np.float64)
    count = weight.sum()
    onehot = np.zeros(logits.shape)
    rows = np.nonzero(weight)[0]
    onehot[rows, y[rows]] = 1.0
    logp = T.log_softmax_rows(logits)
    loss = T.mul(T.sum_(T.mul(logp, Tensor(onehot))), -1.0 / count)
    pick = logits.data.argmax(axis=-1)
    correct = float(((pick == y) * weight).sum())
    metrics = {"loss": float(loss.data), "accuracy": correct / count, "n": int(count), "correct": correct}
    if logits.shape[1] == 2:
        ld = logits.data[rows]
        metrics["scores"] = (ld[:, 1] - ld[:, 0]).tolist()
        metrics["labels"] = y[rows].tolist()
        metrics["auroc"] = auroc(metrics["scores"], metrics["labels"])
    return loss, metrics
