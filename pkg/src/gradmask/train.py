"""Training loop, evaluation, checkpoints and run reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .graphs import (
    Dataset,
    Graph,
    GraphBatch,
    load_graph_dataset,
    make_batch,
    split_dataset,
    subsample_low_resource,
    synth_hopcount_regression,
    synth_triangle_task,
)
from .model import ModelConfig, NumericalError, forward, init_params, loss_and_metrics, start_point_names
from .optim import NonFiniteGradientError, OptimizerState, Schedule, adamw_step
from .rng import make_rng, restore_rng, rng_state
from .structure import rwse, structural_index
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GRADMASK-CKPT\n"
CHECKPOINT_VERSION = 1
REPORT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data preparation


@dataclass(eq=False)
class PreparedSplit:
    """Graphs with their structural index and (optional) RWSE precomputed."""

    graphs: list[Graph]
    psi: list[np.ndarray]
    pe: list[np.ndarray] | None

    def __len__(self) -> int:
        return len(self.graphs)

    def batch(self, idx: Sequence[int]) -> GraphBatch:
        pe = [self.pe[i] for i in idx] if self.pe is not None else None
        return make_batch([self.graphs[i] for i in idx], [self.psi[i] for i in idx], pe)

    def batches(self, batch_size: int, order: Sequence[int] | None = None):
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start : start + batch_size])


def prepare_split(ds: Dataset, index: str = "sph", pe_dim: int | None = None) -> PreparedSplit:
    psi = [structural_index(g, index).values for g in ds.graphs]
    pe = [rwse(g, pe_dim) for g in ds.graphs] if pe_dim else None
    return PreparedSplit(list(ds.graphs), psi, pe)


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.path is not None:
        return load_graph_dataset(d.path)
    s = d.synthetic
    if s.kind == "triangle":
        return synth_triangle_task(s.count, (s.n_min, s.n_max), s.p_edge, s.seed, s.d_in)
    return synth_hopcount_regression(s.count, (s.n_min, s.n_max), s.p_edge, s.seed, s.d_in)


@dataclass(eq=False)
class RunData:
    task: str
    d_in: int
    num_classes: int | None
    train: PreparedSplit
    val: PreparedSplit
    test: PreparedSplit


def build_run_data(cfg: RunConfig, ds: Dataset | None = None) -> RunData:
    ds = ds if ds is not None else load_dataset(cfg)
    sizes = tuple(cfg.data.split_sizes) if cfg.data.split_sizes else None
    tr, va, te = split_dataset(ds, cfg.data.split_seed, sizes)
    if cfg.data.train_fraction < 1.0:
        tr = subsample_low_resource(tr, cfg.data.train_fraction, cfg.data.split_seed)
    pe_dim = cfg.model.pe_dim if cfg.model.pe == "rwse" else None
    index = cfg.decay.index
    return RunData(
        ds.task,
        ds.d_in,
        ds.num_classes,
        prepare_split(tr, index, pe_dim),
        prepare_split(va, index, pe_dim),
        prepare_split(te, index, pe_dim),
    )


# ---------------------------------------------------------------------------
# evaluation


def primary_metric(task: str) -> tuple[str, bool]:
    """Name of the selection metric and whether larger is better."""
    return ("mae", False) if task == "graph_reg" else ("accuracy", True)


def evaluate(split: PreparedSplit, mcfg: ModelConfig, params: dict[str, Tensor], batch_size: int) -> dict:
    """Metrics over a whole split, reduced in fixed batch order."""
    total_loss = 0.0
    count = 0
    correct = 0.0
    abs_err = 0.0
    scores: list[float] = []
    labels: list[int] = []
    with T.no_grad():
        for batch in split.batches(batch_size):
            pred = forward(batch, mcfg, params, training=False)
            loss, m = loss_and_metrics(pred, batch, mcfg)
            total_loss += float(loss.data) * m["n"]
            count += m["n"]
            if mcfg.task == "graph_reg":
                abs_err += m["abs_err_sum"]
            else:
                correct += m["correct"]
                scores.extend(m.get("scores", []))
                labels.extend(m.get("labels", []))
    out = {"loss": total_loss / max(count, 1), "n": count}
    if mcfg.task == "graph_reg":
        out["mae"] = abs_err / max(count, 1)
    else:
        out["accuracy"] = correct / max(count, 1)
        if scores:
            from .model import auroc

            out["auroc"] = auroc(scores, labels)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: dict[str, Tensor], opt: OptimizerState, meta: dict) -> None:
    """Versioned container: magic, u64 header length, JSON header, raw <f8 payload."""
    opt.ensure(params)
    entries = []
    chunks = []
    offset = 0
    for group, arrays in (("param", {k: p.data for k, p in params.items()}), ("adam_m", opt.m), ("adam_v", opt.v)):
        for name in params:
            arr = np.array(arrays[name], dtype="<f8", order="C")
            entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            chunks.append(arr.tobytes())
            offset += arr.size
    payload = b"".join(chunks)
    header = dict(meta)
    header.update(
        {
            "format_version": CHECKPOINT_VERSION,
            "tensors": entries,
            "optimizer": {
                "step": opt.step,
                "beta1": opt.beta1,
                "beta2": opt.beta2,
                "eps": opt.eps,
                "weight_decay": opt.weight_decay,
            },
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }
    )
    head = json.dumps(header, sort_keys=True).encode()
    _atomic_write(Path(path), CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload)


@dataclass(eq=False)
class Checkpoint:
    params: dict[str, Tensor]
    optimizer: OptimizerState
    header: dict

    @property
    def config(self) -> dict:
        return self.header["config"]


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a gradmask checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {header.get('format_version')} is incompatible with {CHECKPOINT_VERSION}"
        )
    payload = blob[pos + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in header["tensors"]:
        arr = flat[e["offset"] : e["offset"] + e["count"]].astype(np.float64).reshape(tuple(e["shape"]))
        groups[e["group"]][e["name"]] = arr
    params = {k: Tensor(v, requires_grad=True) for k, v in groups["param"].items()}
    o = header["optimizer"]
    opt = OptimizerState(o["beta1"], o["beta2"], o["eps"], o["weight_decay"], o["step"], groups["adam_m"], groups["adam_v"])
    return Checkpoint(params, opt, header)


# ---------------------------------------------------------------------------
# training


def _strip(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if k not in ("scores", "labels", "correct", "abs_err_sum")}


def _sp_rows(epoch: int, mcfg: ModelConfig, params) -> list[dict]:
    return [{"epoch": epoch, "layer": l, "head": h, "sp": float(params[name].data)} for l, h, name in start_point_names(mcfg)]


def _better(a: float, b: float | None, larger: bool) -> bool:
    if b is None:
        return True
    return a > b if larger else a < b


def train(
    cfg: RunConfig,
    out_dir=None,
    *,
    data: RunData | None = None,
    resume=None,
    stop_after: int | None = None,
) -> dict:
    """Run (or resume) training and return the run report.

    ``stop_after`` ends the loop after that many total epochs without
    changing the schedule, which is how a run is split for resumption.
    """
    t0 = time.perf_counter()
    data = data if data is not None else build_run_data(cfg)
    mcfg = cfg.model_config(data.d_in, data.task, data.num_classes)
    mcfg.validate()
    metric, larger = primary_metric(data.task)
    bs = cfg.train.batch_size
    steps_per_epoch = math.ceil(len(data.train) / bs)
    total = cfg.train.epochs * steps_per_epoch
    sched = Schedule(
        base_lr=cfg.optim.lr,
        total=total,
        warmup=int(round(cfg.optim.warmup_fraction * total)),
        kind="constant" if cfg.optim.name == "adam" else cfg.optim.schedule,
    )
    out = Path(out_dir) if out_dir is not None else None
    peak_bytes = 0

    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ck.header.get("config_hash") != cfg.config_hash():
            raise CheckpointError("checkpoint was written under a different configuration")
        params, opt = ck.params, ck.optimizer
        rng = restore_rng(ck.header["rng"])
        st = ck.header["train_state"]
        epoch, history, sp_traj, best = st["epoch"], st["history"], st["sp_trajectories"], st["best"]
    else:
        params = init_params(mcfg, cfg.seed)
        opt = OptimizerState(
            cfg.optim.beta1,
            cfg.optim.beta2,
            cfg.optim.eps,
            cfg.optim.weight_decay if cfg.optim.name == "adamw" else 0.0,
        )
        rng = make_rng(cfg.seed, 1)
        epoch = 0
        val = evaluate(data.val, mcfg, params, bs)
        test = evaluate(data.test, mcfg, params, bs)
        history = [{"epoch": 0, "train_loss": None, "lr": 0.0, "val": val, "test": test}]
        sp_traj = _sp_rows(0, mcfg, params)
        best = {"epoch": 0, "val": val[metric], "test": test[metric]}
        if out is not None:
            _save_state(out / "best.ckpt", cfg, params, opt, rng, epoch, history, sp_traj, best)

    status, failure = "ok", None
    last_epoch = cfg.train.epochs if stop_after is None else min(stop_after, cfg.train.epochs)
    try:
        while epoch < last_epoch:
            epoch += 1
            order = rng.permutation(len(data.train))
            losses = []
            lr = 0.0
            for batch in data.train.batches(bs, order):
                pred = forward(batch, mcfg, params, training=True, rng=rng)
                loss, _ = loss_and_metrics(pred, batch, mcfg)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                peak_bytes = max(peak_bytes, T.tape_nbytes(loss) + sum(4 * p.data.nbytes for p in params.values()))
                T.backward(loss)
                lr = adamw_step(params, opt, sched, cfg.optim.grad_clip)
                for p in params.values():
                    p.grad = None
                losses.append(float(loss.data))
            val = evaluate(data.val, mcfg, params, bs)
            test = evaluate(data.test, mcfg, params, bs)
            history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr, "val": val, "test": test})
            sp_traj.extend(_sp_rows(epoch, mcfg, params))
            log.info("epoch %d loss %.4f val %s %.4f", epoch, history[-1]["train_loss"], metric, val[metric])
            improved = _better(val[metric], best["val"], larger)
            if improved:
                best = {"epoch": epoch, "val": val[metric], "test": test[metric]}
            if out is not None:
                _save_state(out / "last.ckpt", cfg, params, opt, rng, epoch, history, sp_traj, best)
                if improved:
                    _save_state(out / "best.ckpt", cfg, params, opt, rng, epoch, history, sp_traj, best)
    except (TrainingDiverged, NumericalError, NonFiniteGradientError) as exc:
        status, failure = "diverged", f"{type(exc).__name__}: {exc}"

    report = {
        "report_version": REPORT_VERSION,
        "status": status,
        "failure": failure,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "task": data.task,
        "metric": metric,
        "epochs_completed": epoch,
        "best_epoch": best["epoch"],
        "best_val_metric": best["val"],
        "test_metric_at_best_val": best["test"],
        "history": history,
        "sp_trajectories": sp_traj,
        "final_parameters_sha256": params_digest(params),
        "timing": {"wall_time_s": time.perf_counter() - t0, "peak_memory_bytes_estimate": int(peak_bytes)},
    }
    if out is not None:
        write_report_files(out, report)
    return report


def _save_state(path, cfg, params, opt, rng, epoch, history, sp_traj, best) -> None:
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "rng": rng_state(rng),
        "train_state": {"epoch": epoch, "history": history, "sp_trajectories": sp_traj, "best": best},
    }
    save_checkpoint(path, params, opt, meta)


def params_digest(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def deterministic_view(report: dict) -> dict:
    """The report without wall-clock fields, for bitwise comparisons."""
    return {k: v for k, v in report.items() if k != "timing"}


def write_report_files(out: Path, report: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    metric_keys = sorted({k for row in report["history"] for split in ("val", "test") for k in row[split]})
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "lr"] + [f"{s}_{k}" for s in ("val", "test") for k in metric_keys])
        for row in report["history"]:
            w.writerow(
                [row["epoch"], "" if row["train_loss"] is None else repr(row["train_loss"]), repr(row["lr"])]
                + [repr(row[s].get(k, "")) for s in ("val", "test") for k in metric_keys]
            )
    with open(out / "sp_trajectories.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "layer", "head", "sp"])
        for r in report["sp_trajectories"]:
            w.writerow([r["epoch"], r["layer"], r["head"], repr(r["sp"])])
