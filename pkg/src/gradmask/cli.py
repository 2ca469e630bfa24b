"""Command-line entry point: ``gradmask <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 runtime failure,
3 gradient-check failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, config_from_dict, config_to_yaml, load_config
from .graphs import GraphFormatError, save_graph_dataset, synth_hopcount_regression, synth_triangle_task

log = logging.getLogger("gradmask")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

ABLATION_DEFAULTS = {
    "lambda": ["0.3", "0.4", "0.5", "0.6", "0.7"],
    "decay_fn": ["exponential", "linear"],
    "index": ["sph", "curve", "fs"],
    "mpnn": ["gcn", "none"],
    "pe": ["rwse", "none"],
}
ABLATION_KEYS = {
    "lambda": "decay.lambda",
    "decay_fn": "decay.decay_fn",
    "index": "decay.index",
    "mpnn": "model.mpnn",
    "pe": "model.pe",
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    p.add_argument("--seed", type=int, help="overrides the run seed")
    p.add_argument("--out", help="output directory (or file for gen-synthetic)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradmask", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int, help="stop after this many total epochs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on val/test")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="one seeded run per value of an ablation axis")
    _common(p)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_KEYS))
    p.add_argument("--values", help="comma-separated values (axis defaults otherwise)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model and dM/dsp")
    _common(p)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--nodes", type=int, default=6)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("inspect-attention", help="dump per-head attention and masks as CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="JSON-lines dataset (defaults to the checkpoint's data config)")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--graph-index", type=int, default=0)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset as JSON lines")
    _common(p)
    p.add_argument("--kind", choices=["triangle", "hopcount"], default="triangle")
    p.add_argument("--count", type=int, default=700)
    p.add_argument("--n-min", type=int, default=8)
    p.add_argument("--n-max", type=int, default=16)
    p.add_argument("--p-edge", type=float)
    p.add_argument("--d-in", type=int, default=8)
    return parser


def _resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _prepare_out(path: str | None, force: bool, default: str) -> Path:
    out = Path(path or default)
    occupied = any(out.iterdir()) if out.is_dir() else out.exists()
    if occupied:
        if not force:
            raise UsageError(f"output {out} already exists; pass --force to overwrite")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .train import train

    cfg = _resolve_config(args)
    out = Path(args.out or "runs/train")
    if args.resume is None:
        out = _prepare_out(args.out, args.force, "runs/train")
    (out / "config.yaml").write_text(config_to_yaml(cfg), encoding="utf-8")
    report = train(cfg, out, resume=args.resume, stop_after=args.stop_after)
    print(
        f"status={report['status']} best_epoch={report['best_epoch']} "
        f"val_{report['metric']}={report['best_val_metric']:.4f} test_{report['metric']}={report['test_metric_at_best_val']:.4f}"
    )
    if report["status"] != "ok":
        print(report["failure"], file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import build_run_data, evaluate, load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    base = ck.config
    cfg = load_config(args.config, args.overrides) if args.config or args.overrides else config_from_dict(base)
    data = build_run_data(cfg)
    mcfg = cfg.model_config(data.d_in, data.task, data.num_classes)
    result = {
        "checkpoint": str(args.checkpoint),
        "epoch": ck.header["train_state"]["epoch"],
        "val": evaluate(data.val, mcfg, ck.params, cfg.train.batch_size),
        "test": evaluate(data.test, mcfg, ck.params, cfg.train.batch_size),
    }
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        out = _prepare_out(args.out, args.force, args.out)
        (out / "eval_report.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _ablation_run(payload):
    cfg_dict, out_dir = payload
    from .train import train

    cfg = config_from_dict(cfg_dict)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "config.yaml").write_text(config_to_yaml(cfg), encoding="utf-8")
    return train(cfg, out_dir)


def cmd_ablate(args) -> int:
    from .config import _rename_out

    base = _resolve_config(args)
    values = args.values.split(",") if args.values else ABLATION_DEFAULTS[args.axis]
    key = ABLATION_KEYS[args.axis]
    out = _prepare_out(args.out, args.force, f"runs/ablate_{args.axis}")
    (out / "base_config.yaml").write_text(config_to_yaml(base), encoding="utf-8")
    jobs = []
    rows = []
    for value in values:
        value = value.strip()
        row = {"axis": args.axis, "value": value, "status": "failed", "best_epoch": "", "val_metric": "", "test_metric": "", "wall_time_s": "", "error": ""}
        try:
            cfg = config_from_dict(apply_overrides(_rename_out(base.to_dict()), [f"{key}={value}"]))
            jobs.append((len(rows), cfg.to_dict(), str(out / f"{args.axis}={value}")))
        except ConfigError as exc:
            row["error"] = str(exc)
        rows.append(row)

    def record(i, report=None, exc=None):
        row = rows[i]
        if exc is not None:
            row["error"] = f"{type(exc).__name__}: {exc}"
            return
        row.update(
            status=report["status"],
            best_epoch=report["best_epoch"],
            val_metric=report["best_val_metric"],
            test_metric=report["test_metric_at_best_val"],
            wall_time_s=round(report["timing"]["wall_time_s"], 3),
            error=report["failure"] or "",
        )
        row["metric"] = report["metric"]

    if args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.workers) as pool:
            futs = {pool.submit(_ablation_run, (d, o)): i for i, d, o in jobs}
            for fut in concurrent.futures.as_completed(futs):
                try:
                    record(futs[fut], fut.result())
                except Exception as exc:  # noqa: BLE001 - a failed point must not stop the sweep
                    record(futs[fut], exc=exc)
    else:
        for i, d, o in jobs:
            try:
                record(i, _ablation_run((d, o)))
            except Exception as exc:  # noqa: BLE001
                record(i, exc=exc)

    fields = ["axis", "value", "status", "metric", "best_epoch", "val_metric", "test_metric", "wall_time_s", "error"]
    csv_path = out / f"ablation_{args.axis}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in fields})
    table = format_table(rows)
    (out / f"ablation_{args.axis}.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def format_table(rows: list[dict]) -> str:
    head = f"{'value':>12} {'status':>9} {'best_ep':>7} {'val':>8} {'test':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        val = f"{r['val_metric']:.4f}" if isinstance(r["val_metric"], float) else "-"
        test = f"{r['test_metric']:.4f}" if isinstance(r["test_metric"], float) else "-"
        lines.append(f"{r['value']:>12} {r['status']:>9} {str(r['best_epoch']):>7} {val:>8} {test:>8}")
    return "\n".join(lines)


def cmd_gradcheck(args) -> int:
    from .analysis import model_gradcheck, probe_graph

    cfg = _resolve_config(args)
    d_in = 4
    mcfg = cfg.model_config(d_in, "graph_cls", 2)
    mcfg.layers, mcfg.heads, mcfg.hidden = args.layers, args.heads, args.hidden
    mcfg.dropout = mcfg.attn_dropout = 0.0
    if mcfg.pe == "rwse":
        mcfg.pe_dim = min(mcfg.pe_dim, 4)
    mcfg.validate()
    graph = probe_graph(args.nodes, seed=cfg.seed, d_in=d_in)
    res = model_gradcheck(mcfg, graph, seed=cfg.seed)
    for name, err in res.per_param.items():
        log.info("%-16s %.3e", name, err)
    ok = res.model_error <= args.tol and res.mask_sp_error <= 1e-6
    print(f"model max relative error: {res.model_error:.3e} (tol {args.tol:g})")
    print(f"dM/dsp max relative error: {res.mask_sp_error:.3e} (tol 1e-06)")
    print("PASS" if ok else "FAIL")
    if args.out:
        out = _prepare_out(args.out, args.force, args.out)
        (out / "gradcheck.json").write_text(
            json.dumps({"model_error": res.model_error, "mask_sp_error": res.mask_sp_error, "per_param": res.per_param, "passed": ok}, indent=2) + "\n",
            encoding="utf-8",
        )
    return EXIT_OK if ok else EXIT_CHECK


def cmd_inspect_attention(args) -> int:
    from .analysis import attention_mass_by_distance, run_with_attention
    from .graphs import load_graph_dataset
    from .train import build_run_data, load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(ck.config)
    ds = load_graph_dataset(args.dataset) if args.dataset else None
    data = build_run_data(cfg, ds)
    split = getattr(data, args.split)
    if not 0 <= args.graph_index < len(split):
        raise UsageError(f"graph index {args.graph_index} out of range for {args.split} split of size {len(split)}")
    mcfg = cfg.model_config(data.d_in, data.task, data.num_classes)
    batch = split.batch([args.graph_index])
    records = run_with_attention(batch, mcfg, ck.params)
    out = _prepare_out(args.out, args.force, "runs/inspect")
    n = int(batch.counts[0])
    np.savetxt(out / "psi.csv", records[0]["psi"][0, :n, :n], delimiter=",", fmt="%.17g")
    mass_rows = []
    for l, rec in enumerate(records):
        for h in range(mcfg.heads):
            np.savetxt(out / f"layer{l}_head{h}_attention.csv", rec["attn"][0, h, :n, :n], delimiter=",", fmt="%.17g")
            m = rec["mask"][0, h, :n, :n] if rec["mask"] is not None else np.ones((n, n))
            np.savetxt(out / f"layer{l}_head{h}_mask.csv", m, delimiter=",", fmt="%.17g")
        mass = attention_mass_by_distance(rec["attn"], rec["psi"], batch.valid)
        for h in range(mcfg.heads):
            for k in range(mass.shape[1]):
                mass_rows.append([l, h, k, repr(float(mass[h, k]))])
    with open(out / "psi_mass.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "psi_bucket", "mean_mass"])
        w.writerows(mass_rows)
    print(f"wrote {len(records) * mcfg.heads} attention/mask pairs to {out}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    if not args.out:
        raise UsageError("gen-synthetic needs --out FILE")
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} already exists; pass --force to overwrite")
    seed = args.seed if args.seed is not None else 0
    rng_args = dict(count=args.count, n_range=(args.n_min, args.n_max), seed=seed, d_in=args.d_in)
    if args.kind == "triangle":
        ds = synth_triangle_task(p_edge=0.15 if args.p_edge is None else args.p_edge, **rng_args)
    else:
        ds = synth_hopcount_regression(p_edge=0.2 if args.p_edge is None else args.p_edge, **rng_args)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph_dataset(ds, out)
    print(f"wrote {len(ds)} graphs to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "inspect-attention": cmd_inspect_attention,
    "gen-synthetic": cmd_gen_synthetic,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, GraphFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        log.exception("command failed")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
