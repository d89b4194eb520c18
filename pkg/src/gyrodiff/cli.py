"""Command-line entry point: ``gyrodiff <subcommand> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checks
from . import training as tr
from .config import resolve_config
from .datasets import load_jsonl, save_jsonl
from .metrics import gen_report


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", help="output directory (same as --set out_dir=...)")


def _cfg(args):
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out_dir={args.out}")
    return resolve_config(args.config, overrides)


def cmd_train_ae(args):
    cfg = _cfg(args)
    res = tr.train_ae(cfg)
    last = res.log[-1] if res.log else {}
    print(f"ae checkpoint {res.checkpoint} sha256={res.sha256} last={last}")


def cmd_train_diff(args):
    cfg = _cfg(args)
    res = tr.train_diffusion(cfg)
    last = res.log[-1] if res.log else {}
    print(f"diffusion checkpoint {res.checkpoint} sha256={res.sha256} last={last}")


def cmd_generate(args):
    cfg = _cfg(args)
    if args.condition is not None:
        cfg = cfg.with_overrides({"condition": args.condition})
    graphs, report = tr.generate(cfg, count=args.count)
    print(f"generated {len(graphs)} graphs; report={report}")


def cmd_predict(args):
    cfg = _cfg(args)
    _, _, metric = tr.predict(cfg, split=args.split)
    name = "mae" if cfg.task == "graph_regress" else "accuracy"
    print(f"{name}={metric!r}")


def cmd_ablate(args):
    cfg = _cfg(args)
    for row in tr.ablate_self_guidance(cfg):
        print(f"{row['variant']:12s} validity={row['validity']:.4f} uniqueness={row['uniqueness']:.4f} novelty={row['novelty']:.4f}")


def cmd_evaluate(args):
    cfg = _cfg(args)
    tr.setup(cfg)
    path = Path(args.input) if args.input else tr.out_path(cfg, "generated.jsonl")
    generated = load_jsonl(path)
    train = tr.splits(cfg, tr.load_graphs(cfg))["train"]
    if not generated:
        print("no graphs to evaluate")
        return
    report = gen_report(generated, train)
    report.to_csv(tr.out_path(cfg, "eval_report.csv"))
    print(report)


def cmd_gradcheck(args):
    cfg = _cfg(args)
    results = checks.gradient_suite(h=args.h, seed=cfg.seed)
    checks.write_gradcheck(tr.out_path(cfg, "gradcheck.csv"), results)
    worst = max(e for _, e in results)
    for name, err in results:
        print(f"{name:55s} {err:.3e}")
    print(f"worst={worst:.3e} {'PASS' if worst < args.tol else 'FAIL'}")
    return 0 if worst < args.tol else 1


def cmd_bench_stability(args):
    cfg = _cfg(args)
    rows = checks.bench_stability(cfg)
    gyro = sum(r["nonfinite"] for r in rows if r["path"] == "gyrokernel")
    high = sum(r["failures"] for r in rows if r["path"] != "gyrokernel" and r["sweep_value"] >= 30)
    print(f"rows={len(rows)} gyrokernel_nonfinite={gyro} exp_log_failures_at_norm>=30={high}")


def cmd_export_embeddings(args):
    cfg = _cfg(args)
    tr.setup(cfg)
    graphs = tr.load_graphs(cfg)
    k_n, k_e = tr.type_counts(cfg, graphs)
    ae, _ = tr.load_autoencoder(cfg, tr.out_path(cfg, "ae.ckpt"), k_n, k_e)
    labels = None
    cent_path = tr.out_path(cfg, "centroids.csv")
    if cent_path.exists():
        C = np.loadtxt(cent_path, delimiter=",", ndmin=2)
        ZG = np.stack([zg.double().numpy() for _, _, zg in tr.graph_latents(ae, graphs, cfg)])
        labels = ((ZG[:, None, :] - C[None]) ** 2).sum(-1).argmin(1)
    path = checks.export_embeddings(cfg, ae, graphs, labels)
    print(f"wrote {path}")


def cmd_verify_prop31(args):
    cfg = _cfg(args)
    rows = checks.prop31_rows(grid=args.grid)
    checks.write_rows(tr.out_path(cfg, "prop31.csv"), rows, ["k1", "k2", "measured", "expected", "rel_error"])
    worst = max(r["rel_error"] for r in rows)
    print(f"pairs={len(rows)} worst_rel_error={worst:.3e} {'PASS' if worst < 0.01 else 'FAIL'}")
    return 0 if worst < 0.01 else 1


def cmd_make_data(args):
    cfg = _cfg(args)
    graphs = tr.load_graphs(cfg)
    path = tr.out_path(cfg, "dataset.jsonl")
    save_jsonl(graphs, path)
    tr.update_manifest(cfg, "make-data", {"dataset.jsonl": tr._sha(path)})
    print(f"wrote {len(graphs)} graphs to {path}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gyrodiff", description="Riemannian latent graph diffusion at desk scale")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.set_defaults(fn=fn)
        return p

    add("train-ae", cmd_train_ae, "train the gyrokernel autoencoder")
    add("train-diff", cmd_train_diff, "train the latent denoiser on frozen autoencoder latents")
    p = add("generate", cmd_generate, "sample graphs and write generated.jsonl + gen_report.csv")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--condition", default=None, help="target value for conditional generation")
    p = add("predict", cmd_predict, "prediction as conditional generation")
    p.add_argument("--split", default=None, choices=["train", "val", "test"])
    p = add("evaluate", cmd_evaluate, "validity / uniqueness / novelty / MMD of a JSONL file")
    p.add_argument("--input", default=None)
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every learnable path (64-bit)")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    add("bench-stability", cmd_bench_stability, "exp/log round trips vs gyrokernel features near the boundary")
    add("export-embeddings", cmd_export_embeddings, "write graph latents and per-manifold decoder weights")
    p = add("verify-prop31", cmd_verify_prop31, "eigenvalue additivity of product eigenfunctions on the torus")
    p.add_argument("--grid", type=int, default=256)
    add("make-data", cmd_make_data, "write the configured dataset as JSONL")
    add("ablate-self-guidance", cmd_ablate, "paired runs with and without self-guidance -> ablation_self_guidance.csv")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    rc = args.fn(args)
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
