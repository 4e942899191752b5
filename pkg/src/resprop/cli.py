"""Experiment runner: train per config and seed, analyze checkpoints, plot curves.

Verbs: run, analyze, plot, presets, fetch-data. Exit codes: 0 success,
1 runtime failure, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as C
from . import data as D
from . import network as N
from . import propagation as P
from . import plotting
from . import train as T
from .autograd import Tensor
from .units import ActivationOrder, ConstantScale

FAIL_THRESHOLD_PCT = 20.0


def _load_datasets(cfg: C.ExperimentConfig):
    name = cfg["data.dataset"]
    if name == "synthetic":
        n = cfg["data.synthetic_n"]
        size = cfg["data.synthetic_size"]
        seed = cfg["data.synthetic_seed"]
        noise = cfg["data.synthetic_noise"]
        classes = cfg["network.num_classes"]
        train_set = D.synthetic(n, classes, size, seed=seed, noise=noise)
        test_set = D.synthetic(max(classes * 20, n // 4 // classes * classes), classes, size,
                               seed=seed + 1, noise=noise)
        return train_set, test_set
    loader = D.load_cifar10 if name == "cifar10" else D.load_cifar100
    train_set, test_set = loader(cfg["data.dir"])
    if cfg["data.subset"]:
        train_set = D.subset(train_set, cfg["data.subset"], cfg["data.subset_seed"])
    return train_set, test_set


def run_seed(cfg: C.ExperimentConfig, seed: int, out_dir: str, deterministic: bool,
             train_set, test_set) -> dict:
    """Train one seed; returns its summary record."""
    net = N.build_network(C.network_config(cfg), seed, dtype=np.float32)
    tcfg = C.train_config(cfg, seed)
    csv_path = os.path.join(out_dir, f"metrics_seed{seed}.csv")
    ckpt_every = cfg["run.checkpoint_every"]

    result = {"seed": seed, "metrics_csv": csv_path, "fail": False,
              "final_test_err": None, "final_train_loss": None, "nan_iteration": None}
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(T.METRICS_HEADER + "\n")
        try:
            for row in T.train(net, train_set, tcfg, test_set=test_set,
                               deterministic=deterministic):
                f.write(T.format_metrics_row(row) + "\n")
                result["final_train_loss"] = row.train_loss
                if row.test_err_pct is not None:
                    result["final_test_err"] = row.test_err_pct
                if ckpt_every and row.iter % ckpt_every == 0:
                    N.save_checkpoint(net, os.path.join(out_dir, f"ckpt_seed{seed}_it{row.iter}.bin"))
        except T.TrainDivergence as e:
            print(f"seed {seed}: {e}", file=sys.stderr)
            result["fail"] = True
            result["nan_iteration"] = int(str(e).rsplit(" ", 1)[-1])
    N.save_checkpoint(net, os.path.join(out_dir, f"ckpt_seed{seed}_final.bin"))
    if result["final_test_err"] is not None and result["final_test_err"] > FAIL_THRESHOLD_PCT:
        result["fail"] = True
    return result


def cmd_run(args) -> int:
    cfg = C.load_config(args.config)
    if args.deterministic:
        cfg.set("run.deterministic", True)
    seeds = [args.seed] if args.seed is not None else list(cfg["run.seeds"])
    out_dir = args.out or cfg["run.out"]
    os.makedirs(out_dir, exist_ok=True)
    deterministic = cfg["run.deterministic"]

    train_set, test_set = _load_datasets(cfg)
    per_seed = []
    for seed in seeds:
        per_seed.append(run_seed(cfg, seed, out_dir, deterministic, train_set, test_set))
        r = per_seed[-1]
        status = "fail" if r["fail"] else "ok"
        err = "nan" if r["final_test_err"] is None else f"{r['final_test_err']:.2f}%"
        print(f"seed {seed}: test_err {err} train_loss "
              f"{r['final_train_loss'] if r['final_train_loss'] is not None else float('nan'):.4f} [{status}]")

    errs = [r["final_test_err"] for r in per_seed if r["final_test_err"] is not None]
    summary = {
        "config": args.config,
        "seeds": seeds,
        "per_seed": per_seed,
        "median_test_err": float(np.median(errs)) if errs else None,
        "mean_test_err": float(np.mean(errs)) if errs else None,
        "std_test_err": float(np.std(errs)) if errs else None,
        "fail": all(r["fail"] for r in per_seed),
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    if errs:
        print(f"median {summary['median_test_err']:.2f}%  "
              f"mean {summary['mean_test_err']:.2f}% +/- {summary['std_test_err']:.2f}"
              f"{'  [fail]' if summary['fail'] else ''}")
    else:
        print("all seeds diverged [fail]")
    return 0


def _analysis_slice(cfg, net):
    spec = cfg["analysis.slice"]
    if spec != "auto":
        try:
            lo, hi = (int(p) for p in spec.split(","))
        except ValueError as e:
            raise C.ConfigError(f"analysis.slice must be 'auto' or 'l,L', got {spec!r}") from e
        return lo, hi
    slices = P.stage_slices(net)
    stage, lo, hi = max(slices, key=lambda s: s[2] - s[1])
    return lo, hi


def cmd_analyze(args) -> int:
    cfg = C.load_config(args.config)
    out_dir = args.out or cfg["run.out"]
    os.makedirs(out_dir, exist_ok=True)

    net = N.build_network(C.network_config(cfg), 0, dtype=np.float64)
    if args.checkpoint:
        N.load_checkpoint(net, args.checkpoint)

    train_set, _ = _load_datasets(cfg)
    nb = min(cfg["analysis.batch"], train_set.n)
    x = Tensor(train_set.images[:nb].astype(np.float64))
    labels = train_set.labels[:nb]
    lo, hi = _analysis_slice(cfg, net)
    order = net.cfg.order

    report: dict = {"checkpoint": args.checkpoint, "slice": [lo, hi], "order": order.value}
    if cfg["analysis.telescope"]:
        residual = P.telescope_check(net, x, lo, hi)
        report["telescope_residual"] = residual
        note = ""
        if order not in (ActivationOrder.FULL_PREACT,) and residual > 1e-6:
            note = "  (expected: after-addition function is not the identity)"
        print(f"telescope residual over units [{lo},{hi}): {residual:.3e}{note}")
        report["telescope_note"] = note.strip()
    if cfg["analysis.decompose"]:
        dec = P.gradient_decompose(net, x, labels, lo, hi)
        closure = float(np.abs(dec.total - (dec.direct + dec.through_weights)).max())
        report["decompose_closure"] = closure
        report["direct_norm"] = float(np.linalg.norm(dec.direct))
        report["through_weights_norm"] = float(np.linalg.norm(dec.through_weights))
        print(f"gradient split over [{lo},{hi}): |direct| {report['direct_norm']:.4e}  "
              f"|through weights| {report['through_weights_norm']:.4e}  closure {closure:.1e}")
    if cfg["analysis.lambda_check"]:
        if not isinstance(net.cfg.shortcut, ConstantScale):
            print("lambda check skipped: network does not use constant-scale shortcuts",
                  file=sys.stderr)
        else:
            check_net = net.clone()
            P.zero_branches(check_net)
            ratio = P.lambda_product_check(check_net, x, labels, lo, hi)
            lam = net.cfg.shortcut.lam
            report["lambda_ratio"] = ratio
            report["lambda_expected"] = lam ** (hi - lo)
            print(f"gradient ratio across [{lo},{hi}): {ratio:.6e} "
                  f"(lambda^{hi - lo} = {lam ** (hi - lo):.6e})")
    if cfg["analysis.profile"]:
        rows = P.signal_magnitude_profile(net, x, labels)
        path = os.path.join(out_dir, "profile.csv")
        P.write_profile_csv(rows, path)
        print(f"per-unit signal profile written to {path}")

    with open(os.path.join(out_dir, "analysis.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    return 0


def cmd_plot(args) -> int:
    plotting.write_plot(args.csvs, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_presets(args) -> int:
    catalog = C.preset_catalog()
    if args.show:
        print(C.preset_config(args.show).to_text(), end="")
        return 0
    for name in catalog:
        print(name)
    return 0


def cmd_fetch_data(_args) -> int:
    print(D.DOWNLOAD_INFO, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resprop",
                                     description="Residual-unit ablation and propagation lab")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="train per config, one metrics CSV per seed")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None, help="override run.seeds with one seed")
    p_run.add_argument("--deterministic", action="store_true")
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(fn=cmd_run)

    p_an = sub.add_parser("analyze", help="propagation checks on a checkpoint")
    p_an.add_argument("--config", required=True)
    p_an.add_argument("--checkpoint", default=None)
    p_an.add_argument("--out", default=None)
    p_an.set_defaults(fn=cmd_analyze)

    p_plot = sub.add_parser("plot", help="render metrics CSVs to one SVG")
    p_plot.add_argument("csvs", nargs="+")
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(fn=cmd_plot)

    p_pre = sub.add_parser("presets", help="list bundled presets or show one as config text")
    p_pre.add_argument("--show", default=None)
    p_pre.set_defaults(fn=cmd_presets)

    p_fetch = sub.add_parser("fetch-data", help="print dataset URLs and checksums")
    p_fetch.set_defaults(fn=cmd_fetch_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (C.ConfigError, D.DataError, P.SliceError, plotting.PlotError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (T.TrainError, N.CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
