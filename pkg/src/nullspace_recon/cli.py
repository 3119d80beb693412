"""Command-line driver: ``nullspace-recon <command> [options]``.

Commands
--------
gen-data      generate phantoms and measurements into ``<out>/data``
train         train one method, writing checkpoints and a CSV log
eval          metrics table and image panels for every configured method
uq-report     noise sweep and out-of-distribution report for an Unc method
oracle-check  invariant suite against independent oracles
config dump   print the effective configuration

Exit codes: 0 success, 1 invariant or training failure, 2 usage error.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import export
from .checks import run_oracle_checks
from .config import load_config, save_config
from .data import MANIFEST_NAME, load_manifest, read_dataset, write_dataset
from .exceptions import CorruptionError, ManifestError, StateError, TrainingFault
from .experiments import (evaluate, make_estimator, noise_sweep, ood_report, project_method,
                          relative_noise_levels)
from .objectives import as_magnitude
from .recon import METHODS, ReconMethod, method_properties, training_method

logger = logging.getLogger("nullspace_recon")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad invocation or missing prerequisite; maps to exit code 2."""


# -- helpers ----------------------------------------------------------------------------

def effective_config(args):
    cfg = load_config(args.config)
    if getattr(args, "full", False):
        cfg.apply_full()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.phantom.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    cfg.validate()
    return cfg


def _paths(cfg):
    root = Path(cfg.out)
    return {"root": root, "data": root / "data", "ckpt": root / "checkpoints",
            "eval": root / "eval", "uq": root / "uq"}


def _require_dataset(cfg, op):
    data_dir = _paths(cfg)["data"]
    if not (data_dir / MANIFEST_NAME).exists():
        raise UsageError(f"no dataset at {data_dir}; run gen-data first")
    manifest = load_manifest(data_dir)
    if manifest.operator_hash != op.descriptor_hash():
        raise UsageError(f"dataset at {data_dir} was generated for a different operator; "
                         "rerun gen-data with --force")
    return data_dir


def _checkpoint(cfg, method, which="final"):
    return _paths(cfg)["ckpt"] / method / f"{which}.bin"


def _load_method(cfg, op, method, which="final"):
    """Fitted estimator for ``method`` or None when its checkpoint is missing."""
    if method == "Pseudoinverse":
        return ReconMethod(op, "Pseudoinverse")
    source = training_method(method)
    path = _checkpoint(cfg, source, which)
    if not path.exists():
        return None
    est = ReconMethod.load(path, op)
    return project_method(est, method) if source != method else est


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = effective_config(args)
    if args.train is not None:
        cfg.n_train = args.train
    if args.test is not None:
        cfg.n_test = args.test
    if args.val is not None:
        cfg.n_val = args.val
    cfg.validate()
    data_dir = _paths(cfg)["data"]
    if data_dir.exists() and any(data_dir.iterdir()) and not args.force:
        raise UsageError(f"{data_dir} is not empty; pass --force to overwrite")
    op = cfg.build_operator(compute_svd=False)
    sizes = {"train": cfg.n_train, "test": cfg.n_test}
    if cfg.n_val:
        sizes["val"] = cfg.n_val
    start = time.perf_counter()
    manifest = write_dataset(data_dir, op, cfg.phantom, sizes)
    save_config(cfg, _paths(cfg)["root"] / "config.yaml")
    counts = ", ".join(f"{k} {v['count']}" for k, v in manifest.splits.items())
    print(f"wrote {data_dir}: {counts}; operator {manifest.operator_hash} "
          f"({time.perf_counter() - start:.1f}s)")
    return EXIT_OK


def cmd_train(args):
    cfg = effective_config(args)
    method = args.method
    if method_properties(method)[3]:
        raise UsageError(f"{method} reuses the weights of {training_method(method)}; train that")
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.lr is not None:
        cfg.train.learning_rate = args.lr
    op = cfg.build_operator()
    data_dir = _require_dataset(cfg, op)
    out_dir = _paths(cfg)["ckpt"] / method
    final = out_dir / "final.bin"
    if final.exists() and not args.force:
        raise UsageError(f"{final} exists; pass --force to retrain")
    _, splits = read_dataset(data_dir, ["train"] + (["val"] if cfg.n_val else []))
    x_tr, y_tr = splits["train"]
    eval_set = None
    if "val" in splits:
        x_val, y_val = splits["val"]
        eval_set = (y_val, x_val)
    est = make_estimator(cfg, op, method, verbose=args.verbose)
    rows = []

    def on_epoch(record):
        rows.append(record)
        val = record.get("val_psnr", float("nan"))
        print(f"{method} epoch {record['epoch']:3d}  loss {record['loss']:.6g}  val PSNR {val:.2f}",
              flush=True)

    start = time.perf_counter()
    try:
        est.fit(y_tr, x_tr, eval_set=eval_set, callback=on_epoch)
    except TrainingFault as exc:
        out_dir.mkdir(parents=True, exist_ok=True)
        export.write_csv(out_dir / "train_log.csv", rows, ["epoch", "loss", "val_psnr"])
        export.write_json(out_dir / "fault.json", {"method": method, "error": str(exc),
                                                   "batch_seed": exc.batch_seed})
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_FAIL
    export.write_csv(out_dir / "train_log.csv", rows, ["epoch", "loss", "val_psnr"])
    est.save(final)
    if method != "Pseudoinverse":
        est.save(out_dir / "best.bin", states=est.best_state_)
    save_config(cfg, out_dir / "config.yaml")
    print(f"saved {final} ({time.perf_counter() - start:.0f}s)")
    return EXIT_OK


def cmd_eval(args):
    cfg = effective_config(args)
    op = cfg.build_operator()
    data_dir = _require_dataset(cfg, op)
    _, splits = read_dataset(data_dir, ["test"])
    x_te, y_te = splits["test"]
    methods = [args.method] if args.method else cfg.methods
    if "Pseudoinverse" not in methods:
        methods = ["Pseudoinverse"] + list(methods)
    estimators = {m: _load_method(cfg, op, m, args.checkpoint) for m in methods}
    absent = [m for m, e in estimators.items() if e is None]
    for m in absent:
        print(f"note: no checkpoint for {m}; listed as absent")
    rows, per_image, kept = evaluate(op, estimators, y_te, x_te, n_keep=cfg.eval.n_panels)
    out = _paths(cfg)["eval"]
    fields = ["method", "status", "psnr", "psnr_std", "ssim", "mae", "dc_gap", "dc_gap_max",
              "seconds"]
    export.write_csv(out / "metrics.csv", rows, fields)
    export.write_csv(out / "per_image.csv", per_image)
    export.write_json(out / "metrics.json", {"config_digest": cfg.digest(), "n_test": len(x_te),
                                             "psnr_peak": "per-image max of ground truth",
                                             "methods": rows})
    _write_panels(op, out, x_te, kept, cfg.eval.n_panels)
    print(f"{'method':<15}{'PSNR':>8}{'SSIM':>8}{'MAE':>10}{'DC gap':>11}")
    for r in rows:
        if r["status"] == "absent":
            print(f"{r['method']:<15}{'absent':>8}")
        else:
            print(f"{r['method']:<15}{r['psnr']:8.2f}{r['ssim']:8.4f}{r['mae']:10.5f}"
                  f"{r['dc_gap']:11.2e}")
    return EXIT_OK


def _write_panels(op, out, truths, kept, n_panels):
    methods = [m for m in METHODS if m in kept]
    n = min(n_panels, len(truths))
    if n == 0 or not methods:
        return
    columns = ["ground truth"] + methods
    rows = []
    for i in range(n):
        row = [as_magnitude(truths[i])]
        for m in methods:
            img = as_magnitude(kept[m][i])
            row.append(img)
            export.write_png16(out / "recons" / f"{m}_{i:03d}.png", img, 0.0,
                               float(row[0].max()) or 1.0)
        rows.append(row)
    export.render_panels(out / "panels.png", columns, rows)


def cmd_uq_report(args):
    cfg = effective_config(args)
    method = args.method or "NullSpace1Unc"
    if not method_properties(method)[2]:
        raise TypeError(f"uq-report needs an uncertainty-aware method, got {method!r}")
    op = cfg.build_operator()
    data_dir = _require_dataset(cfg, op)
    est = _load_method(cfg, op, method, args.checkpoint)
    if est is None:
        raise UsageError(f"no checkpoint for {method}; run train --method {method} first")
    _, splits = read_dataset(data_dir, ["test"])
    x_te = splits["test"][0][:cfg.eval.uq_images]
    deltas = relative_noise_levels(op, x_te, cfg.eval.noise_levels)
    rows, per_level, points = noise_sweep(est, x_te, deltas, seed=cfg.eval.noise_seed,
                                          oracle_sigma=args.oracle_sigma)
    out = _paths(cfg)["uq"]
    export.write_csv(out / "noise_sweep.csv", rows)
    export.render_scatter(out / "noise_sweep.png", points)
    ood = {}
    for kind in ("SquareInsert", "SaltPepperRegion"):
        ood_rows, examples = ood_report(est, x_te[:cfg.eval.ood_images], kind, cfg.eval)
        export.write_csv(out / f"ood_{kind}.csv", ood_rows)
        for i, ex in enumerate(examples[:cfg.eval.n_panels]):
            export.render_triptych(out / f"ood_{kind}_{i:02d}.png", ex["x_pinv"], ex["recon"],
                                   ex["sigma"], ex["region"], title=f"{kind}, image {i}")
            np.savetxt(out / f"ood_{kind}_{i:02d}_sigma.csv", ex["sigma"], delimiter=",",
                       fmt="%.6g")
        ratios = [r["ratio"] for r in ood_rows]
        ood[kind] = {"mean_ratio": float(np.mean(ratios)), "min_ratio": float(np.min(ratios)),
                     "images": len(ratios)}
    summary = {"method": method, "oracle_sigma": args.oracle_sigma,
               "noise_fractions": cfg.eval.noise_levels,
               "levels": [{"delta": d, **per_level[float(d)]} for d in deltas],
               "ood": ood}
    export.write_json(out / "summary.json", summary)
    print(f"{'delta':>12}{'mean sigma':>12}{'pearson r':>11}")
    for d in deltas:
        s = per_level[float(d)]
        print(f"{d:12.4g}{s['mean_sigma']:12.5f}{s['pearson_r']:11.3f}")
    for kind, s in ood.items():
        print(f"{kind}: sigma inside/outside region {s['mean_ratio']:.2f} "
              f"(min {s['min_ratio']:.2f} over {s['images']} images)")
    return EXIT_OK


def cmd_oracle_check(args):
    cfg = effective_config(args)
    n_angles = cfg.ct.n_angles
    results = run_oracle_checks(fault=args.fault, grid=cfg.grid, n_angles=n_angles)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if args.out:
        export.write_json(Path(args.out) / "oracle_check.json",
                          [{"name": r.name, "measured": r.measured, "tolerance": r.tolerance,
                            "passed": r.passed, "seconds": r.seconds} for r in results])
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_config_dump(args):
    print(effective_config(args).dump(), end="")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file (defaults built in)")
    common.add_argument("--seed", type=int, help="override training and phantom seeds")
    common.add_argument("--full", action="store_true", help="192x192 grid with 60 angles")
    common.add_argument("--out", metavar="DIR", help="output directory (config: out)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="nullspace-recon", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--train", type=int, help="number of training samples")
    p.add_argument("--test", type=int, help="number of test samples")
    p.add_argument("--val", type=int, help="number of validation samples")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one method")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--force", action="store_true", help="overwrite existing checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate trained methods on the test split")
    p.add_argument("--method", choices=METHODS, help="evaluate a single method")
    p.add_argument("--checkpoint", choices=("final", "best"), default="final")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("uq-report", parents=[common], help="uncertainty report for an Unc method")
    p.add_argument("--method", choices=METHODS, default="NullSpace1Unc")
    p.add_argument("--checkpoint", choices=("final", "best"), default="final")
    p.add_argument("--oracle-sigma", action="store_true",
                   help="replace predicted sigma by |residual| (diagnostic; r must be 1)")
    p.set_defaults(func=cmd_uq_report)

    p = sub.add_parser("oracle-check", parents=[common], help="run the invariant suite")
    p.add_argument("--fault", choices=("adjoint",), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("config", help="configuration utilities")
    csub = p.add_subparsers(dest="config_command", required=True)
    d = csub.add_parser("dump", parents=[common], help="print the effective configuration")
    d.set_defaults(func=cmd_config_dump)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ManifestError, TypeError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StateError, CorruptionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
