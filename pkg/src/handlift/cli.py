"""Command-line entry point: ``handlift <subcommand> [options]``.

Subcommands: generate, train, eval, triangulate, sweep, gradcheck, plot-data.
``--views`` takes either a single count N (the first N cameras of the rig)
or a comma list of camera indices; ``sweep --views`` takes a list of counts.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from .config import FULL_SCHEDULE, dump_config, load_config
from .errors import HandliftError
from .metrics import THRESHOLDS
from .synthetic import PROFILES, generate_dataset, generate_rig, read_dataset, write_dataset

SWEEP_COLUMNS = ("setting", "value", "mpjpe", "pa_j", "auc", "conf_err_corr", "n_poses")
DATASET_NAME = "dataset.bin"


class UsageError(Exception):
    """Bad arguments that argparse cannot see; exit code 2."""


def int_list(text):
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def view_subset(spec, n_rig):
    """[N] -> first N cameras; [i, j, ...] -> those indices."""
    if spec is None:
        return None
    views = list(range(spec[0])) if len(spec) == 1 else list(spec)
    if len(views) < 2:
        raise UsageError("need at least 2 views")
    if max(views) >= n_rig or min(views) < 0 or len(set(views)) != len(views):
        raise UsageError(f"bad view selection {views} for a {n_rig}-camera rig")
    return views


def _dataset_path(path):
    path = Path(path)
    return path / DATASET_NAME if path.is_dir() else path


def load_data(path, seed, sequences, frames, cameras, profile="detector-weak", test=False, rig=None):
    """Read a dataset file (or a directory holding dataset.bin); without a path
    generate one.  Generated test sets use ``rig``, by default the rig a
    generated training set of the same seed has."""
    if path is not None:
        return read_dataset(_dataset_path(path))
    if test:
        return generate_dataset(sequences, frames, profile, seed=seed + 1000,
                                rig=rig or generate_rig(cameras, seed=seed))
    return generate_dataset(sequences, frames, profile, seed=seed, n_views=cameras)


def write_rows(rows, columns, path=None):
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", newline="") if path is not None else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    finally:
        if path is not None:
            fh.close()


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def _report_row(setting, value, rep):
    return {"setting": setting, "value": value, **rep.row()}


def _load_model(path):
    from .train import load_checkpoint
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _config(args, **extra):
    over = dict(seed=args.seed, max_steps=getattr(args, "max_steps", None), **extra)
    if getattr(args, "full_schedule", False):
        over.update(FULL_SCHEDULE)
    return load_config(args.config, **over)


# ---------------------------------------------------------------- subcommands

def cmd_generate(args):
    ds = generate_dataset(args.sequences, args.frames, args.profile, seed=args.seed or 0, n_views=args.cameras)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = write_dataset(ds, out / DATASET_NAME)
    print(path)
    return 0


def cmd_train(args):
    from .train import train
    extra = {}
    if args.views is not None:
        if len(args.views) != 1:
            raise UsageError("train --views takes a single count")
        extra["views"] = args.views[0]
    cfg = _config(args, **extra)
    data = load_data(args.data, cfg.seed, args.sequences, args.frames, args.cameras, cfg.profile)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    res = train(cfg, data, out_dir=out)
    print(res.checkpoint)
    return 0


def cmd_eval(args):
    from .train import evaluate
    model, _ = _load_model(args.checkpoint)
    seed = model.cfg.seed if args.seed is None else args.seed
    data = load_data(args.data, seed, args.sequences, args.frames, args.cameras, model.cfg.profile, test=True)
    views = view_subset(args.views, len(data.rig)) or list(range(model.cfg.views))
    rep = evaluate(model, data, views, seed=seed, output=args.output)
    write_rows([_report_row("views", ",".join(map(str, views)), rep)], SWEEP_COLUMNS,
               Path(args.out) / "eval.csv" if args.out else None)
    return 0


def cmd_triangulate(args):
    from .train import baseline_dlt
    seed = args.seed or 0
    data = load_data(args.data, seed, args.sequences, args.frames, args.cameras, args.profile, test=True)
    views = view_subset(args.views, len(data.rig)) or list(range(len(data.rig)))
    rep = baseline_dlt(data, views)
    write_rows([_report_row("dlt_views", ",".join(map(str, views)), rep)], SWEEP_COLUMNS,
               Path(args.out) / "triangulate.csv" if args.out else None)
    return 0


def cmd_sweep(args):
    from .train import baseline_dlt, evaluate, train
    cfg = _config(args)
    axes = {"views": args.views, "T": args.T, "K": args.K}
    if not any(axes.values()):
        axes["views"] = [2, 4, 6, 8]
    train_data = None
    if args.checkpoint is None or args.T or args.K:
        train_data = load_data(args.data, cfg.seed, args.sequences, args.frames, args.cameras, cfg.profile)
    test = load_data(args.test_data, cfg.seed, args.test_sequences, args.frames, args.cameras, cfg.profile,
                     test=True, rig=train_data.rig if train_data is not None else None)
    for n in axes["views"] or []:
        view_subset([n], len(test.rig))
    rows = []
    if axes["views"]:
        model = _load_model(args.checkpoint)[0] if args.checkpoint else train(cfg, train_data).model
        for n in axes["views"]:
            rows.append(_report_row("views", n, evaluate(model, test, range(n), seed=cfg.seed)))
            if args.baseline:
                rows.append(_report_row("dlt_views", n, baseline_dlt(test, range(n))))
    for name in ("T", "K"):
        for val in axes[name] or []:
            c = cfg.replace(**{name: val})
            c.validate()
            model = train(c, train_data).model
            rows.append(_report_row(name, val, evaluate(model, test, range(c.views), seed=c.seed)))
    out = None
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        out = Path(args.out) / "sweep.csv"
    write_rows(rows, SWEEP_COLUMNS, out)
    return 0


def cmd_gradcheck(args):
    from .gradsuite import TERMS, check_losses
    seeds = args.seeds if args.seed is None else [args.seed]
    ok = True
    for seed in seeds:
        reports = check_losses(seed, terms=args.terms or TERMS)
        for term, rep in reports.items():
            worst = max(rep["per_param"].items(), key=lambda kv: kv[1]["max_rel_err"], default=("-", None))[0]
            print(f"seed {seed} {term:7s} {'ok' if rep['passed'] else 'FAIL'} "
                  f"max_rel_err {rep['max_rel_err']:.2e} ({worst})")
            ok &= bool(rep["passed"])
    return 0 if ok else 1


def cmd_plot_data(args):
    from .train import baseline_dlt, evaluate, write_loss_csv
    model, header = _load_model(args.checkpoint)
    seed = model.cfg.seed if args.seed is None else args.seed
    data = load_data(args.data, seed, args.sequences, args.frames, args.cameras, model.cfg.profile, test=True)
    views = view_subset(args.views, len(data.rig)) or list(range(model.cfg.views))
    rep = evaluate(model, data, views, seed=seed)
    base = baseline_dlt(data, views)
    out = Path(args.out or "plots")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("threshold_mm", "pck_model", "pck_dlt"))
        for th, a, b in zip(THRESHOLDS, rep.pck, base.pck):
            w.writerow((repr(float(th)), repr(float(a)), repr(float(b))))
    write_loss_csv(header["history"], out / "loss.csv")
    print(out / "pck.csv")
    print(out / "loss.csv")
    return 0


# ---------------------------------------------------------------- parser

def _data_args(p, sequences, test_sequences=None):
    p.add_argument("--data", help="dataset file or directory with dataset.bin (default: generate)")
    p.add_argument("--sequences", type=int, default=sequences, help="sequences to generate without --data")
    if test_sequences is not None:
        p.add_argument("--test-data", help="test dataset (default: generate)")
        p.add_argument("--test-sequences", type=int, default=test_sequences)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--cameras", type=int, default=8, help="rig size when generating")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--views", type=int_list, default=None, help="N (first N cameras) or i,j,k")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="handlift", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--profile", default="detector-weak", choices=sorted(PROFILES))
    p.add_argument("--sequences", type=int, default=200)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--cameras", type=int, default=8)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train a model")
    _data_args(p, 200)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--full-schedule", action="store_true", help="30 epochs, batch 8, lr 3e-4, decay at 20")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", default="joints3d", choices=("joints3d", "skeleton3d", "query3d"))
    _data_args(p, 50)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("triangulate", parents=[common], help="confidence-weighted DLT baseline")
    p.add_argument("--profile", default="detector-weak", choices=sorted(PROFILES))
    _data_args(p, 50)
    p.set_defaults(func=cmd_triangulate)

    p = sub.add_parser("sweep", parents=[common], help="metrics over views, window length or block count")
    p.add_argument("--T", type=int_list, default=None, help="window lengths to train, e.g. 1,3,5,7")
    p.add_argument("--K", type=int_list, default=None, help="block counts to train, e.g. 1,2,3,4")
    p.add_argument("--checkpoint", help="reuse this model for the views sweep")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--full-schedule", action="store_true")
    p.add_argument("--baseline", action="store_true", help="add DLT rows for each view count")
    _data_args(p, 200, test_sequences=50)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p.add_argument("--seeds", type=int_list, default=[0, 1, 2])
    p.add_argument("--terms", type=lambda s: s.split(","), default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot-data", parents=[common], help="write pck.csv and loss.csv for plotting")
    p.add_argument("--checkpoint", required=True)
    _data_args(p, 50)
    p.set_defaults(func=cmd_plot_data)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"handlift {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (HandliftError, ValueError, OSError) as exc:
        print(f"handlift {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
