"""Command-line entry point: ``xaimeter {gen-data,train,evaluate,report}``.

Exit codes: 0 success, 1 usage error, 2 input-integrity error, 3 runtime failure.
"""
import argparse
import csv
import json
import logging
import os
import secrets
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import benchmark as B
from . import datasets as D
from . import metrics as M
from .explainers import EXPLAINER_KINDS, parse_explainers, explain, save_saliency_png
from .model import (CheckpointError, ClassLogitModel, TrainConfig, accuracy, file_checksum, load_model,
                    save_model, toy_cnn, train)
from .perturbation import STRATEGIES, SamplerConfig

log = logging.getLogger("xaimeter")

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class IntegrityError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get("XAIMETER_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"XAIMETER_SEED must be an integer, got {env!r}") from None
    return secrets.randbits(32)


def _write_run_config(out_dir, command, cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run-config.json", "w") as fh:
        json.dump({"command": command, "version": __version__, **cfg}, fh, indent=2, sort_keys=True)


def _existing_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {path} does not exist")
    return p


def _load_model_checked(path):
    if not Path(path).is_file():
        raise UsageError(f"model checkpoint {path} does not exist")
    try:
        return load_model(path), file_checksum(path)
    except CheckpointError as exc:
        raise IntegrityError(f"{path}: {exc}") from None


def _load_data(args):
    if args.data is not None:
        root = _existing_dir(args.data, "dataset directory")
        try:
            if (root / "images").is_dir():
                return D.load_dataset_dir(root)
            return D.load_external_dataset(root, args.gaze)
        except (ValueError, FileNotFoundError) as exc:
            raise IntegrityError(str(exc)) from None
    if args.synthetic is None:
        raise UsageError("give --data DIR or --synthetic N")
    if args.synthetic < 1:
        raise UsageError("--synthetic must be >= 1")
    return D.gen_synthetic_dataset(args.synthetic, args.size, args.classes, args.data_seed)


# ------------------------------------------------------------- commands

def cmd_gen_data(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    seed = _resolve_seed(args.seed)
    try:
        ds = D.gen_synthetic_dataset(args.n, args.size, args.classes, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    D.save_dataset(ds, args.out)
    _write_run_config(args.out, "gen-data", {"n": args.n, "size": args.size, "classes": args.classes,
                                             "seed": seed, "out": str(args.out)})
    print(f"wrote {len(ds)} images to {args.out}")


def cmd_train(args):
    seed = _resolve_seed(args.seed)
    root = _existing_dir(args.data, "dataset directory")
    try:
        ds = D.load_dataset_dir(root)
    except (ValueError, FileNotFoundError) as exc:
        raise IntegrityError(str(exc)) from None
    if ds.labels is None:
        raise IntegrityError(f"{root} has no labels (manifest.json missing)")
    classes = args.classes or int(ds.labels.max()) + 1
    if args.epochs < 0 or args.lr <= 0:
        raise UsageError("--epochs must be >= 0 and --lr > 0")
    init = toy_cnn(classes, seed=seed, size=ds.image_shape[0])
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=seed, momentum=args.momentum)
    result = train(init, ds.images, ds.labels, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checksum = save_model(result.classifier, out / "model.xaim")
    with open(out / "train-log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "accuracy"])
        for e, (loss, acc) in enumerate(zip(result.losses, result.accuracies), 1):
            w.writerow([e, repr(float(loss)), repr(float(acc))])
    train_acc = accuracy(result.classifier, ds.images, ds.labels)
    print(f"train accuracy: {train_acc:.4f}")
    test_acc = None
    if args.test_data:
        test = D.load_dataset_dir(_existing_dir(args.test_data, "test dataset directory"))
        test_acc = accuracy(result.classifier, test.images, test.labels)
        print(f"test accuracy: {test_acc:.4f}")
    _write_run_config(out, "train", {"data": str(args.data), "test_data": args.test_data, "classes": classes,
                                     "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
                                     "momentum": args.momentum, "seed": seed, "model_checksum": checksum,
                                     "train_accuracy": train_acc, "test_accuracy": test_acc})


def cmd_evaluate(args):
    seed = _resolve_seed(args.seed)
    model, checksum = _load_model_checked(args.model)
    try:
        specs = parse_explainers(args.explainers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    metric_ids = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metric_ids if m not in M.METRIC_IDS]
    if bad or not metric_ids or not specs:
        raise UsageError(f"unknown or empty metric list {bad or metric_ids}; choose from {','.join(M.METRIC_IDS)}")
    if args.jobs < 1 or args.samples < 1 or args.eta_sq <= 0 or (args.epsilon is not None and args.epsilon <= 0):
        raise UsageError("--jobs, --samples must be >= 1; --eta-sq and --epsilon must be > 0")
    ds = _load_data(args)
    if tuple(ds.image_shape) != tuple(model.input_shape):
        raise IntegrityError(f"dataset images {ds.image_shape} incompatible with model input {model.input_shape}")
    sampler = SamplerConfig(epsilon=args.epsilon, count=args.samples, max_iter=args.max_walk_steps,
                            shell=args.uniform_shell)
    cfg = B.EvalConfig(strategy=args.strategy, seed=seed, eta_sq=args.eta_sq,
                       surrogate_output=args.surrogate_output, confidence_output=args.confidence_output,
                       lip_normalize=args.lip_normalize == "minmax", deletion_steps=args.deletion_steps,
                       sampler=sampler, cache_dir=args.cache_samples)
    table = B.run_matrix(model, specs, metric_ids, ds, cfg, jobs=args.jobs, model_checksum=checksum)
    B.save_results(table, args.out)
    if args.export_maps:
        _export_maps(model, specs, ds, cfg, args.export_maps)
    _write_run_config(args.out, "evaluate", {
        "data": args.data, "gaze": args.gaze, "synthetic": args.synthetic, "size": args.size,
        "classes": args.classes, "data_seed": args.data_seed, "model": str(args.model),
        "model_checksum": checksum, "explainers": [s.name for s in specs],
        "explainer_params": {s.name: s.params for s in specs}, "metrics": metric_ids,
        "strategy": args.strategy, "epsilon": sampler.resolve_epsilon(ds.image_shape), "samples": args.samples,
        "max_walk_steps": args.max_walk_steps, "uniform_shell": args.uniform_shell, "seed": seed,
        "eta_sq": args.eta_sq, "surrogate_output": args.surrogate_output,
        "confidence_output": args.confidence_output, "lip_normalize": args.lip_normalize,
        "deletion_steps": args.deletion_steps, "jobs": args.jobs, "out": str(args.out),
        "cache_samples": args.cache_samples,
    })
    print((Path(args.out) / "scores.csv").read_text(), end="")


def _export_maps(model, specs, ds, cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(ds.names):
        x0 = ds.images[i].astype(np.float64)
        g = ClassLogitModel(model, model.predict(x0), cfg.surrogate_output)
        for spec in specs:
            s0 = explain(spec, g, x0, rng=B._smoothgrad_rngs(cfg.seed, i, "anchor"))
            save_saliency_png(s0, out / f"{name}_{spec.name}.png")


def _load_table(path):
    _existing_dir(path, "results directory")
    try:
        return B.load_results(path)
    except B.ResultsFormatError as exc:
        raise IntegrityError(str(exc)) from None


def _fmt(v):
    return "NaN" if not np.isfinite(v) else f"{v:.6g}"


def cmd_report(args):
    tables = [_load_table(p) for p in args.tables]
    for t in tables[1:]:
        try:
            B.check_comparable(tables[0], t)
        except B.TableMismatchError as exc:
            raise IntegrityError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for path, t in zip(args.tables, tables):
        tag = f"{t.strategy}" if sum(u.strategy == t.strategy for u in tables) == 1 else Path(path).name
        lines.append(f"== {tag} ({t.n_images} images, model {t.meta.get('model_checksum', '?')[:12]})")
        best = B.best_explainers(t)
        for m in t.metrics:
            direction = "higher" if m in M.HIGHER_IS_BETTER else "lower"
            lines.append(f"  {m:4s} best: {best.get(m, 'n/a'):22s} ({direction} is better; "
                         f"mean radius {_fmt(t.mean_radius(m))})")
        try:
            cm = B.consensus(t)
        except ValueError as exc:
            lines.append(f"  consensus skipped: {exc}")
        else:
            with open(out / f"consensus-{tag}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["metric"] + cm.metrics)
                for m, row in zip(cm.metrics, cm.values):
                    w.writerow([m] + [_fmt(v) for v in row])
            if cm.undefined:
                lines.append(f"  consensus: {len(cm.undefined)} undefined entries")
        with open(out / f"radius-{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "mean_radius", "epsilon"])
            for m in t.metrics:
                w.writerow([m, _fmt(t.mean_radius(m)), _fmt(t.meta.get("epsilon", float("nan")))])
    if len(tables) >= 2:
        uni = next((t for t in tables if t.strategy == "uniform"), tables[0])
        adv = next((t for t in tables if t.strategy == "adversarial" and t is not uni), tables[1])
        cons = B.consistency(uni, adv)
        with open(out / "consistency.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "pcc"])
            for m, v in cons.items():
                w.writerow([m, _fmt(v)])
        lines.append("== consistency (PCC of mean scores, uniform vs adversarial, non-trivial explainers)")
        for m, v in cons.items():
            lines.append(f"  {m:4s} {_fmt(v)}")
        if "lss" in cons and "lip" in cons:
            verdict = "holds" if cons["lss"] >= cons["lip"] else "does not hold"
            lines.append(f"  LSS vs LIP consistency: {_fmt(cons['lss'])} vs {_fmt(cons['lip'])} "
                         f"(LSS >= LIP {verdict}; report-only)")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    _write_run_config(out, "report", {"tables": [str(p) for p in args.tables], "out": str(out)})
    print(text, end="")


# --------------------------------------------------------------- parser

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="xaimeter", description="Benchmark saliency explainers on stability, correctness "
                                             "and plausibility metrics.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-cell diagnostics")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic shapes dataset", formatter_class=fmt)
    g.add_argument("--n", type=int, default=50, help="number of images")
    g.add_argument("--size", type=int, default=32, help="image side in pixels")
    g.add_argument("--classes", type=int, default=3, help="number of shape classes")
    g.add_argument("--seed", type=int, default=None, help="random seed (falls back to $XAIMETER_SEED)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the toy CNN", formatter_class=fmt)
    t.add_argument("--data", required=True, help="training dataset directory (from gen-data)")
    t.add_argument("--test-data", default=None, help="optional held-out dataset directory")
    t.add_argument("--classes", type=int, default=None, help="class count (default: from labels)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--seed", type=int, default=None, help="random seed (falls back to $XAIMETER_SEED)")
    t.add_argument("--out", required=True, help="output directory for model.xaim and train-log.csv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score explainers with the metric matrix", formatter_class=fmt)
    e.add_argument("--model", required=True, help="checkpoint written by train")
    e.add_argument("--data", default=None, help="dataset directory (gen-data layout, or a folder of PNGs)")
    e.add_argument("--gaze", default=None, help="gaze PNG directory for a plain folder of images")
    e.add_argument("--synthetic", type=int, default=None, help="generate N synthetic images instead of --data")
    e.add_argument("--size", type=int, default=32, help="synthetic image side")
    e.add_argument("--classes", type=int, default=3, help="synthetic class count")
    e.add_argument("--data-seed", type=int, default=7, help="synthetic dataset seed")
    e.add_argument("--strategy", choices=STRATEGIES, default="uniform")
    e.add_argument("--explainers", default=",".join(EXPLAINER_KINDS),
                   help="comma list; parameters as kind:key=value (e.g. smoothgrads:samples=20)")
    e.add_argument("--metrics", default=",".join(M.METRIC_IDS), help="comma list")
    e.add_argument("--epsilon", type=float, default=None, help="neighbourhood radius (default 250*sqrt(n/196608))")
    e.add_argument("--samples", type=int, default=50, help="perturbed samples per image")
    e.add_argument("--max-walk-steps", type=int, default=10_000, help="adversarial iteration cap")
    e.add_argument("--uniform-shell", action="store_true", help="sample on the sphere surface, not the ball")
    e.add_argument("--seed", type=int, default=None, help="random seed (falls back to $XAIMETER_SEED)")
    e.add_argument("--eta-sq", type=float, default=M.DEFAULT_ETA_SQ, help="LRC denominator guard eta^2")
    e.add_argument("--surrogate-output", choices=("logit", "prob"), default="logit",
                   help="model output used by LIP/LSS/CLE/LRC")
    e.add_argument("--confidence-output", choices=("prob", "logit"), default="prob",
                   help="model output used by DEL and AD/AI/AG")
    e.add_argument("--lip-normalize", choices=("none", "minmax"), default="none",
                   help="normalise maps before the LIP distance")
    e.add_argument("--deletion-steps", type=int, default=50)
    e.add_argument("--cache-samples", default=None, help="directory caching perturbation sets")
    e.add_argument("--export-maps", default=None, help="directory for 16-bit PNG saliency maps")
    e.add_argument("--jobs", type=int, default=1, help="image-level worker processes")
    e.add_argument("--out", required=True, help="results directory")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="consensus, consistency and radius summary", formatter_class=fmt)
    r.add_argument("--tables", nargs="+", required=True, help="results directories from evaluate")
    r.add_argument("--out", required=True, help="report directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"xaimeter {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, CheckpointError, B.ResultsFormatError, B.TableMismatchError) as exc:
        print(f"xaimeter {args.command}: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except OSError as exc:
        print(f"xaimeter {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"xaimeter {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
