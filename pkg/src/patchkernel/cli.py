"""Command line entry point: ``patchkernel <subcommand> [options]``.

Each invocation creates a fresh timestamped run directory under ``output_dir``
holding the config file as given (``config.ini``), the effective config after
command line overrides (``effective.ini``) and whatever the subcommand writes.
Shared artifacts (whitening, dictionary, feature caches) live at their
configured paths and are never overwritten without ``--force``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from contextlib import nullcontext

import numpy as np

from . import pipeline
from .analysis import (covariance_spectrum, dimension_sweep, write_spectrum_csv,
                       write_sweep_csv)
from .classifier import ArrayFeatures, evaluate, load_model, save_model
from .config import ExperimentConfig, copy_config, from_ini, to_ini
from .dataset import gather_patches, sample_patch_positions
from .dictionary import load_dictionary, save_dictionary
from .encoder import FeatureCache, PatchEncoder, cache_status
from .whitening import estimate_patch_moments, load_whitening, save_whitening

log = logging.getLogger("patchkernel")

ABLATION_AXES = ("dictSize", "Q", "P", "lambda")
ABLATION_FIELDS = ("axis", "value", "dictSize", "Q", "P", "lambda", "trainAcc", "testAcc")


class CommandError(RuntimeError):
    pass


# configuration -------------------------------------------------------------

def _load(args) -> tuple[ExperimentConfig, str]:
    """Config from ``--config`` (or defaults) with command line overrides applied."""
    text = ""
    if args.config:
        with open(args.config) as f:
            text = f.read()
    config = from_ini(text)
    d, e, c, t = config.dictionary, config.encoding, config.classifier, config.train
    overrides = [
        (args.data_root, config.data, "root"),
        (args.output_dir, config.paths, "output_dir"),
        (args.patch_size, d, "patch_size"),
        (args.dict_size, d, "size"),
        (args.neighbors, d, "neighbors"),
        (args.regularizer, d, "regularizer"),
        (args.orientation, d, "orientation"),
        (args.gaussian, d, "gaussian"),
        (args.pool_kernel, e, "pool_kernel"),
        (args.pool_stride, e, "pool_stride"),
        (args.assignment, e, "assignment"),
        (args.k2, c, "k2"),
        (args.c2, c, "c2"),
        (args.k3, c, "k3"),
        (args.hidden, c, "hidden"),
        (args.epochs, t, "epochs"),
        (args.lr, t, "lr"),
        (args.batch_size, t, "batch_size"),
        (args.augment, t, "augment"),
        (args.decay_epochs, t, "decay_epochs"),
        (args.train_limit, config.data, "train_limit"),
        (args.test_limit, config.data, "test_limit"),
    ]
    for value, section, name in overrides:
        if value is not None:
            setattr(section, name, value)
    config.validate()
    return config, text


def make_run_dir(output_dir: str, command: str) -> str:
    """New ``<output_dir>/<command>-<timestamp>[-n]`` directory; never reuses one."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(output_dir, f"{command}-{stamp}")
    path, n = base, 1
    while True:
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            n += 1
            path = f"{base}-{n}"


def _start_run(args, config: ExperimentConfig, text: str) -> str:
    run_dir = make_run_dir(config.paths.output_dir, args.command)
    with open(os.path.join(run_dir, "config.ini"), "w") as f:
        f.write(text)
    with open(os.path.join(run_dir, "effective.ini"), "w") as f:
        f.write(to_ini(config))
    handler = logging.FileHandler(os.path.join(run_dir, "log.txt"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    log.info("run directory %s", run_dir)
    return run_dir


def _guard(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise CommandError(f"{path} exists; pass --force to overwrite")
    pipeline.ensure_parent(path)


def _load_artifacts(config: ExperimentConfig):
    op = load_whitening(config.artifact("whitening_file"))
    dictionary = load_dictionary(config.artifact("dict_file"))
    if dictionary.patch_size != config.dictionary.patch_size:
        raise CommandError(f"dictionary patch size {dictionary.patch_size} does not match "
                           f"configured {config.dictionary.patch_size}")
    if dictionary.provenance is not None and dictionary.whitening_ref != op.fingerprint():
        raise CommandError("dictionary was built with a different whitening operator")
    return op, dictionary


# subcommands ---------------------------------------------------------------

def cmd_build_dict(args, config: ExperimentConfig, run_dir: str) -> None:
    wpath, dpath = config.artifact("whitening_file"), config.artifact("dict_file")
    _guard(wpath, args.force)
    _guard(dpath, args.force)
    train_set = pipeline.load_split(config, "train")
    op, dictionary = pipeline.build_dictionary(train_set, config)
    save_whitening(wpath, op)
    save_dictionary(dpath, dictionary)
    d = config.dictionary
    print(f"dictionary |D|={dictionary.base_size} P={d.patch_size} lambda={d.regularizer:g} "
          f"d_ext={dictionary.dim} gaussian={str(d.gaussian).lower()} -> {dpath}")


def cmd_encode(args, config: ExperimentConfig, run_dir: str) -> None:
    op, dictionary = _load_artifacts(config)
    encoder = PatchEncoder(dictionary, op)
    train_set = pipeline.load_split(config, "train")
    test_set = pipeline.load_split(config, "test")
    for name in ("train_cache", "test_cache"):
        path = config.artifact(name)
        if args.force and os.path.exists(path):
            os.remove(path)
        pipeline.ensure_parent(path)
    header = pipeline.cache_header(config, encoder, train_set)
    if cache_status(config.artifact("train_cache"), header) == "complete" and \
            cache_status(config.artifact("test_cache"), pipeline.cache_header(config, encoder, test_set)) == "complete":
        print("feature caches already complete, nothing to do")
        return
    t0 = time.perf_counter()
    train_cache, _ = pipeline.encode_splits(config, encoder, train_set, test_set, args.resume)
    elapsed = time.perf_counter() - t0
    n = len(train_set) + len(test_set)
    print(f"encoded {n} images, feature shape {train_cache.feature_shape}, "
          f"{n / max(elapsed, 1e-9):.1f} img/s")


def cmd_train(args, config: ExperimentConfig, run_dir: str) -> None:
    op, dictionary = _load_artifacts(config)
    encoder = PatchEncoder(dictionary, op)
    train_set = pipeline.load_split(config, "train") if config.train.augment else None
    model_path = config.paths.model_file or os.path.join(run_dir, "model.bin")
    _guard(model_path, args.force)
    metrics_path = os.path.join(run_dir, config.paths.metrics_csv)
    outcome = pipeline.train_model(config, train_set, encoder, metrics_path)
    save_model(model_path, outcome.result.model)
    print(f"train accuracy {outcome.train_accuracy:.4f}")
    print(f"test accuracy {outcome.test_accuracy:.4f}")


def cmd_evaluate(args, config: ExperimentConfig, run_dir: str) -> None:
    model_path = args.model or config.paths.model_file
    if not model_path:
        raise CommandError("no model given; pass --model or set paths.model_file")
    model = load_model(model_path)
    cache = FeatureCache(args.cache or config.artifact("test_cache"))
    acc = evaluate(model, ArrayFeatures(cache))
    with open(os.path.join(run_dir, "evaluation.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "cache", "n", "accuracy"])
        w.writerow([model_path, cache.path, len(cache), repr(acc)])
    print(f"test accuracy {acc:.4f}")


def cmd_analyze(args, config: ExperimentConfig, run_dir: str) -> None:
    train_set = pipeline.load_split(config, "train")
    regularizers = args.regularizers or [config.dictionary.regularizer]
    rng = np.random.default_rng([config.seeds.dictionary, 2])
    for p in args.patch_sizes:
        pos = sample_patch_positions(len(train_set), train_set.side, p, args.moment_samples, rng)
        cov = estimate_patch_moments(gather_patches(train_set, pos, p)).covariance
        write_spectrum_csv(os.path.join(run_dir, f"spectrum_P{p}.csv"), covariance_spectrum(cov))
    for lam in regularizers:
        reports = dimension_sweep(train_set, args.patch_sizes, lam, args.sample_size, args.knn,
                                  args.moment_samples, args.max_anchors, config.seeds.dictionary)
        name = "dimensions.csv" if len(regularizers) == 1 else f"dimensions_lambda{lam:g}.csv"
        write_sweep_csv(os.path.join(run_dir, name), reports)
        for r in reports:
            print(f"lambda={lam:g} P={r.P} d_ext={r.dExt} d_cov raw/white={r.dCovRaw}/{r.dCovWhite} "
                  f"d_int raw/white={r.dIntRaw:.2f}/{r.dIntWhite:.2f}")


def _ablation_config(base: ExperimentConfig, axis: str, value: str, out: str) -> ExperimentConfig:
    config = copy_config(base)
    d = config.dictionary
    if axis == "dictSize":
        d.size = int(value)
    elif axis == "Q":
        d.neighbors = int(value)
    elif axis == "P":
        d.patch_size = int(value)
    else:
        d.regularizer = float(value)
    p = config.paths
    p.output_dir = out
    p.dict_file = p.whitening_file = p.train_cache = p.test_cache = p.model_file = ""
    config.validate()
    return config


def cmd_ablate(args, config: ExperimentConfig, run_dir: str) -> None:
    if not args.values:
        raise CommandError("ablation needs at least one value")
    # validate every value before the first (long) run starts
    configs = [_ablation_config(config, args.axis, v, os.path.join(run_dir, f"{args.axis}={v}"))
               for v in args.values]
    train_set = pipeline.load_split(config, "train")
    test_set = pipeline.load_split(config, "test")
    out_path = os.path.join(run_dir, "ablation.csv")
    with open(out_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        for value, cfg in zip(args.values, configs):
            os.makedirs(cfg.paths.output_dir)
            op, dictionary = pipeline.build_dictionary(train_set, cfg)
            encoder = PatchEncoder(dictionary, op)
            caches = pipeline.encode_splits(cfg, encoder, train_set, test_set)
            outcome = pipeline.train_model(cfg, train_set, encoder,
                                           os.path.join(cfg.paths.output_dir, cfg.paths.metrics_csv), caches)
            w.writerow({"axis": args.axis, "value": value, "dictSize": cfg.dictionary.size, "Q": cfg.q,
                        "P": cfg.dictionary.patch_size, "lambda": cfg.dictionary.regularizer,
                        "trainAcc": outcome.train_accuracy, "testAcc": outcome.test_accuracy})
            f.flush()
            print(f"{args.axis}={value} test accuracy {outcome.test_accuracy:.4f}")
            if not args.keep_caches:
                for name in ("train_cache", "test_cache"):
                    os.remove(cfg.artifact(name))


COMMANDS = {
    "build-dict": cmd_build_dict,
    "encode": cmd_encode,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


# argument parsing ----------------------------------------------------------

def _flag(parser, name: str, help: str) -> None:
    parser.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                        default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="sectioned key = value config file")
    g.add_argument("--data-root", help="directory with the CIFAR-10 binary batches")
    g.add_argument("--output-dir", help="parent directory for run directories and artifacts")
    g.add_argument("--patch-size", type=int)
    g.add_argument("--dict-size", type=int)
    g.add_argument("--neighbors", type=int, help="Q; 0 derives it from q_fraction")
    g.add_argument("--regularizer", type=float, help="whitening lambda")
    g.add_argument("--orientation", choices=("zca", "pca"))
    _flag(g, "gaussian", "use a Gaussian noise dictionary")
    g.add_argument("--pool-kernel", type=int)
    g.add_argument("--pool-stride", type=int)
    g.add_argument("--assignment", choices=("hard", "soft"))
    g.add_argument("--k2", type=int)
    g.add_argument("--c2", type=int)
    g.add_argument("--k3", type=int)
    _flag(g, "hidden", "insert a ReLU between the two convolutions")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--decay-epochs", type=lambda v: tuple(int(x) for x in v.replace(",", " ").split()),
                   help="comma separated epochs at which the learning rate drops")
    _flag(g, "augment", "re-encode randomly cropped and flipped images every epoch")
    g.add_argument("--train-limit", type=int, help="use only the first N training images")
    g.add_argument("--test-limit", type=int, help="use only the first N test images")
    r = common.add_argument_group("execution")
    r.add_argument("--threads", type=int, help="cap BLAS worker threads")
    r.add_argument("--deterministic", action="store_true", help="single-threaded reductions")
    r.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    r.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="patchkernel", description="Patch dictionary kernel pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build-dict", parents=[common], help="estimate whitening and sample the dictionary")
    enc = sub.add_parser("encode", parents=[common], help="encode both splits into feature caches")
    enc.add_argument("--resume", action="store_true", help="continue a partially written cache")
    sub.add_parser("train", parents=[common], help="train the classifier head")
    ev = sub.add_parser("evaluate", parents=[common], help="accuracy of a saved model on a cache")
    ev.add_argument("--model", help="model checkpoint")
    ev.add_argument("--cache", help="feature cache (default: configured test cache)")
    an = sub.add_parser("analyze", parents=[common], help="covariance spectrum and patch dimensions")
    an.add_argument("--patch-sizes", type=int, nargs="+", default=[4, 5, 6, 7, 8])
    an.add_argument("--regularizers", type=float, nargs="*", help="one dimension table per lambda")
    an.add_argument("--sample-size", type=int, default=16_000, help="patches measured per P")
    an.add_argument("--knn", type=int, default=4_000, help="neighbor horizon K")
    an.add_argument("--max-anchors", type=int, help="subsample anchors for the intrinsic estimate")
    an.add_argument("--moment-samples", type=int, default=100_000)
    ab = sub.add_parser("ablate", parents=[common], help="full pipeline once per value of one axis")
    ab.add_argument("--axis", choices=ABLATION_AXES, required=True)
    ab.add_argument("--values", nargs="*", default=[])
    ab.add_argument("--keep-caches", action="store_true")
    return parser


def _thread_limit(args):
    limit = 1 if args.deterministic else args.threads
    if limit is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    for h in logging.getLogger().handlers:
        h.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        config, text = _load(args)
        with _thread_limit(args):
            run_dir = _start_run(args, config, text)
            COMMANDS[args.command](args, config, run_dir)
    except (Exception, KeyboardInterrupt) as exc:  # noqa: BLE001 -- one-line report is the contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 130 if isinstance(exc, KeyboardInterrupt) else 1
    finally:
        for h in list(logging.getLogger().handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger().removeHandler(h)
                h.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
