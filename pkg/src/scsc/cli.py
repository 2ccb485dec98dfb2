"""Command-line interface.

Every long flag can also be set through an environment variable named
``SCSC_`` + the flag in upper case with dashes as underscores (``--lambda``
-> ``SCSC_LAMBDA``). Explicit flags win over the environment.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shlex
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import drivers
from .applications import ObservationMask, infer_codes, inpaint, reconstruct
from .core import (
    NumericalError,
    TrainConfig,
    contrast_normalize,
    load_image,
    nonzero_fraction,
    objective,
    rescaled_psnr,
    save_image,
    to_unit_range,
)
from .io import CorruptFileError, read_dictionary, read_manifest, save_mosaic, write_dictionary, write_manifest
from .lasso import AdmmParams

log = logging.getLogger("scsc")

ENV_PREFIX = "SCSC_"
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_SCHEMA = 1
IMAGE_SUFFIXES = (".png", ".pgm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# -- argument helpers --------------------------------------------------------------


def _rate(text):
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"rate must be in (0, 1], got {text}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _odd_int(text):
    value = _positive_int(text)
    if value % 2 == 0:
        raise argparse.ArgumentTypeError(f"filter size must be odd, got {text}")
    return value


def _rate_list(text):
    return [_rate(t) for t in text.split(",") if t.strip()]


def _truthy(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def _apply_env(parser):
    """Use ``SCSC_*`` environment variables as defaults for every long flag."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _apply_env(sub)
            continue
        longs = [s for s in action.option_strings if s.startswith("--")]
        if not longs or action.dest == "help":
            continue
        key = ENV_PREFIX + longs[0][2:].upper().replace("-", "_")
        if key not in os.environ:
            continue
        raw = os.environ[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            action.default = _truthy(raw) if isinstance(action, argparse._StoreTrueAction) else not _truthy(raw)
        elif action.nargs in ("+", "*"):
            convert = action.type or str
            action.default = [convert(v) for v in shlex.split(raw)]
        else:
            action.default = raw  # argparse runs string defaults through ``type``
        action.required = False


def _training_flags(p, online=False):
    p.add_argument("--input", required=True, nargs="+", help="image directory or files (PNG/PGM)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--filters", type=_positive_int, default=100, help="number of filters K")
    p.add_argument("--filter-size", type=_odd_int, default=11, help="odd filter side m")
    p.add_argument("--lambda", dest="lmbda", type=_positive_float, default=1.0)
    p.add_argument("--subsample", type=_rate, default=1.0, help="code subsampling rate p in (0, 1]")
    p.add_argument("--admm-iters", type=_positive_int, default=10)
    p.add_argument("--rho", type=_positive_float, default=None, help="ADMM penalty (default 10*lambda)")
    p.add_argument("--alpha", type=float, default=1.8, help="ADMM over-relaxation in (0, 2)")
    p.add_argument("--filter-sweeps", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)
    p.add_argument("--no-normalize", action="store_true", help="skip contrast normalization")
    p.add_argument("--no-mosaic", action="store_true", help="do not write filters.png")
    if online:
        p.add_argument("--minibatch", type=_positive_int, default=1, help="mini-batch size eta")
        p.add_argument("--epochs", type=_positive_int, default=1)
        p.add_argument("--steps", type=_positive_int, default=None, help="override the step count")
        p.add_argument("--test-dir", default=None)
        p.add_argument("--eval-schedule", choices=sorted(drivers.EVAL_SCHEDULES), default="pow2")
        p.add_argument("--quad-mode", choices=("cg", "factor"), default="factor")
        p.add_argument("--sequential", action="store_true", help="draw images in order instead of shuffled")
    else:
        p.add_argument("--max-outer", type=_positive_int, default=20)
        p.add_argument("--tol", type=float, default=1e-3)


def build_parser():
    parser = _Parser(prog="scsc", description="Stochastic spatial-domain convolutional sparse coding")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-batch", help="batch dictionary learning (SBCSC)")
    _training_flags(p)
    p.set_defaults(func=cmd_train_batch)

    p = sub.add_parser("train-online", help="online dictionary learning (SOCSC)")
    _training_flags(p, online=True)
    p.set_defaults(func=cmd_train_online)

    p = sub.add_parser("reconstruct", help="sparse reconstruction with a fixed dictionary")
    p.add_argument("--dict", required=True, help=".cscd dictionary")
    p.add_argument("--input", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lmbda", type=_positive_float, default=1.0)
    p.add_argument("--admm-iters", type=_positive_int, default=10)
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("inpaint", help="inpaint randomly observed images")
    p.add_argument("--dict", required=True)
    p.add_argument("--input", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--observe", type=_rate, default=0.5, help="observation rate q")
    p.add_argument("--lambda", dest="lmbda", type=_positive_float, default=0.4)
    p.add_argument("--admm-iters", type=_positive_int, default=50)
    p.add_argument("--trials", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paste-observed", action="store_true")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("bench", help="per-iteration timing sweep over subsampling rates")
    p.add_argument("--input", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--filters", type=_positive_int, default=100)
    p.add_argument("--filter-size", type=_odd_int, default=11)
    p.add_argument("--lambda", dest="lmbda", type=_positive_float, default=1.0)
    p.add_argument("--p-values", type=_rate_list, default=[1.0, 0.5, 0.2, 0.1, 0.05])
    p.add_argument("--iters", type=_positive_int, default=5)
    p.add_argument("--admm-iters", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)

    _apply_env(parser)
    return parser


# -- shared plumbing -----------------------------------------------------------------


def list_images(inputs):
    paths = []
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            paths.extend(sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES))
        elif path.is_file():
            paths.append(path)
        else:
            raise FileNotFoundError(f"no such file or directory: {item}")
    if not paths:
        raise FileNotFoundError(f"no PNG/PGM images found in {list(inputs)}")
    return paths


def load_signals(paths, normalize=True):
    images = [load_image(p) for p in paths]
    if normalize:
        images = [contrast_normalize(im) for im in images]
    return images


class _Outputs:
    """Tracks files written by a command so a failed run leaves nothing behind."""

    def __init__(self, out):
        self.dir = Path(out)
        self.created_dir = not self.dir.exists()
        self.dir.mkdir(parents=True, exist_ok=True)
        self.paths = {}

    def path(self, key, name):
        p = self.dir / name
        self.paths[key] = str(p)
        return p

    def cleanup(self):
        for p in self.paths.values():
            Path(p).unlink(missing_ok=True)
        if self.created_dir:
            try:
                self.dir.rmdir()
            except OSError:
                pass


def _manifest(args, inputs, outputs, started):
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out", "verbose")}
    return {
        "schema": MANIFEST_SCHEMA,
        "command": args.command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": dict(outputs.paths),
        "version": _version(),
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }


def _now():
    return datetime.now(timezone.utc).isoformat()


def _train_config(args, **extra):
    return TrainConfig(
        n_filters=args.filters,
        filter_size=args.filter_size,
        lmbda=args.lmbda,
        subsample=args.subsample,
        admm_iters=args.admm_iters,
        rho=args.rho,
        alpha=args.alpha,
        seed=args.seed,
        filter_sweeps=args.filter_sweeps,
        **extra,
    )


# -- commands ------------------------------------------------------------------------


def cmd_train_batch(args, outputs):
    started = _now()
    paths = list_images(args.input)
    signals = drivers.check_signals(load_signals(paths, not args.no_normalize), args.filter_size)
    try:
        cfg = _train_config(args, max_outer=args.max_outer, tol=args.tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    filters, _, trace = drivers.train_sbcsc(signals, cfg, n_jobs=args.workers)
    write_dictionary(outputs.path("dictionary", "dict.cscd"), filters)
    trace.to_csv(outputs.path("trace", "trace.csv"))
    if not args.no_mosaic:
        save_mosaic(outputs.path("mosaic", "filters.png"), filters)
    outputs.path("manifest", "manifest.json")
    write_manifest(outputs.paths["manifest"], _manifest(args, paths, outputs, started))


def cmd_train_online(args, outputs):
    started = _now()
    paths = list_images(args.input)
    signals = drivers.check_signals(load_signals(paths, not args.no_normalize), args.filter_size)
    test_paths, test_set = [], None
    if args.test_dir:
        test_paths = list_images([args.test_dir])
        test_set = drivers.check_signals(load_signals(test_paths, not args.no_normalize), args.filter_size, "test set")
    n_steps = args.steps or max(1, -(-len(signals) * args.epochs // args.minibatch))
    try:
        cfg = _train_config(args, minibatch=args.minibatch, max_outer=n_steps, quad_mode=args.quad_mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    stream = drivers.StreamSource(signals, "sequential" if args.sequential else "random", args.seed)
    filters, _, trace = drivers.train_socsc(
        stream, cfg, test_set=test_set, n_steps=n_steps, eval_schedule=args.eval_schedule, n_jobs=args.workers
    )
    write_dictionary(outputs.path("dictionary", "dict.cscd"), filters)
    trace.to_csv(outputs.path("trace", "trace.csv"))
    if not args.no_mosaic:
        save_mosaic(outputs.path("mosaic", "filters.png"), filters)
    outputs.path("manifest", "manifest.json")
    write_manifest(outputs.paths["manifest"], _manifest(args, [*paths, *test_paths], outputs, started))


def cmd_reconstruct(args, outputs):
    started = _now()
    filters = read_dictionary(args.dict)
    paths = list_images(args.input)
    signals = load_signals(paths, not args.no_normalize)
    params = AdmmParams(iterations=args.admm_iters, rho=10.0 * args.lmbda)
    with open(outputs.path("metrics", "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "psnr_db", "nnz_frac", "objective"])
        for i, (path, x) in enumerate(zip(paths, signals)):
            codes = infer_codes(x, filters, args.lmbda, params=params, n_jobs=args.workers)
            recon = reconstruct(codes, filters)
            writer.writerow([path.name, repr(rescaled_psnr(x, recon)), repr(nonzero_fraction(codes)),
                             repr(objective(x, filters, codes, args.lmbda))])
            save_image(outputs.path(f"recon_{i}", f"recon_{path.stem}.png"), to_unit_range(recon))
    outputs.path("manifest", "manifest.json")
    write_manifest(outputs.paths["manifest"], _manifest(args, [Path(args.dict), *paths], outputs, started))


def cmd_inpaint(args, outputs):
    started = _now()
    filters = read_dictionary(args.dict)
    paths = list_images(args.input)
    signals = load_signals(paths, not args.no_normalize)
    with open(outputs.path("metrics", "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "trial", "psnr_db", "zero_fill_psnr_db"])
        for i, (path, x) in enumerate(zip(paths, signals)):
            for trial in range(args.trials):
                omask = ObservationMask.random(x.shape, args.observe, seed=(args.seed * 1_000_003 + i) * 1009 + trial)
                observed = np.where(omask.observed, x, 0.0)
                recon = inpaint(observed, omask, filters, args.lmbda, args.admm_iters, paste_observed=args.paste_observed)
                writer.writerow([path.name, trial, repr(rescaled_psnr(x, recon)), repr(rescaled_psnr(x, observed))])
                if trial == 0:
                    save_image(outputs.path(f"inpaint_{i}", f"inpaint_{path.stem}.png"), to_unit_range(recon))
    outputs.path("manifest", "manifest.json")
    write_manifest(outputs.paths["manifest"], _manifest(args, [Path(args.dict), *paths], outputs, started))


BENCH_COLUMNS = ("p", "iter", "code_update_s", "filter_update_s", "objective")


def cmd_bench(args, outputs):
    started = _now()
    paths = list_images(args.input)
    signals = drivers.check_signals(load_signals(paths, not args.no_normalize), args.filter_size)
    with open(outputs.path("bench", "bench.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for p in args.p_values:
            cfg = TrainConfig(n_filters=args.filters, filter_size=args.filter_size, lmbda=args.lmbda, subsample=p,
                              admm_iters=args.admm_iters, max_outer=args.iters, tol=0.0, seed=args.seed)
            _, _, trace = drivers.train_sbcsc(signals, cfg, n_jobs=args.workers)
            for row in trace.rows:
                writer.writerow([repr(p), row.iter, repr(row.code_update_s), repr(row.filter_update_s), repr(row.objective)])
    outputs.path("manifest", "manifest.json")
    write_manifest(outputs.paths["manifest"], _manifest(args, paths, outputs, started))


def cmd_rerun(args, outputs):
    manifest = read_manifest(args.manifest)
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise UsageError(f"unsupported manifest schema {manifest.get('schema')!r}")
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices.get(manifest["command"])
    if sub is None or manifest["command"] == "rerun":
        raise UsageError(f"cannot rerun command {manifest['command']!r}")
    ns = argparse.Namespace(**manifest["config"])
    ns.command = manifest["command"]
    ns.out = args.out
    ns.verbose = args.verbose
    ns.func = sub.get_default("func")
    ns.func(ns, outputs)



def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    outputs = None
    try:
        outputs = _Outputs(args.out)
        t0 = time.perf_counter()
        args.func(args, outputs)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return EXIT_OK
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    except (OSError, CorruptFileError) as exc:
        code, msg = EXIT_IO, f"I/O error: {exc}"
    except ValueError as exc:
        code, msg = EXIT_USAGE, str(exc)
    if outputs is not None:
        outputs.cleanup()
    print(f"scsc {args.command}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
