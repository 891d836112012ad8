"""Command-line interface: ``streamcp synth`` and ``streamcp run``.

Exit codes: 0 success, 1 usage error, 2 runtime error (bad file,
dimension mismatch, numerical failure).  Log verbosity is read from the
``STREAMCP_LOG_LEVEL`` environment variable (default ``WARNING``).
"""

import argparse
import logging
import os
import sys
import time

from . import __version__
from .engine import EngineConfig, StreamingEngine
from .io import (CheckpointError, ReportWriter, StreamFormatError, iter_stream, load_checkpoint,
                 read_stream_header, report_row, save_checkpoint, write_stream)
from .state import HyperPriors
from .synthetic import SyntheticSpec, generate_drifting_stream
from .tensor import DimensionError, ObservationMask
from .updates import TAU_MODES, SingularPosteriorError

LOG_ENV = "STREAMCP_LOG_LEVEL"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("streamcp")


class UsageError(Exception):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def truth_path(path):
    return f"{path}.truth"


def outliers_path(path):
    return f"{path}.outliers"


def _dims(text):
    try:
        dims = tuple(int(x) for x in text.replace("x", ",").split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid dims {text!r}; use e.g. 40x40") from None
    if not dims or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"invalid dims {text!r}")
    return dims


def _prior(text):
    name, sep, value = text.partition("=")
    if not sep or name not in HyperPriors.__dataclass_fields__:
        raise argparse.ArgumentTypeError(
            f"expected NAME=VALUE with NAME in {sorted(HyperPriors.__dataclass_fields__)}")
    try:
        return name, float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid prior value {value!r}") from None


def build_parser():
    p = _Parser(prog="streamcp", description="Robust streaming CP factorization and completion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic drifting stream plus ground truth")
    s.add_argument("output", help="stream file to write; truth goes to OUTPUT.truth")
    s.add_argument("--slices", type=int, default=100)
    s.add_argument("--dims", type=_dims, default=(40, 40))
    s.add_argument("--rank", type=int, default=5)
    s.add_argument("--outlier-frac", type=float, default=0.02)
    s.add_argument("--outlier-mag", type=float, default=10.0)
    s.add_argument("--noise-var", type=float, default=1e-2)
    s.add_argument("--sample-frac", type=float, default=1.0)
    s.add_argument("--no-drift", action="store_true")
    s.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("run", help="factor a stream file and emit a CSV report")
    r.add_argument("input", help="tensor stream file")
    d = EngineConfig()
    r.add_argument("--rank-init", type=int, default=d.rank_init)
    r.add_argument("--window", type=int, default=d.window)
    r.add_argument("--forgetting", type=float, default=d.mu)
    r.add_argument("--tol", type=float, default=d.tol)
    r.add_argument("--max-sweeps", type=int, default=d.max_sweeps)
    r.add_argument("--prune-threshold", type=float, default=d.prune_threshold)
    r.add_argument("--tau-mode", choices=TAU_MODES, default=d.tau_mode)
    r.add_argument("--include-temporal-in-shape", action=argparse.BooleanOptionalAction,
                   default=d.include_temporal_in_shape,
                   help="count temporal rows in the lambda shape update")
    r.add_argument("--prior", type=_prior, action="append", default=[], metavar="NAME=VALUE",
                   help="override one Gamma hyperprior, e.g. a0_gamma=1")
    r.add_argument("--seed", type=int, default=d.rng_seed)
    r.add_argument("--truth", help="fully observed ground-truth stream for relative errors")
    r.add_argument("--report", help="CSV output path (default: standard output)")
    r.add_argument("--save-checkpoint", help="write the engine state here when done")
    r.add_argument("--resume", help="continue from this checkpoint")
    r.add_argument("--stop", type=int, metavar="K",
                   help="stop once K slices in total have been processed")
    return p


def _config(args):
    priors = HyperPriors(**dict(args.prior))
    return EngineConfig(rank_init=args.rank_init, window=args.window, mu=args.forgetting,
                        tol=args.tol, max_sweeps=args.max_sweeps,
                        prune_threshold=args.prune_threshold, tau_mode=args.tau_mode,
                        rng_seed=args.seed, include_temporal_in_shape=args.include_temporal_in_shape,
                        priors=priors)


def cmd_synth(args):
    try:
        spec = SyntheticSpec(num_slices=args.slices, dims=args.dims, true_rank=args.rank,
                             drift=not args.no_drift, outlier_frac=args.outlier_frac,
                             outlier_magnitude=args.outlier_mag, noise_var=args.noise_var,
                             sample_frac=args.sample_frac, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    stream = generate_drifting_stream(spec)
    full = ObservationMask.full(spec.dims)
    write_stream(args.output, zip(stream.observed, stream.masks), spec.dims)
    write_stream(truth_path(args.output), ((x, full) for x in stream.low_rank), spec.dims)
    write_stream(outliers_path(args.output),
                 ((s, ObservationMask.from_indicator(s != 0)) for s in stream.outliers), spec.dims)
    log.info("wrote %d slices of dims %s to %s", spec.num_slices, spec.dims, args.output)
    return EXIT_OK


def cmd_run(args):
    if args.stop is not None and args.stop < 0:
        raise UsageError("--stop must be >= 0")
    if args.resume:
        engine = load_checkpoint(args.resume)
    else:
        try:
            engine = StreamingEngine(_config(args))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    with open(args.input, "rb") as fh:
        header = read_stream_header(fh)
    if engine.dims is not None and tuple(engine.dims) != header.dims:
        raise DimensionError(f"checkpoint dims {engine.dims} do not match stream dims {header.dims}")
    truths = iter_stream(args.truth) if args.truth else None

    out = open(args.report, "w") if args.report else sys.stdout
    try:
        writer = ReportWriter(out)
        for t, (y, mask) in enumerate(iter_stream(args.input)):
            truth = None
            if truths is not None:
                try:
                    truth, _ = next(truths)
                except StopIteration:
                    raise StreamFormatError("truth file has fewer slices than the stream") from None
                if truth.shape != y.shape:
                    raise DimensionError(f"truth slice {truth.shape} vs stream slice {y.shape}")
            if t < engine.slices_seen:
                continue
            if args.stop is not None and engine.slices_seen >= args.stop:
                break
            t0 = time.perf_counter()
            res = engine.process_slice(y, mask, truth)
            writer.write(report_row(res, time.perf_counter() - t0))
        writer.footer(engine.config.to_dict(), engine.config.rng_seed)
    finally:
        if out is not sys.stdout:
            out.close()
    if args.save_checkpoint:
        save_checkpoint(args.save_checkpoint, engine)
    return EXIT_OK


def main(argv=None):
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (synth or run)")
        handler = cmd_synth if args.command == "synth" else cmd_run
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StreamFormatError, CheckpointError, DimensionError, SingularPosteriorError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
