"""On-disk formats: tensor stream files, CSV run reports and engine checkpoints.

Stream file layout (all binary fields little-endian)::

    b"STREAMCP\\n"
    one line of JSON: {"format_version", "order", "dims", "num_slices", "encoding"}
    per slice: uint64 count, count x uint64 linear indices (C order,
               strictly ascending), count x float64 values

Checkpoints are ``.npz`` archives holding plain arrays plus one JSON
metadata string; they are loaded with ``allow_pickle=False``.
"""

import csv
import io
import json
import math
import struct
import zipfile
from dataclasses import dataclass

import numpy as np

from .engine import EngineConfig, StreamingEngine
from .state import (FactorPosterior, GammaPosterior, HyperPriors, ModelState,
                    SparsePosterior, WindowState)
from .tensor import ObservationMask

STREAM_MAGIC = b"STREAMCP\n"
STREAM_VERSION = 1
STREAM_ENCODING = "u8-le-index/f8-le-value"
CHECKPOINT_VERSION = 1
REPORT_COLUMNS = ("time_index", "relative_error", "residual_error", "rank_estimate",
                  "sweeps", "wall_time", "elbo")

_U64 = np.dtype("<u8")
_F64 = np.dtype("<f8")


class StreamFormatError(ValueError):
    """A stream file is malformed or does not match its header."""


class CheckpointError(ValueError):
    """A checkpoint is corrupt or was written by an incompatible version."""


# -- tensor stream files ---------------------------------------------------

@dataclass
class StreamHeader:
    dims: tuple
    num_slices: int
    format_version: int = STREAM_VERSION
    encoding: str = STREAM_ENCODING

    @property
    def order(self):
        return len(self.dims)

    def to_json(self):
        return json.dumps({"format_version": self.format_version, "order": self.order,
                           "dims": list(self.dims), "num_slices": self.num_slices,
                           "encoding": self.encoding}, sort_keys=True)


def write_stream(path, slices, dims=None):
    """Write ``(values_tensor, mask)`` pairs to ``path``.

    Only entries inside each mask are stored.  ``dims`` defaults to the
    first mask's dimensions.
    """
    slices = list(slices)
    if dims is None:
        if not slices:
            raise ValueError("cannot infer dims of an empty stream")
        dims = slices[0][1].dims
    dims = tuple(int(d) for d in dims)
    header = StreamHeader(dims, len(slices))
    with open(path, "wb") as fh:
        fh.write(STREAM_MAGIC)
        fh.write(header.to_json().encode("ascii") + b"\n")
        for t, (values, mask) in enumerate(slices):
            if mask.dims != dims:
                raise StreamFormatError(f"slice {t}: mask dims {mask.dims} differ from {dims}")
            vals = np.asarray(values, dtype=np.float64)
            obs = mask.gather(vals) if vals.shape == dims else vals.ravel()
            if obs.size != len(mask):
                raise StreamFormatError(f"slice {t}: {obs.size} values for {len(mask)} entries")
            fh.write(struct.pack("<Q", len(mask)))
            fh.write(mask.flat.astype(_U64).tobytes())
            fh.write(obs.astype(_F64).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise StreamFormatError(f"truncated file while reading {what}")
    return buf


def read_stream_header(fh):
    if fh.read(len(STREAM_MAGIC)) != STREAM_MAGIC:
        raise StreamFormatError("not a tensor stream file (bad magic)")
    line = fh.readline()
    try:
        meta = json.loads(line.decode("ascii"))
        header = StreamHeader(tuple(int(d) for d in meta["dims"]), int(meta["num_slices"]),
                              int(meta["format_version"]), str(meta["encoding"]))
        order = int(meta["order"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise StreamFormatError(f"unreadable stream header: {exc}") from exc
    if header.format_version != STREAM_VERSION:
        raise StreamFormatError(f"unsupported stream format version {header.format_version}")
    if header.encoding != STREAM_ENCODING:
        raise StreamFormatError(f"unsupported value encoding {header.encoding!r}")
    if order != len(header.dims) or not header.dims or min(header.dims) < 1:
        raise StreamFormatError(f"inconsistent order/dims in header: {order}, {header.dims}")
    if header.num_slices < 0:
        raise StreamFormatError("negative slice count")
    return header


def iter_stream(path):
    """Yield ``(dense_values, mask)`` for every slice; unobserved entries are 0."""
    with open(path, "rb") as fh:
        header = read_stream_header(fh)
        dims = header.dims
        size = math.prod(dims)
        for t in range(header.num_slices):
            (count,) = struct.unpack("<Q", _read_exact(fh, 8, f"slice {t} count"))
            if count > size:
                raise StreamFormatError(f"slice {t}: count {count} exceeds tensor size {size}")
            idx = np.frombuffer(_read_exact(fh, 8 * count, f"slice {t} indices"), dtype=_U64)
            vals = np.frombuffer(_read_exact(fh, 8 * count, f"slice {t} values"), dtype=_F64)
            if count and (np.any(np.diff(idx.astype(np.int64)) <= 0) or idx[-1] >= size):
                raise StreamFormatError(f"slice {t}: indices not strictly ascending and in range")
            mask = ObservationMask(dims, idx.astype(np.int64))
            yield mask.scatter(vals), mask
        if fh.read(1):
            raise StreamFormatError("trailing bytes after the last slice")


def read_stream(path):
    """Header plus the list of all slices."""
    with open(path, "rb") as fh:
        header = read_stream_header(fh)
    return header, list(iter_stream(path))


# -- run reports -------------------------------------------------------------

def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def report_row(result, wall_time):
    return {"time_index": result.time_index, "relative_error": result.relative_error,
            "residual_error": result.residual_error, "rank_estimate": result.rank_estimate,
            "sweeps": result.sweeps_used, "wall_time": wall_time,
            "elbo": result.elbo_trace[-1] if result.elbo_trace else None}


class ReportWriter:
    """CSV run report: fixed header, one row per slice, ``#`` footer lines."""

    def __init__(self, fh):
        self.fh = fh
        self._csv = csv.writer(fh, lineterminator="\n")
        self._csv.writerow(REPORT_COLUMNS)

    def write(self, row):
        self._csv.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
        self.fh.flush()

    def footer(self, config, seed):
        self.fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        self.fh.write(f"# seed: {seed}\n")
        self.fh.flush()


def read_report(path_or_text):
    """Parse a report into ``(rows, footer)``; rows map column name to value."""
    text = path_or_text
    if "\n" not in text:
        with open(path_or_text) as fh:
            text = fh.read()
    body = [ln for ln in text.splitlines() if not ln.startswith("#")]
    footer = {}
    for ln in text.splitlines():
        if ln.startswith("# "):
            key, _, value = ln[2:].partition(": ")
            footer[key] = json.loads(value)
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
        raise ValueError(f"unexpected report columns {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append({k: (None if v == "" else (int(v) if k in ("time_index", "rank_estimate", "sweeps")
                                                else float(v))) for k, v in rec.items()})
    return rows, footer


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, engine):
    """Write the full engine state (posterior, window, RNG) to ``path``."""
    arrays = {}
    meta = {"checkpoint_version": CHECKPOINT_VERSION, "config": engine.config.to_dict(),
            "slices_seen": engine.slices_seen,
            "rng_state": engine.rng.bit_generator.state,
            "window": {"capacity": engine.window.capacity, "mu": engine.window.mu,
                       "time_index": engine.window.time_index,
                       "length": len(engine.window)},
            "has_state": engine.state is not None}
    for k, (d, m) in enumerate(engine.window.slices):
        arrays[f"window_{k}_values"] = m.gather(d)
        arrays[f"window_{k}_flat"] = m.flat
        arrays[f"window_{k}_dims"] = np.asarray(m.dims, dtype=np.int64)
    st = engine.state
    if st is not None:
        meta["n_factors"] = len(st.factors)
        meta["priors"] = vars(st.priors).copy()
        for n, f in enumerate(st.factors):
            arrays[f"factor_{n}_mean"] = f.mean
            arrays[f"factor_{n}_cov"] = f.cov
        arrays["sparse_flat"] = st.sparse.mask.flat
        arrays["sparse_dims"] = np.asarray(st.sparse.mask.dims, dtype=np.int64)
        arrays["sparse_mean"] = st.sparse.mean
        arrays["sparse_var"] = st.sparse.var
        for name in ("lam", "gamma", "tau"):
            g = getattr(st, name)
            arrays[f"{name}_a"] = g.a
            arrays[f"{name}_b"] = g.b
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                                   dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Rebuild a :class:`StreamingEngine` saved by :func:`save_checkpoint`."""
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = meta.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version!r} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        cfg = dict(meta["config"])
        cfg["priors"] = HyperPriors(**cfg["priors"])
        engine = StreamingEngine(EngineConfig(**cfg))
        engine.rng.bit_generator.state = meta["rng_state"]
        engine.slices_seen = int(meta["slices_seen"])
        w = meta["window"]
        window = WindowState(int(w["capacity"]), float(w["mu"]))
        for k in range(int(w["length"])):
            mask = ObservationMask(tuple(data[f"window_{k}_dims"]), data[f"window_{k}_flat"])
            window.slices.append((mask.scatter(data[f"window_{k}_values"]), mask))
        window.time_index = int(w["time_index"])
        engine.window = window
        if meta["has_state"]:
            factors = [FactorPosterior(data[f"factor_{n}_mean"], data[f"factor_{n}_cov"])
                       for n in range(int(meta["n_factors"]))]
            smask = ObservationMask(tuple(data["sparse_dims"]), data["sparse_flat"])
            engine.state = ModelState(
                factors=factors,
                sparse=SparsePosterior(smask, data["sparse_mean"], data["sparse_var"]),
                lam=GammaPosterior(data["lam_a"], data["lam_b"]),
                gamma=GammaPosterior(data["gamma_a"], data["gamma_b"]),
                tau=GammaPosterior(data["tau_a"], data["tau_b"]),
                priors=HyperPriors(**meta["priors"]),
            )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc
    return engine
