"""Series ingestion, calendar covariates, rolling scaling and window sampling.

Three training-window regimes are supported:

``vanilla``
    consecutive rolling windows (the classic preprocessing);
``fixed``
    one window per rolling-grid horizon, with the context drawn at random
    (without replacement) from a bigger window before that horizon;
``augmented``
    horizon placed anywhere, context drawn from the whole history before it.

Context indices drawn at random are kept in draw order, so the temporal order
seen by the model is deliberately broken.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import zipfile
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MODES = ("vanilla", "fixed", "augmented")
SCALERS = ("one_plus_mean", "mean")

DEFAULT_WINDOW = 192
DEFAULT_HORIZON = 24
DEFAULT_CONTEXT = DEFAULT_WINDOW - DEFAULT_HORIZON
DEFAULT_SCALE_WIDTH = 192


class DataFormatError(ValueError):
    """Malformed input file; the message carries the offending line number."""


class HistoryTooShort(ValueError):
    pass


# -- containers -------------------------------------------------------------

@dataclass(frozen=True)
class SeriesInstance:
    id: str
    start: datetime
    freq: timedelta
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or len(vals) < 1:
            raise ValueError(f"instance {self.id!r}: need a non-empty 1-d value array")
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"instance {self.id!r}: values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def index_of(self, when: datetime) -> int:
        steps = (when - self.start) / self.freq
        if steps != int(steps):
            raise ValueError(f"{when} is not on the {self.freq} grid of instance {self.id!r}")
        return int(steps)


@dataclass(frozen=True)
class SeriesSet:
    instances: tuple

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))

    @property
    def k(self) -> int:
        return len(self.instances)

    def __len__(self):
        return self.k

    def __getitem__(self, i):
        return self.instances[i]

    @property
    def ids(self):
        return [inst.id for inst in self.instances]

    def covariates(self, extra: int = 0) -> list:
        """Calendar covariates for every instance, ``extra`` steps past its end."""
        return [make_covariates(s.start, len(s) + extra, s.freq) for s in self.instances]

    def until(self, when: datetime) -> "SeriesSet":
        """Observations strictly before ``when``."""
        out = []
        for s in self.instances:
            n = s.index_of(when)
            if n < 1:
                raise HistoryTooShort(f"instance {s.id!r} has no observations before {when}")
            out.append(replace(s, values=s.values[:min(n, len(s))]))
        return SeriesSet(out)

    def between(self, begin: datetime, end: datetime) -> "SeriesSet":
        """Observations in ``[begin, end)``; errors if the range is not fully covered."""
        out = []
        for s in self.instances:
            a, b = s.index_of(begin), s.index_of(end)
            if a < 0 or b > len(s) or b <= a:
                raise HistoryTooShort(
                    f"instance {s.id!r} covers {s.start}..{s.start + s.freq * len(s)}, "
                    f"not {begin}..{end}")
            out.append(SeriesInstance(s.id, begin, s.freq, s.values[a:b]))
        return SeriesSet(out)

    def subset(self, n: int) -> "SeriesSet":
        return SeriesSet(self.instances[:n])


# -- covariates -------------------------------------------------------------

def make_covariates(start: datetime, n: int, freq: timedelta = timedelta(hours=1)) -> np.ndarray:
    """Hour-of-day and day-of-week features, each mapped into [-0.5, 0.5] (Monday = 0)."""
    if n <= 0:
        return np.zeros((0, 2))
    t0 = np.datetime64(start.replace(tzinfo=None), "s")
    step = np.timedelta64(int(freq.total_seconds()), "s")
    times = t0 + step * np.arange(n)
    days = times.astype("datetime64[D]")
    hour = (times - days).astype("timedelta64[h]").astype(np.int64)
    weekday = (days.astype(np.int64) + 3) % 7  # 1970-01-01 was a Thursday
    return np.stack([hour / 23.0 - 0.5, weekday / 6.0 - 0.5], axis=1)


# -- scaling ----------------------------------------------------------------

def rolling_scale(values: np.ndarray, anchor_index: int, width: int = DEFAULT_SCALE_WIDTH,
                  variant: str = "one_plus_mean") -> float:
    """Scale factor from the ``width`` steps ending at ``anchor_index`` (inclusive).

    ``one_plus_mean`` gives ``1 + mean|z|`` and is never below 1. ``mean`` gives
    ``mean|z|`` (falling back to 1 on an all-zero span) and makes scaled
    windows exactly invariant to ``z -> c z``.
    """
    if width < 1:
        raise ValueError("rolling_scale: width must be >= 1")
    lo = max(0, anchor_index - width + 1)
    span = np.abs(np.asarray(values[lo:anchor_index + 1], dtype=np.float64))
    m = float(span.mean()) if len(span) else 0.0
    if variant == "one_plus_mean":
        return 1.0 + m
    if variant == "mean":
        return m if m > 0 else 1.0
    raise ValueError(f"unknown scaler variant {variant!r}; expected one of {SCALERS}")


# -- windows ----------------------------------------------------------------

@dataclass(frozen=True)
class WindowSpec:
    instance: int
    context: tuple
    horizon: tuple
    mode: str = "augmented"

    @property
    def horizon_start(self) -> int:
        return self.horizon[0]

    @property
    def indices(self) -> tuple:
        return self.context + self.horizon

    def check(self, context_length: int | None = None, horizon: int | None = None):
        h = np.asarray(self.horizon)
        c = np.asarray(self.context)
        if len(h) == 0 or np.any(np.diff(h) != 1):
            raise ValueError(f"{self}: horizon must be strictly consecutive")
        if len(c) and c.max() >= h[0]:
            raise ValueError(f"{self}: context reaches into the horizon")
        if len(c) and c.min() < 0:
            raise ValueError(f"{self}: negative context index")
        if len(set(self.context)) != len(self.context):
            raise ValueError(f"{self}: duplicate context indices")
        if context_length is not None and len(c) != context_length:
            raise ValueError(f"{self}: expected {context_length} context steps, got {len(c)}")
        if horizon is not None and len(h) != horizon:
            raise ValueError(f"{self}: expected horizon {horizon}, got {len(h)}")


def rolling_grid(T: int, context_length: int, horizon: int, min_start: int = 0) -> list:
    """Horizon starts of non-overlapping rolling windows, stepping back from the end by ``horizon``.

    ``min_start`` keeps horizons out of a zero-padded prefix.
    """
    starts = []
    end = T
    while end - horizon >= max(context_length, min_start):
        starts.append(end - horizon)
        end -= horizon
    return starts[::-1]


def sample_window(mode: str, rng: np.random.Generator, instance: int, T: int,
                  context_length: int = DEFAULT_CONTEXT, horizon: int = DEFAULT_HORIZON,
                  big_window: int | None = None, horizon_start: int | None = None) -> WindowSpec:
    """Draw one training window for an instance with ``T`` observed steps.

    ``horizon_start`` pins the horizon (used to walk the rolling grid in
    ``fixed`` mode); otherwise it is drawn. ``big_window=None`` lets the
    ``fixed`` sampler reach back over the whole history.
    """
    if mode not in MODES:
        raise ValueError(f"unknown sampler mode {mode!r}; expected one of {MODES}")
    C, tau = context_length, horizon
    need = C + tau
    if T < need:
        raise HistoryTooShort(f"{mode} sampling needs at least {need} steps of history, got {T}")

    if mode == "vanilla":
        s = int(rng.integers(0, T - C - tau + 1)) if horizon_start is None else horizon_start - C
        return WindowSpec(instance, tuple(range(s, s + C)), tuple(range(s + C, s + C + tau)), mode)

    if mode == "fixed":
        if big_window is not None and big_window < C + tau:
            raise ValueError(f"fixed sampling needs big_window >= {C + tau}, got {big_window}")
        if horizon_start is None:
            horizon_start = int(rng.choice(rolling_grid(T, C, tau)))
        lo = 0 if big_window is None else max(0, horizon_start + tau - big_window)
        pool = horizon_start - lo
        if pool < C:
            raise HistoryTooShort(f"big window before horizon {horizon_start} holds {pool} < {C} steps")
        ctx = lo + rng.choice(pool, size=C, replace=False)
    else:
        if horizon_start is None:
            horizon_start = int(rng.integers(C, T - tau + 1))
        ctx = rng.choice(horizon_start, size=C, replace=False)
    return WindowSpec(instance, tuple(int(i) for i in ctx),
                      tuple(range(horizon_start, horizon_start + tau)), mode)


def count_distinct_windows(mode: str, T: int, context_length: int, horizon: int,
                           ordered: bool = False, big_window: int | None = None) -> int:
    """Number of distinct training windows one instance of length ``T`` can yield.

    Context sets are counted unordered unless ``ordered`` is set, which
    multiplies the random-context modes by ``C!``.
    """
    C, tau = context_length, horizon
    if T < C + tau:
        raise HistoryTooShort(f"need T >= {C + tau}, got {T}")
    if mode == "vanilla":
        return T - C - tau + 1
    if mode == "augmented":
        total = sum(math.comb(h, C) for h in range(C, T - tau + 1))
    elif mode == "fixed":
        total = 0
        for h in rolling_grid(T, C, tau):
            lo = 0 if big_window is None else max(0, h + tau - big_window)
            total += math.comb(h - lo, C)
    else:
        raise ValueError(f"unknown sampler mode {mode!r}")
    return total * math.factorial(C) if ordered else total


def zero_pad(instance: SeriesInstance, n: int) -> SeriesInstance:
    """Prepend ``n`` zeros, moving the start timestamp back by ``n`` steps."""
    if n < 0:
        raise ValueError("zero_pad: n must be >= 0")
    if n == 0:
        return instance
    return SeriesInstance(instance.id, instance.start - instance.freq * n, instance.freq,
                          np.concatenate([np.zeros(n), instance.values]))


def pad_series(series: SeriesSet, n: int) -> SeriesSet:
    return SeriesSet([zero_pad(s, n) for s in series])


def validation_split(specs: Sequence, fraction: float = 0.10, rng: np.random.Generator | None = None):
    """Disjoint random train/validation partition; at least one spec lands on each side."""
    if not 0 < fraction < 1:
        raise ValueError("validation fraction must lie in (0, 1)")
    n = len(specs)
    if n < 2:
        raise ValueError(f"need at least 2 windows to split, got {n}")
    n_val = min(max(1, int(round(fraction * n))), n - 1)
    rng = rng if rng is not None else np.random.default_rng(0)
    perm = rng.permutation(n)
    val_idx = sorted(perm[:n_val].tolist())
    train_idx = sorted(perm[n_val:].tolist())
    return [specs[i] for i in train_idx], [specs[i] for i in val_idx]


# -- batches ----------------------------------------------------------------

@dataclass
class Batch:
    """Model-ready windows.

    ``inputs[b, p] = [z_{t-1} / nu_b, x_t]`` for the p-th selected time step ``t``
    of window ``b``; ``targets[b, p] = z_t / nu_b``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    scale: np.ndarray
    instance: np.ndarray
    horizon_mask: np.ndarray
    time_index: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.inputs)


def build_batch(specs: Sequence[WindowSpec], series: SeriesSet, covariates: list | None = None,
                scale_width: int = DEFAULT_SCALE_WIDTH, scaler: str = "one_plus_mean") -> Batch:
    if not specs:
        raise ValueError("build_batch: no windows given")
    if covariates is None:
        covariates = series.covariates()
    lengths = {len(s.indices) for s in specs}
    if len(lengths) != 1:
        raise ValueError(f"build_batch: windows have differing lengths {sorted(lengths)}")
    N = lengths.pop()
    B = len(specs)
    D = covariates[0].shape[1] if covariates else 0
    inputs = np.empty((B, N, 1 + D))
    targets = np.empty((B, N))
    scale = np.empty(B)
    inst = np.empty(B, dtype=np.int64)
    hmask = np.zeros((B, N), dtype=bool)
    tidx = np.empty((B, N), dtype=np.int64)
    for b, spec in enumerate(specs):
        if not 0 <= spec.instance < series.k:
            raise IndexError(f"build_batch: {spec} names instance {spec.instance} of {series.k}")
        z = series[spec.instance].values
        idx = np.asarray(spec.indices, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= len(z) or idx.max() >= len(covariates[spec.instance]):
            raise IndexError(f"build_batch: {spec} indexes outside [0, {len(z)})")
        nu = rolling_scale(z, spec.horizon_start - 1, scale_width, scaler)
        prev = np.where(idx > 0, z[np.maximum(idx - 1, 0)], 0.0)
        inputs[b, :, 0] = prev / nu
        inputs[b, :, 1:] = covariates[spec.instance][idx]
        targets[b] = z[idx] / nu
        scale[b] = nu
        inst[b] = spec.instance
        hmask[b, len(spec.context):] = True
        tidx[b] = idx
    return Batch(inputs, targets, scale, inst, hmask, tidx)


# -- file formats -----------------------------------------------------------

def _parse_float(text: str, lineno: int) -> float:
    t = text.strip().strip('"')
    try:
        v = float(t)
    except ValueError:
        raise DataFormatError(f"line {lineno}: cannot parse value {text!r}") from None
    if not math.isfinite(v):
        raise DataFormatError(f"line {lineno}: non-finite value {text!r}")
    return v


def _parse_time(text: str, lineno: int) -> datetime:
    t = text.strip().strip('"')
    try:
        return datetime.fromisoformat(t)
    except ValueError:
        raise DataFormatError(f"line {lineno}: cannot parse timestamp {text!r}") from None


def _read_electricity(fh: Iterable[str]) -> SeriesSet:
    """UCI LD2011_2014: ``;``-separated, decimal commas, 15-minute readings.

    Each timestamp marks the end of its 15-minute interval, so readings are
    bucketed by the hour in which their interval starts and averaged.
    """
    header = fh.readline()
    if not header.strip():
        raise DataFormatError("line 1: empty file")
    ids = [h.strip().strip('"') for h in header.rstrip("\r\n").split(";")[1:]]
    if not ids:
        raise DataFormatError("line 1: no value columns")
    sums: dict = {}
    counts: dict = defaultdict(int)
    order = []
    prev_ts = None
    for lineno, line in enumerate(fh, start=2):
        if not line.strip():
            continue
        parts = line.rstrip("\r\n").replace(",", ".").split(";")
        if len(parts) != len(ids) + 1:
            raise DataFormatError(f"line {lineno}: expected {len(ids) + 1} columns, got {len(parts)}")
        ts = _parse_time(parts[0], lineno)
        if prev_ts is not None and ts <= prev_ts:
            raise DataFormatError(f"line {lineno}: timestamps not increasing")
        prev_ts = ts
        try:
            vals = np.array([p.strip('"') for p in parts[1:]], dtype=np.float64)
        except ValueError:
            vals = np.array([_parse_float(p, lineno) for p in parts[1:]])
        if not np.all(np.isfinite(vals)):
            raise DataFormatError(f"line {lineno}: non-finite value")
        hour = (ts - timedelta(minutes=15)).replace(minute=0, second=0, microsecond=0)
        if hour not in sums:
            sums[hour] = np.zeros(len(ids))
            order.append(hour)
        sums[hour] += vals
        counts[hour] += 1
    if not order:
        raise DataFormatError("no data rows")
    for a, b in zip(order, order[1:]):
        if b - a != timedelta(hours=1):
            raise DataFormatError(f"gap in hourly grid between {a} and {b}")
    matrix = np.stack([sums[h] / counts[h] for h in order])
    return SeriesSet([SeriesInstance(i, order[0], timedelta(hours=1), matrix[:, j])
                      for j, i in enumerate(ids)])


def _read_generic(fh: Iterable[str]) -> SeriesSet:
    """Wide CSV: ``timestamp,id1,id2,...`` with ISO timestamps and uniform frequency."""
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError("line 1: empty file") from None
    if len(header) < 2:
        raise DataFormatError("line 1: need a timestamp column and at least one series column")
    ids = [h.strip() for h in header[1:]]
    times, rows = [], []
    freq = None
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"line {lineno}: expected {len(header)} columns, got {len(row)}")
        ts = _parse_time(row[0], lineno)
        if times:
            step = ts - times[-1]
            if freq is None:
                if step <= timedelta(0):
                    raise DataFormatError(f"line {lineno}: timestamps not increasing")
                freq = step
            elif step != freq:
                raise DataFormatError(f"line {lineno}: step {step} differs from inferred frequency {freq}")
        times.append(ts)
        rows.append([_parse_float(v, lineno) for v in row[1:]])
    if not rows:
        raise DataFormatError("no data rows")
    matrix = np.asarray(rows, dtype=np.float64)
    freq = freq or timedelta(hours=1)
    return SeriesSet([SeriesInstance(i, times[0], freq, matrix[:, j]) for j, i in enumerate(ids)])


def load_series(path, format: str = "generic_csv") -> SeriesSet:
    """Read a dataset file.

    ``format`` is ``electricity`` (raw UCI file), ``traffic`` / ``generic_csv``
    (wide CSV, see :func:`convert_pems` for the traffic conversion) or
    ``archive`` (the output of :func:`save_archive`).
    """
    path = Path(path)
    if format == "archive":
        return load_archive(path)
    readers = {"electricity": _read_electricity, "traffic": _read_generic, "generic_csv": _read_generic}
    if format not in readers:
        raise ValueError(f"unknown format {format!r}; expected one of {sorted(readers) + ['archive']}")
    with open(path, newline="", encoding="utf-8") as fh:
        series = readers[format](fh)
    logger.info("loaded %d series (%d steps) from %s", series.k, len(series[0]), path)
    return series


def _read_matlab_rows(line: str) -> np.ndarray:
    body = line.strip().strip("[]")
    return np.array([[float(v) for v in row.split()] for row in body.split(";")])


def convert_pems(train_path, test_path, randperm_path, out_path, start: datetime = datetime(2008, 1, 1),
                 steps_per_hour: int = 6) -> Path:
    """Turn the PEMS-SF matrix files into the generic wide CSV at hourly resolution.

    Days are restored to calendar order with the ``randperm`` file and laid out
    back to back from ``start``; the days removed from the original release are
    not reinserted.
    """
    days = []
    for p in (train_path, test_path):
        with open(p, encoding="utf-8") as fh:
            days.extend(_read_matlab_rows(line) for line in fh if line.strip())
    with open(randperm_path, encoding="utf-8") as fh:
        perm = [int(v) for v in fh.read().strip().strip("[]").split()]
    if len(perm) != len(days):
        raise DataFormatError(f"randperm lists {len(perm)} days but the matrices hold {len(days)}")
    ordered = [None] * len(days)
    for pos, day in zip(perm, days):
        ordered[pos - 1] = day
    full = np.concatenate(ordered, axis=1)  # lanes x (days * steps)
    hourly = full.reshape(full.shape[0], -1, steps_per_hour).mean(axis=2)
    out_path = Path(out_path)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + [f"lane_{j}" for j in range(hourly.shape[0])])
        for t in range(hourly.shape[1]):
            w.writerow([(start + timedelta(hours=t)).isoformat()] + [repr(float(v)) for v in hourly[:, t]])
    return out_path


# -- archives ---------------------------------------------------------------

def _series_payload(series: SeriesSet):
    meta = [{"id": s.id, "start": s.start.isoformat(), "freq_seconds": s.freq.total_seconds(),
             "length": len(s)} for s in series]
    values = np.concatenate([s.values for s in series]).astype("<f8")
    return meta, values


def series_checksum(series: SeriesSet) -> str:
    meta, values = _series_payload(series)
    h = hashlib.sha256(json.dumps(meta, sort_keys=True).encode())
    h.update(values.tobytes())
    return h.hexdigest()


def write_npz(path, arrays: dict) -> None:
    """``np.savez`` with fixed zip timestamps so identical arrays give identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def save_archive(series: SeriesSet, path) -> str:
    meta, values = _series_payload(series)
    write_npz(path, {"meta": np.array(json.dumps(meta, sort_keys=True)), "values": values})
    return series_checksum(series)


def load_archive(path) -> SeriesSet:
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["meta"]))
        values = npz["values"]
    out, pos = [], 0
    for m in meta:
        n = m["length"]
        out.append(SeriesInstance(m["id"], datetime.fromisoformat(m["start"]),
                                  timedelta(seconds=m["freq_seconds"]), values[pos:pos + n]))
        pos += n
    return SeriesSet(out)
