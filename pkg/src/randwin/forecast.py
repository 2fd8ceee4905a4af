"""Sample-path forecasting, quantile metrics and the sampler comparison harnesses."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import train as T

ELECTRICITY_START = datetime(2014, 9, 1, 0, 0)
TRAFFIC_START = datetime(2008, 6, 15, 17, 0)
FORECAST_STARTS = {"electricity": ELECTRICITY_START, "traffic": TRAFFIC_START}
WEEK = timedelta(days=7)
EVAL_HORIZON = 168
DEFAULT_QUANTILES = (0.5, 0.9)

# Published quantile losses, kept for side-by-side display only.
# REFERENCE_BASELINES[dataset][weeks][model] = (rho_0.5, rho_0.9)
REFERENCE_BASELINES = {
    "electricity": {
        2: {"DeepAR": (0.153, 0.147), "DeepSSM": (0.087, 0.05), "ARIMA": (0.283, 0.109),
            "ETS": (0.121, 0.101), "augmented": (0.083, 0.044)},
        3: {"DeepAR": (0.147, 0.132), "DeepSSM": (0.130, 0.110), "ARIMA": (0.291, 0.112),
            "ETS": (0.130, 0.110), "augmented": (0.083, 0.042)},
        4: {"DeepAR": (0.125, 0.080), "DeepSSM": (0.130, 0.110), "ARIMA": (0.30, 0.110),
            "ETS": (0.13, 0.11), "augmented": (0.084, 0.041)},
    },
    "traffic": {
        2: {"DeepAR": (0.177, 0.153), "DeepSSM": (0.168, 0.117), "ARIMA": (0.492, 0.280),
            "ETS": (0.621, 0.650), "augmented": (0.141, 0.099)},
        3: {"DeepAR": (0.126, 0.096), "DeepSSM": (0.170, 0.113), "ARIMA": (0.492, 0.509),
            "ETS": (0.529, 0.163), "augmented": (0.140, 0.101)},
        4: {"DeepAR": (0.219, 0.138), "DeepSSM": (0.168, 0.114), "ARIMA": (0.501, 0.298),
            "ETS": (0.532, 0.60), "augmented": (0.140, 0.104)},
    },
}

# REFERENCE_SAMPLERS[dataset][weeks][mode] = ((mean_0.5, sd_0.5), (mean_0.9, sd_0.9)); sd is None if unreported
REFERENCE_SAMPLERS = {
    "electricity": {
        2: {"vanilla": ((0.107, None), (0.051, None)), "fixed": ((0.0846, 0.0019), (0.0454, 0.0025)),
            "augmented": ((0.0828, 0.0016), (0.0442, 0.0015))},
        3: {"vanilla": ((0.098, None), (0.051, None)), "fixed": ((0.0886, 0.0025), (0.0434, 0.0018)),
            "augmented": ((0.0830, 0.0025), (0.0424, 0.0017))},
        4: {"vanilla": ((0.092, None), (0.047, None)), "fixed": ((0.0886, 0.0034), (0.0440, 0.0012)),
            "augmented": ((0.0843, 0.0017), (0.0410, 0.0013))},
    },
    "traffic": {
        2: {"vanilla": ((0.223, None), (0.177, None)), "fixed": ((0.1546, 0.0079), (0.1114, 0.0007)),
            "augmented": ((0.1413, 0.0019), (0.0988, 0.0014))},
        3: {"vanilla": ((0.210, None), (0.163, None)), "fixed": ((0.1428, 0.0031), (0.1038, 0.0023)),
            "augmented": ((0.1396, 0.0019), (0.1009, 0.0026))},
        4: {"vanilla": ((0.223, None), (0.184, None)), "fixed": ((0.147, 0.0067), (0.106, 0.0101)),
            "augmented": ((0.140, 0.0048), (0.104, 0.0042))},
    },
}


# -- requests and results ---------------------------------------------------

@dataclass(frozen=True)
class ForecastRequest:
    """What to forecast: which instances, from when, how far, with how many sample paths.

    ``instances`` holds positions in the series set; ``None`` means all of them.
    ``context_cap`` limits the observed history fed to the model (``None``: all of it).
    """

    start: datetime
    horizon: int = EVAL_HORIZON
    n_samples: int = 100
    quantiles: tuple = DEFAULT_QUANTILES
    instances: tuple | None = None
    context_cap: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "quantiles", tuple(float(q) for q in self.quantiles))
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if not self.quantiles:
            raise ValueError("at least one quantile is required")
        bad = [q for q in self.quantiles if not 0.0 < q < 1.0]
        if bad:
            raise ValueError(f"quantiles must lie in (0, 1): {bad}")
        if self.context_cap is not None and self.context_cap < 1:
            raise ValueError("context_cap must be >= 1")


@dataclass
class QuantileForecast:
    """Per-quantile point forecasts, shape ``(k, horizon)``, plus the raw sample paths ``(k, n, horizon)``."""

    ids: list
    start: datetime
    quantiles: dict
    samples: np.ndarray

    def __post_init__(self):
        qs = sorted(self.quantiles)
        for lo, hi in zip(qs, qs[1:]):
            if np.any(self.quantiles[lo] > self.quantiles[hi]):
                raise ValueError(f"quantile forecast for {lo} exceeds the one for {hi}")


@dataclass
class ForecastReport:
    """Per-trial quantile losses of one dataset / training range / sampler mode."""

    dataset: str
    weeks: int | None
    mode: str
    values: dict  # rho -> list of per-trial QL
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = {float(r): [float(v) for v in vs] for r, vs in self.values.items()}
        counts = {len(vs) for vs in self.values.values()}
        if not self.values or counts == {0}:
            raise ValueError("a report needs at least one trial")
        if len(counts) != 1:
            raise ValueError(f"per-quantile trial counts differ: {sorted(counts)}")

    @property
    def trials(self) -> int:
        return len(next(iter(self.values.values())))

    def mean(self, rho: float) -> float:
        return float(np.mean(self.values[float(rho)]))

    def sd(self, rho: float) -> float:
        """Sample standard deviation across trials (0 for a single trial)."""
        vs = self.values[float(rho)]
        return float(np.std(vs, ddof=1)) if len(vs) > 1 else 0.0

    def summary(self, rho: float) -> str:
        return f"{self.mean(rho):.4f} ± {self.sd(rho):.4f}"

    def records(self) -> list:
        """One flat record per quantile and trial."""
        return [{"dataset": self.dataset, "weeks": self.weeks, "mode": self.mode, "rho": rho,
                 "trial": t, "ql": v}
                for rho, vs in sorted(self.values.items()) for t, v in enumerate(vs)]

    @classmethod
    def from_records(cls, records: list) -> "ForecastReport":
        if not records:
            raise ValueError("no records")
        head = records[0]
        values = {}
        for r in sorted(records, key=lambda r: (r["rho"], r["trial"])):
            values.setdefault(float(r["rho"]), []).append(r["ql"])
        return cls(head["dataset"], head["weeks"], head["mode"], values)


# -- metrics ----------------------------------------------------------------

def empirical_quantile(trajectories, rho: float, axis: int = -2) -> np.ndarray:
    """The ``ceil(rho * n)``-th smallest of the ``n`` samples along ``axis``.

    With the default ``axis=-2``, ``(k, n, steps)`` sample paths give a
    ``(k, steps)`` result and ``(n, steps)`` gives ``(steps,)``.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    x = np.asarray(trajectories, dtype=np.float64)
    n = x.shape[axis]
    if n < 1:
        raise ValueError("need at least one sample")
    # round first so that e.g. 0.9 * 100 = 90.00000000000001 still selects the 90th value
    r = min(max(math.ceil(round(rho * n, 9)), 1), n)
    return np.take(np.sort(x, axis=axis), r - 1, axis=axis)


def quantile_loss(z, zhat, rho: float) -> float:
    """``2 * sum P_rho(z, zhat) / sum |z|``, pooled over every element."""
    z = np.asarray(z, dtype=np.float64)
    zhat = np.asarray(zhat, dtype=np.float64)
    if z.shape != zhat.shape:
        raise ValueError(f"z {z.shape} and zhat {zhat.shape} differ in shape")
    denom = np.abs(z).sum()
    if denom == 0:
        raise ZeroDivisionError("quantile_loss: sum of |z| is zero")
    diff = z - zhat
    pinball = np.where(diff > 0, rho * diff, (rho - 1.0) * diff)
    return float(2.0 * pinball.sum() / denom)


# -- sampling ---------------------------------------------------------------

def _instance_chunk(config: M.ModelConfig, n: int, steps: int, budget_bytes: float = 2.5e8) -> int:
    per_instance = 8 * 2 * config.n_blocks * config.n_heads * n * steps * max(config.d_k, config.d_v)
    return max(1, int(budget_bytes // max(per_instance, 1)))


def predict_samples(params: dict, config: M.ModelConfig, series: D.SeriesSet, request: ForecastRequest,
                    rng: np.random.Generator, covariates: list | None = None, scale_width: int = D.DEFAULT_SCALE_WIDTH,
                    scaler: str = "one_plus_mean", zero_noise: bool = False) -> np.ndarray:
    """Sample ``n`` trajectories of ``horizon`` steps from ``request.start`` on.

    Only observations strictly before the forecast start are read. Each
    trajectory feeds its own scaled draw back as the next step's lagged value.
    Returns de-scaled paths of shape ``(k, n, horizon)``. ``zero_noise`` rolls
    out the mean (every path identical).
    """
    chosen = list(range(series.k)) if request.instances is None else list(request.instances)
    history = series.until(request.start)
    if covariates is None:
        covariates = [D.make_covariates(s.start, len(s) + request.horizon, s.freq) for s in history]
    n, horizon = request.n_samples, request.horizon
    out = np.empty((len(chosen), n, horizon))
    # instances with equal history length share one decoder
    by_length: dict = {}
    for pos, i in enumerate(chosen):
        by_length.setdefault(len(history[i]), []).append((pos, i))
    chunk = _instance_chunk(config, n, horizon)
    for length, members in sorted(by_length.items()):
        lo = 0 if request.context_cap is None else max(0, length - request.context_cap)
        for c0 in range(0, len(members), chunk):
            group = members[c0:c0 + chunk]
            idx = [i for _, i in group]
            prefix, nus, futures = [], [], []
            for i in idx:
                z = history[i].values
                cov = covariates[i]
                if len(cov) < length + horizon:
                    raise ValueError(f"instance {history[i].id!r}: covariates end at step {len(cov)}, "
                                     f"forecast needs {length + horizon}")
                nu = D.rolling_scale(z, length - 1, scale_width, scaler)
                t = np.arange(lo, length)
                prev = np.where(t > 0, z[np.maximum(t - 1, 0)], 0.0) / nu
                prefix.append(np.column_stack([prev, cov[t]]))
                nus.append(nu)
                futures.append(cov[length:length + horizon])
            nus = np.asarray(nus)
            futures = np.asarray(futures)                              # (g, horizon, D)
            dec = M.Decoder(params, config, np.asarray(prefix), idx, n, horizon)
            z_last = np.array([history[i].values[-1] for i in idx])
            last = np.repeat((z_last / nus)[:, None], n, axis=1)      # (g, n) scaled z_{T-1}
            paths = np.empty((len(idx), n, horizon))
            for s in range(horizon):
                x = np.concatenate([last[..., None], np.broadcast_to(futures[:, None, s], (len(idx), n, futures.shape[-1]))],
                                   axis=-1)
                mu, sigma = dec.step(x)
                draw = mu if zero_noise else mu + sigma * rng.standard_normal(mu.shape)
                paths[..., s] = draw
                last = draw
            for (pos, _), path, nu in zip(group, paths, nus):
                out[pos] = path * nu
    return out


def quantile_forecast(samples: np.ndarray, quantiles, ids, start) -> QuantileForecast:
    return QuantileForecast(list(ids), start, {float(q): empirical_quantile(samples, q) for q in quantiles},
                            samples)


def seasonal_naive(series: D.SeriesSet, start: datetime, horizon: int, season: int = 168) -> np.ndarray:
    """Repeat the last observed season; ``(k, horizon)``."""
    hist = series.until(start)
    out = []
    for s in hist:
        if len(s) < season:
            raise D.HistoryTooShort(f"instance {s.id!r}: {len(s)} steps, seasonal naive needs {season}")
        last = s.values[-season:]
        out.append(np.resize(last, horizon))
    return np.asarray(out)


# -- benchmark protocol ------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkProtocol:
    """A training range of ``weeks`` weeks ending at ``start``, then a forecast of ``horizon`` steps.

    ``weeks=None`` trains on everything before ``start``. With ``rolling_step``
    set, the horizon is forecast in chunks of that many steps, each conditioned
    on the observed values before it (day-ahead forecasts over the week);
    otherwise one rollout covers the whole horizon.
    """

    dataset: str
    start: datetime
    weeks: int | None = 2
    horizon: int = EVAL_HORIZON
    n_samples: int = 100
    quantiles: tuple = DEFAULT_QUANTILES
    trials: int = 3
    context_cap: int | None = None
    seeds: tuple | None = None
    rolling_step: int | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.rolling_step is not None and (self.rolling_step < 1 or self.horizon % self.rolling_step):
            raise ValueError(f"rolling_step {self.rolling_step} must be >= 1 and divide the horizon {self.horizon}")
        if self.seeds is not None and len(self.seeds) != self.trials:
            raise ValueError(f"{len(self.seeds)} seeds given for {self.trials} trials")

    def trial_seeds(self) -> list:
        return list(self.seeds) if self.seeds is not None else list(range(self.trials))

    def request(self) -> ForecastRequest:
        return ForecastRequest(self.start, self.horizon, self.n_samples, self.quantiles,
                               context_cap=self.context_cap)

    def split(self, series: D.SeriesSet):
        """``(training series, test targets (k, horizon))``."""
        freq = series[0].freq
        end = self.start + freq * self.horizon
        if self.weeks is None:
            train = series.until(self.start)
        else:
            train = series.between(self.start - WEEK * self.weeks, self.start)
        test = series.between(self.start, end)
        return train, np.stack([s.values for s in test])


def protocol_samples(params, config, train_series: D.SeriesSet, targets, protocol: BenchmarkProtocol,
                     seed: int, train_config: T.TrainConfig | None = None) -> np.ndarray:
    """Sample paths ``(k, n_samples, horizon)`` for the protocol's test range.

    The forecast starts right after ``train_series``. Under ``rolling_step``
    each chunk may read ``targets`` only before its own first step.
    """
    tc = train_config or T.TrainConfig()
    freq = train_series[0].freq
    ends = {s.start + freq * len(s) for s in train_series}
    if len(ends) != 1:
        raise ValueError("training instances must all end at the forecast start")
    request = replace(protocol.request(), start=ends.pop())
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF0CA]))
    step = protocol.rolling_step or protocol.horizon
    parts = []
    for lo in range(0, protocol.horizon, step):
        history = train_series if lo == 0 else _append_observed(train_series, np.asarray(targets)[:, :lo])
        chunk = replace(request, start=request.start + freq * lo, horizon=step)
        parts.append(predict_samples(params, config, history, chunk, rng,
                                     scale_width=tc.scale_width, scaler=tc.scaler))
    return np.concatenate(parts, axis=-1)


def evaluate_forecast(params, config, train_series: D.SeriesSet, targets, protocol: BenchmarkProtocol,
                      seed: int, train_config: T.TrainConfig | None = None) -> dict:
    """QL per quantile for one trained model."""
    samples = protocol_samples(params, config, train_series, targets, protocol, seed, train_config)
    return {float(q): quantile_loss(targets, empirical_quantile(samples, q), q) for q in protocol.quantiles}


def _append_observed(series: D.SeriesSet, observed) -> D.SeriesSet:
    return D.SeriesSet([D.SeriesInstance(s.id, s.start, s.freq, np.concatenate([s.values, obs]))
                        for s, obs in zip(series, observed)])


def evaluate_benchmark(trained: list, series: D.SeriesSet, protocol: BenchmarkProtocol, mode: str = "augmented",
                       train_config: T.TrainConfig | None = None) -> ForecastReport:
    """Score already-trained models, one ``(params, config, seed)`` per trial."""
    train_series, targets = protocol.split(series)
    values = {float(q): [] for q in protocol.quantiles}
    for params, config, seed in trained:
        ql = evaluate_forecast(params, config, train_series, targets, protocol, seed, train_config)
        for q, v in ql.items():
            values[q].append(v)
    return ForecastReport(protocol.dataset, protocol.weeks, mode, values)


def run_benchmark(model_config: M.ModelConfig, train_config: T.TrainConfig, series: D.SeriesSet,
                  protocol: BenchmarkProtocol, on_trial=None) -> ForecastReport:
    """Train one model per trial seed on the protocol's range and score its forecast."""
    train_series, targets = protocol.split(series)
    values = {float(q): [] for q in protocol.quantiles}
    logs = []
    for seed in protocol.trial_seeds():
        tc = replace(train_config, seed=int(seed))
        params, log = T.fit(model_config, tc, train_series)
        config = replace(model_config, n_instances=train_series.k)
        ql = evaluate_forecast(params, config, train_series, targets, protocol, int(seed), tc)
        for q, v in ql.items():
            values[q].append(v)
        logs.append({"seed": int(seed), "epochs": len(log.entries), "best_epoch": log.best_epoch,
                     "best_val_loss": log.best_val_loss})
        if on_trial is not None:
            on_trial(train_config.sampler, int(seed), params, config, log, ql)
    return ForecastReport(protocol.dataset, protocol.weeks, train_config.sampler, values, {"trials": logs})


def compare_samplers(series: D.SeriesSet, model_config: M.ModelConfig, train_config: T.TrainConfig,
                     protocol: BenchmarkProtocol, modes=D.MODES, on_trial=None) -> dict:
    """Train and score each sampler mode with the same seeds and per-epoch window budget."""
    if protocol.trials < 1:
        raise ValueError("need at least one trial per mode")
    return {mode: run_benchmark(model_config, replace(train_config, sampler=mode), series, protocol, on_trial)
            for mode in modes}


def pooled_sd(a, b) -> float:
    """Pooled sample standard deviation of two groups."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    dof = len(a) + len(b) - 2
    if dof <= 0:
        return 0.0
    ss = ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()
    return float(math.sqrt(ss / dof))


# -- synthetic seasonality --------------------------------------------------

SYNTHETIC_START = datetime(2020, 1, 6)  # a Monday


def noisy_sinusoids(k: int, period: int, length: int, noise: float = 0.1, seed: int = 0,
                    level: float = 3.0, start: datetime = SYNTHETIC_START) -> D.SeriesSet:
    """``k`` hourly instances ``a_i (level + sin(2 pi t / period + phi_i)) + noise * a_i * eps``."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    out = []
    for i in range(k):
        amp = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        z = amp * (level + np.sin(2.0 * math.pi * t / period + phase)) + noise * amp * rng.standard_normal(length)
        out.append(D.SeriesInstance(f"sin{i:02d}", start, timedelta(hours=1), z))
    return D.SeriesSet(out)


@dataclass(frozen=True)
class SeasonalitySetup:
    k: int = 20
    train_weeks: int = 4
    noise: float = 0.1
    data_seed: int = 0
    horizon: int = EVAL_HORIZON
    n_samples: int = 100
    trials: int = 3
    control_period: int | None = 168


def seasonality_benchmark(period: int = 336, window: int = D.DEFAULT_WINDOW, trials: int = 3,
                          model_config: M.ModelConfig | None = None, train_config: T.TrainConfig | None = None,
                          setup: SeasonalitySetup | None = None, modes=D.MODES, on_trial=None) -> dict:
    """Sampler comparison on noisy sinusoids whose period exceeds the training window.

    Returns ``{"period": {...}, "control": {...} or None}``, each mapping mode to
    a :class:`ForecastReport`. The control repeats the comparison with
    ``setup.control_period`` (at most ``window``).
    """
    if period <= window:
        raise ValueError(f"period {period} must exceed the window {window}")
    setup = replace(setup or SeasonalitySetup(), trials=trials)
    tc = train_config or T.TrainConfig()
    horizon = tc.horizon
    tc = replace(tc, context_length=window - horizon)
    mc = model_config or M.ModelConfig()

    def run(p, label):
        length = setup.train_weeks * 168 + setup.horizon
        series = noisy_sinusoids(setup.k, p, length, setup.noise, setup.data_seed)
        start = SYNTHETIC_START + timedelta(hours=setup.train_weeks * 168)
        proto = BenchmarkProtocol(label, start, setup.train_weeks, setup.horizon, setup.n_samples,
                                  trials=setup.trials)
        return compare_samplers(series, mc, tc, proto, modes, on_trial)

    out = {"period": run(period, f"sinusoid-{period}"), "control": None}
    if setup.control_period is not None:
        if setup.control_period > window:
            raise ValueError(f"control period {setup.control_period} must not exceed the window {window}")
        out["control"] = run(setup.control_period, f"sinusoid-{setup.control_period}")
    return out


# -- report files -----------------------------------------------------------

def write_reports(reports, out_dir) -> dict:
    """Write ``records.jsonl``, ``plot.csv`` (mode, rho, trial, ql) and ``table.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = list(reports)
    records = [r for rep in reports for r in rep.records()]
    with open(out_dir / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    with open(out_dir / "plot.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "weeks", "mode", "rho", "trial", "ql"])
        for r in records:
            w.writerow([r["dataset"], r["weeks"], r["mode"], r["rho"], r["trial"], repr(r["ql"])])
    with open(out_dir / "table.txt", "w") as fh:
        fh.write(format_table(reports))
    return {"records": out_dir / "records.jsonl", "plot": out_dir / "plot.csv", "table": out_dir / "table.txt"}


def format_table(reports) -> str:
    reports = list(reports)
    rhos = sorted({q for rep in reports for q in rep.values})
    head = ["dataset", "weeks", "mode", "trials"] + [f"QL_{q:g}" for q in rhos]
    rows = [[rep.dataset, str(rep.weeks), rep.mode, str(rep.trials)]
            + [rep.summary(q) if q in rep.values else "-" for q in rhos] for rep in reports]
    widths = [max(len(r[c]) for r in [head] + rows) for c in range(len(head))]
    fmt = lambda r: "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(head)] + [fmt(r) for r in rows]) + "\n"


def read_records(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
