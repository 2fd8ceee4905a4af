"""Teacher-forced training over sampled windows, early stopping and grid search."""
from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import numkernel as nk

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
SCOPES = ("horizon_only", "all_steps")


@dataclass(frozen=True)
class TrainConfig:
    sampler: str = "augmented"
    batch_size: int = 64
    max_epochs: int = 30
    windows_per_epoch: int | None = None
    patience: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    seed: int = 0
    loss_scope: str = "horizon_only"
    context_length: int = D.DEFAULT_CONTEXT
    horizon: int = D.DEFAULT_HORIZON
    big_window: int | None = None
    pad: int | None = None
    scale_width: int = D.DEFAULT_SCALE_WIDTH
    scaler: str = "one_plus_mean"
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.sampler not in D.MODES:
            raise ValueError(f"sampler must be one of {D.MODES}, got {self.sampler!r}")
        if self.loss_scope not in SCOPES:
            raise ValueError(f"loss_scope must be one of {SCOPES}, got {self.loss_scope!r}")
        if self.scaler not in D.SCALERS:
            raise ValueError(f"scaler must be one of {D.SCALERS}, got {self.scaler!r}")
        for name in ("batch_size", "max_epochs", "patience", "context_length", "horizon", "scale_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be >= 1")
        if self.windows_per_epoch is not None and self.windows_per_epoch < 1:
            raise ValueError("TrainConfig.windows_per_epoch must be >= 1")
        if self.lr < 0:
            raise ValueError("TrainConfig.lr must be >= 0")

    @property
    def vanilla_pad(self) -> int:
        return self.context_length if self.pad is None else self.pad

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def append(self, entry: dict):
        if self.entries and entry["epoch"] <= self.entries[-1]["epoch"]:
            raise ValueError("TrainLog epochs must increase")
        self.entries.append(entry)

    @property
    def val_losses(self):
        return [e["val_loss"] for e in self.entries]

    @property
    def best_epoch(self) -> int:
        return self.entries[int(np.argmin(self.val_losses))]["epoch"]

    @property
    def best_val_loss(self) -> float:
        return float(np.min(self.val_losses))

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrainLog":
        log = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    log.append(json.loads(line))
        return log


# -- loss -------------------------------------------------------------------

def _scope(scope_mask, shape):
    m = np.ones(shape, dtype=bool) if scope_mask is None else np.asarray(scope_mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("nll_loss: scope mask selects no steps")
    return m, n


def nll_loss(mu, sigma, targets, scope_mask=None) -> float:
    """Mean Gaussian negative log-likelihood over the selected steps."""
    return nll_and_grad(mu, sigma, targets, scope_mask)[0]


def nll_and_grad(mu, sigma, targets, scope_mask=None):
    """``(loss, dloss/dmu, dloss/dsigma)``."""
    if np.any(sigma <= 0):
        raise ValueError("nll_loss: sigma must be positive")
    m, n = _scope(scope_mask, np.shape(mu))
    r = targets - mu
    per_step = 0.5 * LOG_2PI + np.log(sigma) + r * r / (2.0 * sigma * sigma)
    loss = per_step[m].sum() / n  # keeps the input precision (longdouble in gradient checks)
    w = m / n
    dmu = -r / (sigma * sigma) * w
    dsigma = (1.0 / sigma - r * r / sigma ** 3) * w
    return loss, dmu, dsigma


# -- window pools -----------------------------------------------------------

@dataclass
class WindowPlan:
    """Everything a training run samples from, fixed up front."""

    series: D.SeriesSet
    covariates: list
    train_specs: list
    val_specs: list
    windows_per_epoch: int
    blocked: list  # per instance: steps used as validation targets


def _grid_specs(mode, series, cfg, rng, min_start=0):
    specs = []
    for i, s in enumerate(series):
        for h in D.rolling_grid(len(s), cfg.context_length, cfg.horizon, min_start):
            specs.append(D.sample_window(mode, rng, i, len(s), cfg.context_length, cfg.horizon,
                                         big_window=cfg.big_window, horizon_start=h))
    return specs


def vanilla_grid_count(series: D.SeriesSet, cfg: TrainConfig) -> int:
    pad = cfg.vanilla_pad
    return sum(len(D.rolling_grid(len(s) + pad, cfg.context_length, cfg.horizon, pad)) for s in series)


def plan_windows(series: D.SeriesSet, cfg: TrainConfig, rng: np.random.Generator) -> WindowPlan:
    """Build the fixed window pool and validation split for a sampler mode.

    ``vanilla`` walks the rolling grid of the zero-padded series; ``fixed``
    draws one random-context window per (unpadded) rolling-grid horizon, once;
    ``augmented`` draws a pool only to carve out validation windows and then
    samples fresh training windows every epoch.
    """
    mode = cfg.sampler
    if mode == "vanilla":
        series = D.pad_series(series, cfg.vanilla_pad)
        pool = _grid_specs("vanilla", series, cfg, rng, min_start=cfg.vanilla_pad)
    elif mode == "fixed":
        pool = _grid_specs("fixed", series, cfg, rng)
    else:
        eligible = [i for i, s in enumerate(series) if len(s) >= cfg.context_length + cfg.horizon]
        if not eligible:
            raise D.HistoryTooShort(f"augmented sampling needs {cfg.context_length + cfg.horizon} steps")
        n_pool = max(2, vanilla_grid_count(series, cfg))
        pool = [D.sample_window("augmented", rng, i, len(series[i]), cfg.context_length, cfg.horizon)
                for i in rng.choice(eligible, size=n_pool)]
    if len(pool) < 2:
        raise D.HistoryTooShort(f"{mode} sampling yields {len(pool)} window(s); need at least 2 for a validation split")
    train_specs, val_specs = D.validation_split(pool, cfg.val_fraction, rng)
    blocked = [np.zeros(len(s), dtype=bool) for s in series]
    for spec in val_specs:
        blocked[spec.instance][list(spec.horizon)] = True
    if mode == "augmented":
        # same per-epoch budget as the vanilla rolling grid
        wpe = cfg.windows_per_epoch or max(1, len(pool) - len(val_specs))
    else:
        wpe = len(train_specs)
    return WindowPlan(series, series.covariates(), train_specs, val_specs, wpe, blocked)


def draw_augmented(plan: WindowPlan, cfg: TrainConfig, rng: np.random.Generator, n: int) -> list:
    """Fresh augmented windows whose horizons avoid validation targets."""
    eligible = [i for i, s in enumerate(plan.series) if len(s) >= cfg.context_length + cfg.horizon]
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise RuntimeError("could not draw training windows clear of the validation horizons")
        i = int(rng.choice(eligible))
        spec = D.sample_window("augmented", rng, i, len(plan.series[i]), cfg.context_length, cfg.horizon)
        if not plan.blocked[i][list(spec.horizon)].any():
            out.append(spec)
    return out


# -- epochs -----------------------------------------------------------------

def _horizon_offset(batch) -> int:
    # windows are context rows followed by horizon rows
    first = batch.horizon_mask.argmax(axis=1)
    if not np.all(first == first[0]) or not batch.horizon_mask[:, first[0]:].all():
        raise ValueError("horizon rows must form a common trailing block")
    return int(first[0])


def batch_loss_and_grads(params, model_config, batch, cfg, training, rng):
    if cfg.loss_scope == "horizon_only":
        # context-row outputs carry no loss, so the last block skips their queries
        c = _horizon_offset(batch)
        mu, sigma, cache = M.forward(params, model_config, batch.inputs, batch.instance, training, rng, out_from=c)
        loss, dmu, dsigma = nll_and_grad(mu, sigma, batch.targets[:, c:])
    else:
        mu, sigma, cache = M.forward(params, model_config, batch.inputs, batch.instance, training, rng)
        loss, dmu, dsigma = nll_and_grad(mu, sigma, batch.targets)
    grads = M.backward(params, model_config, cache, dmu, dsigma)
    grads.pop("inputs")
    return loss, grads


def evaluate_loss(params, model_config, specs, plan, cfg) -> float:
    """Mean horizon NLL over ``specs`` in eval mode (weighted by step count)."""
    total, steps = 0.0, 0
    for lo in range(0, len(specs), cfg.batch_size):
        chunk = specs[lo:lo + cfg.batch_size]
        batch = D.build_batch(chunk, plan.series, plan.covariates, cfg.scale_width, cfg.scaler)
        c = _horizon_offset(batch) if cfg.loss_scope == "horizon_only" else 0
        mu, sigma, _ = M.forward(params, model_config, batch.inputs, batch.instance, out_from=c)
        n = mu.size
        total += nll_loss(mu, sigma, batch.targets[:, c:]) * n
        steps += n
    return total / steps


def train_epoch(params, opt_state, model_config, specs, plan, cfg, rng_shuffle, rng_dropout):
    """One pass over ``specs`` in shuffled mini-batches. Returns ``(params, opt_state, stats)``."""
    order = rng_shuffle.permutation(len(specs))
    losses, weights, norms = [], [], []
    for b, lo in enumerate(range(0, len(specs), cfg.batch_size)):
        chunk = [specs[j] for j in order[lo:lo + cfg.batch_size]]
        batch = D.build_batch(chunk, plan.series, plan.covariates, cfg.scale_width, cfg.scaler)
        try:
            loss, grads = batch_loss_and_grads(params, model_config, batch, cfg, True, rng_dropout)
        except FloatingPointError as exc:
            raise FloatingPointError(f"batch {b}: {exc}") from exc
        grads, norm = nk.clip_global_norm(grads, cfg.clip_norm)
        params, opt_state = nk.adam_step(params, grads, opt_state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        losses.append(loss)
        weights.append(len(chunk))
        norms.append(norm)
    stats = {"train_loss": float(np.average(losses, weights=weights)), "batches": len(losses),
             "grad_norm": float(np.mean(norms))}
    return params, opt_state, stats


def _streams(seed: int):
    names = ("init", "plan", "sample", "shuffle", "dropout")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def fit(model_config: M.ModelConfig, train_config: TrainConfig, series: D.SeriesSet, params: dict | None = None):
    """Train until ``max_epochs`` or ``patience`` epochs without validation improvement.

    Returns ``(best_params, TrainLog)``; ``best_params`` are the weights from the
    epoch with the lowest validation loss.
    """
    cfg = train_config
    model_config = replace(model_config, n_instances=series.k)
    rngs = _streams(cfg.seed)
    if params is None:
        params = M.init_params(model_config, rngs["init"])
    plan = plan_windows(series, cfg, rngs["plan"])
    opt_state = nk.AdamState()
    log = TrainLog()
    seen = set()
    best, best_loss, bad_epochs = params, math.inf, 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        if cfg.sampler == "augmented":
            specs = draw_augmented(plan, cfg, rngs["sample"], plan.windows_per_epoch)
        else:
            specs = plan.train_specs
        seen.update(specs)
        params, opt_state, stats = train_epoch(params, opt_state, model_config, specs, plan, cfg,
                                               rngs["shuffle"], rngs["dropout"])
        val = evaluate_loss(params, model_config, plan.val_specs, plan, cfg)
        entry = {"epoch": epoch, "train_loss": stats["train_loss"], "val_loss": val,
                 "windows": len(specs), "distinct_windows": len(seen), "grad_norm": stats["grad_norm"],
                 "wall_time": time.perf_counter() - t0}
        log.append(entry)
        logger.info("epoch %d  train %.4f  val %.4f", epoch, stats["train_loss"], val)
        if val < best_loss:
            best, best_loss, bad_epochs = params, val, 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    return best, log


# -- grid search ------------------------------------------------------------

DEFAULT_GRIDS = {"d_k": [10, 20], "ff_dim": [20, 30, 40, 50, 60], "embed_dim": [5, 10, 20]}


def grid_candidates(grids: dict, base: M.ModelConfig) -> list:
    keys = sorted(grids)
    out = []
    for combo in itertools.product(*(grids[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        if "d_k" in overrides and "d_v" not in grids:
            overrides["d_v"] = overrides["d_k"]  # the grid ties d_k = d_v
        out.append(replace(base, **overrides))
    return out


def _candidate_key(cfg: M.ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def grid_search(grids: dict, train_config: TrainConfig, series: D.SeriesSet,
                base: M.ModelConfig | None = None, leaderboard_path=None):
    """Fit every grid point once; returns ``(best_config, leaderboard)``.

    The leaderboard (ascending validation loss) is appended to
    ``leaderboard_path`` after each fit, and points already recorded there are
    not refitted, so an interrupted search picks up where it stopped.
    """
    if not grids or any(len(v) == 0 for v in grids.values()):
        raise ValueError("grid_search: every grid must be non-empty")
    base = replace(base or M.ModelConfig(), n_instances=series.k)
    done = {}
    if leaderboard_path is not None and Path(leaderboard_path).exists():
        with open(leaderboard_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    done[_candidate_key(M.ModelConfig.from_dict(row["config"]))] = row
    rows = []
    for cand in grid_candidates(grids, base):
        key = _candidate_key(cand)
        if key in done:
            rows.append(done[key])
            continue
        _, log = fit(cand, train_config, series)
        row = {"config": cand.to_dict(), "val_loss": log.best_val_loss, "epochs": len(log.entries),
               "num_params": M.num_params(cand)}
        rows.append(row)
        if leaderboard_path is not None:
            with open(leaderboard_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    rows.sort(key=lambda r: r["val_loss"])
    return M.ModelConfig.from_dict(rows[0]["config"]), rows
