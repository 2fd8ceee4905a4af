"""Command-line entry point: ingest, train, evaluate, compare-samplers, grid-search.

Every command reads an INI document (sections ``run``, ``data``, ``model``,
``train``, ``eval``, ``grid``, ``synthetic``), applies ``--section.key value``
overrides, validates the result exhaustively and writes everything it
produces under ``run.out_dir`` together with a ``manifest.json``.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import fields, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import forecast as F
from . import model as M
from . import train as T

logger = logging.getLogger("randwin")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
FORMATS = ("archive", "electricity", "traffic", "generic_csv", "synthetic")


class ConfigError(ValueError):
    """Carries every violation found in a configuration document."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# -- schema -----------------------------------------------------------------

def _opt(kind):
    def parse(text):
        return None if text.strip().lower() in ("", "none") else kind(text)
    parse.__name__ = f"optional {kind.__name__}"
    return parse


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(kind):
    def parse(text):
        items = [s for s in (p.strip() for p in text.replace(";", ",").split(",")) if s]
        return [kind(s) for s in items]
    parse.__name__ = f"list of {kind.__name__}"
    return parse


def _datetime(text):
    return datetime.fromisoformat(text.strip())


_PARSERS = {int: int, float: float, bool: _bool, str: str}
# fields supplied by the data rather than by the user
_DERIVED = {"model": {"n_instances", "n_covariates"}, "train": {"seed"}}


def _dataclass_schema(cls, section):
    out = {}
    for f in fields(cls):
        if f.name in _DERIVED.get(section, ()):
            continue
        default = f.default
        t = f.type if isinstance(f.type, str) else f.type.__name__
        if "None" in t:
            kind = int if "int" in t else float
            out[f.name] = (_opt(kind), default)
        else:
            kind = {"int": int, "float": float, "bool": bool, "str": str}[t]
            out[f.name] = (_PARSERS[kind], default)
    return out


REQUIRED = object()

SCHEMA = {
    "run": {"out_dir": (str, REQUIRED), "seed": (int, 0), "log_level": (str, "INFO")},
    "data": {"path": (_opt(str), None), "format": (str, "archive"), "instances": (_opt(int), None)},
    "model": _dataclass_schema(M.ModelConfig, "model"),
    "train": _dataclass_schema(T.TrainConfig, "train"),
    "eval": {"dataset": (str, "electricity"), "start": (_opt(_datetime), None), "weeks": (_opt(int), 2),
             "horizon": (int, F.EVAL_HORIZON), "n_samples": (int, 100), "quantiles": (_list(float), [0.5, 0.9]),
             "trials": (int, 3), "context_cap": (_opt(int), None), "rolling_step": (_opt(int), None),
             "after_train": (_bool, True)},
    "grid": {"d_k": (_list(int), T.DEFAULT_GRIDS["d_k"]), "ff_dim": (_list(int), T.DEFAULT_GRIDS["ff_dim"]),
             "embed_dim": (_list(int), T.DEFAULT_GRIDS["embed_dim"])},
    "synthetic": {"period": (int, 336), "k": (int, 20), "train_weeks": (int, 4), "noise": (float, 0.1),
                  "data_seed": (int, 0), "control_period": (_opt(int), 168)},
}


def _show(value):
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    if isinstance(value, datetime):
        return value.isoformat()
    return "none" if value is None else str(value)


def resolve_config(text: str = "", overrides: dict | None = None) -> dict:
    """Parse, merge overrides, fill defaults and validate; raises :class:`ConfigError` listing every problem."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    problems = []
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unreadable config: {exc}"]) from exc
    raw = {s: dict(cp[s]) for s in cp.sections()}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            problems.append(f"override {dotted!r} is not of the form section.key")
            continue
        raw.setdefault(section, {})[key] = value
    resolved = {}
    for section in raw:
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        for key in given:
            if key not in keys:
                problems.append(f"unknown key {section}.{key}")
        out = {}
        for key, (parse, default) in keys.items():
            if key in given:
                try:
                    out[key] = parse(given[key])
                except (TypeError, ValueError) as exc:
                    problems.append(f"{section}.{key}: cannot parse {given[key]!r} ({exc})")
            elif default is REQUIRED:
                problems.append(f"missing required key {section}.{key}")
            else:
                out[key] = list(default) if isinstance(default, list) else default
        resolved[section] = out
    if not problems:
        problems += _semantic_checks(resolved)
    if problems:
        raise ConfigError(problems)
    return resolved


def _semantic_checks(cfg) -> list:
    problems = []
    fmt = cfg["data"]["format"]
    if fmt not in FORMATS:
        problems.append(f"data.format must be one of {FORMATS}, got {fmt!r}")
    elif fmt != "synthetic" and not cfg["data"]["path"]:
        problems.append("missing required key data.path (needed unless data.format = synthetic)")
    if not cfg["eval"]["quantiles"]:
        problems.append("eval.quantiles must list at least one quantile")
    bad = [q for q in cfg["eval"]["quantiles"] if not 0.0 < q < 1.0]
    if bad:
        problems.append(f"eval.quantiles must lie in (0, 1): {bad}")
    for key in ("horizon", "n_samples", "trials"):
        if cfg["eval"][key] < 1:
            problems.append(f"eval.{key} must be >= 1")
    if cfg["eval"]["weeks"] is not None and cfg["eval"]["weeks"] < 1:
        problems.append("eval.weeks must be >= 1")
    step = cfg["eval"]["rolling_step"]
    if step is not None and (step < 1 or cfg["eval"]["horizon"] % step):
        problems.append(f"eval.rolling_step must be >= 1 and divide eval.horizon, got {step}")
    if fmt != "synthetic" and cfg["eval"]["start"] is None and cfg["eval"]["dataset"] not in F.FORECAST_STARTS:
        problems.append(f"eval.start is required for dataset {cfg['eval']['dataset']!r}")
    for name in ("grid",):
        for key, values in cfg[name].items():
            if not values:
                problems.append(f"{name}.{key} must not be empty")
    for section, cls, extra in (("model", M.ModelConfig, {"n_instances": 1}),
                                ("train", T.TrainConfig, {"seed": cfg["run"]["seed"]})):
        try:
            cls(**cfg[section], **extra)
        except (TypeError, ValueError) as exc:
            problems.append(f"[{section}] {exc}")
    return problems


def render_config(cfg: dict) -> str:
    lines = []
    for section, keys in cfg.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {_show(v)}" for k, v in keys.items()]
        lines.append("")
    return "\n".join(lines)


def jsonable_config(cfg: dict) -> dict:
    return {s: {k: (v.isoformat() if isinstance(v, datetime) else v) for k, v in keys.items()}
            for s, keys in cfg.items()}


def load_config_file(path) -> str:
    """INI text from a config file, or from the ``config`` entry of a run manifest."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        manifest = json.loads(text)
        return render_config({s: {k: (v if not isinstance(v, list) else v) for k, v in keys.items()}
                              for s, keys in manifest["config"].items()})
    return text


# -- shared plumbing --------------------------------------------------------

class Stages:
    def __init__(self):
        self.timings = {}

    def __call__(self, name):
        stages = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()
                logger.info("stage %s", name)

            def __exit__(self, *exc):
                stages.timings[name] = round(time.perf_counter() - self.t0, 3)

        return _Timer()


def model_config(cfg) -> M.ModelConfig:
    return M.ModelConfig(**cfg["model"])


def train_config(cfg) -> T.TrainConfig:
    return T.TrainConfig(**cfg["train"], seed=cfg["run"]["seed"])


def load_dataset(cfg) -> D.SeriesSet:
    d = cfg["data"]
    if d["format"] == "synthetic":
        s = cfg["synthetic"]
        length = s["train_weeks"] * 168 + cfg["eval"]["horizon"]
        series = F.noisy_sinusoids(s["k"], s["period"], length, s["noise"], s["data_seed"])
    elif d["format"] == "archive":
        series = D.load_archive(d["path"])
    else:
        series = D.load_series(d["path"], d["format"])
    if d["instances"] is not None:
        series = series.subset(d["instances"])
    return series


def protocol(cfg, series=None) -> F.BenchmarkProtocol:
    e = cfg["eval"]
    if cfg["data"]["format"] == "synthetic":
        s = cfg["synthetic"]
        start = F.SYNTHETIC_START + F.WEEK * s["train_weeks"]
        weeks = s["train_weeks"]
        name = f"sinusoid-{s['period']}"
    else:
        start = e["start"] or F.FORECAST_STARTS[e["dataset"]]
        weeks = e["weeks"]
        name = e["dataset"]
    return F.BenchmarkProtocol(name, start, weeks, e["horizon"], e["n_samples"], tuple(e["quantiles"]),
                               e["trials"], e["context_cap"], rolling_step=e["rolling_step"])


def identity(cfg, series) -> dict:
    """What a checkpoint must agree on with the config used to evaluate it."""
    return {"dataset_checksum": D.series_checksum(series), "data": jsonable_config(cfg)["data"],
            "model": jsonable_config(cfg)["model"], "scaler": cfg["train"]["scaler"],
            "scale_width": cfg["train"]["scale_width"], "code_version": __version__}


def write_manifest(out_dir, cfg, command, stages, series=None, extra=None) -> Path:
    manifest = {"command": command, "code_version": __version__, "config": jsonable_config(cfg),
                "config_text": render_config(cfg),
                "dataset_checksum": D.series_checksum(series) if series is not None else None,
                "started": stages.started, "timings": stages.timings}
    manifest.update(extra or {})
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _diff(expected: dict, actual: dict, prefix="") -> list:
    out = []
    for key in sorted(set(expected) | set(actual)):
        a, b = expected.get(key, "<absent>"), actual.get(key, "<absent>")
        if isinstance(a, dict) and isinstance(b, dict):
            out += _diff(a, b, f"{prefix}{key}.")
        elif a != b:
            out.append(f"{prefix}{key}: checkpoint has {a!r}, config gives {b!r}")
    return out


class ManifestMismatch(RuntimeError):
    def __init__(self, diff):
        self.diff = diff
        super().__init__("checkpoint does not match this config/dataset:\n  " + "\n  ".join(diff))


# -- commands ---------------------------------------------------------------

def cmd_ingest(args) -> dict:
    series = D.load_series(args.source, args.format)
    if args.instances is not None:
        series = series.subset(args.instances)
    checksum = D.save_archive(series, args.out)
    return {"archive": str(args.out), "checksum": checksum, "instances": series.k,
            "steps": [len(s) for s in series][:1] + ([] if series.k == 1 else ["..."])}


def _fit_and_save(cfg, series, out_dir, stages, label="model"):
    proto = protocol(cfg, series)
    train_series, targets = proto.split(series)
    mc, tc = model_config(cfg), train_config(cfg)
    with stages(f"train:{label}"):
        params, log = T.fit(mc, tc, train_series)
    mc = replace(mc, n_instances=train_series.k)
    log.write_jsonl(Path(out_dir) / f"{label}_log.jsonl")
    M.save_checkpoint(Path(out_dir) / f"{label}.npz", params, mc, seed=cfg["run"]["seed"],
                      manifest=identity(cfg, series))
    return params, mc, tc, log, train_series, targets, proto


def cmd_train(cfg, out_dir, stages) -> dict:
    with stages("load"):
        series = load_dataset(cfg)
    params, mc, tc, log, train_series, targets, proto = _fit_and_save(cfg, series, out_dir, stages)
    result = {"checkpoint": str(Path(out_dir) / "model.npz"), "epochs": len(log.entries),
              "best_epoch": log.best_epoch, "best_val_loss": log.best_val_loss}
    if cfg["eval"]["after_train"]:
        with stages("evaluate"):
            report = F.evaluate_benchmark([(params, mc, cfg["run"]["seed"])], series, _single(proto),
                                          tc.sampler, tc)
        F.write_reports([report], Path(out_dir) / "report")
        result["ql"] = {str(q): report.mean(q) for q in report.values}
    write_manifest(out_dir, cfg, "train", stages, series, {"result": result})
    return result


def _single(proto):
    return replace(proto, trials=1, seeds=None)


def cmd_evaluate(cfg, out_dir, stages, checkpoint) -> dict:
    with stages("load"):
        series = load_dataset(cfg)
        params, mc, meta = M.load_checkpoint(checkpoint)
    diff = _diff(meta.get("manifest", {}), identity(cfg, series))
    if diff:
        raise ManifestMismatch(diff)
    proto = protocol(cfg, series)
    seed = meta.get("seed", cfg["run"]["seed"])
    with stages("evaluate"):
        report = F.evaluate_benchmark([(params, mc, seed)], series, _single(proto),
                                      cfg["train"]["sampler"], train_config(cfg))
    paths = F.write_reports([report], Path(out_dir) / "report")
    result = {"ql": {str(q): report.mean(q) for q in report.values}, "records": str(paths["records"])}
    write_manifest(out_dir, cfg, "evaluate", stages, series, {"result": result, "checkpoint": str(checkpoint)})
    return result


def cmd_compare_samplers(cfg, out_dir, stages) -> dict:
    out_dir = Path(out_dir)
    runs = []
    run_dir = out_dir / "runs"
    run_dir.mkdir(parents=True, exist_ok=True)

    def record(mode, seed, params, config, log, ql):
        M.save_checkpoint(run_dir / f"{mode}-{seed}.npz", params, config, seed=seed)
        log.write_jsonl(run_dir / f"{mode}-{seed}_log.jsonl")
        runs.append({"mode": mode, "seed": seed, "epochs": len(log.entries), "best_val_loss": log.best_val_loss,
                     "ql": {str(q): v for q, v in ql.items()}})

    mc, tc = model_config(cfg), train_config(cfg)
    e = cfg["eval"]
    if cfg["data"]["format"] == "synthetic":
        s = cfg["synthetic"]
        setup = F.SeasonalitySetup(k=s["k"], train_weeks=s["train_weeks"], noise=s["noise"],
                                   data_seed=s["data_seed"], horizon=e["horizon"], n_samples=e["n_samples"],
                                   trials=e["trials"], control_period=s["control_period"])
        window = tc.context_length + tc.horizon
        with stages("benchmark"):
            out = F.seasonality_benchmark(s["period"], window, e["trials"], mc, tc, setup, on_trial=record)
        reports = list(out["period"].values()) + (list(out["control"].values()) if out["control"] else [])
        series = None
    else:
        with stages("load"):
            series = load_dataset(cfg)
        with stages("benchmark"):
            reports = list(F.compare_samplers(series, mc, tc, protocol(cfg, series), on_trial=record).values())
    F.write_reports(reports, out_dir / "report")
    table = F.format_table(reports)
    write_manifest(out_dir, cfg, "compare-samplers", stages, series, {"runs": runs})
    return {"runs": len(runs), "table": table}


def cmd_grid_search(cfg, out_dir, stages) -> dict:
    out_dir = Path(out_dir)
    with stages("load"):
        series = load_dataset(cfg)
    proto = protocol(cfg, series)
    train_series, _ = proto.split(series)
    tc = train_config(cfg)
    with stages("search"):
        best, rows = T.grid_search(cfg["grid"], tc, train_series, base=model_config(cfg),
                                   leaderboard_path=out_dir / "leaderboard.jsonl")
    with open(out_dir / "leaderboard_sorted.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    with stages("refit-best"):
        params, log = T.fit(best, tc, train_series)
    M.save_checkpoint(out_dir / "best.npz", params, best, seed=cfg["run"]["seed"], manifest=identity(
        {**cfg, "model": {k: v for k, v in best.to_dict().items() if k in SCHEMA["model"]}}, series))
    write_manifest(out_dir, cfg, "grid-search", stages, series, {"best": best.to_dict(), "rows": len(rows)})
    return {"rows": len(rows), "best": best.to_dict(), "best_val_loss": rows[0]["val_loss"]}


# -- argument handling ------------------------------------------------------

ALIASES = {"--seed": "run.seed", "--sampler": "train.sampler", "--weeks": "eval.weeks", "--rho": "eval.quantiles",
           "--out": "run.out_dir", "--trials": "eval.trials"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="randwin", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    ing = sub.add_parser("ingest", help="convert a raw dataset into a checksummed archive")
    ing.add_argument("source")
    ing.add_argument("--format", required=True, choices=("electricity", "traffic", "generic_csv"))
    ing.add_argument("--out", required=True, type=Path)
    ing.add_argument("--instances", type=int, default=None)
    for name, help_ in (("train", "fit one model and save a checkpoint"),
                        ("evaluate", "score a checkpoint on the test week"),
                        ("compare-samplers", "vanilla / fixed / augmented ablation"),
                        ("grid-search", "exhaustive model grid, ranked by validation loss")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, default=None, help="INI config or a manifest.json")
        if name == "evaluate":
            sp.add_argument("--checkpoint", type=Path, required=True)
        if name == "compare-samplers":
            sp.add_argument("--synthetic", default=None, metavar="period=N",
                            help="run the noisy-sinusoid seasonality benchmark")
        for flag in ALIASES:
            sp.add_argument(flag, default=None, help=f"same as --{ALIASES[flag]}")
    return p


def parse_overrides(extra: list) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError([f"unrecognized argument {tok!r}"])
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError([f"override {tok} needs a value"])
            key, value = tok[2:], extra[i + 1]
            i += 2
        out[key] = value
    return out


def _resolve(args, extra) -> dict:
    overrides = {}
    text = load_config_file(args.config) if args.config else ""
    for flag, dotted in ALIASES.items():
        value = getattr(args, flag[2:].replace("-", "_"))
        if value is not None:
            overrides[dotted] = value
    if getattr(args, "synthetic", None):
        overrides["data.format"] = "synthetic"
        for part in args.synthetic.split(","):
            key, _, value = part.partition("=")
            overrides[f"synthetic.{key.strip()}"] = value.strip()
    overrides.update(parse_overrides(extra))
    return resolve_config(text, overrides)


def _error_record(command, exc) -> dict:
    rec = {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        rec["problems"] = exc.problems
    if isinstance(exc, ManifestMismatch):
        rec["diff"] = exc.diff
    return rec


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    command = args.command
    try:
        if command == "ingest":
            if extra:
                raise ConfigError([f"unrecognized arguments: {' '.join(extra)}"])
            result = cmd_ingest(args)
        else:
            cfg = _resolve(args, extra)
            logging.basicConfig(level=getattr(logging, cfg["run"]["log_level"].upper(), logging.INFO),
                                format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
            out_dir = Path(cfg["run"]["out_dir"])
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "config.ini").write_text(render_config(cfg), encoding="utf-8")
            stages = Stages()
            stages.started = datetime.now().isoformat(timespec="seconds")
            if command == "train":
                result = cmd_train(cfg, out_dir, stages)
            elif command == "evaluate":
                result = cmd_evaluate(cfg, out_dir, stages, args.checkpoint)
            elif command == "compare-samplers":
                result = cmd_compare_samplers(cfg, out_dir, stages)
            else:
                result = cmd_grid_search(cfg, out_dir, stages)
    except Exception as exc:  # reported as a machine-readable record
        print(json.dumps(_error_record(command, exc), sort_keys=True), file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_FAILURE
    print(json.dumps({"status": "ok", "command": command, **result}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
