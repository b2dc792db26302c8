"""Command-line entry point: synth, fit, score, bench, sweep.

Exit codes: 0 success, 2 usage/format error, 3 benchmark finished with failed cells.
Logs are ``key=value`` lines on standard error; data goes to files only.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
import warnings
from pathlib import Path

from . import __version__
from .data import (
    SyntheticSpec, apply_scaler, atomic_write, dump_json, fit_scaler, gen_synthetic, load_csv,
    load_model, save_model, write_csv,
)
from .detectors import FIT_MODES, FitConfig, fit, score
from .errors import ConfigurationError, DualGanError, FormatError
from .evalbench import (
    METHODS, load_dataset, ratio_sweep, resolve_datasets, result_dicts, run_benchmark,
    sweep_summary, write_results_csv, write_summary_json,
)

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 2, 3
SEED_ENV = "DUALGAN_SEED"


class UsageError(DualGanError):
    pass


def emit(event, **kv):
    parts = [f"event={event}"] + [f"{k}={_fmt(v)}" for k, v in kv.items()]
    print(" ".join(parts), file=sys.stderr, flush=True)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    s = str(v)
    return json.dumps(s) if (" " in s or not s) else s


# ---------------------------------------------------------------------------
# config


def _flat_defaults(d=None, prefix=""):
    d = FitConfig().to_dict() if d is None else d
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flat_defaults(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


CONFIG_KEYS = _flat_defaults()
TOP_LEVEL = {k for k in CONFIG_KEYS if "." not in k} - {"mode", "rng_seed"}


def config_help() -> str:
    lines = ["config keys (JSON file, --set key=value, or the flags above; CLI > file > defaults):"]
    for k, v in CONFIG_KEYS.items():
        lines.append(f"  {k} = {json.dumps(v)}")
    return "\n".join(lines)


def _check_keys(doc, where):
    if not isinstance(doc, dict):
        raise UsageError(f"{where}: config must be a JSON object")
    for k, v in doc.items():
        if k in ("nnr", "rcc"):
            if not isinstance(v, dict):
                raise UsageError(f"{where}: {k!r} must be an object")
            for sub in v:
                if f"{k}.{sub}" not in CONFIG_KEYS:
                    raise UsageError(f"{where}: unknown config key {k + '.' + sub!r}")
        elif k not in CONFIG_KEYS:
            raise UsageError(f"{where}: unknown config key {k!r}")


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"no such config file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    _check_keys(doc, str(path))
    return doc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_set(doc, assignment):
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    if key not in CONFIG_KEYS:
        raise UsageError(f"unknown config key {key!r}")
    value = _parse_value(value)
    if "." in key:
        head, sub = key.split(".", 1)
        doc.setdefault(head, {})[sub] = value
    else:
        doc[key] = value


def resolve_seed(cli_seed, file_doc=None) -> int:
    if cli_seed is not None:
        return cli_seed
    if file_doc and "rng_seed" in file_doc:
        return int(file_doc["rng_seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def build_config(args, mode=None) -> FitConfig:
    doc = read_config(getattr(args, "config", None))
    for name in sorted(TOP_LEVEL):
        v = getattr(args, name, None)
        if v is not None:
            doc[name] = v
    for assignment in getattr(args, "set", None) or []:
        _apply_set(doc, assignment)
    if mode is not None:
        doc["mode"] = mode
    doc["rng_seed"] = resolve_seed(getattr(args, "seed", None), doc)
    try:
        return FitConfig.from_dict(doc)
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}") from None


def overrides_from(args) -> dict:
    """Config overrides for bench/sweep cells (mode and seed are set per cell)."""
    cfg = build_config(args, mode="rcc_dual_gan").to_dict()
    cfg.pop("mode")
    cfg.pop("rng_seed")
    return cfg


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    doc = {}
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read spec {args.spec}: {exc}") from None
        known = {f.name for f in dataclasses.fields(SyntheticSpec)}
        if not isinstance(doc, dict):
            raise UsageError(f"{args.spec}: spec must be a JSON object")
        for k in doc:
            if k not in known:
                raise UsageError(f"{args.spec}: unknown spec key {k!r}")
    doc["seed"] = resolve_seed(args.seed)
    try:
        spec = SyntheticSpec(**doc)
        train, test = gen_synthetic(spec)
    except TypeError as exc:
        raise UsageError(f"bad spec: {exc}") from None
    out = Path(args.out)
    write_csv(train, out / "train.csv")
    write_csv(test, out / "test.csv")
    emit("synth", out=out, seed=spec.seed, train_rows=train.n, test_rows=test.n,
         identified=int(train.identified.sum()))
    return EXIT_OK


def cmd_fit(args) -> int:
    config = build_config(args, mode=args.mode)
    table = load_csv(args.train)
    sc = fit_scaler(table)
    scaled = apply_scaler(sc, table)
    emit("fit_start", mode=config.mode, seed=config.rng_seed, rows=table.n, features=table.d,
         identified=int(table.identified.sum()))
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model, report = fit(scaled.unlabeled, scaled.anomalies, config)
    for w in caught:
        emit("warning", message=str(w.message))
    model.scaler = sc
    save_model(model, args.model)
    if args.report:
        doc = report.to_dict()
        if not args.timings:
            doc["wall_clock"] = None
        dump_json(doc, args.report)
    emit("fit_done", model=args.model, best_iteration=model.best_iteration,
         best_ap=model.best_ap if model.best_ap is not None else "none",
         seconds=round(time.perf_counter() - start, 3))
    return EXIT_OK


def cmd_score(args) -> int:
    model = load_model(args.model)
    table = load_csv(args.data)
    os_ = score(model, table.features)
    lines = ["row_id,os"] + [f"{rid},{float(v)!r}" for rid, v in zip(table.row_ids, os_)]
    text = "\n".join(lines) + "\n"
    atomic_write(args.out, lambda fh: fh.write(text), newline="")
    emit("score", rows=table.n, out=args.out)
    return EXIT_OK


def _check_methods(methods):
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")


def cmd_bench(args) -> int:
    _check_methods(args.methods)
    datasets = resolve_datasets(args.datasets)
    seeds = args.seeds if args.seeds else [resolve_seed(args.seed)]
    results, summary = run_benchmark(datasets, args.methods, seeds, overrides_from(args), args.jobs)
    out = Path(args.out)
    write_results_csv(results, out / "results.csv", timings=args.timings)
    write_summary_json({"summary": summary, "cells": _cells(results, args.timings)}, out / "summary.json")
    failed = sum(not r.ok for r in results)
    emit("bench", cells=len(results), failed=failed, order=",".join(summary["order"]), out=out)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_sweep(args) -> int:
    _check_methods(args.methods)
    if not Path(args.dataset).exists():
        raise UsageError(f"no such dataset: {args.dataset}")
    name, data = load_dataset(args.dataset)
    seeds = args.seeds if args.seeds else [resolve_seed(args.seed)]
    try:
        results, sweeps = ratio_sweep(name, data, args.methods, args.ratios, seeds,
                                      overrides_from(args), args.jobs)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    write_results_csv(results, out / "sweep.csv", timings=args.timings)
    doc = sweep_summary(sweeps)
    doc["cells"] = _cells(results, args.timings)
    write_summary_json(doc, out / "sweep.json")
    failed = sum(not r.ok for r in results)
    emit("sweep", cells=len(results), failed=failed, ratios=len(args.ratios), out=out)
    return EXIT_PARTIAL if failed else EXIT_OK


def _cells(results, timings):
    cells = result_dicts(results)
    if not timings:
        for c in cells:
            c["seconds"] = None
    return cells


# ---------------------------------------------------------------------------
# parser


def _add_fit_flags(p):
    p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, dotted for nested ones (e.g. nnr.q=9)")
    defaults = FitConfig()
    for name in sorted(TOP_LEVEL):
        default = getattr(defaults, name)
        kind = type(default) if default is not None else int
        if kind is bool:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None,
                           type=lambda s: s.lower() in ("1", "true", "yes"),
                           help=f"(default {default})")
        else:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None,
                           help=f"(default {default})")
    p.add_argument("--seed", type=int, default=None, help=f"RNG seed (fallback: ${SEED_ENV}, then 0)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="dualgan", description=__doc__, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic train/test pair", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--spec", help="JSON file overriding synthetic defaults")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="train a detector", epilog=config_help(), formatter_class=fmt)
    p.add_argument("--train", required=True, help="training CSV (ident column marks identified anomalies)")
    p.add_argument("--mode", choices=FIT_MODES, default=None)
    p.add_argument("--model", required=True, help="output model JSON")
    p.add_argument("--report", help="output fit-report JSON")
    p.add_argument("--timings", action="store_true", help="include wall-clock in the report")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="write outlier scores for a CSV", formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV with row_id,os")
    p.set_defaults(func=cmd_score)

    for name, func, helptext in (("bench", cmd_bench, "benchmark methods over datasets"),
                                 ("sweep", cmd_sweep, "vary the identified-anomaly ratio")):
        p = sub.add_parser(name, help=helptext, epilog=config_help(), formatter_class=fmt)
        if name == "bench":
            p.add_argument("--datasets", required=True,
                           help="glob of labelled CSVs or directories holding train.csv/test.csv")
        else:
            p.add_argument("--dataset", required=True)
            p.add_argument("--ratios", type=_float_list, required=True, help="e.g. 0,0.1,0.5,1.0")
        p.add_argument("--methods", type=_str_list, required=True, help=f"comma list from {', '.join(METHODS)}")
        p.add_argument("--seeds", type=_int_list, default=None, help="comma list; default: --seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        p.add_argument("--timings", action="store_true", help="fill the seconds column")
        _add_fit_flags(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DualGanError, ValueError, OSError) as exc:
        emit("error", command=args.command, type=type(exc).__name__, message=str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
