"""Command-line entry point: ``scda generate | run | ablate | report``.

Configuration is a JSON document with three sections::

    {"train": {...}, "benchmark": {...}, "run": {...}}

``train`` mirrors :class:`TrainConfig`, ``benchmark`` mirrors
:class:`ShiftSpec` and ``run`` holds paths and suite options. Every key is
also a flag (``--pretrain-epochs 50``, ``--rotation-deg 5``). Precedence:
flag > config file > built-in default. Unknown keys are rejected.

Exit codes: 0 success, 1 I/O failure, 2 usage or validation error,
3 numerical failure during training. On success the last line printed is a
JSON object ``{"artifacts": [...]}`` listing every file written.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, net
from .adapter import TrainConfig, run
from .errors import ContractError, DataError, GeneratorError, NumericalError, ShapeError
from .numkit import Rng, apply_pca, fit_pca

log = logging.getLogger("scda")

RUN_DEFAULTS = {
    "out_dir": "runs",
    "preset": "default",
    "source": None,
    "target": None,
    "modes": list(evaluation.ABLATION_MODES),
    "seeds": 10,
    "workers": 1,
    "checkpoints": False,
    "dry_run": False,
}
RUN_HELP = {
    "out_dir": "parent directory of per-run output directories",
    "preset": f"benchmark preset ({', '.join(data.PRESETS)})",
    "source": "source CSV (with --target, replaces the generated benchmark)",
    "target": "target CSV; a `gt` column enables evaluation",
    "modes": "ablation modes, comma separated",
    "seeds": "ablation seeds: a count N (seeds 0..N-1) or a comma-separated list",
    "workers": "parallel ablation cells",
    "checkpoints": "write a model checkpoint after every outer epoch",
    "dry_run": "validate config and data, train nothing",
}
SECTIONS = ("train", "benchmark", "run")


class UsageError(Exception):
    pass


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _flag(name):
    return "--" + name.replace("_", "-")


def _parse_list(text, item=str):
    if isinstance(text, (list, tuple)):
        return [item(t) for t in text]
    return [item(t) for t in str(text).split(",") if t.strip()]


def _converter(default):
    """String-to-value parser for a flag, picked from the default's type."""
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return lambda s: tuple(_parse_list(s, int))
    return str


def _optional_int(s):
    return None if s.lower() in ("none", "null", "") else int(s)


def _add_section_flags(p, section, defaults, help_map=None):
    g = p.add_argument_group(section)
    for key, default in defaults.items():
        if section == "train" and key == "k_gt":
            conv = _optional_int
        elif default is None or key == "seeds":
            conv = str
        else:
            conv = _converter(default)
        shown = ",".join(map(str, default)) if isinstance(default, (list, tuple)) else default
        text = (help_map or {}).get(key, "")
        extra = {"nargs": "?", "const": True} if isinstance(default, bool) else {}
        names = [_flag(key)] + (["--ablation"] if key == "ablation_mode" else [])
        g.add_argument(*names, dest=f"{section}.{key}", type=conv, default=None,
                       metavar=key.upper(), help=f"{text} (default: {shown})".strip(), **extra)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scda",
        description="Open-set domain adaptation with implicit-class discovery.",
    )
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    train_defaults = {k: f.default for k, f in _fields(TrainConfig).items()}
    bench_defaults = {k: f.default for k, f in _fields(data.ShiftSpec).items()}

    commands = {
        "generate": "write source.csv and target.csv for the synthetic benchmark",
        "run": "train on generated or file data and write the report and plot data",
        "ablate": "run the ablation protocol and write the comparison table",
        "report": "print a saved report or table",
    }
    for name, text in commands.items():
        p = sub.add_parser(name, help=text, description=text)
        if name == "report":
            p.add_argument("path", help="report.json or table.json")
            continue
        p.add_argument("--config", help="JSON configuration file")
        _add_section_flags(p, "run", RUN_DEFAULTS, RUN_HELP)
        if name != "generate":
            _add_section_flags(p, "train", train_defaults)
        else:
            p.add_argument("--seed", dest="train.seed", type=int, default=None,
                           help="generator seed (default: 0)")
        _add_section_flags(p, "benchmark", bench_defaults)
    return parser


# -- configuration --------------------------------------------------------


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be an object")
    return doc


def resolve(doc: dict | None, args: argparse.Namespace | None = None) -> dict:
    """Merge defaults, a config document and flag overrides into typed sections."""
    doc = doc or {}
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}; allowed: {list(SECTIONS)}")
    allowed = {
        "train": set(_fields(TrainConfig)),
        "benchmark": set(_fields(data.ShiftSpec)),
        "run": set(RUN_DEFAULTS),
    }
    merged = {s: {} for s in SECTIONS}
    for section in SECTIONS:
        given = doc.get(section, {})
        if not isinstance(given, dict):
            raise UsageError(f"config section {section!r} must be an object")
        bad = set(given) - allowed[section]
        if bad:
            raise UsageError(f"unknown {section} keys {sorted(bad)}")
        merged[section].update(given)
    if args is not None:
        for dest, value in vars(args).items():
            if "." in dest and value is not None:
                section, key = dest.split(".", 1)
                merged[section][key] = value

    run_opts = {**RUN_DEFAULTS, **merged["run"]}
    run_opts["modes"] = _parse_list(run_opts["modes"])
    seeds = run_opts["seeds"]
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    elif isinstance(seeds, str) and "," not in seeds:
        seeds = list(range(int(seeds)))
    run_opts["seeds"] = _parse_list(seeds, int)

    train = dict(merged["train"])
    if "hidden" in train:
        train["hidden"] = tuple(int(h) for h in _parse_list(train["hidden"], int))
    try:
        cfg = TrainConfig(**train)
        spec = data.preset(run_opts["preset"], **merged["benchmark"])
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    cfg.validate()
    spec.validate()
    if (run_opts["source"] is None) != (run_opts["target"] is None):
        raise UsageError("--source and --target must be given together")
    return {"train": cfg, "benchmark": spec, "run": run_opts}


def config_document(conf: dict) -> dict:
    spec = dataclasses.asdict(conf["benchmark"])
    return {"train": conf["train"].to_dict(), "benchmark": spec, "run": dict(conf["run"])}


def run_dir(conf: dict, command: str) -> Path:
    doc = config_document(conf)
    doc["run"] = {k: v for k, v in doc["run"].items() if k not in ("out_dir", "workers")}
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]
    seed = conf["train"].seed
    return Path(conf["run"]["out_dir"]) / f"{command}-{digest}-s{seed}"


# -- helpers --------------------------------------------------------------


def _write_text(path: Path, text: str) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _load_data(conf):
    opts = conf["run"]
    if opts["source"] is not None:
        source = data.load_csv(opts["source"], schema="source")
        target = data.load_csv(opts["target"], schema="target")
        if source.dim != target.dim:
            raise DataError(f"source has {source.dim} features, target has {target.dim}")
        return source, target
    return data.generate(conf["benchmark"], Rng(conf["train"].seed).child("data"))


def loss_curve_csv(loss_curve) -> str:
    keys = ["phase", "outer", "epoch", "l_s", "l_adv", "l_kcc", "l_t", "l_tcc",
            "objective", "objective_f", "objective_c"]
    return _csv_text(keys, [[r.get(k) for k in keys] for r in loss_curve])


def k_trajectory_csv(history) -> str:
    keys = ["epoch", "k_star", "k_ca", "k_elbow", "os", "os_star"]
    return _csv_text(keys, [[r.get(k) for k in keys] for r in history])


def feature_scatter_csv(model, source, target) -> str:
    """First two principal directions of F features, both domains.

    ``label`` is the source label or the target prediction; ``gt`` is the
    target ground truth when the file provides it.
    """
    fs = net.forward_features(model.f, source.features)
    _, probs, _ = net.forward(model.f, model.c, target.features)
    ft = net.forward_features(model.f, target.features)
    both = np.vstack([fs, ft])
    z = apply_pca(fit_pca(both, min(2, both.shape[1], len(both) - 1)), both)
    if z.shape[1] < 2:
        z = np.hstack([z, np.zeros((len(z), 1))])
    pred = np.argmax(probs, axis=1)
    gt = target.ground_truth
    rows = [["source", int(y), int(y), float(a), float(b)]
            for y, (a, b) in zip(source.labels, z[:len(fs)])]
    for i, (a, b) in enumerate(z[len(fs):]):
        rows.append(["target", int(pred[i]), None if gt is None else int(gt[i]),
                     float(a), float(b)])
    return _csv_text(["domain", "label", "gt", "pc0", "pc1"], rows)


def _finish(paths) -> int:
    print(json.dumps({"artifacts": [str(p) for p in paths]}))
    return 0


# -- commands -------------------------------------------------------------


def cmd_generate(conf) -> int:
    out = run_dir(conf, "generate")
    source, target = data.generate(conf["benchmark"], Rng(conf["train"].seed).child("data"))
    if conf["run"]["dry_run"]:
        print(f"dry run: {len(source)} source rows, {len(target)} target rows")
        return _finish([])
    out.mkdir(parents=True, exist_ok=True)
    paths = [data.write_csv(out / "source.csv", source), data.write_csv(out / "target.csv", target)]
    spec = conf["benchmark"]
    print(f"source: {len(source)} rows, {spec.num_known} classes, dim {spec.dim}")
    print(f"target: {len(target)} rows, {spec.num_classes} classes "
          f"({spec.num_implicit} implicit)")
    return _finish(paths)


def cmd_run(conf) -> int:
    cfg = conf["train"]
    source, target = _load_data(conf)
    if conf["run"]["dry_run"]:
        print(f"dry run: config {cfg.digest()} valid; {len(source)} source rows, "
              f"{len(target)} target rows, dim {source.dim}")
        return _finish([])
    has_gt = target.ground_truth is not None
    out = run_dir(conf, "run")
    out.mkdir(parents=True, exist_ok=True)
    paths = [_write_text(out / "config.json",
                         json.dumps(config_document(conf), sort_keys=True, indent=1) + "\n")]
    ckpt = None
    if conf["run"]["checkpoints"]:
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
    log_path = out / "epochs.jsonl"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        model, state, report = run(cfg, source, target, evaluate=has_gt, log_file=fh,
                                   checkpoint_dir=ckpt)
    paths.append(log_path)
    if ckpt is not None:
        paths += sorted(ckpt.glob("checkpoint_*.json"))
    paths.append(net.save_checkpoint(out / "model.json", model))
    _, probs, _ = net.forward(model.f, model.c, target.features)
    paths.append(_write_text(out / "predictions.csv", _csv_text(
        ["row", "prediction", "confidence"],
        [[i, int(k), float(p)] for i, (k, p) in
         enumerate(zip(np.argmax(probs, 1), probs.max(1)))])))
    paths.append(_write_text(out / "loss_curve.csv", loss_curve_csv(state.loss_curve)))
    paths.append(_write_text(out / "k_trajectory.csv", k_trajectory_csv(state.history)))
    paths.append(_write_text(out / "features_2d.csv", feature_scatter_csv(model, source, target)))
    if state.estimate is not None and state.estimate.sweep:
        from .discovery import dump_sweep_csv

        paths.append(_write_text(out / "sweep.csv", dump_sweep_csv(state.estimate.sweep)))
    if report is not None:
        paths.append(_write_text(out / "report.json", report.to_json()))
        print(f"OS {report.os:.4f}  OS* {report.os_star:.4f}  k* {report.k_star}")
    else:
        print(f"k* {state.k_star} (target has no ground truth; no report written)")
    return _finish(paths)


def cmd_ablate(conf) -> int:
    opts = conf["run"]
    modes = opts["modes"]
    bad = set(modes) - set(evaluation.ABLATION_MODES)
    if bad:
        raise UsageError(f"unknown ablation modes {sorted(bad)}")
    if not opts["seeds"]:
        raise UsageError("at least one seed is required")
    if opts["dry_run"]:
        print(f"dry run: {len(modes)} modes x {len(opts['seeds'])} seeds")
        return _finish([])
    table = evaluation.ablation_suite(conf["train"], modes, opts["seeds"], conf["benchmark"],
                                      workers=opts["workers"])
    summary = evaluation.summarize(table)
    out = run_dir(conf, "ablate")
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "summary": summary,
        "cells": {m: [r.to_dict() for r in reports] for m, reports in table.items()},
    }
    paths = [
        _write_text(out / "table.csv", evaluation.summary_csv(summary)),
        _write_text(out / "rows.csv", evaluation.rows_csv(table)),
        _write_text(out / "table.json", json.dumps(doc, sort_keys=True, indent=1) + "\n"),
    ]
    for row in summary:
        print(f"{row['mode']:<16} OS {row['os_mean']:.4f} ± {row['os_sd']:.4f}")
    return _finish(paths)


def cmd_report(path) -> int:
    doc = load_config(path)
    if "summary" in doc:
        print(evaluation.summary_csv(doc["summary"]), end="")
        return _finish([])
    rep = evaluation.MetricsReport.from_dict(doc)
    print(f"mode {rep.mode}  OS {rep.os:.4f}  OS* {rep.os_star:.4f}")
    if rep.k_star is not None:
        print(f"k* {rep.k_star}  k_gt {rep.k_gt}  error {rep.k_error}")
        print("correspondence " + " ".join(f"n={n}:{v}" for n, v in
                                           sorted(rep.correspondence.items())))
    if rep.missing_classes:
        print(f"classes absent from the target: {rep.missing_classes}")
    return _finish([])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.path)
        doc = load_config(args.config) if args.config else None
        conf = resolve(doc, args)
        return {"generate": cmd_generate, "run": cmd_run, "ablate": cmd_ablate}[args.command](conf)
    except NumericalError as exc:
        where = f" (epoch {exc.epoch})" if exc.epoch is not None else ""
        print(f"scda: numerical failure{where}: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ContractError, DataError, ShapeError, GeneratorError) as exc:
        print(f"scda: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"scda: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
