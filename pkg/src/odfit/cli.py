"""Command-line entry point: ``odfit <subcommand> [options]``.

Every subcommand accepts ``--seed``, ``--config``, ``--out`` and ``--threads``.
Failures print one line ``error: <ErrorType>: <message>`` on stderr and exit 1;
usage errors exit 2.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .evaluate import TABLE_COLUMNS, ImageRecord, build_report, host_metadata, param_error_stats
from .exceptions import ConfigError, OdfitError
from .imaging import GaussianParams
from .io import (
    FORMAT_VERSION,
    RunConfig,
    check_version,
    dump_json,
    load_background_library,
    load_json,
    load_model,
    save_background_library,
    save_model,
)
from .regressor import count_scale_from_shots, fine_tune_arrays, train_arrays
from .simulator import ParamRanges, build_dataset, shots_to_arrays

log = logging.getLogger("odfit")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="generator seed (overrides config)")
    g.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="JSON run config")
    g.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory (default: .)")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for per-image fits")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="odfit", parents=[common],
                                     description="Absorption-image Gaussian fitting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth-bg", parents=[common], help="write a synthetic background library")
    p.add_argument("--size", type=int, help="number of bg/dark pairs")

    p = sub.add_parser("simulate", parents=[common], help="simulate labeled shots (manifest + frames)")
    p.add_argument("--library", type=Path, help="background library directory (synthesized when absent)")
    p.add_argument("--n", type=int, help="number of shots")
    p.add_argument("--mode", choices=("ML1", "ML3"))
    p.add_argument("--pairing", choices=("subsequent", "same"))

    p = sub.add_parser("train", parents=[common], help="train ML-1 or ML-3 on a dataset")
    p.add_argument("--dataset", type=Path, required=True, help="dataset manifest.json")
    p.add_argument("--mode", choices=("ML1", "ML3"), help="default: the dataset's mode")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("fine-tune", parents=[common], help="continue training a model on new data")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("fit", parents=[common], help="fit every shot of a dataset with one method")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--method", choices=pipeline.METHODS, required=True)
    p.add_argument("--model", type=Path, help="model manifest for ml1/ml3")

    p = sub.add_parser("evaluate", parents=[common], help="chi-square and error statistics of fit outputs")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--fits", type=Path, nargs="+", required=True, help="fit_<method>.json files")
    p.add_argument("--truth-method", help="reference method (default: config truth_method; 'labels' for manifest truth)")

    p = sub.add_parser("bench", parents=[common], help="4-method timing and chi-square comparison")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--ml1", type=Path, help="ML-1 model manifest")
    p.add_argument("--ml3", type=Path, help="ML-3 model manifest")
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = getattr(args, "out", None) or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ranges(cfg) -> ParamRanges:
    return ParamRanges.from_dict(cfg.ranges)


def cmd_synth_bg(args, cfg) -> None:
    if args.size is not None:
        cfg = replace(cfg, library_size=args.size)
    out = _out(args)
    library = pipeline.library_from_config(cfg)
    save_background_library(out, library, f"odfit synthetic background, config {cfg.hash()}")
    dump_json(out / "library.json", {"format_version": FORMAT_VERSION, "kind": "library",
                                      "config_hash": cfg.hash(), "config": cfg.to_dict(),
                                      "size": len(library.entries)})


def cmd_simulate(args, cfg) -> None:
    cfg = replace(cfg, **{k: v for k, v in (("n_shots", args.n), ("mode", args.mode), ("pairing", args.pairing))
                          if v is not None})
    out = _out(args)
    lib_dir = args.library
    if lib_dir is None:
        lib_dir = out / "library"
        save_background_library(lib_dir, pipeline.library_from_config(cfg))
    library = load_background_library(lib_dir)
    shots = build_dataset(library, _ranges(cfg), cfg.n_shots, cfg.mode, cfg.seed, cfg.pairing)
    path = pipeline.write_dataset(out, shots, lib_dir, seed=cfg.seed, ranges=_ranges(cfg), mode=cfg.mode,
                                  pairing=cfg.pairing, cfg_hash=cfg.hash())
    print(path)


def _write_curve(path: Path, curve, cfg) -> None:
    dump_json(path, {"format_version": FORMAT_VERSION, "kind": "loss_curve", "config_hash": cfg.hash(),
                     "curve": curve})


def cmd_train(args, cfg) -> None:
    manifest, shots = pipeline.load_dataset(args.dataset)
    mode = args.mode or manifest["mode"]
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    X, y = shots_to_arrays(shots, mode)
    spec = pipeline.network_spec(cfg, mode)
    model, curve = train_arrays(spec, X, y, ParamRanges.from_dict(manifest["ranges"]), pipeline.train_config(cfg),
                                count_scale_from_shots(shots),
                                {"dataset_config_hash": manifest.get("config_hash", "")},
                                input_log=cfg.input_log, theta_output=cfg.theta_output)
    out = _out(args)
    stem = out / f"model_{mode.lower()}"
    json_path, _ = save_model(stem, model, cfg.hash())
    _write_curve(out / f"loss_curve_{mode.lower()}.json", curve, cfg)
    print(json_path)


def cmd_fine_tune(args, cfg) -> None:
    model = load_model(args.model)
    _, shots = pipeline.load_dataset(args.dataset)
    X, y = shots_to_arrays(shots, model.mode)
    epochs = cfg.fine_tune_epochs if args.epochs is None else args.epochs
    tuned, curve = fine_tune_arrays(model, X, y, pipeline.train_config(cfg, epochs, cfg.fine_tune_lr))
    out = _out(args)
    json_path, _ = save_model(out / f"model_{model.mode.lower()}_tuned", tuned, cfg.hash())
    _write_curve(out / f"loss_curve_{model.mode.lower()}_tuned.json", curve, cfg)
    print(json_path)


def _threads(args) -> int:
    return max(1, getattr(args, "threads", None) or 1)


def cmd_fit(args, cfg) -> None:
    _, shots = pipeline.load_dataset(args.dataset)
    model = load_model(args.model) if args.model else None
    fn = pipeline.method_fn(args.method, pipeline.fit_config(cfg), model)
    triples = [s.triple for s in shots]
    t0 = time.perf_counter()
    params = pipeline.fit_many(fn, triples, _threads(args))
    elapsed = time.perf_counter() - t0
    out = _out(args)
    path = out / f"fit_{args.method}.json"
    dump_json(path, {"format_version": FORMAT_VERSION, "kind": "fit", "config_hash": cfg.hash(),
                     "method": args.method, "dataset": str(args.dataset), "elapsed_s": elapsed,
                     "results": [{"image": i, **p.to_dict()} for i, p in enumerate(params)]})
    print(path)


def _write_table(path: Path, records, cfg) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION} config_hash={cfg.hash()}\n")
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.row())


def cmd_evaluate(args, cfg) -> None:
    _, shots = pipeline.load_dataset(args.dataset)
    triples = [s.triple for s in shots]
    records = []
    for path in args.fits:
        doc = load_json(path)
        check_version(doc, "fit")
        params = [GaussianParams.from_dict(r) for r in doc["results"]]
        if len(params) != len(triples):
            raise ConfigError(f"{path} has {len(params)} results for {len(triples)} shots")
        # per-image times are not in fit files; spread the batch time evenly
        per = doc.get("elapsed_s", 0.0) / max(len(params), 1)
        records += pipeline.score_records(doc["method"], triples, params, [per] * len(params))
    truth = args.truth_method or cfg.truth_method
    if truth == "labels":
        report = build_report(records, None, host_metadata())
        for name in {r.method for r in records}:
            recs = sorted((r for r in records if r.method == name), key=lambda r: r.image)
            stats = param_error_stats([r.params for r in recs], [shots[r.image].truth for r in recs])
            report["methods"][name]["param_errors"] = {
                k: {"mean": v["mean"], "std": v["std"], "histogram": v["histogram"]} for k, v in stats.items()}
        report["truth_method"] = "labels"
    else:
        report = build_report(records, truth, host_metadata())
    report["config_hash"] = cfg.hash()
    out = _out(args)
    dump_json(out / "evaluation.json", report)
    _write_table(out / "evaluation.csv", records, cfg)
    print(out / "evaluation.json")


def cmd_bench(args, cfg) -> None:
    _, shots = pipeline.load_dataset(args.dataset)
    fc = pipeline.fit_config(cfg)
    methods = {"3x1dls": pipeline.method_fn("3x1dls", fc), "2dls": pipeline.method_fn("2dls", fc)}
    for name, path in (("ml1", args.ml1), ("ml3", args.ml3)):
        if path is not None:
            methods[name] = pipeline.method_fn(name, fc, load_model(path))
    report, records = pipeline.run_benchmark([s.triple for s in shots], methods, cfg.warmup,
                                             {"dataset": str(args.dataset)}, cfg.truth_method)
    report["config_hash"] = cfg.hash()
    out = _out(args)
    dump_json(out / "report.json", report)
    _write_table(out / "records.csv", records, cfg)
    print(out / "report.json")


COMMANDS = {"synth-bg": cmd_synth_bg, "simulate": cmd_simulate, "train": cmd_train, "fine-tune": cmd_fine_tune,
            "fit": cmd_fit, "evaluate": cmd_evaluate, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = _run_config(args)
        COMMANDS[args.command](args, cfg)
    except (OdfitError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
