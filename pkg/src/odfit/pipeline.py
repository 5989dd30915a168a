"""End-to-end helpers shared by the CLI and the benchmark: libraries, datasets, methods."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .evaluate import ImageRecord, build_report, chi_square, host_metadata, time_methods
from .exceptions import ConfigError
from .imaging import FrameTriple, GaussianParams, od_from_triple
from .io import (
    FORMAT_VERSION,
    check_version,
    dataset_manifest,
    library_reference,
    load_background_library,
    load_json,
    read_frame,
    save_background_library,
    write_frame,
    dump_json,
)
from .lsfit import FitConfig, fit_2d, fit_3x1d
from .regressor import NetworkSpec, RegressorModel, TrainConfig
from .simulator import (
    BackgroundLibrary,
    Fringe,
    LabeledShot,
    ParamRanges,
    build_dataset,
    synth_library,
)

METHODS = ("3x1dls", "2dls", "ml1", "ml3")


def fit_config(cfg) -> FitConfig:
    return FitConfig(cfg.max_iterations, cfg.param_tolerance, cfg.residual_tolerance, cfg.lm_lambda0,
                     cfg.lm_lambda_up, cfg.lm_lambda_down, slice_rounds=cfg.slice_rounds)


def train_config(cfg, epochs=None, lr=None) -> TrainConfig:
    return TrainConfig(cfg.epochs if epochs is None else epochs, cfg.batch_size, cfg.lr if lr is None else lr,
                       cfg.lr_final, cfg.schedule, cfg.val_fraction, cfg.augment, cfg.seed)


def network_spec(cfg, mode: str) -> NetworkSpec:
    return NetworkSpec(1 if mode == "ML1" else 3, tuple(cfg.input_size), tuple(cfg.conv_channels),
                       hidden=cfg.hidden, pooling=cfg.pooling)


def default_fringes(amplitude: float, period: float) -> list[Fringe]:
    """Two oblique fringe families: the primary at ``period`` px, a weaker one at 1.35x."""
    k = 2 * math.pi / period
    return [Fringe(amplitude, k, 0.56 * k, 0.0), Fringe(0.66 * amplitude, -0.74 * k, 1.35 * k, 1.0)]


def library_from_config(cfg, seed=None) -> BackgroundLibrary:
    return synth_library(cfg.library_size, cfg.width, cfg.height, level=cfg.bg_level, noise_sd=cfg.bg_noise_sd,
                         fringes=default_fringes(cfg.fringe_amplitude, cfg.fringe_period),
                         phase_jitter=cfg.fringe_phase_jitter, level_jitter=cfg.level_jitter,
                         dark_level=cfg.dark_level, rng_seed=cfg.seed if seed is None else seed)


def write_dataset(out_dir, shots: Sequence[LabeledShot], library_dir, *, seed, ranges: ParamRanges,
                  mode: str, pairing: str, cfg_hash: str = "") -> Path:
    """Atom frames plus a manifest; bg/dark frames stay in the library directory."""
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, shot in enumerate(shots):
        name = f"frames/atoms_{i:05d}.pgm"
        write_frame(out_dir / name, shot.triple.atoms)
        files.append(name)
    ref = library_reference(library_dir)
    ref["directory"] = os.path.relpath(Path(library_dir).resolve(), out_dir.resolve())
    manifest = dataset_manifest(shots, seed=seed, ranges=ranges, mode=mode, pairing=pairing,
                                library_ref=ref, frame_files=files, cfg_hash=cfg_hash)
    path = out_dir / "manifest.json"
    dump_json(path, manifest)
    return path


def _library_dir(manifest_path: Path, manifest: Mapping) -> Path:
    d = Path(manifest["library"]["directory"])
    return d if d.is_absolute() else (manifest_path.parent / d)


def load_dataset(manifest_path) -> tuple[dict, list[LabeledShot]]:
    """Shots read back from the frames and library a manifest points to."""
    manifest_path = Path(manifest_path)
    manifest = load_json(manifest_path)
    check_version(manifest, "dataset")
    library = load_background_library(_library_dir(manifest_path, manifest))
    shots = []
    for rec in manifest["shots"]:
        atoms = read_frame(manifest_path.parent / rec["atoms"])
        bg, dark = library.entries[rec["source_bg_index"]]
        shots.append(LabeledShot(FrameTriple(atoms, bg, dark), GaussianParams.from_dict(rec["truth"]),
                                 rec["source_bg_index"], rec["synth_bg_index"]))
    return manifest, shots


def regenerate_dataset(manifest_path) -> list[LabeledShot]:
    """Rebuild a dataset from its manifest's seed, ranges and library."""
    manifest_path = Path(manifest_path)
    manifest = load_json(manifest_path)
    check_version(manifest, "dataset")
    library = load_background_library(_library_dir(manifest_path, manifest))
    return build_dataset(library, ParamRanges.from_dict(manifest["ranges"]), manifest["n_shots"],
                         manifest["mode"], manifest["seed"], manifest.get("pairing", "subsequent"))


def method_fn(name: str, config: FitConfig = FitConfig(), model: RegressorModel | None = None
              ) -> Callable[[FrameTriple], GaussianParams]:
    """Callable mapping a frame triple to fitted parameters, timed end to end."""
    if name == "3x1dls":
        return lambda tr: fit_3x1d(od_from_triple(tr), config).params
    if name == "2dls":
        return lambda tr: fit_2d(od_from_triple(tr), config).params
    if name in ("ml1", "ml3"):
        if model is None:
            raise ConfigError(f"method {name} needs a trained model")
        want = 1 if name == "ml1" else 3
        if model.spec.input_channels != want:
            raise ConfigError(f"method {name} needs a {want}-channel model, got {model.spec.input_channels}")
        if want == 1:
            return lambda tr: GaussianParams.from_array(model.predict(tr.atoms.counts[None, None])[0])
        return lambda tr: GaussianParams.from_array(
            model.predict(np.stack([tr.atoms.counts, tr.bg.counts, tr.dark.counts])[None])[0])
    raise ConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


def fit_many(fn: Callable, triples: Sequence[FrameTriple], threads: int = 1) -> list[GaussianParams]:
    if threads <= 1:
        return [fn(t) for t in triples]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, triples))


def score_records(method: str, triples: Sequence[FrameTriple], params: Sequence[GaussianParams],
                  elapsed: Sequence[float]) -> list[ImageRecord]:
    out = []
    for i, (tr, p, dt) in enumerate(zip(triples, params, elapsed)):
        rep = chi_square(od_from_triple(tr), p, method)
        out.append(ImageRecord(i, method, p, rep.chi2, rep.dof, rep.noise_variance, float(dt)))
    return out


def run_benchmark(triples: Sequence[FrameTriple], methods: Mapping[str, Callable], warmup: int = 3,
                  metadata: Mapping | None = None, truth_method: str = "2dls") -> tuple[dict, list[ImageRecord]]:
    """Time every method on every triple (serially), score chi-square, build the report."""
    timings = time_methods(list(triples), methods, repeats=1, warmup=warmup, keep_outputs=True)
    records = []
    for name, t in timings.items():
        records += score_records(name, triples, t.outputs, t.durations)
    meta = {**host_metadata(), **dict(metadata or {})}
    return build_report(records, truth_method if truth_method in methods else None, meta), records
