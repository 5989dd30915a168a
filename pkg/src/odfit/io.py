"""Frame, library, dataset-manifest, model and config persistence.

Frames are binary 16-bit portable graymaps (``P5``, maxval 65535, big-endian
samples, top row first). Structured documents are JSON.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .exceptions import (
    ConfigError,
    LibraryError,
    MalformedHeaderError,
    TruncatedPayloadError,
    UnsupportedMaxvalError,
)
from .imaging import Frame, GaussianParams
from .regressor import Network, NetworkSpec, Normalizer, RegressorModel
from .simulator import BackgroundLibrary, LabeledShot, ParamRanges

FORMAT_VERSION = 1
_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = 0
    for _ in range(count):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise MalformedHeaderError("graymap header ended early")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def pgm_counts(data: bytes) -> np.ndarray:
    """Decode a 16-bit binary graymap into a (height, width) uint16 array."""
    if not data.startswith(b"P5"):
        raise MalformedHeaderError(f"bad magic {data[:2]!r}, expected b'P5'")
    tokens, pos = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeaderError(f"non-numeric header field in {tokens[1:]}") from exc
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"bad dimensions {width}x{height}")
    if maxval != 65535:
        raise UnsupportedMaxvalError(f"maxval {maxval} unsupported; need 65535")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    need = width * height * 2
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header needs {need}")
    return np.frombuffer(payload, dtype=">u2").reshape(height, width).astype(np.uint16)


def pgm_bytes(counts, comment: str | None = None) -> bytes:
    """Encode a 2-D array of 16-bit counts; optional ``#`` comment lines follow the magic."""
    counts = np.asarray(counts)
    if counts.ndim != 2:
        raise MalformedHeaderError(f"graymap needs a 2-D array, got shape {counts.shape}")
    height, width = counts.shape
    head = b"P5\n"
    if comment:
        head += b"".join(b"# " + line.encode("ascii") + b"\n" for line in comment.splitlines())
    head += f"{width} {height}\n65535\n".encode("ascii")
    return head + counts.astype(">u2").tobytes()


def decode_pgm(data: bytes) -> Frame:
    return Frame(pgm_counts(data))


def encode_pgm(frame: Frame, comment: str | None = None) -> bytes:
    return pgm_bytes(frame.counts, comment)


def read_frame(path) -> Frame:
    return decode_pgm(Path(path).read_bytes())


def write_frame(path, frame: Frame, comment: str | None = None) -> None:
    Path(path).write_bytes(encode_pgm(frame, comment))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# library directories hold bg_<index>.pgm / dark_<index>.pgm, index zero-padded
_LIB_NAME = re.compile(r"^(bg|dark)_(\d+)\.pgm$")


def save_background_library(directory, library: BackgroundLibrary, comment: str | None = None) -> list[str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for k, (bg, dark) in enumerate(library.entries):
        for kind, frame in (("bg", bg), ("dark", dark)):
            name = f"{kind}_{k:04d}.pgm"
            write_frame(directory / name, frame, comment)
            names.append(name)
    return names


def load_background_library(directory) -> BackgroundLibrary:
    """Pairs ``bg_NNNN.pgm`` / ``dark_NNNN.pgm`` ordered by their index."""
    directory = Path(directory)
    found: dict[int, dict[str, Path]] = {}
    for p in sorted(directory.iterdir()):
        m = _LIB_NAME.match(p.name)
        if m:
            found.setdefault(int(m.group(2)), {})[m.group(1)] = p
    if not found:
        raise LibraryError(f"no bg_/dark_ frames in {directory}")
    entries, names = [], []
    shape = None
    for idx in sorted(found):
        pair = found[idx]
        for kind in ("bg", "dark"):
            if kind not in pair:
                other = next(iter(pair.values()))
                raise LibraryError(f"{other.name} has no matching {kind} frame (index {idx})")
        frames = []
        for kind in ("bg", "dark"):
            frame = read_frame(pair[kind])
            if shape is None:
                shape = frame.shape
            elif frame.shape != shape:
                raise LibraryError(f"{pair[kind].name} is {frame.width}x{frame.height}, "
                                   f"expected {shape[1]}x{shape[0]}")
            frames.append(frame)
        entries.append(tuple(frames))
        names.append(f"{idx:04d}")
    return BackgroundLibrary(tuple(entries), tuple(names))


def library_reference(directory) -> dict:
    directory = Path(directory)
    files = sorted(p.name for p in directory.iterdir() if _LIB_NAME.match(p.name))
    return {"directory": str(directory), "files": files,
            "sha256": {f: sha256_file(directory / f) for f in files}}


def config_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path) -> Any:
    return json.loads(Path(path).read_text())


def dataset_manifest(shots: Sequence[LabeledShot], *, seed, ranges: ParamRanges, mode: str, pairing: str,
                     library_ref: Mapping, frame_files: Sequence[str], cfg_hash: str = "") -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "config_hash": cfg_hash,
        "seed": seed,
        "ranges": ranges.to_dict(),
        "mode": mode,
        "pairing": pairing,
        "library": dict(library_ref),
        "n_shots": len(shots),
        "shots": [
            {"index": i, "atoms": f, "source_bg_index": s.source_bg_index,
             "synth_bg_index": s.synth_bg_index, "truth": s.truth.to_dict()}
            for i, (s, f) in enumerate(zip(shots, frame_files))
        ],
    }


def check_version(doc: Mapping, kind: str) -> None:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported {kind} format version {doc.get('format_version')!r}")
    if doc.get("kind", kind) != kind:
        raise ConfigError(f"expected a {kind} document, got {doc.get('kind')!r}")


def save_model(path_stem, model: RegressorModel, cfg_hash: str = "") -> tuple[Path, Path]:
    """Write ``<stem>.json`` (manifest) and ``<stem>.bin`` (float32 little-endian weights)."""
    stem = Path(path_stem)
    blob = model.network.flat_weights().astype("<f4").tobytes()
    bin_path = stem.with_suffix(".bin")
    bin_path.write_bytes(blob)
    layout = [{"name": n, "shape": list(a.shape)}
              for n, a in zip(model.network.weight_names(), model.network.arrays)]
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "config_hash": cfg_hash,
        "spec": model.spec.to_dict(),
        "normalizer": model.normalizer.to_dict(),
        "provenance": model.provenance,
        "symmetrize": model.symmetrize,
        "weights": {"file": bin_path.name, "dtype": "float32-le", "count": len(blob) // 4,
                    "sha256": hashlib.sha256(blob).hexdigest(), "layout": layout},
    }
    json_path = stem.with_suffix(".json")
    dump_json(json_path, manifest)
    return json_path, bin_path


def load_model(path) -> RegressorModel:
    path = Path(path)
    manifest = load_json(path.with_suffix(".json"))
    check_version(manifest, "model")
    spec = NetworkSpec.from_dict(manifest["spec"])
    blob = (path.parent / manifest["weights"]["file"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["weights"]["sha256"]:
        raise ConfigError("model weight blob does not match its recorded hash")
    flat = np.frombuffer(blob, dtype="<f4")
    net = Network(spec, np.float32)
    net.set_flat_weights(flat)
    return RegressorModel(spec, Normalizer.from_dict(manifest["normalizer"]), net, manifest.get("provenance", {}),
                          bool(manifest.get("symmetrize", True)))


@dataclass
class RunConfig:
    """Every knob of a pipeline run. Unknown keys are rejected on load."""

    seed: int = 0
    width: int = 64
    height: int = 64
    # synthetic background library
    library_size: int = 40
    bg_level: float = 20000.0
    bg_noise_sd: float = 30.0
    dark_level: float = 100.0
    fringe_amplitude: float = 150.0
    fringe_period: float = 23.0
    fringe_phase_jitter: float = 0.2
    level_jitter: float = 0.0
    # simulation
    n_shots: int = 1000
    mode: str = "ML1"
    pairing: str = "subsequent"
    ranges: dict = field(default_factory=lambda: ParamRanges().to_dict())
    # least squares
    max_iterations: int = 200
    param_tolerance: float = 1e-8
    residual_tolerance: float = 1e-8
    lm_lambda0: float = 1e-3
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.1
    slice_rounds: int = 3
    # network and training
    conv_channels: list = field(default_factory=lambda: [16, 32, 64, 64])
    hidden: int = 128
    pooling: str = "flatten"
    input_size: list = field(default_factory=lambda: [64, 64])
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_final: float = 1e-5
    schedule: str = "cosine"
    val_fraction: float = 0.1
    augment: bool = True
    input_log: bool = True
    theta_output: str = "cross"
    fine_tune_epochs: int = 5
    fine_tune_lr: float = 3e-4
    # benchmarking
    timing_repeats: int = 1
    warmup: int = 3
    truth_method: str = "2dls"

    @classmethod
    def from_mapping(cls, d: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        doc = load_json(path)
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_mapping(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())
