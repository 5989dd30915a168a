import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from odfit.exceptions import (
    ConfigError,
    LibraryError,
    MalformedHeaderError,
    TruncatedPayloadError,
    UnsupportedMaxvalError,
)
from odfit.imaging import Frame
from odfit.io import (
    RunConfig,
    decode_pgm,
    encode_pgm,
    load_background_library,
    load_model,
    pgm_bytes,
    pgm_counts,
    read_frame,
    save_background_library,
    save_model,
    write_frame,
)
from odfit.regressor import NetworkSpec, Normalizer, RegressorModel
from odfit.simulator import ParamRanges, synth_background, synth_library


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint16, st.tuples(st.integers(8, 20), st.integers(8, 20))))
def test_frame_round_trip(counts):
    frame = Frame(counts)
    assert np.array_equal(decode_pgm(encode_pgm(frame)).counts, counts)
    assert np.array_equal(decode_pgm(encode_pgm(frame, "two\nlines")).counts, counts)


def test_frame_file_round_trip(tmp_path):
    frame = Frame(np.random.default_rng(0).integers(0, 65536, (9, 13)).astype(np.uint16))
    write_frame(tmp_path / "f.pgm", frame)
    assert read_frame(tmp_path / "f.pgm") == frame


def test_big_endian_payload():
    data = pgm_bytes(np.array([[0, 65535]], dtype=np.uint16))
    assert data.endswith(b"\n\x00\x00\xff\xff")
    assert data[-4:] == bytes([0x00, 0x00, 0xFF, 0xFF])
    assert np.array_equal(pgm_counts(data), [[0, 65535]])
    assert pgm_bytes(np.array([[258]], dtype=np.uint16))[-2:] == b"\x01\x02"


def test_decode_errors_are_distinct():
    with pytest.raises(TruncatedPayloadError):
        pgm_counts(b"P5\n100 100\n65535\n" + bytes(10))
    with pytest.raises(UnsupportedMaxvalError):
        pgm_counts(b"P5\n2 1\n255\n" + bytes(2))
    with pytest.raises(MalformedHeaderError):
        pgm_counts(b"P2\n2 1\n65535\n" + bytes(4))
    with pytest.raises(MalformedHeaderError):
        pgm_counts(b"P5\n2 x\n65535\n" + bytes(4))
    with pytest.raises(MalformedHeaderError):
        pgm_counts(b"P5\n2 1")


def test_comment_lines_in_header():
    data = b"P5\n# made by hand\n2 1\n# more\n65535\n" + bytes([0, 1, 0, 2])
    assert np.array_equal(pgm_counts(data), [[1, 2]])


def library_dir(tmp_path, n=2, shape=(8, 8)):
    lib = synth_library(n, shape[1], shape[0], level=1000, noise_sd=3.0, rng_seed=1)
    save_background_library(tmp_path, lib)
    return lib


def test_library_round_trip_ordered(tmp_path):
    lib = library_dir(tmp_path, 3)
    loaded = load_background_library(tmp_path)
    assert len(loaded) == 3
    for (a, b), (c, d) in zip(lib.entries, loaded.entries):
        assert a == c and b == d


def test_library_orphan_named(tmp_path):
    library_dir(tmp_path, 2)
    (tmp_path / "dark_0001.pgm").unlink()
    with pytest.raises(LibraryError, match="bg_0001.pgm"):
        load_background_library(tmp_path)


def test_library_mixed_dimensions(tmp_path):
    library_dir(tmp_path, 2)
    bg, _ = synth_background(9, 8, 1000, 0.0)
    write_frame(tmp_path / "bg_0001.pgm", bg)
    with pytest.raises(LibraryError, match="bg_0001.pgm"):
        load_background_library(tmp_path)


def test_library_empty_directory(tmp_path):
    with pytest.raises(LibraryError):
        load_background_library(tmp_path)


def test_model_round_trip_bit_exact(tmp_path):
    norm = Normalizer.from_ranges(ParamRanges(), 64, 64, 1234.0, input_log=True, theta_output="cross")
    model = RegressorModel.initialize(NetworkSpec(3, (32, 32), (4, 8), hidden=16), norm.with_shrink(0.003), seed=5)
    json_path, bin_path = save_model(tmp_path / "m", model, "abc")
    assert bin_path.stat().st_size == 4 * model.network.flat_weights().size
    doc = json.loads(json_path.read_text())
    assert doc["format_version"] == 1 and doc["config_hash"] == "abc"
    back = load_model(json_path)
    assert back.spec == model.spec and back.normalizer == model.normalizer
    assert np.array_equal(back.network.flat_weights(), model.network.flat_weights())
    x = np.random.default_rng(0).integers(0, 2000, (2, 3, 32, 32))
    assert np.array_equal(back.predict(x), model.predict(x))


def test_model_blob_tamper_detected(tmp_path):
    model = RegressorModel.initialize(NetworkSpec(1, (16, 16), (2, 2), hidden=4),
                                      Normalizer.from_ranges(ParamRanges(), 16, 16))
    json_path, bin_path = save_model(tmp_path / "m", model)
    blob = bytearray(bin_path.read_bytes())
    blob[0] ^= 1
    bin_path.write_bytes(bytes(blob))
    with pytest.raises(ConfigError):
        load_model(json_path)


def test_run_config_defaults_and_unknown_keys(tmp_path):
    cfg = RunConfig()
    assert cfg.seed == 0 and cfg.max_iterations == 200 and cfg.epochs == 30
    (tmp_path / "c.json").write_text(json.dumps({"seed": 4, "epochs": 2}))
    loaded = RunConfig.load(tmp_path / "c.json")
    assert loaded.seed == 4 and loaded.epochs == 2 and loaded.lr == cfg.lr
    assert loaded.hash() != cfg.hash() and RunConfig().hash() == cfg.hash()
    (tmp_path / "bad.json").write_text(json.dumps({"sede": 4}))
    with pytest.raises(ConfigError, match="sede"):
        RunConfig.load(tmp_path / "bad.json")
