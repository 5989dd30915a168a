"""Simulated absorption shots with known ground truth.

Atom frames are composited from a background pair as
``atoms = exp(-OD) * (bg - dark) + dark`` and quantized like a camera ADC.
No noise is added beyond what the background frames already carry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Literal, Sequence

import numpy as np

from .exceptions import DomainError, LibraryError, ShapeMismatchError
from .imaging import (
    COUNT_MAX,
    PARAM_NAMES,
    Frame,
    FrameTriple,
    GaussianParams,
    gaussian_surface,
    pixel_grid,
)

Mode = Literal["ML1", "ML3"]
MIN_SIGMA_PX = 0.5

# parameters whose bounds are fractions of the frame width / height
_WIDTH_SCALED = ("x0", "sigma_x")
_HEIGHT_SCALED = ("y0", "sigma_y")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class ParamRanges:
    """Uniform sampling bounds for each Gaussian parameter.

    Position and width bounds are fractions of the frame size. ``y0`` is scaled
    by the height; set ``y0_min_scale="width"`` to scale its lower bound by the
    width instead.
    """

    x0: tuple[float, float] = (0.1, 0.9)
    y0: tuple[float, float] = (0.1, 0.9)
    sigma_x: tuple[float, float] = (0.0, 0.25)
    sigma_y: tuple[float, float] = (0.0, 0.25)
    rho: tuple[float, float] = (0.0, 3.0)
    b: tuple[float, float] = (-0.05, 0.05)
    theta: tuple[float, float] = (-0.1, 0.1)
    y0_min_scale: Literal["height", "width"] = "height"

    def __post_init__(self):
        for name in PARAM_NAMES:
            lo, hi = (float(v) for v in getattr(self, name))
            object.__setattr__(self, name, (lo, hi))
            if not lo < hi:
                raise DomainError(f"{name}: min {lo} must be below max {hi}")
        lo, hi = self.theta
        if lo < -math.pi / 4 or hi > math.pi / 4:
            raise DomainError("theta bounds must lie within [-pi/4, pi/4)")
        if self.sigma_x[0] < 0 or self.sigma_y[0] < 0:
            raise DomainError("width bounds must be nonnegative")
        if self.y0_min_scale not in ("height", "width"):
            raise DomainError("y0_min_scale must be 'height' or 'width'")

    def bounds(self, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
        """Bounds in physical units (pixels, OD, radians) as two 7-arrays."""
        lo = np.empty(7)
        hi = np.empty(7)
        for i, name in enumerate(PARAM_NAMES):
            a, b = getattr(self, name)
            if name in _WIDTH_SCALED:
                a, b = a * width, b * width
            elif name in _HEIGHT_SCALED:
                a_scale = width if (name == "y0" and self.y0_min_scale == "width") else height
                a, b = a * a_scale, b * height
            lo[i], hi[i] = a, b
        return lo, hi

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in PARAM_NAMES:
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d) -> "ParamRanges":
        kw = {k: tuple(v) if k in PARAM_NAMES else v for k, v in d.items()}
        return cls(**kw)


def sample_params(ranges: ParamRanges, width: int, height: int, rng_seed=None,
                  min_sigma: float = MIN_SIGMA_PX) -> GaussianParams:
    """Draw each parameter independently and uniformly from its range.

    Widths below ``min_sigma`` pixels are redrawn.
    """
    rng = _rng(rng_seed)
    lo, hi = ranges.bounds(width, height)
    for k in (2, 3):
        if hi[k] < min_sigma:
            raise DomainError(f"{PARAM_NAMES[k]} upper bound {hi[k]:.3g} px is below the {min_sigma} px minimum")
    values = rng.uniform(lo, hi)
    for k in (2, 3):
        while values[k] < min_sigma:
            values[k] = rng.uniform(lo[k], hi[k])
    return GaussianParams.from_array(values)


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, COUNT_MAX).astype(np.uint16)


def synthesize_atoms(truth: GaussianParams, bg: Frame, dark: Frame) -> Frame:
    """Atom frame for ``truth`` given the beam and dark frames."""
    if bg.shape != dark.shape:
        raise ShapeMismatchError(f"bg {bg.shape} and dark {dark.shape} differ")
    x, y = pixel_grid(bg.width, bg.height)
    t = np.exp(-gaussian_surface(truth, x, y))
    d = dark.counts.astype(np.float64)
    return Frame(_quantize(t * (bg.counts - d) + d))


@dataclass(frozen=True)
class Fringe:
    """A sinusoidal fringe ``amplitude * sin(kx*x + ky*y + phase)`` in counts."""

    amplitude: float
    kx: float
    ky: float
    phase: float = 0.0


def synth_background(width: int, height: int, level: float, noise_sd: float,
                     fringes: Sequence[Fringe] = (), rng_seed=None,
                     dark_level: float = 100.0, dark_noise_sd: float | None = None) -> tuple[Frame, Frame]:
    """Stand-in (bg, dark) pair: flat level plus fringes plus Gaussian count noise.

    The dark frame is ``dark_level`` plus Gaussian noise (sd ``dark_noise_sd``,
    defaulting to ``noise_sd / 4``).
    """
    if width < 8 or height < 8:
        raise DomainError("frames must be at least 8x8")
    if noise_sd < 0 or (dark_noise_sd is not None and dark_noise_sd < 0):
        raise DomainError("noise sd must be nonnegative")
    fringe_span = sum(abs(f.amplitude) for f in fringes)
    if level + 5 * noise_sd + fringe_span >= COUNT_MAX:
        raise DomainError("level + 5*noise_sd + fringe amplitude must stay below 65535")
    if level - 5 * noise_sd - fringe_span < 0 or dark_level < 0:
        raise DomainError("levels must stay nonnegative")
    if dark_noise_sd is None:
        dark_noise_sd = noise_sd / 4
    rng = _rng(rng_seed)
    x, y = pixel_grid(width, height)
    bg = np.full((height, width), float(level))
    for f in fringes:
        bg += f.amplitude * np.sin(f.kx * x + f.ky * y + f.phase)
    bg += rng.normal(0.0, noise_sd, bg.shape) if noise_sd > 0 else 0.0
    dark = np.full((height, width), float(dark_level))
    dark += rng.normal(0.0, dark_noise_sd, dark.shape) if dark_noise_sd > 0 else 0.0
    return Frame(_quantize(bg)), Frame(_quantize(dark))


@dataclass(frozen=True)
class BackgroundLibrary:
    """Ordered (bg, dark) pairs; order is acquisition order."""

    entries: tuple[tuple[Frame, Frame], ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        entries = tuple((bg, dark) for bg, dark in self.entries)
        object.__setattr__(self, "entries", entries)
        if len(entries) < 2:
            raise LibraryError(f"a background library needs at least 2 entries, got {len(entries)}")
        shape = entries[0][0].shape
        for k, (bg, dark) in enumerate(entries):
            if bg.shape != shape or dark.shape != shape:
                raise LibraryError(f"entry {k} has shape {bg.shape}/{dark.shape}, expected {shape}")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"{k:04d}" for k in range(len(entries))))
        elif len(self.names) != len(entries):
            raise LibraryError("names must match entries")

    def __len__(self):
        return len(self.entries)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries[0][0].shape


def synth_library(n: int, width: int = 64, height: int = 64, level: float = 20000.0,
                  noise_sd: float = 0.0, fringes: Sequence[Fringe] = (),
                  phase_jitter: float = 0.0, level_jitter: float = 0.0,
                  dark_level: float = 100.0, rng_seed=None) -> BackgroundLibrary:
    """Library of synthetic pairs whose fringes and level drift between entries.

    Each entry's fringe phases follow a Gaussian random walk with step
    ``phase_jitter`` radians; its level is ``level * (1 + level_jitter * N(0,1))``.
    """
    ss = np.random.SeedSequence(rng_seed)
    drift_rng = np.random.default_rng(ss.spawn(1)[0])
    seeds = ss.spawn(n)
    phases = np.array([f.phase for f in fringes], dtype=np.float64)
    entries = []
    for k in range(n):
        if k:
            phases = phases + phase_jitter * drift_rng.standard_normal(phases.shape)
        lvl = level * (1.0 + level_jitter * drift_rng.standard_normal())
        fr = [Fringe(f.amplitude, f.kx, f.ky, p) for f, p in zip(fringes, phases)]
        entries.append(synth_background(width, height, lvl, noise_sd, fr, seeds[k], dark_level=dark_level))
    return BackgroundLibrary(tuple(entries))


@dataclass(frozen=True)
class LabeledShot:
    triple: FrameTriple
    truth: GaussianParams
    source_bg_index: int
    synth_bg_index: int


def build_dataset(library: BackgroundLibrary, ranges: ParamRanges, n: int, mode: Mode = "ML1",
                  rng_seed=None, pairing: Literal["subsequent", "same"] = "subsequent") -> list[LabeledShot]:
    """Labeled shots composited onto library backgrounds.

    For each shot an entry ``k`` is drawn uniformly. The atom frame is
    synthesized from entry ``k+1``'s bg (wrapping) and entry ``k``'s dark, while
    the triple carries entry ``k``'s own (bg, dark). ``pairing="same"`` uses
    entry ``k``'s bg for both. Shot ``i`` depends only on ``(rng_seed, i)``.
    """
    if mode not in ("ML1", "ML3"):
        raise DomainError(f"mode must be ML1 or ML3, got {mode!r}")
    if pairing not in ("subsequent", "same"):
        raise DomainError(f"unknown pairing {pairing!r}")
    if len(library) < 2:
        raise LibraryError("library needs at least 2 entries")
    if n < 0:
        raise DomainError("n must be nonnegative")
    h, w = library.shape
    shots = []
    for child in np.random.SeedSequence(rng_seed).spawn(n):
        rng = np.random.default_rng(child)
        k = int(rng.integers(len(library)))
        truth = sample_params(ranges, w, h, rng)
        j = (k + 1) % len(library) if pairing == "subsequent" else k
        bg, dark = library.entries[k]
        atoms = synthesize_atoms(truth, library.entries[j][0], dark)
        shots.append(LabeledShot(FrameTriple(atoms, bg, dark), truth, k, j))
    return shots


def shots_to_arrays(shots: Sequence[LabeledShot], mode: Mode = "ML1") -> tuple[np.ndarray, np.ndarray]:
    """Stack shots into ``X`` of shape (n, C, H, W) counts and ``y`` of shape (n, 7).

    ``C`` is 1 (atoms) for ML1 and 3 (atoms, bg, dark) for ML3.
    """
    if not shots:
        raise DomainError("no shots")
    channels = 1 if mode == "ML1" else 3
    h, w = shots[0].triple.shape
    X = np.empty((len(shots), channels, h, w), dtype=np.float32)
    y = np.empty((len(shots), 7))
    for i, s in enumerate(shots):
        X[i, 0] = s.triple.atoms.counts
        if channels == 3:
            X[i, 1] = s.triple.bg.counts
            X[i, 2] = s.triple.dark.counts
        y[i] = s.truth.to_array()
    return X, y
