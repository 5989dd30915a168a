"""Frames, transmission, optical density and the rotated 2-D Gaussian OD model.

Grids are stored row-major with shape ``(height, width)``. Pixel ``(row j,
column i)`` has center ``(x, y) = (i, j)``: x runs along columns
(horizontal), y along rows (vertical), origin at the top-left pixel center.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateInputError, DomainError, ShapeMismatchError

COUNT_MAX = 65535
MIN_FRAME_SIDE = 8
DEFAULT_FLOOR = 1e-6
DEFAULT_T_FLOOR = math.exp(-6.0)

PARAM_NAMES = ("x0", "y0", "sigma_x", "sigma_y", "rho", "b", "theta")


@dataclass(frozen=True)
class Frame:
    """A single 16-bit camera image."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ShapeMismatchError(f"frame must be 2-D, got shape {counts.shape}")
        h, w = counts.shape
        if w < MIN_FRAME_SIDE or h < MIN_FRAME_SIDE:
            raise ShapeMismatchError(f"frame must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}, got {w}x{h}")
        if counts.dtype != np.uint16:
            if not np.all(np.isfinite(counts)):
                raise DomainError("frame counts must be finite")
            if counts.min() < 0 or counts.max() > COUNT_MAX:
                raise DomainError("frame counts outside [0, 65535]")
            if not np.all(counts == np.round(counts)):
                raise DomainError("frame counts must be integers")
            counts = counts.astype(np.uint16)
        counts = counts.copy()
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    __hash__ = None


@dataclass(frozen=True)
class FrameTriple:
    atoms: Frame
    bg: Frame
    dark: Frame

    def __post_init__(self):
        if not (self.atoms.shape == self.bg.shape == self.dark.shape):
            raise ShapeMismatchError(
                f"frame shapes differ: atoms {self.atoms.shape}, bg {self.bg.shape}, dark {self.dark.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.atoms.shape

    def stack(self) -> np.ndarray:
        """Counts as a float array of shape (3, H, W) in (atoms, bg, dark) order."""
        return np.stack([self.atoms.counts, self.bg.counts, self.dark.counts]).astype(np.float64)


@dataclass(frozen=True)
class ODMap:
    """Optical density on a pixel grid.

    ``valid_mask`` marks pixels where the OD could be computed. ``clamped_mask``
    marks the subset of valid pixels whose transmission fell below the floor and
    whose OD was therefore capped. Invalid pixels hold 0.
    """

    values: np.ndarray
    valid_mask: np.ndarray
    clamped_mask: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid_mask, dtype=bool)
        if values.ndim != 2 or valid.shape != values.shape:
            raise ShapeMismatchError("OD values and mask must be 2-D grids of equal shape")
        clamped = self.clamped_mask
        clamped = np.zeros_like(valid) if clamped is None else np.asarray(clamped, dtype=bool)
        if clamped.shape != values.shape:
            raise ShapeMismatchError("clamped mask shape differs from values")
        if not np.all(np.isfinite(values[valid])):
            raise DomainError("OD must be finite at valid pixels")
        values = np.where(valid, values, 0.0)
        for name, arr in (("values", values), ("valid_mask", valid), ("clamped_mask", clamped & valid)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def full(cls, values) -> "ODMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def fit_mask(self) -> np.ndarray:
        """Pixels that enter least-squares residuals: valid and not clamped."""
        return self.valid_mask & ~self.clamped_mask


@dataclass(frozen=True)
class GaussianParams:
    """Rotated 2-D Gaussian OD parameters.

    Positions and widths are in pixels, ``rho`` (peak OD above offset) and
    ``b`` (OD offset) in OD units, ``theta`` in radians.
    """

    x0: float
    y0: float
    sigma_x: float
    sigma_y: float
    rho: float
    b: float
    theta: float = 0.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "GaussianParams":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != 7:
            raise ShapeMismatchError(f"expected 7 parameters, got {values.size}")
        return cls(*values)

    def to_dict(self) -> dict[str, float]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d) -> "GaussianParams":
        return cls(**{n: d[n] for n in PARAM_NAMES})

    def is_canonical(self) -> bool:
        return (
            self.sigma_x > 0
            and self.sigma_y > 0
            and -math.pi / 4 <= self.theta < math.pi / 4
        )


def _check_triple(triple: FrameTriple):
    if not isinstance(triple, FrameTriple):
        raise TypeError(f"expected FrameTriple, got {type(triple).__name__}")


def transmission(triple: FrameTriple, floor: float = DEFAULT_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of light transmitted, ``(atoms - dark) / (bg - dark)``.

    Returns ``(T, valid)``. Pixels whose ``bg - dark`` does not exceed ``floor``
    are invalid and hold ``T = 1``.
    """
    _check_triple(triple)
    atoms = triple.atoms.counts.astype(np.float64)
    bg = triple.bg.counts.astype(np.float64)
    dark = triple.dark.counts.astype(np.float64)
    light = bg - dark
    valid = light > floor
    if not valid.any():
        raise DegenerateInputError("no pixel has bg - dark above the floor")
    t = np.ones_like(light)
    np.divide(atoms - dark, light, out=t, where=valid)
    return t, valid


def od_from_triple(triple: FrameTriple, t_floor: float = DEFAULT_T_FLOOR,
                   floor: float = DEFAULT_FLOOR) -> ODMap:
    """Optical density ``-ln T``; transmissions at or below ``t_floor`` are capped."""
    if not 0 < t_floor < 1:
        raise DomainError("t_floor must lie in (0, 1)")
    t, valid = transmission(triple, floor)
    clamped = valid & (t <= t_floor)
    od = np.zeros_like(t)
    ok = valid & ~clamped
    od[ok] = -np.log(t[ok])
    od[clamped] = -math.log(t_floor)
    return ODMap(od, valid, clamped)


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates ``(x, y)``, each of shape (height, width)."""
    y, x = np.mgrid[0:height, 0:width]
    return x.astype(np.float64), y.astype(np.float64)


def _check_sigmas(p: GaussianParams):
    if not (p.sigma_x > 0 and p.sigma_y > 0):
        raise DomainError(f"widths must be positive, got sigma_x={p.sigma_x}, sigma_y={p.sigma_y}")


def _rotated(p, x, y):
    c, s = math.cos(p.theta), math.sin(p.theta)
    dx, dy = x - p.x0, y - p.y0
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return u, v, c, s


def gaussian_surface(p: GaussianParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate the OD model at arbitrary coordinates."""
    _check_sigmas(p)
    u, v, _, _ = _rotated(p, x, y)
    return p.b + p.rho * np.exp(-0.5 * (u / p.sigma_x) ** 2 - 0.5 * (v / p.sigma_y) ** 2)


def gaussian_od(params: GaussianParams, width: int, height: int) -> ODMap:
    x, y = pixel_grid(width, height)
    return ODMap.full(gaussian_surface(params, x, y))


def model_and_jacobian(p: GaussianParams, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Model values and analytic partials at the given coordinates.

    The Jacobian has a trailing axis of length 7 ordered as ``PARAM_NAMES``.
    """
    _check_sigmas(p)
    u, v, c, s = _rotated(p, x, y)
    ia2 = 1.0 / p.sigma_x ** 2
    ib2 = 1.0 / p.sigma_y ** 2
    e = np.exp(-0.5 * u * u * ia2 - 0.5 * v * v * ib2)
    re = p.rho * e
    jac = np.empty(np.shape(x) + (7,))
    jac[..., 0] = re * (u * c * ia2 - v * s * ib2)
    jac[..., 1] = re * (u * s * ia2 + v * c * ib2)
    jac[..., 2] = re * u * u * ia2 / p.sigma_x
    jac[..., 3] = re * v * v * ib2 / p.sigma_y
    jac[..., 4] = e
    jac[..., 5] = 1.0
    jac[..., 6] = re * u * v * (ib2 - ia2)
    return p.b + re, jac


def gaussian_od_jacobian(params: GaussianParams, width: int, height: int) -> np.ndarray:
    """Partial derivatives of the OD surface, shape (7, height, width)."""
    x, y = pixel_grid(width, height)
    _, jac = model_and_jacobian(params, x, y)
    return np.moveaxis(jac, -1, 0)


def canonicalize(params: GaussianParams) -> GaussianParams:
    """Equivalent parameters with theta in [-pi/4, pi/4).

    A quarter turn of theta exchanges the roles of the two widths, so each odd
    number of quarter turns removed swaps sigma_x and sigma_y.
    """
    sx, sy = abs(params.sigma_x), abs(params.sigma_y)
    quarter = math.pi / 2
    k = math.floor((params.theta + math.pi / 4) / quarter)
    theta = params.theta - k * quarter
    # floor() can leave theta a rounding error outside the half-open interval
    if theta >= math.pi / 4:
        theta -= quarter
        k += 1
    elif theta < -math.pi / 4:
        theta += quarter
        k -= 1
    if k % 2:
        sx, sy = sy, sx
    return GaussianParams(params.x0, params.y0, sx, sy, params.rho, params.b, theta)
