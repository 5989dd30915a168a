"""Least-squares Gaussian fitters: the 3x1-D slice fitter and the full 2-D fit."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy import ndimage

from .exceptions import ConvergenceError, DegenerateInputError, DomainError
from .imaging import (
    GaussianParams,
    ODMap,
    canonicalize,
    gaussian_surface,
    model_and_jacobian,
    pixel_grid,
)

_FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 200
    param_tolerance: float = 1e-8
    residual_tolerance: float = 1e-8
    lm_lambda0: float = 1e-3
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.1
    lm_lambda_max: float = 1e12
    slice_rounds: int = 3

    def __post_init__(self):
        for name in ("max_iterations", "param_tolerance", "residual_tolerance",
                     "lm_lambda0", "lm_lambda_max", "slice_rounds"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if not self.lm_lambda_up > 1 > self.lm_lambda_down > 0:
            raise DomainError("need lm_lambda_up > 1 > lm_lambda_down > 0")


@dataclass(frozen=True)
class FitResult:
    params: GaussianParams
    converged: bool
    iterations: int
    residual_ss: float
    elapsed: float


class LMResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int
    ss: float


def lm_minimize(residual_fn: Callable[[np.ndarray], np.ndarray],
                jacobian_fn: Callable[[np.ndarray], np.ndarray],
                x0, config: FitConfig = FitConfig()) -> LMResult:
    """Levenberg-Marquardt minimization of ``sum(residual_fn(x)**2)``.

    Each iteration solves ``(J^T J + lam * diag(J^T J)) dx = -J^T r`` and tries
    one step. Accepted steps shrink ``lam``; rejected ones grow it. Only steps
    that strictly lower the sum of squares are accepted.
    """
    x = np.array(x0, dtype=np.float64)
    r = np.asarray(residual_fn(x), dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ConvergenceError("initial residuals are not finite")
    ss = float(r @ r)
    lam = config.lm_lambda0
    converged = False
    it = 0
    need_jac = True
    while it < config.max_iterations:
        if ss == 0.0:
            converged = True
            break
        it += 1
        if need_jac:
            J = np.asarray(jacobian_fn(x), dtype=np.float64)
            A = J.T @ J
            g = J.T @ r
            diag = np.diag(A).copy()
            # zero columns (e.g. positions when the amplitude vanishes) keep a tiny damping term
            diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
            need_jac = False
        try:
            step = np.linalg.solve(A + lam * np.diag(diag), -g)
        except np.linalg.LinAlgError:
            step = None
        small_step = False
        if step is not None and np.all(np.isfinite(step)):
            small_step = np.linalg.norm(step) <= config.param_tolerance * (np.linalg.norm(x) + config.param_tolerance)
            x_new = x + step
            r_new = np.asarray(residual_fn(x_new), dtype=np.float64)
            ss_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else math.inf
            if ss_new < ss:
                drop = ss - ss_new
                x, r, ss = x_new, r_new, ss_new
                lam = max(lam * config.lm_lambda_down, 1e-15)
                need_jac = True
                if small_step or drop <= config.residual_tolerance * (ss + drop):
                    converged = True
                    break
                continue
        if small_step:
            # no representable improvement left along the damped direction
            converged = True
            break
        lam *= config.lm_lambda_up
        if lam > config.lm_lambda_max:
            break
    return LMResult(x, converged, it, ss)


class Fit1D(NamedTuple):
    center: float
    sigma: float
    amplitude: float
    offset: float
    converged: bool
    iterations: int


def _gauss1d(p, t):
    c, s, a, o = p
    z = (t - c) / s
    e = np.exp(-0.5 * z * z)
    return o + a * e, z, e


def _moment_init(t, y):
    offset = float(np.median(y))
    k = int(np.argmax(y))
    amp = float(y[k] - offset)
    half = offset + 0.5 * amp
    lo = hi = k
    while lo > 0 and y[lo - 1] >= half:
        lo -= 1
    while hi < len(y) - 1 and y[hi + 1] >= half:
        hi += 1
    spacing = float(np.median(np.diff(t))) if len(t) > 1 else 1.0
    fwhm = (hi - lo + 1) * spacing
    return float(t[k]), max(fwhm / _FWHM_PER_SIGMA, 0.3 * spacing), amp, offset


def fit_1d_gaussian(profile, mask=None, config: FitConfig = FitConfig(), t=None, init=None) -> Fit1D:
    """Fit ``offset + amplitude * exp(-(t - center)^2 / (2 sigma^2))`` to a profile.

    ``t`` defaults to sample indices. Without ``init`` the start point comes
    from the profile's median, maximum and half-maximum width. A profile with
    no peak above its median returns ``amplitude=0`` and ``converged=False``.
    """
    profile = np.asarray(profile, dtype=np.float64)
    t = np.arange(profile.size, dtype=np.float64) if t is None else np.asarray(t, dtype=np.float64)
    mask = np.ones(profile.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not (profile.shape == t.shape == mask.shape):
        raise DomainError("profile, positions and mask must have equal length")
    tv, yv = t[mask], profile[mask]
    if tv.size < 8:
        raise DegenerateInputError(f"need at least 8 valid samples, got {tv.size}")
    if init is None:
        init = _moment_init(tv, yv)
    scale = max(float(np.max(np.abs(yv))), 1e-300)
    if not init[2] > 1e-12 * scale:
        return Fit1D(init[0], init[1], 0.0, init[3], False, 0)

    def residual(p):
        return _gauss1d(p, tv)[0] - yv

    def jacobian(p):
        _, z, e = _gauss1d(p, tv)
        c, s, a, _ = p
        return np.column_stack((a * e * z / s, a * e * z * z / s, e, np.ones_like(e)))

    res = lm_minimize(residual, jacobian, np.array(init, dtype=np.float64), config)
    c, s, a, o = res.x
    return Fit1D(float(c), float(abs(s)), float(a), float(o), res.converged, res.iterations)


def _fill_invalid(od: ODMap) -> np.ndarray:
    mask = od.fit_mask
    if not mask.any():
        raise DegenerateInputError("OD map has no valid pixels")
    return np.where(mask, od.values, np.median(od.values[mask]))


def _slice(values, mask, axis_dir, perp_dir, perp_coord, aligned):
    """Samples along the line ``{t * axis_dir + perp_coord * perp_dir}``.

    Returns positions ``t``, interpolated samples and their validity.
    """
    h, w = values.shape
    if aligned:
        # axis-aligned slices hit pixel centers exactly: no interpolation
        if axis_dir[0] > 0.5:
            row = int(np.clip(round(perp_coord), 0, h - 1))
            return np.arange(w, dtype=np.float64), values[row].copy(), mask[row].copy(), float(row)
        col = int(np.clip(round(perp_coord), 0, w - 1))
        return np.arange(h, dtype=np.float64), values[:, col].copy(), mask[:, col].copy(), float(col)
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    proj = corners @ np.asarray(axis_dir)
    t = np.arange(math.floor(proj.min()), math.ceil(proj.max()) + 1, dtype=np.float64)
    xs = t * axis_dir[0] + perp_coord * perp_dir[0]
    ys = t * axis_dir[1] + perp_coord * perp_dir[1]
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    coords = np.vstack((ys, xs))
    samples = ndimage.map_coordinates(values, coords, order=1, mode="nearest")
    mvals = ndimage.map_coordinates(mask.astype(np.float64), coords, order=1, mode="nearest")
    valid = inside & (mvals > 1 - 1e-9)
    return t, samples, valid, float(perp_coord)


def _residual_ss(od: ODMap, params: GaussianParams) -> float:
    mask = od.fit_mask
    x, y = pixel_grid(od.width, od.height)
    r = od.values[mask] - gaussian_surface(params, x[mask], y[mask])
    return float(r @ r)


def _slice_fit(od: ODMap, config: FitConfig, angle: float) -> tuple[GaussianParams, bool, int]:
    values = od.values
    mask = od.fit_mask
    smooth = ndimage.uniform_filter(_fill_invalid(od), size=5, mode="nearest")
    j, i = np.unravel_index(int(np.argmax(smooth)), smooth.shape)
    c, s = math.cos(angle), math.sin(angle)
    u_dir, v_dir = (c, s), (-s, c)
    aligned = angle == 0.0
    # cloud center in the rotated frame: u along u_dir, v along v_dir
    uc = i * c + j * s
    vc = -i * s + j * c
    h, w = values.shape

    def inside(u, v):
        x, y = u * c - v * s, u * s + v * c
        return 0 <= x <= w - 1 and 0 <= y <= h - 1

    def attempt(axis_dir, perp_dir, perp_coord, prev):
        try:
            t, prof, pm, line = _slice(values, mask, axis_dir, perp_dir, perp_coord, aligned)
            fit = fit_1d_gaussian(prof, pm, config, t=t,
                                  init=prev[:4] if prev is not None and prev.amplitude > 0 else None)
        except DegenerateInputError:
            return None, perp_coord
        return fit, line

    fu = fv = None
    iterations = 0
    ok = False
    u_line = uc
    v_line = vc
    for _ in range(config.slice_rounds):
        fu_new, v_line_new = attempt(u_dir, v_dir, vc, fu)
        if fu_new is None:
            break
        fu, v_line = fu_new, v_line_new
        iterations += fu.iterations
        if fu.amplitude > 0 and inside(fu.center, vc):
            uc = fu.center
        fv_new, u_line_new = attempt(v_dir, u_dir, uc, fv)
        if fv_new is None:
            break
        fv, u_line = fv_new, u_line_new
        iterations += fv.iterations
        if fv.amplitude > 0 and inside(uc, fv.center):
            vc = fv.center
        ok = (fu.converged and fv.converged and fu.amplitude > 0 and fv.amplitude > 0
              and abs(fu.center - uc) < 1e-9 and abs(fv.center - vc) < 1e-9)
    if fu is None or fv is None:
        params = GaussianParams(uc * c - vc * s, uc * s + vc * c, 1.0, 1.0, 0.0,
                                float(np.median(values[mask])), angle)
        return canonicalize(params), False, iterations

    def line_corrected(amplitude, offset, sigma):
        # each slice misses the center by its line offset: undo that attenuation
        z = offset / max(sigma, 1e-12)
        return amplitude * math.exp(0.5 * z * z) if ok and abs(z) < 3 else amplitude

    rho_u = line_corrected(fu.amplitude, v_line - vc, fv.sigma)
    rho_v = line_corrected(fv.amplitude, u_line - uc, fu.sigma)
    x0 = uc * c - vc * s
    y0 = uc * s + vc * c
    params = GaussianParams(x0, y0, max(fu.sigma, 1e-6), max(fv.sigma, 1e-6),
                            0.5 * (rho_u + rho_v), 0.5 * (fu.offset + fv.offset), angle)
    return canonicalize(params), ok, iterations


def fit_3x1d(od: ODMap, config: FitConfig = FitConfig(), angle: float = 0.0) -> FitResult:
    """Alternating 1-D fits on a row and a column through the cloud center.

    The start center is the maximum of the OD after a 5x5 box filter. Each of
    ``config.slice_rounds`` rounds fits the row through the current center to
    update (x0, sigma_x), then the column through the updated center to update
    (y0, sigma_y). Peak and offset average the final row and column fits, with
    each peak corrected for the slice's distance from the fitted center.
    Rotation is not modeled; ``angle`` slices along axes rotated by that angle
    instead of the pixel axes.
    """
    start = time.perf_counter()
    params, ok, iterations = _slice_fit(od, config, angle)
    ss = _residual_ss(od, params)
    return FitResult(params, ok, iterations, ss, time.perf_counter() - start)


def _moment_theta(od: ODMap, guess: GaussianParams) -> float | None:
    """Orientation from second central moments of the OD above half maximum."""
    if not guess.rho > 0:
        return None
    mask = od.fit_mask & (od.values > guess.b + 0.5 * guess.rho)
    if mask.sum() < 5:
        return None
    x, y = pixel_grid(od.width, od.height)
    wts = od.values[mask] - guess.b
    xs, ys = x[mask], y[mask]
    tot = wts.sum()
    mx, my = (wts * xs).sum() / tot, (wts * ys).sum() / tot
    cxx = (wts * (xs - mx) ** 2).sum() / tot
    cyy = (wts * (ys - my) ** 2).sum() / tot
    cxy = (wts * (xs - mx) * (ys - my)).sum() / tot
    return 0.5 * math.atan2(2 * cxy, cxx - cyy)


def fit_2d(od: ODMap, config: FitConfig = FitConfig(), init: GaussianParams | None = None) -> FitResult:
    """Levenberg-Marquardt fit of all 7 rotated-Gaussian parameters.

    Without ``init`` the start point is the best (lowest residual) of: the
    axis-aligned slice fit, that fit with theta from image moments, and a slice
    fit along axes rotated by pi/8. Since LM never accepts an uphill step, the
    result never fits worse than the axis-aligned slice fit.
    """
    start = time.perf_counter()
    mask = od.fit_mask
    if not mask.any():
        raise DegenerateInputError("OD map has no valid pixels")
    if init is None:
        base, _, _ = _slice_fit(od, config, 0.0)
        candidates = [base]
        theta = _moment_theta(od, base)
        if theta is not None:
            candidates.append(canonicalize(replace(base, theta=theta)))
        rotated, rot_ok, _ = _slice_fit(od, config, math.pi / 8)
        if rot_ok:
            candidates.append(rotated)
        init = min(candidates, key=lambda p: _residual_ss(od, p))
    x, y = pixel_grid(od.width, od.height)
    xm, ym, zm = x[mask], y[mask], od.values[mask]
    cache = {}

    def residual(p):
        # the model depends on the widths only through their squares
        sign = np.sign(p[2:4])
        q = p.copy()
        q[2:4] = np.maximum(np.abs(q[2:4]), 1e-12)
        model, jac = model_and_jacobian(GaussianParams.from_array(q), xm, ym)
        jac[:, 2:4] *= np.where(sign == 0, 1.0, sign)
        cache["x"], cache["jac"] = p.copy(), jac
        return model - zm

    def jacobian(p):
        if "x" not in cache or not np.array_equal(cache["x"], p):
            residual(p)
        return cache["jac"]

    res = lm_minimize(residual, jacobian, init.to_array(), config)
    params = canonicalize(GaussianParams.from_array(res.x))
    return FitResult(params, res.converged, res.iterations, res.ss, time.perf_counter() - start)
