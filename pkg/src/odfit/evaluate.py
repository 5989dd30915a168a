"""Figures of merit: chi-square, parameter errors against a reference method, timing."""
from __future__ import annotations

import math
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .exceptions import DegenerateInputError, DomainError, ShapeMismatchError
from .imaging import PARAM_NAMES, GaussianParams, ODMap, canonicalize, gaussian_surface, pixel_grid

REPORT_VERSION = 1
WARMUP_FITS = 3
HIST_BINS = 20
OUTLIER_IQR = 5.0

# d = r - mean(4 neighbours) has variance 1.25 sigma^2 for i.i.d. residuals, and
# the median of a chi-square(1) variable is 0.454936
_MEDIAN_CHI2_1 = 0.4549364231195724
_NEIGHBOUR_VAR = 1.25
_NOISE_FLOOR = 1e-30


@dataclass(frozen=True)
class ChiSquareReport:
    chi2: float
    dof: int
    noise_variance: float
    method: str = ""
    degenerate: bool = False


def residual_map(od: ODMap, params: GaussianParams) -> np.ndarray:
    x, y = pixel_grid(od.width, od.height)
    return np.where(od.fit_mask, od.values - gaussian_surface(params, x, y), 0.0)


def noise_variance(residuals: np.ndarray, mask: np.ndarray) -> float:
    """Robust per-pixel noise variance from the high-pass residual ``r - mean(4-neighbours)``.

    Only pixels whose four neighbours are all valid contribute.
    """
    r = np.asarray(residuals, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    core = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    if not core.any():
        raise DegenerateInputError("no interior pixel with four valid neighbours")
    d = r[1:-1, 1:-1] - 0.25 * (r[:-2, 1:-1] + r[2:, 1:-1] + r[1:-1, :-2] + r[1:-1, 2:])
    return float(np.median(d[core] ** 2) / (_MEDIAN_CHI2_1 * _NEIGHBOUR_VAR))


def chi_square(od: ODMap, params: GaussianParams, method: str = "") -> ChiSquareReport:
    """Sum of squared OD residuals over valid pixels divided by the estimated noise variance.

    Degrees of freedom are the valid pixel count minus 7. When the residuals
    carry no measurable noise the report is flagged degenerate, with chi2 = 0
    for a perfect fit and infinite otherwise.
    """
    mask = od.fit_mask
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError("OD map has no valid pixels")
    r = residual_map(od, params)
    ss = float(np.sum(r[mask] ** 2))
    var = noise_variance(r, mask)
    if var <= _NOISE_FLOOR:
        return ChiSquareReport(0.0 if ss <= _NOISE_FLOOR else math.inf, n - 7, var, method, True)
    return ChiSquareReport(ss / var, n - 7, var, method, False)


def _as_matrix(params) -> np.ndarray:
    if isinstance(params, np.ndarray):
        arr = np.asarray(params, dtype=np.float64)
    else:
        arr = np.array([p.to_array() if isinstance(p, GaussianParams) else p for p in params], dtype=np.float64)
    return arr.reshape(-1, 7)


def wrap_half_turn(d):
    """Wrap angle differences into (-pi/2, pi/2]."""
    return np.pi / 2 - np.mod(np.pi / 2 - np.asarray(d), np.pi)


def parameter_errors(results, truth) -> np.ndarray:
    """Signed errors ``result - truth`` (n, 7) between canonical forms.

    When a result is closer to the truth as its quarter-turn equivalent
    (widths swapped, theta shifted by pi/2), that form is used, so clouds
    straddling the theta = +-pi/4 seam do not register spurious width errors.
    """
    res = _as_matrix(results)
    tru = _as_matrix(truth)
    if res.shape != tru.shape:
        raise ShapeMismatchError(f"result set {res.shape} does not match truth set {tru.shape}")
    out = np.empty_like(res)
    for i, (r, t) in enumerate(zip(res, tru)):
        r = canonicalize(GaussianParams.from_array(r)).to_array()
        t = canonicalize(GaussianParams.from_array(t)).to_array()
        alt = r.copy()
        alt[2], alt[3] = r[3], r[2]
        alt[6] = r[6] + np.pi / 2
        best = None
        for cand in (r, alt):
            e = cand - t
            e[6] = wrap_half_turn(e[6])
            cost = abs(e[2]) + abs(e[3]) + abs(e[6]) * 0.5 * (t[2] + t[3])
            if best is None or cost < best[0]:
                best = (cost, e)
        out[i] = best[1]
    return out


def _histogram(values: np.ndarray, bins: int = HIST_BINS) -> dict:
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return {"counts": [], "edges": []}
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return {"counts": counts.tolist(), "edges": edges.tolist()}


def param_error_stats(results, truth) -> dict[str, dict]:
    """Per-parameter signed error distributions with mean and standard deviation."""
    errors = parameter_errors(results, truth)
    if len(errors) == 0:
        raise DomainError("empty result set")
    stats = {}
    for k, name in enumerate(PARAM_NAMES):
        e = errors[:, k]
        stats[name] = {"errors": e, "mean": float(e.mean()), "std": float(e.std()),
                       "histogram": _histogram(e)}
    return stats


def repeated_run_sigma(samples, outlier_iqr: float = OUTLIER_IQR) -> np.ndarray:
    """Per-parameter standard deviation of repeated fits at fixed truth.

    Values further than ``outlier_iqr`` interquartile ranges from the median are dropped.
    """
    s = _as_matrix(samples)
    out = np.empty(7)
    for k in range(7):
        col = s[:, k]
        q1, med, q3 = np.percentile(col, [25, 50, 75])
        keep = np.abs(col - med) <= outlier_iqr * (q3 - q1) if q3 > q1 else np.ones(col.shape, bool)
        out[k] = col[keep].std(ddof=1) if keep.sum() > 1 else 0.0
    return out


@dataclass
class MethodTiming:
    durations: np.ndarray
    error: str | None = None
    outputs: list = field(default_factory=list)

    @property
    def median(self) -> float:
        return float(np.median(self.durations)) if self.durations.size else math.nan

    def percentile(self, q) -> float:
        return float(np.percentile(self.durations, q)) if self.durations.size else math.nan


def time_methods(inputs: Sequence, methods: Mapping[str, Callable], repeats: int = 1,
                 warmup: int = WARMUP_FITS, keep_outputs: bool = False) -> dict[str, MethodTiming]:
    """Wall-clock duration of each method on each input, serialized on this thread.

    ``warmup`` untimed calls per method (cycling through the inputs) precede
    measurement. With ``keep_outputs`` the results of the last repeat are kept.
    """
    if len(inputs) == 0:
        raise DomainError("no inputs to time")
    out = {}
    for name, fn in methods.items():
        for i in range(warmup):
            fn(inputs[i % len(inputs)])
        if repeats <= 0:
            out[name] = MethodTiming(np.empty(0), "no timed repeats after warm-up")
            continue
        d, results = [], []
        for _ in range(repeats):
            results = []
            for item in inputs:
                t0 = time.perf_counter()
                r = fn(item)
                d.append(time.perf_counter() - t0)
                results.append(r)
        out[name] = MethodTiming(np.asarray(d), outputs=results if keep_outputs else [])
    return out


@dataclass
class ImageRecord:
    """One method's result on one image: the row format of the flat table."""

    image: int
    method: str
    params: GaussianParams
    chi2: float
    dof: int
    noise_variance: float
    elapsed: float
    converged: bool = True

    def row(self) -> dict:
        d = {"image": self.image, "method": self.method}
        d.update(self.params.to_dict())
        d.update(chi2=self.chi2, dof=self.dof, noise_variance=self.noise_variance,
                 elapsed_s=self.elapsed, converged=int(self.converged))
        return d

    @classmethod
    def from_row(cls, row: Mapping) -> "ImageRecord":
        return cls(int(row["image"]), str(row["method"]),
                   GaussianParams(*(float(row[n]) for n in PARAM_NAMES)),
                   float(row["chi2"]), int(row["dof"]), float(row["noise_variance"]),
                   float(row["elapsed_s"]), bool(int(row.get("converged", 1))))


TABLE_COLUMNS = ("image", "method", *PARAM_NAMES, "chi2", "dof", "noise_variance", "elapsed_s", "converged")


def _summary(values: np.ndarray) -> dict:
    return {"median": float(np.median(values)), "p10": float(np.percentile(values, 10)),
            "p90": float(np.percentile(values, 90)), "min": float(values.min()),
            "max": float(values.max()), "n": int(values.size)}


def build_report(records: Sequence[ImageRecord], truth_method: str | None = "2dls",
                 metadata: Mapping | None = None) -> dict:
    """Aggregate per-image records into a JSON-serializable benchmark report.

    Contains per-method chi-square and timing summaries and histograms, a
    Table-II-shaped summary, and parameter-error statistics of every method
    against ``truth_method`` (skipped when that method is absent).
    """
    if not records:
        raise DomainError("no records")
    by_method: dict[str, list[ImageRecord]] = {}
    for rec in records:
        by_method.setdefault(rec.method, []).append(rec)
    methods = {}
    ref = {r.image: r for r in by_method.get(truth_method, [])} if truth_method else {}
    for name, recs in by_method.items():
        recs = sorted(recs, key=lambda r: r.image)
        chi2 = np.array([r.chi2 for r in recs])
        times = np.array([r.elapsed for r in recs])
        entry = {
            "n_images": len(recs),
            "converged_fraction": float(np.mean([r.converged for r in recs])),
            "chi2": {**_summary(chi2), "histogram": _histogram(chi2)},
            "dof": _summary(np.array([r.dof for r in recs], dtype=np.float64)),
            "time_s": {**_summary(times), "histogram": _histogram(times)},
        }
        matched = [r for r in recs if r.image in ref]
        if ref and matched:
            stats = param_error_stats([r.params for r in matched], [ref[r.image].params for r in matched])
            entry["param_errors"] = {
                k: {"mean": v["mean"], "std": v["std"], "histogram": v["histogram"]} for k, v in stats.items()}
        methods[name] = entry
    table = [{"method": name, "median_chi2": m["chi2"]["median"], "median_time_s": m["time_s"]["median"]}
             for name, m in methods.items()]
    return {
        "format_version": REPORT_VERSION,
        "truth_method": truth_method if ref else None,
        "methods": methods,
        "table": table,
        "metadata": dict(metadata or {}),
    }


def host_metadata() -> dict:
    return {"host": platform.node(), "machine": platform.machine(), "python": platform.python_version(),
            "processor": platform.processor()}
