"""Compact convolutional regressor from absorption frames to Gaussian parameters.

Outputs are learned in z-score units: positions and widths as fractions of the
frame size, then centered and scaled by the mean and standard deviation of the
uniform training distribution of each parameter.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .exceptions import ConvergenceError, DomainError, ShapeMismatchError
from .imaging import GaussianParams, canonicalize
from .nn import Adam, Conv2d, Flatten, GlobalAvgPool, Linear, ReLU, init_uniform
from .simulator import LabeledShot, ParamRanges, shots_to_arrays

log = logging.getLogger(__name__)

_SQRT12 = math.sqrt(12.0)
# which frame dimension each parameter is measured in (0: none, 1: width, 2: height)
_DIM = np.array([1, 2, 1, 2, 0, 0, 0])
MIN_SIGMA_OUT = 1e-3


@dataclass(frozen=True)
class NetworkSpec:
    """Fixed compact architecture.

    Each conv stage is a 3x3 stride-2 convolution followed by ReLU. The head
    flattens (or globally averages) the last feature map, then one hidden
    fully connected ReLU layer and a linear 7-output layer.
    """

    input_channels: int = 1
    input_size: tuple[int, int] = (64, 64)
    conv_channels: tuple[int, ...] = (16, 32, 64, 64)
    kernel: int = 3
    hidden: int = 128
    pooling: Literal["flatten", "gap"] = "flatten"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        if self.input_channels not in (1, 3):
            raise DomainError("input_channels must be 1 (ML-1) or 3 (ML-3)")
        if self.pooling not in ("flatten", "gap"):
            raise DomainError(f"unknown pooling {self.pooling!r}")
        if not self.conv_channels or self.hidden < 1:
            raise DomainError("need at least one conv stage and a hidden layer")

    def build(self, dtype=np.float32):
        layers = []
        cin = self.input_channels
        w, h = self.input_size
        for cout in self.conv_channels:
            conv = Conv2d(cin, cout, self.kernel, stride=2, padding=self.kernel // 2, dtype=dtype)
            h, w = conv.output_size(h, w)
            layers += [conv, ReLU()]
            cin = cout
        layers[0].grad_input = False
        if self.pooling == "flatten":
            layers.append(Flatten())
            features = cin * h * w
        else:
            layers.append(GlobalAvgPool())
            features = cin
        layers += [Linear(features, self.hidden, dtype=dtype), ReLU(), Linear(self.hidden, 7, dtype=dtype)]
        return layers

    def weight_count(self) -> int:
        return sum(a.size for layer in self.build() for _, a in layer.parameters())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        return cls(**d)


def _uniform_moment(lo: float, hi: float, k: int) -> float:
    if hi == lo:
        return lo ** k
    return (hi ** (k + 1) - lo ** (k + 1)) / ((k + 1) * (hi - lo))


@dataclass(frozen=True)
class Normalizer:
    """Output z-scoring and input count scaling.

    ``center`` and ``scale`` are in internal units (fractions of the frame size
    for positions/widths). ``scale`` is the standard deviation ``(max-min)/sqrt(12)``
    of each training range.

    With ``theta_output="cross"`` the seventh network output is not the angle
    but the cross term ``q = theta * (sx**2 - sy**2)`` (widths as fractions),
    which is close to linear in the image's second moments. The angle is
    recovered as ``q/D`` with ``D = sx**2 - sy**2``. Predictions instead use
    ``q*D / (D**2 + theta_shrink**2)`` clipped to ``theta_bounds``, which keeps
    near-round clouds, whose angle the image barely constrains, near zero.
    """

    center: tuple[float, ...]
    scale: tuple[float, ...]
    nominal_size: tuple[int, int]
    count_scale: float = 1.0
    input_log: bool = False
    theta_output: Literal["angle", "cross"] = "angle"
    theta_shrink: float = 0.0
    theta_bounds: tuple[float, float] = (-math.pi / 4, math.pi / 4)

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "scale", tuple(float(v) for v in self.scale))
        object.__setattr__(self, "nominal_size", tuple(int(v) for v in self.nominal_size))
        object.__setattr__(self, "theta_bounds", tuple(float(v) for v in self.theta_bounds))
        if len(self.center) != 7 or len(self.scale) != 7:
            raise DomainError("normalizer needs 7 centers and 7 scales")
        if not all(s > 0 for s in self.scale) or not self.count_scale > 0:
            raise DomainError("scales must be strictly positive")
        if self.theta_output not in ("angle", "cross"):
            raise DomainError(f"unknown theta_output {self.theta_output!r}")

    @classmethod
    def from_ranges(cls, ranges: ParamRanges, width: int, height: int, count_scale: float = 1.0,
                    input_log: bool = False, theta_output: str = "angle") -> "Normalizer":
        lo, hi = ranges.bounds(width, height)
        unit = _unit(width, height)
        lo, hi = lo / unit, hi / unit
        center, scale = (lo + hi) / 2, (hi - lo) / _SQRT12
        if theta_output == "cross":
            # mean and sd of q for independent uniform theta, sx, sy
            m = lambda k, i: _uniform_moment(lo[i], hi[i], k)  # noqa: E731
            d1 = m(2, 2) - m(2, 3)
            d2 = m(4, 2) + m(4, 3) - 2 * m(2, 2) * m(2, 3)
            center[6] = m(1, 6) * d1
            scale[6] = math.sqrt(max(m(2, 6) * d2 - center[6] ** 2, 1e-300))
        bounds = (float(lo[6]), float(hi[6]))
        return cls(tuple(center), tuple(scale), (width, height), count_scale, input_log, theta_output,
                   0.0, bounds)

    def scale_inputs(self, X: np.ndarray) -> np.ndarray:
        """Counts divided by ``count_scale``; with ``input_log``, ``-ln`` of that (floored at 1e-3).

        The log applies to the light channels (atoms, bg) only. A dark frame sits
        near zero after scaling, where the log would amplify its read noise.
        """
        x = X * X.dtype.type(1.0 / self.count_scale)
        if self.input_log:
            light = x[:, :2]
            x[:, :2] = -np.log(np.maximum(light, x.dtype.type(1e-3)))
        return x

    def _size(self, width, height):
        w, h = self.nominal_size
        return (w if width is None else width), (h if height is None else height)

    def physical_scale(self, width=None, height=None) -> np.ndarray:
        """Standard deviation of each parameter's training range in pixels / OD / radians."""
        w, h = self._size(width, height)
        scale = np.asarray(self.scale) * _unit(w, h)
        if self.theta_output == "cross":
            scale[6] = (self.theta_bounds[1] - self.theta_bounds[0]) / _SQRT12
        return scale

    def _width_gap(self, t: np.ndarray) -> np.ndarray:
        return t[..., 2] ** 2 - t[..., 3] ** 2

    def normalize(self, params, width=None, height=None) -> np.ndarray:
        """Physical parameters -> network targets."""
        unit = _unit(*self._size(width, height))
        t = np.asarray(params, dtype=np.float64) / unit
        if self.theta_output == "cross":
            t = t.copy()
            t[..., 6] = t[..., 6] * self._width_gap(t)
        return (t - np.asarray(self.center)) / np.asarray(self.scale)

    def theta_from_cross(self, q, gap, shrink: float = 0.0, clip: bool = False) -> np.ndarray:
        q, gap = np.asarray(q, dtype=np.float64), np.asarray(gap, dtype=np.float64)
        denom = gap ** 2 + shrink ** 2
        theta = np.divide(q * gap, denom, out=np.zeros(np.broadcast(q, gap).shape), where=denom > 0)
        return np.clip(theta, *self.theta_bounds) if clip else theta

    def denormalize(self, z, width=None, height=None, estimate: bool = False) -> np.ndarray:
        """Network outputs -> physical parameters.

        The plain inverse of :meth:`normalize`. With ``estimate`` (used for
        predictions) a cross-term angle is shrunk by ``theta_shrink`` and clipped
        to the training range.
        """
        unit = _unit(*self._size(width, height))
        t = np.asarray(z, dtype=np.float64) * np.asarray(self.scale) + np.asarray(self.center)
        if self.theta_output == "cross":
            t[..., 6] = self.theta_from_cross(t[..., 6], self._width_gap(np.abs(t)),
                                              self.theta_shrink if estimate else 0.0, estimate)
        return t * unit

    def with_shrink(self, shrink: float) -> "Normalizer":
        return replace(self, theta_shrink=float(shrink))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "scale": list(self.scale),
                "nominal_size": list(self.nominal_size), "count_scale": self.count_scale,
                "input_log": self.input_log, "theta_output": self.theta_output,
                "theta_shrink": self.theta_shrink, "theta_bounds": list(self.theta_bounds)}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(**d)


def _unit(width, height) -> np.ndarray:
    return np.array([1.0, width, height], dtype=np.float64)[_DIM]


def loss(predicted, truth, normalizer: Normalizer, width=None, height=None) -> float:
    """Mean over samples and parameters of the squared z-scored error."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if predicted.shape != truth.shape or predicted.shape[-1] != 7:
        raise ShapeMismatchError(f"prediction {predicted.shape} and truth {truth.shape} must both be (n, 7)")
    scale = normalizer.physical_scale(width, height)
    return float(np.mean(((predicted - truth) / scale) ** 2))


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows average the input span each output cell covers (fractional overlaps)."""
    m = np.zeros((n_out, n_in))
    step = n_in / n_out
    for k in range(n_out):
        a, b = k * step, (k + 1) * step
        for i in range(int(math.floor(a)), min(int(math.ceil(b)), n_in)):
            m[k, i] = min(b, i + 1) - max(a, i)
        m[k] /= step
    return m


def downscale(X: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-average resample of (..., H, W) stacks to ``size = (W', H')``."""
    w_out, h_out = size
    h, w = X.shape[-2:]
    if (w, h) == (w_out, h_out):
        return X
    rh = _area_matrix(h, h_out).astype(X.dtype)
    rw = _area_matrix(w, w_out).astype(X.dtype)
    return np.einsum("ph,...hw,qw->...pq", rh, X, rw)


class Network:
    """Layer stack built from a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        self.spec = spec
        self.layers = spec.build(dtype)
        self.dtype = np.dtype(dtype)

    @property
    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for _, a in layer.parameters()]

    @property
    def grads(self) -> list[np.ndarray]:
        return [getattr(layer, "d_" + name) for layer in self.layers for name, _ in layer.parameters()]

    def weight_names(self) -> list[str]:
        names = []
        for i, layer in enumerate(self.layers):
            for name, _ in layer.parameters():
                names.append(f"{i}.{type(layer).__name__}.{name}")
        return names

    def flat_weights(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def set_flat_weights(self, flat) -> None:
        flat = np.asarray(flat)
        total = sum(a.size for a in self.arrays)
        if flat.size != total:
            raise ShapeMismatchError(f"expected {total} weights, got {flat.size}")
        k = 0
        for a in self.arrays:
            a[...] = flat[k:k + a.size].reshape(a.shape)
            k += a.size

    def forward(self, x: np.ndarray) -> np.ndarray:
        """``x`` of shape (N, C, H, W), already scaled; returns (N, 7) z-scores."""
        out = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=self.dtype)
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward(self, dout: np.ndarray) -> None:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)


@dataclass
class RegressorModel:
    spec: NetworkSpec
    normalizer: Normalizer
    network: Network
    provenance: dict = field(default_factory=dict)
    # average outputs over frame symmetries at inference
    symmetrize: bool = True

    @classmethod
    def initialize(cls, spec: NetworkSpec, normalizer: Normalizer, seed=0, dtype=np.float32,
                   symmetrize: bool = True) -> "RegressorModel":
        net = Network(spec, dtype)
        init_uniform(net.layers, np.random.default_rng(seed))
        return cls(spec, normalizer, net, {"init_seed": seed}, symmetrize)

    @property
    def mode(self) -> str:
        return "ML1" if self.spec.input_channels == 1 else "ML3"

    def copy(self) -> "RegressorModel":
        net = Network(self.spec, self.network.dtype)
        net.set_flat_weights(self.network.flat_weights())
        return RegressorModel(self.spec, self.normalizer, net, dict(self.provenance), self.symmetrize)

    def prepare(self, X) -> np.ndarray:
        """Counts (N, C, H, W) -> scaled network input at the training resolution."""
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[1] != self.spec.input_channels:
            raise ShapeMismatchError(
                f"expected input of shape (n, {self.spec.input_channels}, H, W), got {X.shape}")
        X = downscale(X.astype(self.network.dtype, copy=False), self.spec.input_size)
        return self.normalizer.scale_inputs(X)

    def predict_z(self, prepared: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Raw network outputs (z units) for one orientation."""
        out = [self.network.forward(prepared[i:i + batch_size]) for i in range(0, len(prepared), batch_size)]
        return np.concatenate(out).astype(np.float64) if out else np.empty((0, 7))

    def estimate_z(self, prepared: np.ndarray, width: int, height: int, batch_size: int = 256) -> np.ndarray:
        """Outputs for frames of original size ``(width, height)``, symmetrized if enabled.

        The frame is also shown transposed (square frames only), rotated by a
        half turn, and both; each answer is mapped back and the four are averaged.
        """
        if not self.symmetrize or len(prepared) == 0:
            return self.predict_z(prepared, batch_size)
        norm = self.normalizer
        center, scale = np.asarray(norm.center), np.asarray(norm.scale)
        square = width == height and prepared.shape[-1] == prepared.shape[-2]
        views = [(False, False), (False, True)] + ([(True, False), (True, True)] if square else [])
        n = len(prepared)
        stacked = []
        for tr, rot in views:
            x = prepared.transpose(0, 1, 3, 2) if tr else prepared
            stacked.append(x[..., ::-1, ::-1] if rot else x)
        stacked = np.ascontiguousarray(np.concatenate(stacked))
        t = self.predict_z(stacked, batch_size * len(views)) * scale + center
        acc = np.zeros((n, 7))
        for k, (tr, rot) in enumerate(views):
            tk = t[k * n:(k + 1) * n].copy()
            if rot:
                tk[:, 0] = (width - 1) / width - tk[:, 0]
                tk[:, 1] = (height - 1) / height - tk[:, 1]
            if tr:
                tk[:, [0, 1, 2, 3]] = tk[:, [1, 0, 3, 2]]
                # a mirror flips the angle; the cross term also flips the width gap
                if norm.theta_output == "angle":
                    tk[:, 6] = -tk[:, 6]
            acc += tk
        return (acc / len(views) - center) / scale

    def predict(self, X, batch_size: int = 256) -> np.ndarray:
        """Physical parameters (n, 7) for count stacks of shape (n, C, H, W)."""
        h, w = np.shape(X)[-2:]
        z = self.estimate_z(self.prepare(X), w, h, batch_size)
        params = self.normalizer.denormalize(z, w, h, estimate=True)
        return np.array([canonicalize(_positive_widths(p)).to_array() for p in params]).reshape(-1, 7)


def _positive_widths(p) -> GaussianParams:
    p = np.array(p, dtype=np.float64)
    p[2:4] = np.maximum(np.abs(p[2:4]), MIN_SIGMA_OUT)
    return GaussianParams.from_array(p)


def forward(model: RegressorModel, image) -> GaussianParams:
    """Parameters for one (C, H, W) count stack (or a single (H, W) atoms frame)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    return GaussianParams.from_array(model.predict(image[None])[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_final: float = 1e-5
    schedule: Literal["constant", "cosine"] = "cosine"
    val_fraction: float = 0.1
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise DomainError("epochs >= 0, batch_size >= 1 and lr >= 0 required")
        if not 0 < self.val_fraction < 1:
            raise DomainError("val_fraction must lie in (0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise DomainError(f"unknown schedule {self.schedule!r}")


def backward_and_step(model: RegressorModel, batch_x: np.ndarray, batch_z: np.ndarray,
                      optimizer: Adam, lr: float | None = None) -> float:
    """One optimizer step on a prepared batch; returns the batch loss before the step.

    ``batch_z`` holds z-scored targets, so the loss is the mean squared z-score error.
    """
    if len(batch_x) == 0:
        raise DomainError("empty batch")
    net = model.network
    pred = net.forward(batch_x)
    err = pred - batch_z.astype(net.dtype)
    value = float(np.mean(err.astype(np.float64) ** 2))
    if not math.isfinite(value):
        raise ConvergenceError(f"non-finite training loss {value}")
    net.backward(err * net.dtype.type(2.0 / err.size))
    optimizer.step(net.arrays, net.grads, lr)
    return value


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant" or total <= 1:
        return cfg.lr
    frac = step / (total - 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))


def _augment(x: np.ndarray, y: np.ndarray, width: int, height: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Random flips and (square frames only) transposition of inputs and labels.

    Each mirror negates theta; transposition also swaps the x and y parameters.
    """
    x = x.copy()
    y = y.copy()
    square = width == height and x.shape[-1] == x.shape[-2]
    flips = rng.integers(0, 2, size=(len(x), 3)).astype(bool)
    if not square:
        flips[:, 2] = False
    for i, (hf, vf, tr) in enumerate(flips):
        if tr:
            x[i] = x[i].transpose(0, 2, 1)
            y[i, [0, 1, 2, 3]] = y[i, [1, 0, 3, 2]]
        if hf:
            x[i] = x[i, :, :, ::-1]
            y[i, 0] = width - 1 - y[i, 0]
        if vf:
            x[i] = x[i, :, ::-1, :]
            y[i, 1] = height - 1 - y[i, 1]
        if (int(hf) + int(vf) + int(tr)) % 2:
            y[i, 6] = -y[i, 6]
    return x, y


def _split(n: int, val_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _run_epochs(model: RegressorModel, Xp, Y, size, train_idx, val_idx, cfg: TrainConfig, rng) -> list[dict]:
    """Train in place; leave the best-validation weights in ``model``.

    ``Y`` holds physical labels for frames of ``size = (W, H)``.
    """
    width, height = size
    norm = model.normalizer
    Z = norm.normalize(Y, width, height)
    optimizer = Adam(model.network.arrays, lr=cfg.lr)
    best_val = float(np.mean((model.estimate_z(Xp[val_idx], width, height) - Z[val_idx]) ** 2))
    best = model.network.flat_weights()
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            if cfg.augment:
                xb, yb = _augment(Xp[idx], Y[idx], width, height, rng)
                zb = norm.normalize(yb, width, height)
            else:
                xb, zb = Xp[idx], Z[idx]
            losses.append(backward_and_step(model, xb, zb, optimizer, _lr_at(cfg, step, total)))
            step += 1
        val = float(np.mean((model.estimate_z(Xp[val_idx], width, height) - Z[val_idx]) ** 2))
        if not math.isfinite(val):
            raise ConvergenceError(f"validation loss diverged at epoch {epoch}")
        curve.append({"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_loss": val})
        log.info("epoch %d train %.5f val %.5f", epoch + 1, curve[-1]["train_loss"], val)
        if val < best_val:
            best_val, best = val, model.network.flat_weights()
    model.network.set_flat_weights(best)
    return curve


def _calibrate_shrink(model: RegressorModel, Xp_val, y_val, size) -> None:
    """Pick the angle shrink minimizing validation theta error (cross-term output only)."""
    norm = model.normalizer
    if norm.theta_output != "cross" or len(y_val) == 0:
        return
    t = model.estimate_z(Xp_val, *size) * np.asarray(norm.scale) + np.asarray(norm.center)
    q, gap = t[:, 6], t[:, 2] ** 2 - t[:, 3] ** 2
    typical = math.sqrt(float(np.mean(gap ** 2))) or 1.0
    grid = np.concatenate([[0.0], typical * np.geomspace(1e-3, 3.0, 60)])
    err = [float(np.mean((norm.theta_from_cross(q, gap, e, clip=True) - y_val[:, 6]) ** 2)) for e in grid]
    model.normalizer = norm.with_shrink(grid[int(np.argmin(err))])


def train_arrays(spec: NetworkSpec, X, y, ranges: ParamRanges = ParamRanges(),
                 config: TrainConfig = TrainConfig(), count_scale: float | None = None,
                 provenance: dict | None = None, input_log: bool = True,
                 theta_output: str = "cross") -> tuple[RegressorModel, list[dict]]:
    """Train from count stacks ``X`` (n, C, H, W) and physical targets ``y`` (n, 7).

    ``count_scale`` defaults to the 99th percentile of the first channel.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 4 or len(X) != len(y):
        raise ShapeMismatchError("X must be (n, C, H, W) with one target row per sample")
    h, w = X.shape[-2:]
    if count_scale is None:
        count_scale = float(np.percentile(X[:, 0], 99))
    normalizer = Normalizer.from_ranges(ranges, w, h, count_scale, input_log, theta_output)
    model = RegressorModel.initialize(spec, normalizer, seed=config.seed)
    train_idx, val_idx = _split(len(X), config.val_fraction, config.seed)
    Xp = model.prepare(X)
    rng = np.random.default_rng([config.seed, 1])
    curve = _run_epochs(model, Xp, y, (w, h), train_idx, val_idx, config, rng) if config.epochs else []
    _calibrate_shrink(model, Xp[val_idx], y[val_idx], (w, h))
    model.provenance = {**(provenance or {}), "seed": config.seed, "epochs": config.epochs,
                        "train_config": asdict(config), "n_train": int(len(train_idx)),
                        "n_val": int(len(val_idx))}
    return model, curve


def count_scale_from_shots(shots: Sequence[LabeledShot]) -> float:
    """99th percentile of ``bg - dark`` over the shots' backgrounds."""
    seen = {}
    for s in shots:
        seen.setdefault(s.source_bg_index, s.triple)
    diffs = [t.bg.counts.astype(np.float64) - t.dark.counts for t in seen.values()]
    return float(np.percentile(np.stack(diffs), 99))


def train(spec: NetworkSpec, shots: Sequence[LabeledShot], ranges: ParamRanges = ParamRanges(),
          config: TrainConfig = TrainConfig(), provenance: dict | None = None) -> tuple[RegressorModel, list[dict]]:
    """Train on labeled shots: atoms only for ML-1, (atoms, bg, dark) for ML-3."""
    if len(shots) < 100:
        raise DomainError(f"need at least 100 shots to train, got {len(shots)}")
    mode = "ML1" if spec.input_channels == 1 else "ML3"
    X, y = shots_to_arrays(shots, mode)
    return train_arrays(spec, X, y, ranges, config, count_scale_from_shots(shots), provenance)


def fine_tune_arrays(model: RegressorModel, X, y, config: TrainConfig) -> tuple[RegressorModel, list[dict]]:
    """Continue training a copy of ``model``; input and output scaling stay fixed.

    The returned weights are the best on the new data's validation split,
    counting the starting weights as a candidate.
    """
    tuned = model.copy()
    if config.epochs == 0:
        return tuned, []
    X = np.asarray(X)
    h, w = X.shape[-2:]
    train_idx, val_idx = _split(len(X), config.val_fraction, config.seed)
    Xp = tuned.prepare(X)
    y = np.asarray(y, dtype=np.float64)
    curve = _run_epochs(tuned, Xp, y, (w, h), train_idx, val_idx, config, np.random.default_rng([config.seed, 2]))
    _calibrate_shrink(tuned, Xp[val_idx], y[val_idx], (w, h))
    tuned.provenance = {**model.provenance, "fine_tune": {"epochs": config.epochs, "seed": config.seed,
                                                          "n": int(len(X))}}
    return tuned, curve


def fine_tune(model: RegressorModel, shots: Sequence[LabeledShot], epochs: int,
              config: TrainConfig = TrainConfig(lr=3e-4, lr_final=1e-5)) -> tuple[RegressorModel, list[dict]]:
    X, y = shots_to_arrays(shots, model.mode) if epochs else (None, None)
    return fine_tune_arrays(model, X, y, replace(config, epochs=epochs))


def normalized_mse(model: RegressorModel, X, y) -> float:
    """Z-score loss of the model's final (canonical) predictions against ``y``."""
    h, w = np.shape(X)[-2:]
    return loss(model.predict(X), y, model.normalizer, w, h)


class GradientCheck(NamedTuple):
    max_rel_error: float
    checked: int
    skipped: int


def gradient_check(spec: NetworkSpec, batch: int = 2, seed: int = 0, step: float = 1e-5) -> GradientCheck:
    """Compare backprop gradients with central differences for every weight, in float64.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8 * max|grad|)``. A weight
    whose perturbation flips any ReLU's active set has no valid central
    difference; such weights are counted as skipped instead of compared.
    """
    rng = np.random.default_rng(seed)
    net = Network(spec, np.float64)
    init_uniform(net.layers, rng)
    for a in net.arrays:
        a += 0.05 * rng.standard_normal(a.shape)  # nonzero biases exercise every path
    w, h = spec.input_size
    x = rng.standard_normal((batch, spec.input_channels, h, w))
    z = rng.standard_normal((batch, 7))
    relus = [layer for layer in net.layers if isinstance(layer, ReLU)]

    def value():
        v = float(np.mean((net.forward(x) - z) ** 2))
        return v, [r.mask for r in relus]

    _, masks = value()
    err = net.forward(x) - z
    net.backward(err * (2.0 / err.size))
    analytic = np.concatenate([g.ravel() for g in net.grads]).copy()
    numeric = np.empty_like(analytic)
    kink = np.zeros(analytic.shape, dtype=bool)
    k = 0
    for a in net.arrays:
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, m_up = value()
            flat[i] = orig - step
            dn, m_dn = value()
            flat[i] = orig
            numeric[k] = (up - dn) / (2 * step)
            kink[k] = any(not np.array_equal(a_, b_) for a_, b_ in zip(masks + masks, m_up + m_dn))
            k += 1
    floor = 1e-8 * max(np.abs(analytic).max(), 1e-300)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    ok = ~kink
    return GradientCheck(float(rel[ok].max()) if ok.any() else math.nan, int(ok.sum()), int(kink.sum()))
