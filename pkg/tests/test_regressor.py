import math

import numpy as np
import pytest

from odfit.exceptions import DomainError, ShapeMismatchError
from odfit.imaging import GaussianParams, gaussian_surface, pixel_grid
from odfit.nn import Adam
from odfit.regressor import (
    NetworkSpec,
    Normalizer,
    RegressorModel,
    TrainConfig,
    _augment,
    _split,
    backward_and_step,
    downscale,
    fine_tune_arrays,
    forward,
    gradient_check,
    loss,
    normalized_mse,
    train_arrays,
)
from odfit.simulator import ParamRanges

TINY = NetworkSpec(1, (16, 16), (4, 4), hidden=8)


def blobs(n, size=16, seed=0, channels=1):
    """Small count images of random Gaussian clouds on a flat 20000-count beam."""
    rng = np.random.default_rng(seed)
    lo, hi = ParamRanges().bounds(size, size)
    lo[2:4] = 1.0
    y = rng.uniform(lo, hi, size=(n, 7))
    x, yy = pixel_grid(size, size)
    X = np.empty((n, channels, size, size), np.float32)
    for i, p in enumerate(y):
        X[i, 0] = np.rint(20000 * np.exp(-gaussian_surface(GaussianParams.from_array(p), x, yy)))
        X[i, 1:] = 20000
    return X, y


def test_weight_counts():
    assert NetworkSpec(1).weight_count() == 192_327
    assert NetworkSpec(3).weight_count() == 192_615
    assert NetworkSpec(1, pooling="gap").weight_count() <= 3e5
    model = RegressorModel.initialize(NetworkSpec(1), Normalizer.from_ranges(ParamRanges(), 64, 64))
    assert model.network.flat_weights().size == NetworkSpec(1).weight_count()


def test_spec_validation_and_round_trip():
    with pytest.raises(DomainError):
        NetworkSpec(2)
    with pytest.raises(DomainError):
        NetworkSpec(1, pooling="max")
    spec = NetworkSpec(3, (32, 24), (8, 8), hidden=16, pooling="gap")
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("theta_output", ["angle", "cross"])
def test_normalizer_round_trip(theta_output):
    norm = Normalizer.from_ranges(ParamRanges(), 64, 48, theta_output=theta_output)
    rng = np.random.default_rng(0)
    lo, hi = ParamRanges().bounds(64, 48)
    lo[2:4] = 0.5
    p = rng.uniform(lo, hi, size=(500, 7))
    back = norm.denormalize(norm.normalize(p))
    assert np.max(np.abs(back - p)) < 1e-12
    assert Normalizer.from_dict(norm.to_dict()) == norm


def test_normalizer_scales():
    norm = Normalizer.from_ranges(ParamRanges(), 64, 64)
    assert np.allclose(norm.physical_scale(), np.array([51.2, 51.2, 16, 16, 3, 0.1, 0.2]) / math.sqrt(12))
    cross = Normalizer.from_ranges(ParamRanges(), 64, 64, theta_output="cross")
    assert np.allclose(cross.physical_scale(), norm.physical_scale())
    # sd of theta*(sx^2 - sy^2) for independent uniforms, by Monte Carlo
    rng = np.random.default_rng(1)
    t = rng.uniform(-0.1, 0.1, 400_000) * (rng.uniform(0, .25, 400_000) ** 2 - rng.uniform(0, .25, 400_000) ** 2)
    assert cross.scale[6] == pytest.approx(t.std(), rel=0.01)
    with pytest.raises(DomainError):
        Normalizer((0,) * 7, (1, 1, 1, 1, 1, 1, 0), (64, 64))


def test_loss_examples():
    norm = Normalizer.from_ranges(ParamRanges(), 64, 64)
    truth = np.array([[30, 30, 8, 8, 1.5, 0.0, 0.0]])
    assert loss(truth, truth, norm) == 0.0
    sd = norm.physical_scale()
    assert loss(truth + sd, truth, norm) == pytest.approx(1.0)
    pair_pred = np.vstack([truth, truth + math.sqrt(2) * sd])
    assert loss(pair_pred, np.vstack([truth, truth]), norm) == pytest.approx(1.0)
    perm = [1, 0]
    assert loss(pair_pred[perm], np.vstack([truth, truth])[perm], norm) == loss(pair_pred, np.vstack([truth, truth]), norm)
    with pytest.raises(ShapeMismatchError):
        loss(truth, truth[:, :6], norm)


@pytest.mark.parametrize("theta_output", ["angle", "cross"])
def test_zero_weights_give_midpoints(theta_output):
    norm = Normalizer.from_ranges(ParamRanges(), 64, 64, 20000.0, theta_output=theta_output)
    model = RegressorModel.initialize(NetworkSpec(1), norm, symmetrize=False)
    model.network.set_flat_weights(np.zeros(NetworkSpec(1).weight_count()))
    p = forward(model, np.full((64, 64), 20000, np.uint16))
    lo, hi = ParamRanges().bounds(64, 64)
    assert np.allclose(p.to_array(), (lo + hi) / 2, atol=1e-9)
    # averaged over the half turn, positions land on the frame center instead
    model.symmetrize = True
    assert forward(model, np.full((64, 64), 20000, np.uint16)).x0 == pytest.approx(31.5)


def test_forward_deterministic_and_shape_checked():
    norm = Normalizer.from_ranges(ParamRanges(), 64, 64, 20000.0)
    model = RegressorModel.initialize(NetworkSpec(1), norm, seed=3)
    img = np.random.default_rng(0).integers(15000, 20000, (64, 64))
    assert forward(model, img) == forward(model, img)
    with pytest.raises(ShapeMismatchError):
        model.predict(np.zeros((1, 3, 64, 64)))


def test_prediction_rescales_to_original_resolution():
    norm = Normalizer.from_ranges(ParamRanges(), 64, 64, 20000.0)
    model = RegressorModel.initialize(NetworkSpec(1), norm, seed=3)
    img = np.random.default_rng(0).integers(15000, 20000, (1, 1, 64, 64)).astype(np.float32)
    big = np.repeat(np.repeat(img, 2, axis=2), 2, axis=3)
    small, large = model.predict(img)[0], model.predict(big)[0]
    # pixel j of the small frame covers pixels 2j and 2j+1 of the large one
    assert np.allclose(large[[0, 1]], 2 * small[[0, 1]] + 0.5, rtol=1e-5)
    assert np.allclose(large[[2, 3]], 2 * small[[2, 3]], rtol=1e-5)
    assert np.allclose(large[4:], small[4:], rtol=1e-5, atol=1e-7)


def test_downscale_area_average():
    X = np.arange(16.0).reshape(1, 1, 4, 4)
    out = downscale(X, (2, 2))
    assert np.allclose(out[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    assert downscale(X, (4, 4)) is X
    odd = downscale(np.ones((1, 1, 5, 7)), (3, 2))
    assert np.allclose(odd, 1.0)


def test_gradient_check_all_layer_types():
    for spec in (NetworkSpec(1, (8, 8), (2, 2), hidden=4), NetworkSpec(3, (12, 10), (2, 3), hidden=5, pooling="gap")):
        res = gradient_check(spec)
        assert res.max_rel_error < 1e-4 and res.skipped <= 0.01 * (res.checked + res.skipped)


def test_zero_learning_rate_keeps_weights():
    X, y = blobs(4)
    norm = Normalizer.from_ranges(ParamRanges(), 16, 16, 20000.0)
    model = RegressorModel.initialize(TINY, norm)
    before = model.network.flat_weights()
    opt = Adam(model.network.arrays)
    value = backward_and_step(model, model.prepare(X), norm.normalize(y), opt, lr=0.0)
    assert value > 0 and np.array_equal(model.network.flat_weights(), before)


def test_overfits_a_small_batch():
    X, y = blobs(10, seed=2)
    norm = Normalizer.from_ranges(ParamRanges(), 16, 16, 20000.0, input_log=True)
    model = RegressorModel.initialize(NetworkSpec(1, (16, 16), (8, 16), hidden=32), norm, seed=0)
    opt = Adam(model.network.arrays, lr=3e-3)
    xb, zb = model.prepare(X), norm.normalize(y)
    for _ in range(500):
        value = backward_and_step(model, xb, zb, opt)
    final = float(np.mean((model.predict_z(xb) - zb) ** 2))
    assert final < 1e-3, value


def test_augmentation_labels_follow_the_image():
    p = GaussianParams(21.3, 30.1, 9.0, 4.0, 1.2, 0.01, 0.08)
    x, y = pixel_grid(48, 48)
    img = gaussian_surface(p, x, y)[None, None]

    class Fixed:
        def __init__(self, flags):
            self.flags = flags

        def integers(self, *args, **kwargs):
            return np.array([self.flags])

    for flags in np.ndindex(2, 2, 2):
        xa, ya = _augment(img, p.to_array()[None], 48, 48, Fixed(flags))
        expected = gaussian_surface(GaussianParams.from_array(ya[0]), x, y)
        assert np.allclose(xa[0, 0], expected, atol=1e-12), flags


def test_train_epochs_zero_and_determinism():
    X, y = blobs(120, seed=4)
    cfg = TrainConfig(epochs=0, batch_size=16, seed=3)
    model, curve = train_arrays(TINY, X, y, config=cfg)
    init = RegressorModel.initialize(TINY, model.normalizer, seed=3)
    assert curve == [] and np.array_equal(model.network.flat_weights(), init.network.flat_weights())

    cfg = TrainConfig(epochs=2, batch_size=16, seed=3)
    a, ca = train_arrays(TINY, X, y, config=cfg, input_log=True, theta_output="cross")
    b, cb = train_arrays(TINY, X, y, config=cfg, input_log=True, theta_output="cross")
    assert ca == cb and len(ca) == 2
    assert np.array_equal(a.network.flat_weights(), b.network.flat_weights())
    assert a.normalizer == b.normalizer


def test_fine_tune_zero_epochs_and_best_of():
    X, y = blobs(120, seed=5)
    model, _ = train_arrays(TINY, X, y, config=TrainConfig(epochs=2, batch_size=16))
    same, curve = fine_tune_arrays(model, X, y, TrainConfig(epochs=0))
    assert curve == [] and np.array_equal(same.network.flat_weights(), model.network.flat_weights())
    cfg = TrainConfig(epochs=2, batch_size=16, lr=3e-4)
    tuned, curve = fine_tune_arrays(model, X, y, cfg)
    assert len(curve) == 2
    _, val = _split(len(X), cfg.val_fraction, cfg.seed)
    assert normalized_mse(tuned, X[val], y[val]) <= 1.1 * normalized_mse(model, X[val], y[val])


def test_train_validates_shapes():
    X, y = blobs(20)
    with pytest.raises(ShapeMismatchError):
        train_arrays(TINY, X[:, 0], y)
    with pytest.raises(ShapeMismatchError):
        train_arrays(TINY, X, y[:5])


@pytest.mark.parametrize("theta_output", ["angle", "cross"])
def test_symmetrized_prediction_is_equivariant(theta_output):
    norm = Normalizer.from_ranges(ParamRanges(), 32, 32, 20000.0, input_log=True, theta_output=theta_output)
    model = RegressorModel.initialize(NetworkSpec(1, (32, 32), (4, 8), hidden=8), norm, seed=2)
    X = np.random.default_rng(0).integers(15000, 20000, (3, 1, 32, 32))
    p = model.predict(X)
    turned = model.predict(X[..., ::-1, ::-1])
    assert np.allclose(turned[:, :2], 31 - p[:, :2], atol=1e-9)
    assert np.allclose(turned[:, 2:], p[:, 2:], atol=1e-9)
    swapped = model.predict(X.transpose(0, 1, 3, 2))
    assert np.allclose(swapped[:, [1, 0, 3, 2]], p[:, :4], atol=1e-9)
    assert np.allclose(swapped[:, 6], -p[:, 6], atol=1e-9)
    model.symmetrize = False
    assert not np.allclose(model.predict(X[..., ::-1, ::-1])[:, :2], 31 - model.predict(X)[:, :2])
