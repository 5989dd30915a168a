import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from odfit import CNNRegressor, ODTransformer, RotatedGaussianFitter, SliceGaussianFitter
from odfit.exceptions import ShapeMismatchError
from odfit.imaging import GaussianParams, gaussian_od
from odfit.simulator import ParamRanges, build_dataset, shots_to_arrays, synth_library


@pytest.fixture(scope="module")
def shots():
    lib = synth_library(3, 32, 32, level=20000, noise_sd=5.0, rng_seed=2)
    return build_dataset(lib, ParamRanges(), 40, "ML3", rng_seed=4)


def test_params_and_clone():
    est = CNNRegressor(channels=3, hidden=12, epochs=2)
    params = est.get_params()
    assert params["channels"] == 3 and params["hidden"] == 12 and params["theta_output"] == "cross"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert RotatedGaussianFitter(max_iterations=50).get_params()["max_iterations"] == 50


def test_ls_fitters_on_od_stacks():
    p = GaussianParams(15.3, 16.1, 4.0, 3.0, 1.2, 0.01, 0.05)
    od = gaussian_od(p, 32, 32).values
    stack = np.stack([od, od])
    full = RotatedGaussianFitter().fit(stack).predict(stack)
    assert full.shape == (2, 7) and np.allclose(full[0], p.to_array(), atol=1e-4)
    fast = SliceGaussianFitter().fit(stack).predict(stack)
    assert fast.shape == (2, 7) and np.all(fast[:, 6] == 0)
    # NaN marks excluded pixels
    holed = stack.copy()
    holed[:, :3] = np.nan
    assert np.allclose(RotatedGaussianFitter().fit(holed).predict(holed)[0], p.to_array(), atol=1e-4)


def test_pipeline_from_frames(shots):
    X, y = shots_to_arrays(shots[:3], "ML3")
    pipe = make_pipeline(ODTransformer(), RotatedGaussianFitter()).fit(X)
    pred = pipe.predict(X)
    assert pred.shape == (3, 7)
    assert np.allclose(pred[:, :2], y[:, :2], atol=0.5)


def test_cnn_fit_predict_shapes(shots):
    X, y = shots_to_arrays(shots, "ML3")
    est = CNNRegressor(channels=3, input_size=(16, 16), conv_channels=(4, 4, 8, 8), hidden=8, epochs=1,
                       batch_size=8)
    est.fit(X, y)
    pred = est.predict(X[:5])
    assert pred.shape == (5, 7) and np.all(np.isfinite(pred))
    assert len(est.loss_curve_) == 1
    est.fine_tune(X, y, epochs=1)
    assert len(est.loss_curve_) == 2
    back = CNNRegressor.from_model(est.model_)
    assert np.array_equal(back.predict(X[:5]), est.predict(X[:5]))
    assert back.theta_output == "cross" and back.input_log


def test_shape_errors(shots):
    X, y = shots_to_arrays(shots[:4], "ML3")
    with pytest.raises(ShapeMismatchError):
        CNNRegressor(channels=1).fit(X, y)
    with pytest.raises(ShapeMismatchError):
        CNNRegressor(channels=3).fit(X, y[:2])
    with pytest.raises(ShapeMismatchError):
        ODTransformer().fit(X[:, :2])
