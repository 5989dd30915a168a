"""Absorption-image optical density fitting: simulation, least squares and a CNN regressor."""
from .estimators import CNNRegressor, ODTransformer, RotatedGaussianFitter, SliceGaussianFitter
from .evaluate import chi_square, param_error_stats, repeated_run_sigma, time_methods
from .exceptions import OdfitError
from .imaging import (
    PARAM_NAMES,
    Frame,
    FrameTriple,
    GaussianParams,
    ODMap,
    canonicalize,
    gaussian_od,
    gaussian_od_jacobian,
    od_from_triple,
    transmission,
)
from .lsfit import FitConfig, FitResult, fit_2d, fit_3x1d
from .regressor import NetworkSpec, RegressorModel, TrainConfig, forward, train
from .simulator import BackgroundLibrary, ParamRanges, build_dataset, sample_params, synth_background

__version__ = "0.1.0"

__all__ = [
    "PARAM_NAMES", "BackgroundLibrary", "CNNRegressor", "FitConfig", "FitResult", "Frame", "FrameTriple",
    "GaussianParams", "NetworkSpec", "ODMap", "ODTransformer", "OdfitError", "ParamRanges", "RegressorModel",
    "RotatedGaussianFitter", "SliceGaussianFitter", "TrainConfig", "build_dataset", "canonicalize", "chi_square",
    "fit_2d", "fit_3x1d", "forward", "gaussian_od", "gaussian_od_jacobian", "od_from_triple", "param_error_stats",
    "repeated_run_sigma", "sample_params", "synth_background", "time_methods", "train", "transmission",
]
