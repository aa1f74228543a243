"""scikit-learn style facades over calibration and optimization."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .calibration import accuracy_report, calibrate
from .exceptions import ValidationError
from .field import GroundTruth
from .fiber import DEFAULT_STEP_KM
from .link import LinkTopology, replica_topology
from .optimizer import OptimizationProblem, optimize
from .validation import check_masks, check_positive, check_stage


class TwinCalibrator(BaseEstimator):
    """Calibrate a twin of ``datasheet`` against a field link.

    ``fit`` takes the field (telemetry source) instead of a feature matrix;
    ``predict`` maps loading masks to receiver GSNR in dB.
    """

    def __init__(self, datasheet=None, through_stage=4, refine_rounds=1, step=DEFAULT_STEP_KM, max_iter=50):
        self.datasheet = datasheet
        self.through_stage = through_stage
        self.refine_rounds = refine_rounds
        self.step = step
        self.max_iter = max_iter

    def fit(self, X: GroundTruth, y=None):
        if not isinstance(X, GroundTruth):
            raise ValidationError("TwinCalibrator.fit expects a field link (GroundTruth)")
        check_stage(self.through_stage, 1, 4)
        check_positive(self.step, "step")
        ds = replica_topology() if self.datasheet is None else self.datasheet
        if not isinstance(ds, LinkTopology):
            raise ValidationError("datasheet must be a LinkTopology")
        self.history_ = calibrate(
            ds, X, self.through_stage, step=self.step, refine_rounds=self.refine_rounds, max_iter=self.max_iter
        )
        self.twin_ = self.history_[-1]
        self.n_channels_ = len(ds.grid)
        return self

    def predict(self, X) -> np.ndarray:
        """Receiver GSNR (dB) per loading mask row; NaN on dark channels."""
        check_is_fitted(self, "twin_")
        masks = check_masks(X, self.n_channels_)
        return np.stack([self.twin_.predict(m).receiver.gsnr for m in masks])

    def transform(self, X) -> np.ndarray:
        """Receiver total power (dBm) per loading mask row."""
        check_is_fitted(self, "twin_")
        masks = check_masks(X, self.n_channels_)
        out = []
        for m in masks:
            rx = self.twin_.predict(m).receiver
            with np.errstate(divide="ignore"):
                out.append(np.where(m, 10.0 * np.log10(rx.p_sig + rx.p_ase), np.nan))
        return np.stack(out)

    def score(self, X: GroundTruth, y=None) -> float:
        """Negative receiver GSNR RMS error (dB) against the field's hidden state."""
        check_is_fitted(self, "twin_")
        return -accuracy_report(self.twin_, X).rms("gsnr")


class ConfigOptimizer(BaseEstimator):
    """Maximize the twin's minimum GSNR over EDFA gains and tilts."""

    def __init__(
        self, max_steps=60, fd_step=0.1, initial_rate=1.0, backtrack_factor=0.5, min_rate=0.01, smoothing=0.1
    ):
        self.max_steps = max_steps
        self.fd_step = fd_step
        self.initial_rate = initial_rate
        self.backtrack_factor = backtrack_factor
        self.min_rate = min_rate
        self.smoothing = smoothing

    def fit(self, X, y=None, init=None, loading=None):
        """``X`` is a calibrated TwinState; ``init`` defaults to its current configs."""
        problem = OptimizationProblem(X, loading, **self.get_params())
        self.outcome_ = optimize(problem, X.estimate.configs() if init is None else init)
        self.best_configs_ = self.outcome_.best_configs
        return self
