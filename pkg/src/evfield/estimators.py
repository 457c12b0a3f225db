"""scikit-learn style wrappers around the pipeline stages."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_scalar

from . import losses as L
from .cmax import fit_global_flow, global_flow_problem, iwe_variance, warp
from .encoder import GruCell, LatentProjection, encode_sequence, features
from .events import EventStream
from .fit import FitConfig, Supervision, fit_latent
from .kinematics import BodyModel, Camera, Pose
from .voxel import voxelize


def _check_stream(x) -> EventStream:
    if not isinstance(x, EventStream):
        raise TypeError(f"expected an EventStream, got {type(x).__name__}")
    return x


def _streams(X):
    return [_check_stream(x) for x in ([X] if isinstance(X, EventStream) else X)]


class VoxelTransformer(TransformerMixin, BaseEstimator):
    """Event streams to stacked voxel grids ``(n, bins, H, W)``."""

    def __init__(self, bins: int = 8, t0: int | None = None, t1: int | None = None, threads: int = 1):
        self.bins = bins
        self.t0 = t0
        self.t1 = t1
        self.threads = threads

    def fit(self, X, y=None):
        check_scalar(self.bins, "bins", numbers.Integral, min_val=1)
        streams = _streams(X)
        self.shape_ = (streams[0].height, streams[0].width) if streams else None
        return self

    def transform(self, X):
        check_is_fitted(self, "shape_")
        return np.stack([voxelize(s, self.bins, self.t0, self.t1, self.threads).values for s in _streams(X)])


class EventEncoder(TransformerMixin, BaseEstimator):
    """Voxel-grid sequences to latent vectors with fixed random GRU weights.

    ``fit`` only draws the (untrained) weights for the feature dimension of
    the first sequence.
    """

    def __init__(self, patch_grid: int = 4, hidden_dim: int = 64, d_local: int = 32,
                 d_global: int = 8, random_state: int = 0):
        self.patch_grid = patch_grid
        self.hidden_dim = hidden_dim
        self.d_local = d_local
        self.d_global = d_global
        self.random_state = random_state

    def fit(self, X, y=None):
        check_scalar(self.patch_grid, "patch_grid", numbers.Integral, min_val=1)
        check_scalar(self.hidden_dim, "hidden_dim", numbers.Integral, min_val=1)
        seqs = list(X)
        if not seqs or not len(seqs[0]):
            raise ValueError("need at least one nonempty grid sequence")
        n_feat = features(seqs[0][0], self.patch_grid).size
        rng = np.random.default_rng(self.random_state)
        self.cell_ = GruCell.random(n_feat, self.hidden_dim, rng)
        self.proj_ = LatentProjection.random(self.hidden_dim, self.d_local, self.d_global, rng)
        return self

    def transform(self, X):
        check_is_fitted(self, "cell_")
        return np.stack([encode_sequence(self.cell_, self.proj_, seq, self.patch_grid).vector for seq in X])


class GlobalFlowEstimator(BaseEstimator):
    """Contrast-maximizing global image flow (px per window) of one event stream."""

    def __init__(self, n_windows: int = 4, search: float = 8.0, lr: float = 0.05, iters: int = 100,
                 threads: int = 1):
        self.n_windows = n_windows
        self.search = search
        self.lr = lr
        self.iters = iters
        self.threads = threads

    def fit(self, X, y=None):
        check_scalar(self.n_windows, "n_windows", numbers.Integral, min_val=1)
        check_scalar(self.lr, "lr", numbers.Real, min_val=0, include_boundaries="neither")
        res = fit_global_flow(_check_stream(X), self.n_windows, search=self.search, lr=self.lr,
                              iters=self.iters, threads=self.threads)
        self.flow_ = res.flow
        self.variance_before_ = res.variance_before
        self.variance_after_ = res.variance_after
        return self

    def transform(self, X):
        """Motion-compensated per-window image pairs ``(n_windows, 2, H, W)``."""
        check_is_fitted(self, "flow_")
        prob = global_flow_problem(_check_stream(X), self.n_windows, threads=self.threads)
        out = []
        for w, d in zip(prob.windows, prob.displacements(self.flow_)):
            img = warp(w.events, d, threads=self.threads).image
            out.append(np.stack([img.pos, img.neg]))
        return np.stack(out)

    def score(self, X, y=None):
        """Mean per-window IWE variance under the fitted flow."""
        check_is_fitted(self, "flow_")
        prob = global_flow_problem(_check_stream(X), self.n_windows, threads=self.threads)
        return float(np.mean([iwe_variance(warp(w.events, d).image)
                              for w, d in zip(prob.windows, prob.displacements(self.flow_))]))


class MotionFieldEstimator(BaseEstimator):
    """Fits a continuous-time motion field; ``predict(times)`` returns joint positions."""

    def __init__(self, model: BodyModel | None = None, camera: Camera | None = None,
                 init: Pose | None = None, mode: str = "latent-only", lr: float = 1e-2,
                 max_iters: int = 200, n_windows: int = 4, weights: L.LossWeights | None = None,
                 random_state: int = 0, duration: float | None = None):
        self.model = model
        self.camera = camera
        self.init = init
        self.mode = mode
        self.lr = lr
        self.max_iters = max_iters
        self.n_windows = n_windows
        self.weights = weights
        self.random_state = random_state
        self.duration = duration

    def _config(self) -> FitConfig:
        return FitConfig(weights=self.weights or L.LossWeights(), lr=self.lr, max_iters=self.max_iters,
                         n_windows=self.n_windows, mode=self.mode, seed=self.random_state)

    def fit(self, X: EventStream | None, y: Supervision | None = None):
        if self.model is None or self.init is None:
            raise ValueError("model and init pose are required")
        check_scalar(self.max_iters, "max_iters", numbers.Integral, min_val=0)
        cam = self.camera or Camera.default()
        self.report_ = fit_latent(X, self.model, cam, self.init, y, self._config(), duration=self.duration)
        self.field_ = self.report_.field
        return self

    def predict(self, times):
        check_is_fitted(self, "field_")
        return self.field_.joints(np.asarray(times, dtype=np.float64))

    def score(self, times, y):
        """Negative MPJPE (mm) against ground-truth joints at ``times``."""
        gt = y.positions if isinstance(y, L.JointSet) else np.asarray(y)
        return -L.mpjpe(self.predict(times), gt)
