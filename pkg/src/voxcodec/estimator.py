"""scikit-learn style wrapper around the training and coding pipeline."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .codec import decode_sequence
from .metrics import psnr
from .render import render_image
from .scene import MultiViewDataset
from .train import TrainConfig, train_sequence


def check_dataset(X) -> MultiViewDataset:
    """Accept a dataset object or a dataset directory."""
    if isinstance(X, (str, Path)):
        X = MultiViewDataset.load(X)
    if not isinstance(X, MultiViewDataset):
        raise TypeError(f"expected a MultiViewDataset or a dataset directory, got {type(X).__name__}")
    imgs = X.images
    if imgs.ndim != 5 or imgs.shape[-1] != 3:
        raise ValueError(f"images must have shape (frames, cameras, H, W, 3), got {imgs.shape}")
    if imgs.shape[1] != len(X.cameras):
        raise ValueError("image count per frame does not match the camera count")
    if not np.all(np.isfinite(imgs)) or imgs.min() < 0 or imgs.max() > 1:
        raise ValueError("pixel values must be finite and inside [0, 1]")
    if not X.train_ids:
        raise ValueError("dataset has no training cameras")
    return X


def check_views(X, n_frames: int, n_cameras: int) -> np.ndarray:
    """Validate ``(frame, camera)`` index pairs."""
    X = np.asarray(X)
    if X.ndim == 1 and X.size == 2:
        X = X[None]
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError(f"views must be (n, 2) frame/camera pairs, got shape {X.shape}")
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(X == np.round(X)):
            raise ValueError("frame and camera indices must be integers")
        X = X.astype(np.int64)
    if np.any(X[:, 0] < 0) or np.any(X[:, 0] >= n_frames):
        raise IndexError(f"frame index outside [0, {n_frames})")
    if np.any(X[:, 1] < 0) or np.any(X[:, 1] >= n_cameras):
        raise IndexError(f"camera index outside [0, {n_cameras})")
    return X


class VoxelVideoCodec(BaseEstimator):
    """Learn and code a dynamic radiance field from multi-view frames.

    ``fit`` trains and encodes the whole sequence; ``predict`` renders views
    from the *decoded* bitstream, so predictions are what a receiver sees.
    """

    def __init__(self, lam=1e-3, alpha=10.0, group_size=20, iters_i=3000, iters_p=1000,
                 lr_grid=1e-1, lr_residual=5e-3, lr_mlp=1e-3, lr_entropy=1e-2, lr_q=1e-3,
                 lr_decay=0.05, ray_batch=1024, rate_batch=16384, grid_dims=(32, 32, 32),
                 basis_dims=((32, 32, 32), (16, 16, 16), (8, 8, 8)), channels=4, qstep_init=0.02,
                 adaptive_q=True, render_step=0.0, occ_threshold=1e-2, seed=0):
        self.lam = lam
        self.alpha = alpha
        self.group_size = group_size
        self.iters_i = iters_i
        self.iters_p = iters_p
        self.lr_grid = lr_grid
        self.lr_residual = lr_residual
        self.lr_mlp = lr_mlp
        self.lr_entropy = lr_entropy
        self.lr_q = lr_q
        self.lr_decay = lr_decay
        self.ray_batch = ray_batch
        self.rate_batch = rate_batch
        self.grid_dims = grid_dims
        self.basis_dims = basis_dims
        self.channels = channels
        self.qstep_init = qstep_init
        self.adaptive_q = adaptive_q
        self.render_step = render_step
        self.occ_threshold = occ_threshold
        self.seed = seed

    def to_config(self) -> TrainConfig:
        return TrainConfig.from_mapping(self.get_params())

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "VoxelVideoCodec":
        names = cls._get_param_names()
        return cls(**{n: getattr(cfg, n) for n in names})

    def fit(self, X, y=None):
        dataset = check_dataset(X)
        result = train_sequence(dataset, self.to_config())
        self.result_ = result
        self.bitstream_ = result.bitstream
        self.sequence_header_, self.frames_ = decode_sequence(result.bitstream)
        self.cameras_ = dataset.cameras
        self.n_frames_ = dataset.n_frames
        return self

    def predict(self, X) -> np.ndarray:
        """Render ``(frame, camera)`` pairs; returns ``(n, H, W, 3)`` images."""
        check_is_fitted(self, "frames_")
        views = check_views(X, self.n_frames_, len(self.cameras_))
        step = self.sequence_header_.render_step
        bg = self.sequence_header_.background
        out = []
        for t, c in views:
            fr = self.frames_[t]
            out.append(render_image(fr.frame, fr.render_mlp, self.cameras_[c], fr.occupancy, step, bg))
        return np.stack(out)

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of rendered views against reference images ``y``."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != pred.shape:
            raise ValueError(f"reference images have shape {y.shape}, expected {pred.shape}")
        return float(np.mean([psnr(p, t) for p, t in zip(pred, y)]))
