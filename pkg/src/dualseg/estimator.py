"""scikit-learn style wrapper around the dual-input segmentation network.

Samples are packed as ``X[n, H, W, 4]`` uint8 images: RGB in channels 0-2
and the rendered simulation mask (0/255) in channel 3. Targets are binary
masks ``y[n, H, W]`` holding {0, 1} or {0, 255}.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datagen.dataset import FramePair
from .losses import iou_score
from .model import ModelConfig, binarize
from .trainer import TrainConfig, predict_proba, train


def stack_inputs(real_rgb: np.ndarray, sim_mask: np.ndarray) -> np.ndarray:
    """Pack ``real_rgb[n, H, W, 3]`` and ``sim_mask[n, H, W]`` into ``X[n, H, W, 4]``."""
    real_rgb = np.asarray(real_rgb)
    sim_mask = np.asarray(sim_mask)
    if real_rgb.ndim == 3:
        real_rgb, sim_mask = real_rgb[None], sim_mask[None]
    if real_rgb.shape[-1] != 3 or sim_mask.shape != real_rgb.shape[:3]:
        raise ValueError(f"expected [n,H,W,3] and [n,H,W], got {real_rgb.shape} and {sim_mask.shape}")
    sim = np.where(sim_mask > (127 if sim_mask.max(initial=0) > 1 else 0.5), 255, 0)
    return np.concatenate([real_rgb.astype(np.uint8), sim[..., None].astype(np.uint8)], axis=-1)


def check_images(X, hw_multiple: int = 32) -> np.ndarray:
    """Validate a packed image batch and return it as uint8."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 4:
        raise ValueError(f"X must have shape [n, H, W, 4], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X contains no samples")
    h, w = X.shape[1:3]
    if h % hw_multiple or w % hw_multiple:
        raise ValueError(f"image size {h}x{w} must be divisible by {hw_multiple}")
    if X.dtype != np.uint8:
        if not np.isfinite(X).all() or X.min() < 0 or X.max() > 255:
            raise ValueError("X values must be finite and lie in [0, 255]")
        X = np.rint(X).astype(np.uint8)
    return X


def check_masks(y, n: int, hw: Tuple[int, int]) -> np.ndarray:
    """Validate target masks and return them as 0/255 uint8."""
    y = np.asarray(y)
    if y.shape != (n,) + tuple(hw):
        raise ValueError(f"y must have shape {(n,) + tuple(hw)}, got {y.shape}")
    values = np.unique(y)
    if np.isin(values, (0, 1)).all():
        return (y * 255).astype(np.uint8)
    if np.isin(values, (0, 255)).all():
        return y.astype(np.uint8)
    raise ValueError("y must be binary ({0, 1} or {0, 255})")


def _to_pairs(X: np.ndarray, y: Optional[np.ndarray] = None) -> List[FramePair]:
    gt = y if y is not None else np.zeros(X.shape[:3], dtype=np.uint8)
    return [FramePair(X[i, ..., :3], X[i, ..., 3], gt[i], i, "estimator") for i in range(len(X))]


class DualInputSegmenter(BaseEstimator):
    """Binary tool segmenter fed a camera frame plus a simulation mask.

    Args:
        width_factor: Channel multiplier of the network.
        dual_input: When False the simulation channel is ignored (baseline).
        max_steps: Adam steps per call to :meth:`fit`.
        batch_size: Minibatch size.
        lr: Adam learning rate.
        val_every: Validation period in steps.
        threshold: Binarization threshold used by :meth:`predict`.
        random_state: Seed for initialization and minibatch order.
    """

    def __init__(self, width_factor: float = 0.125, dual_input: bool = True, max_steps: int = 500,
                 batch_size: int = 4, lr: float = 0.001, val_every: int = 50, threshold: float = 0.3,
                 random_state: int = 0):
        self.width_factor = width_factor
        self.dual_input = dual_input
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr = lr
        self.val_every = val_every
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on ``(X, y)``; the weights with the best validation IoU are kept.

        Without a validation set the training data doubles as one.
        """
        X = check_images(X)
        y = check_masks(y, len(X), X.shape[1:3])
        if X_val is None:
            X_val, y_val = X, y
        else:
            X_val = check_images(X_val)
            y_val = check_masks(y_val, len(X_val), X_val.shape[1:3])
        self.model_config_ = ModelConfig(width_factor=self.width_factor, input_hw=X.shape[1:3],
                                         dual_input=self.dual_input, binarize_threshold=self.threshold)
        train_cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_steps=self.max_steps,
                                val_every=self.val_every, seed=self.random_state,
                                binarize_threshold=self.threshold)
        state = train({"train": _to_pairs(X, y), "val": _to_pairs(X_val, y_val)}, self.model_config_, train_cfg)
        self.net_ = state.best_net()
        self.best_val_iou_ = state.best_val_iou
        self.history_ = state.history
        self.n_steps_ = state.step
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Foreground probability per pixel, shape ``[n, H, W]``."""
        check_is_fitted(self, "net_")
        X = check_images(X)
        if tuple(X.shape[1:3]) != tuple(self.model_config_.input_hw):
            raise ValueError(f"fitted on {self.model_config_.input_hw} images, got {X.shape[1:3]}")
        return predict_proba(self.net_, _to_pairs(X), batch_size=max(self.batch_size, 8))

    def predict(self, X) -> np.ndarray:
        """Binary masks (0/1 uint8) at ``threshold``."""
        return binarize(self.predict_proba(X), self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean hard IoU over the samples."""
        X = check_images(X)
        y = check_masks(y, len(X), X.shape[1:3])
        pred = self.predict(X)
        return float(np.mean([iou_score(p, g) for p, g in zip(pred, y)]))
