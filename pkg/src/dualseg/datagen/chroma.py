"""Green-screen ground-truth extraction and simulation-mask thresholding."""

from __future__ import annotations

from itertools import combinations
from typing import Sequence, Tuple

import numpy as np

from ..losses import iou_score, median_iqr

GT_TAU = 120
SIM_THRESHOLD = 128


def l1_difference(frame, background) -> np.ndarray:
    """Per-pixel L1 norm of ``frame - background`` summed over channels."""
    frame = np.asarray(frame)
    background = np.asarray(background)
    if frame.shape != background.shape:
        raise ValueError(f"frame {frame.shape} and background {background.shape} differ in shape")
    diff = np.abs(frame.astype(np.int32) - background.astype(np.int32))
    return diff.sum(axis=-1) if diff.ndim == 3 else diff


def extract_gt(frame_on_green, empty_green, tau: float = GT_TAU) -> np.ndarray:
    """Foreground wherever the channel-summed L1 difference is at least ``tau``.

    Returns a ``uint8`` mask holding 0 and 255.
    """
    return np.where(l1_difference(frame_on_green, empty_green) >= tau, 255, 0).astype(np.uint8)


def binarize_sim(sim_render, threshold: int = SIM_THRESHOLD) -> np.ndarray:
    """Threshold a grayscale simulator render into a 0/255 mask."""
    return np.where(np.asarray(sim_render) >= threshold, 255, 0).astype(np.uint8)


def gt_reliability(runs: Sequence[Sequence[np.ndarray]]) -> Tuple[float, float]:
    """Agreement of ground truth extracted from repeated recordings.

    Args:
        runs: ``runs[r][f]`` is the mask extracted for frame ``f`` in repetition
            ``r``. All runs must cover the same frames.

    Returns:
        ``(median, iqr)`` of the IoU over every frame and every pair of runs,
        as fractions in ``[0, 1]``.
    """
    if len(runs) < 2:
        raise ValueError("gt_reliability needs at least two repeated runs")
    n = {len(r) for r in runs}
    if len(n) != 1:
        raise ValueError(f"runs cover different frame counts: {sorted(n)}")
    scores = [iou_score(a[f], b[f]) for a, b in combinations(runs, 2) for f in range(len(a))]
    return median_iqr(scores)
