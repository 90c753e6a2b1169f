"""Joint-space recordings of the robot arms."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

JOINT_COUNTS = {"PSM1": 7, "PSM2": 7, "ECM": 4}
SAMPLE_PERIOD_MS = 150.0

# rows driving the planar tool: base rotation, elbow, wrist, jaw opening
ROW_BASE, ROW_ELBOW, ROW_WRIST, ROW_JAW = 0, 1, 4, 5
JAW_MAX = 0.9


@dataclass
class KinematicTrace:
    """Joint values of one arm; rows are joints base to tip, columns are time steps."""

    arm_id: str
    joints: np.ndarray
    sample_period_ms: float = SAMPLE_PERIOD_MS

    def __post_init__(self):
        if self.arm_id not in JOINT_COUNTS:
            raise ValueError(f"unknown arm {self.arm_id!r}; expected one of {sorted(JOINT_COUNTS)}")
        self.joints = np.atleast_2d(np.asarray(self.joints, dtype=np.float64))
        rows = JOINT_COUNTS[self.arm_id]
        if self.joints.shape[0] != rows:
            raise ValueError(f"{self.arm_id} trace needs {rows} joint rows, got {self.joints.shape[0]}")
        if not np.isfinite(self.joints).all():
            raise ValueError(f"{self.arm_id} trace contains non-finite joint values")
        if self.sample_period_ms <= 0:
            raise ValueError("sample_period_ms must be positive")

    def __len__(self) -> int:
        return self.joints.shape[1]

    def at(self, t: int) -> np.ndarray:
        if not 0 <= t < len(self):
            raise IndexError(f"timestep {t} out of range for trace of length {len(self)}")
        return self.joints[:, t]

    def to_csv(self, path: Union[str, Path]) -> None:
        # repr() round-trips float64 exactly
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in self.joints:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: Union[str, Path], arm_id: str, sample_period_ms: float = SAMPLE_PERIOD_MS):
        with open(path, newline="") as fh:
            rows = [[float(v) for v in r] for r in csv.reader(fh) if r]
        lengths = {len(r) for r in rows}
        if len(lengths) > 1:
            raise ValueError(f"{path}: ragged kinematics rows {sorted(lengths)}")
        return cls(arm_id, np.array(rows), sample_period_ms)


def synthesize_trace(arm_id: str, n_frames: int, seed: int) -> KinematicTrace:
    """Smooth random joint motion: a few low-frequency sinusoids per joint."""
    rng = np.random.default_rng(seed)
    rows = JOINT_COUNTS[arm_id]
    t = np.arange(n_frames) / max(n_frames, 1)
    joints = np.zeros((rows, n_frames))
    if arm_id == "ECM":
        # the camera holds still up to a slow drift
        for r in range(rows):
            joints[r] = rng.uniform(-0.05, 0.05) + 0.01 * np.sin(2 * np.pi * t + rng.uniform(0, 2 * np.pi))
        return KinematicTrace(arm_id, joints)
    amplitude = np.array([0.30, 0.45, 0.02, 0.6, 0.55, JAW_MAX / 2, 0.3])
    for r in range(rows):
        for _ in range(2):
            freq = rng.uniform(0.5, 2.0)
            joints[r] += amplitude[r] / 2 * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    joints[ROW_JAW] = JAW_MAX / 2 + JAW_MAX / 2 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    return KinematicTrace(arm_id, joints)
