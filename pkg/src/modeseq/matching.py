"""Match criteria: when does a predicted trajectory count as hitting the ground truth.

Two threshold families. ``linear`` grows a single distance threshold as
t/30 (2 m at step 60). ``velocity_aware`` splits the error into lateral and
longitudinal parts with thresholds that scale with the agent's speed.
Threshold formulas are written in benchmark step indices (0.1 s per step);
a criterion's ``step_duration`` converts the data's own step index into that
scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FAMILIES = ("linear", "velocity_aware")
REFERENCE_STEP = 0.1  # seconds per benchmark step index


@dataclass(frozen=True)
class MatchCriterion:
    family: str = "velocity_aware"
    speed: float = 0.0  # focal speed at the last observed step, m/s
    heading: float = 0.0  # focal heading at the last observed step (longitudinal axis)
    step_duration: float = 0.5  # seconds per step of the trajectories being compared

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown match family {self.family!r}")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if self.step_duration < REFERENCE_STEP:
            raise ValueError(f"step_duration must be at least {REFERENCE_STEP} s")

    def benchmark_index(self, step):
        return np.asarray(step, dtype=float) * (self.step_duration / REFERENCE_STEP)


def scale_factor(v: float) -> float:
    if v < 0:
        raise ValueError("speed must be non-negative")
    if v < 1.4:
        return 0.5
    if v < 11.0:
        return 0.5 + 0.5 * (v - 1.4) / (11.0 - 1.4)
    return 1.0


def _base_lateral(t):
    t = np.asarray(t, dtype=float)
    return np.where(t <= 30.0, t / 30.0, 0.04 * t - 0.2)


def thresholds(criterion: MatchCriterion, t):
    """Thresholds at benchmark step index ``t`` (>= 1).

    velocity_aware -> (lateral, longitudinal); linear -> scalar distance.
    """
    if np.any(np.asarray(t) < 1):
        raise ValueError(f"step index must be >= 1, got {t}")
    if criterion.family == "linear":
        return np.asarray(t, dtype=float) / 30.0 if np.ndim(t) else float(t) / 30.0
    lat = scale_factor(criterion.speed) * _base_lateral(t)
    if np.ndim(t) == 0:
        lat = float(lat)
    return lat, 2 * lat


def step_thresholds(criterion: MatchCriterion, horizon: int, factor: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-step (lateral, longitudinal) thresholds for steps 1..horizon.

    For the linear family both arrays hold the same radial threshold.
    """
    t = criterion.benchmark_index(np.arange(1, horizon + 1))
    if criterion.family == "linear":
        g = factor * thresholds(criterion, t)
        return g, g
    lat, lon = thresholds(criterion, t)
    return factor * lat, factor * lon


def decompose(displacement: np.ndarray, heading: float) -> tuple[np.ndarray, np.ndarray]:
    """Split [..., 2] displacements into (longitudinal, lateral) along ``heading``."""
    c, s = math.cos(heading), math.sin(heading)
    d = np.asarray(displacement, dtype=float)
    lon = d[..., 0] * c + d[..., 1] * s
    lat = -d[..., 0] * s + d[..., 1] * c
    return lon, lat


def is_match(pred, gt, criterion: MatchCriterion, factor: float = 1.0) -> bool:
    """True when ``pred`` stays within the thresholds of ``gt`` at every step."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"trajectory lengths differ: {pred.shape} vs {gt.shape}")
    lat_thr, lon_thr = step_thresholds(criterion, len(gt), factor)
    d = pred - gt
    if criterion.family == "linear":
        return bool(np.all(np.linalg.norm(d, axis=-1) <= lat_thr))
    lon, lat = decompose(d, criterion.heading)
    return bool(np.all((np.abs(lat) <= lat_thr) & (np.abs(lon) <= lon_thr)))


def match_modes(trajectories, gt, criterion: MatchCriterion, factor: float = 1.0) -> np.ndarray:
    """Vectorised ``is_match`` over modes: trajectories [K, T, 2] -> [K] bool."""
    trajectories = np.asarray(trajectories, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if trajectories.shape[1:] != gt.shape:
        raise ValueError(f"trajectory lengths differ: {trajectories.shape[1:]} vs {gt.shape}")
    lat_thr, lon_thr = step_thresholds(criterion, len(gt), factor)
    d = trajectories - gt
    if criterion.family == "linear":
        return np.all(np.linalg.norm(d, axis=-1) <= lat_thr, axis=-1)
    lon, lat = decompose(d, criterion.heading)
    return np.all((np.abs(lat) <= lat_thr) & (np.abs(lon) <= lon_thr), axis=-1)
