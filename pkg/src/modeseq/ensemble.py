"""Weighted Trajectory Fusion: merge multimodal predictions from several models.

Box-fusion style clustering with distance thresholds in place of IoU.
Modes from all models are visited in descending confidence; each joins the
first cluster whose fused trajectory it matches, otherwise it starts a new
cluster. Fused trajectories are confidence-weighted per-step means.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matching import MatchCriterion, is_match

CLASS_FACTORS = {"vehicle": 1.5, "pedestrian": 1.4, "cyclist": 1.4}


@dataclass
class FusionConfig:
    class_factors: dict = field(default_factory=lambda: dict(CLASS_FACTORS))
    num_models: int = 1
    max_modes: int = 6

    def __post_init__(self):
        if self.num_models < 1:
            raise ValueError("num_models must be >= 1")
        if any(f <= 0 for f in self.class_factors.values()):
            raise ValueError("class scaling factors must be positive")


@dataclass
class TrajectoryCluster:
    members: list[np.ndarray] = field(default_factory=list)
    confidences: list[float] = field(default_factory=list)
    fused: np.ndarray | None = None

    def add(self, traj: np.ndarray, conf: float) -> None:
        self.members.append(traj)
        self.confidences.append(conf)
        w = np.asarray(self.confidences)
        stack = np.stack(self.members)
        if len(self.members) == 1:
            self.fused = np.array(traj, dtype=float)
        elif w.sum() > 0:
            self.fused = np.tensordot(w, stack, axes=1) / w.sum()
        else:
            self.fused = stack.mean(axis=0)

    def confidence(self, num_models: int) -> float:
        # equals sum/num_models whenever a cluster has at most one member per model
        c = np.asarray(self.confidences)
        # identical members (duplicated models) must average to exactly their value
        mean = c[0] if np.all(c == c[0]) else c.mean()
        return float(mean * (min(len(c), num_models) / num_models))


def fuse(predictions, config: FusionConfig, criterion: MatchCriterion, agent_class: str = "vehicle"):
    """Fuse ``[(trajectories [K_i, T, 2], confidences [K_i]), ...]`` from n models.

    Returns (trajectories [<=K, T, 2], confidences [<=K], clusters).
    """
    if not predictions:
        raise ValueError("need predictions from at least one model")
    horizons = {np.asarray(t).shape[1:] for t, _ in predictions}
    if len(horizons) != 1:
        raise ValueError(f"inconsistent prediction horizons: {sorted(horizons)}")
    factor = config.class_factors[agent_class]

    pool = []
    for model_idx, (trajs, confs) in enumerate(predictions):
        trajs = np.asarray(trajs, dtype=float)
        for mode_idx, c in enumerate(np.asarray(confs, dtype=float)):
            pool.append((-c, model_idx, mode_idx, trajs[mode_idx]))
    pool.sort(key=lambda e: e[:3])

    clusters: list[TrajectoryCluster] = []
    for neg_c, _, _, traj in pool:
        for cl in clusters:
            if is_match(traj, cl.fused, criterion, factor):
                cl.add(traj, -neg_c)
                break
        else:
            cl = TrajectoryCluster()
            cl.add(traj, -neg_c)
            clusters.append(cl)

    scores = [cl.confidence(config.num_models) for cl in clusters]
    order = sorted(range(len(clusters)), key=lambda i: -scores[i])[: config.max_modes]
    kept = [clusters[i] for i in order]
    trajs = np.stack([cl.fused for cl in kept])
    return trajs, np.array([scores[i] for i in order]), kept
