"""Motion-forecasting metrics: MR, mAP, Soft mAP, minADE, minFDE, b-minFDE."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .matching import MatchCriterion, match_modes


@dataclass
class EvalRecord:
    scenario_id: int
    trajectories: np.ndarray  # [K, T, 2]
    confidences: np.ndarray   # [K]
    ground_truth: np.ndarray  # [T, 2]
    speed: float = 0.0
    heading: float = 0.0
    agent_class: str = "vehicle"

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=float)
        self.confidences = np.asarray(self.confidences, dtype=float)
        self.ground_truth = np.asarray(self.ground_truth, dtype=float)
        if not np.isfinite(self.confidences).all():
            raise ValueError(f"record {self.scenario_id}: non-finite confidences")
        if self.trajectories.shape[1:] != self.ground_truth.shape:
            raise ValueError(f"record {self.scenario_id}: prediction/ground-truth horizons differ")

    def criterion(self, family: str = "velocity_aware", step_duration: float = 0.5) -> MatchCriterion:
        return MatchCriterion(family, self.speed, self.heading, step_duration)


@dataclass
class MetricsReport:
    MR: float
    mAP: float
    soft_mAP: float
    minADE: float
    minFDE: float
    b_minFDE: float

    def as_dict(self) -> dict:
        return asdict(self)


def _nonempty(records):
    if not records:
        raise ValueError("metrics need at least one record")


def record_matches(records, family="velocity_aware", step_duration=0.5) -> list[np.ndarray]:
    return [match_modes(r.trajectories, r.ground_truth, r.criterion(family, step_duration)) for r in records]


def miss_rate(records, family="velocity_aware", step_duration=0.5) -> float:
    _nonempty(records)
    matches = record_matches(records, family, step_duration)
    return float(np.mean([not m.any() for m in matches]))


def _errors(r: EvalRecord):
    dist = np.linalg.norm(r.trajectories - r.ground_truth, axis=-1)
    return dist.mean(axis=-1), dist[:, -1]


def min_displacement(records) -> tuple[float, float]:
    _nonempty(records)
    ade, fde = zip(*(_errors(r) for r in records))
    return float(np.mean([a.min() for a in ade])), float(np.mean([f.min() for f in fde]))


def brier_min_fde(records) -> float:
    _nonempty(records)
    out = []
    for r in records:
        fde = _errors(r)[1]
        k = int(np.argmin(fde))
        out.append(fde[k] + (1.0 - r.confidences[k]) ** 2)
    return float(np.mean(out))


def ranked_predictions(records, matches, soft: bool):
    """(confidence, is_true_positive) for every pooled prediction that is ranked.

    Per record only the highest-confidence matching mode is a true positive;
    other matches are false positives, or left out of the ranking when
    ``soft`` is set.
    """
    entries = []
    for r, m in zip(records, matches):
        order = np.argsort(-r.confidences, kind="stable")
        found = False
        for k in order:
            if m[k] and not found:
                entries.append((r.confidences[k], True))
                found = True
            elif m[k] and soft:
                continue
            else:
                entries.append((r.confidences[k], False))
    return entries


def average_precision(entries, num_positives: int) -> float:
    """Area under the interpolated P/R curve; operating points are distinct confidences."""
    if num_positives == 0 or not entries:
        return 0.0
    conf = np.array([c for c, _ in entries], dtype=float)
    tp = np.array([t for _, t in entries], dtype=float)
    order = np.argsort(-conf, kind="stable")
    conf, tp = conf[order], tp[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    # last index of each run of equal confidences
    ends = np.flatnonzero(np.append(conf[1:] != conf[:-1], True))
    precision = cum_tp[ends] / (cum_tp[ends] + cum_fp[ends])
    recall = cum_tp[ends] / num_positives
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def mean_average_precision(records, family="velocity_aware", step_duration=0.5, soft=False) -> float:
    _nonempty(records)
    matches = record_matches(records, family, step_duration)
    return average_precision(ranked_predictions(records, matches, soft), len(records))


def evaluate_records(records, family="velocity_aware", step_duration=0.5) -> MetricsReport:
    _nonempty(records)
    min_ade, min_fde = min_displacement(records)
    return MetricsReport(
        MR=miss_rate(records, family, step_duration),
        mAP=mean_average_precision(records, family, step_duration, soft=False),
        soft_mAP=mean_average_precision(records, family, step_duration, soft=True),
        minADE=min_ade,
        minFDE=min_fde,
        b_minFDE=brier_min_fde(records),
    )
