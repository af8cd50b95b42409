import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modeseq.metrics import (
    EvalRecord, brier_min_fde, evaluate_records, mean_average_precision, min_displacement, miss_rate,
)

from helpers import brute_force_ap, exact_or_far_record as _record, random_ap_instance

def test_map_matches_brute_force_oracle():
    rng = np.random.default_rng(1234)
    for _ in range(1000):
        recs = random_ap_instance(rng)
        hard = mean_average_precision(recs)
        soft = mean_average_precision(recs, soft=True)
        assert abs(hard - brute_force_ap(recs, soft=False)) <= 1e-9
        assert abs(soft - brute_force_ap(recs, soft=True)) <= 1e-9
        assert soft >= hard - 1e-12


def test_map_examples():
    perfect = [_record([True, False, False], [0.9, 0.5, 0.2], i) for i in range(4)]
    assert mean_average_precision(perfect) == 1.0 and mean_average_precision(perfect, soft=True) == 1.0
    # one record, two matches: the duplicate comes after full recall, so the
    # interpolated envelope leaves both at 1
    dup = [_record([True, True], [0.9, 0.8])]
    assert mean_average_precision(dup) == 1.0 and mean_average_precision(dup, soft=True) == 1.0
    # once the duplicate outranks another record's true positive it costs precision
    two = dup + [_record([True], [0.7], 1)]
    assert mean_average_precision(two) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    assert mean_average_precision(two, soft=True) == 1.0
    none = [_record([False, False], [0.9, 0.8])]
    assert mean_average_precision(none) == 0.0


def test_miss_rate():
    assert miss_rate([_record([True], [1.0], i) for i in range(3)]) == 0.0
    assert miss_rate([_record([False, False], [0.5, 0.5], i) for i in range(3)]) == 1.0
    rng = np.random.default_rng(0)
    recs = [_record(rng.random(3) < 0.3, rng.random(3), i) for i in range(50)]
    expected = np.mean([not np.any(np.all(np.abs(r.trajectories - r.ground_truth) < 1, axis=(1, 2))) for r in recs])
    assert miss_rate(recs) == expected


def test_displacement_metrics():
    gt = np.zeros((5, 2))
    exact = EvalRecord(0, gt[None], [1.0], gt)
    assert min_displacement([exact]) == (0.0, 0.0)
    assert brier_min_fde([exact]) == 0.0
    shifted = EvalRecord(0, np.stack([gt + [1.0, 0.0], gt + [5.0, 0.0]]), [0.0, 1.0], gt)
    assert min_displacement([shifted]) == (1.0, 1.0)
    # the best mode has confidence 0
    assert brier_min_fde([shifted]) == 2.0


def test_brier_against_recomputation():
    rng = np.random.default_rng(3)
    recs = [EvalRecord(i, rng.normal(size=(4, 6, 2)), rng.random(4), rng.normal(size=(6, 2))) for i in range(30)]
    ref = []
    for r in recs:
        fde = [np.hypot(*(t[-1] - r.ground_truth[-1])) for t in r.trajectories]
        k = int(np.argmin(fde))
        ref.append(fde[k] + (1 - r.confidences[k]) ** 2)
    assert abs(brier_min_fde(recs) - np.mean(ref)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_invariants(seed):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(int(rng.integers(1, 8))):
        gt = np.cumsum(rng.normal(size=(6, 2)), axis=0)
        trajs = gt + rng.normal(size=(3, 6, 2)) * rng.uniform(0, 1)
        recs.append(EvalRecord(i, trajs, rng.random(3), gt, speed=float(rng.uniform(0, 15))))
    report = evaluate_records(recs)
    assert 0 <= report.MR <= 1 and report.mAP <= report.soft_mAP + 1e-12
    assert report.minADE >= 0 and report.minFDE >= 0 and report.b_minFDE >= report.minFDE
    perm = rng.permutation(len(recs))
    assert evaluate_records([recs[i] for i in perm]).as_dict() == pytest.approx(report.as_dict(), abs=1e-12)
    assert evaluate_records(recs) == report
    # appending a mode to every record never hurts the min-over-modes metrics
    more = [EvalRecord(r.scenario_id, np.concatenate([r.trajectories, r.ground_truth[None] + rng.normal(size=(1, 6, 2))]),
                       np.append(r.confidences, rng.random()), r.ground_truth, r.speed) for r in recs]
    bigger = evaluate_records(more)
    assert bigger.minADE <= report.minADE and bigger.minFDE <= report.minFDE and bigger.MR <= report.MR


def test_errors():
    with pytest.raises(ValueError):
        miss_rate([])
    with pytest.raises(ValueError):
        EvalRecord(0, np.zeros((1, 3, 2)), [np.nan], np.zeros((3, 2)))
    with pytest.raises(ValueError):
        EvalRecord(0, np.zeros((1, 3, 2)), [0.5], np.zeros((4, 2)))
