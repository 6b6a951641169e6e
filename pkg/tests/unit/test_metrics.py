# tests/unit/test_metrics.py
import json

import numpy as np
import pytest

from services.data_core import LabeledDataset, TaskSplit
from services.metrics_core import (
    METRIC_COLUMNS,
    AccuracyLog,
    average_accuracy,
    build_report,
    evaluate,
    forgetting_measure,
    mean_over_defined,
    relative_forgetting,
    report_rows,
    task_accuracy,
)
from tests._helpers.models import const_bias_params, linear_spec
from utils.logging import clear_events, recent_events


def _log(tasks, checkpoints):
    log = AccuracyLog(TaskSplit(tuple(tuple(t) for t in tasks), 0))
    for row in checkpoints:
        log.append(row)
    return log


def _final_only(per_task):
    """One class per task; earlier checkpoints at 0.5, last one set to per_task."""
    n = len(per_task)
    rows = [{c: 0.5 for c in range(k)} for k in range(1, n)]
    rows.append({c: float(a) for c, a in enumerate(per_task)})
    return _log([(c,) for c in range(n)], rows)


# ---- average accuracy ----

@pytest.mark.parametrize(
    "per_task, printed",
    [
        ((0, 0, 0, 0.0005, 0.826), 16.53),
        ((0.068, 0.115, 0.271, 0.4445, 0.632), 30.61),
        ((0, 0, 0, 0.001, 0.59), 11.82),
    ],
)
def test_average_accuracy_reproduces_reported_final_column(per_task, printed):
    log = _final_only(per_task)
    assert round(100 * average_accuracy(log, 5), 2) == printed


def test_average_accuracy_constant_and_bounds():
    log = _log([(0, 1), (2, 3)], [{0: 0.4, 1: 0.4}, {0: 0.4, 1: 0.4, 2: 0.4, 3: 0.4}])
    assert average_accuracy(log, 2) == pytest.approx(0.4)
    rng = np.random.default_rng(3)
    vals = rng.uniform(size=4)
    log = _log([(0, 1), (2, 3)], [{0: 0.1, 1: 0.2}, dict(enumerate(vals))])
    per_task = [task_accuracy(log, 1, 2), task_accuracy(log, 2, 2)]
    assert min(per_task) <= average_accuracy(log, 2) <= max(per_task)


def test_checkpoint_out_of_range_rejected():
    log = _final_only((0.1, 0.2))
    with pytest.raises(ValueError):
        average_accuracy(log, 3)
    with pytest.raises(ValueError):
        average_accuracy(log, 0)


def test_log_requires_exact_seen_classes_and_fractions():
    log = AccuracyLog(TaskSplit(((0,), (1,)), 0))
    with pytest.raises(ValueError):
        log.append({0: 0.5, 1: 0.5})
    with pytest.raises(ValueError):
        log.append({0: 50.0})
    log.append({0: 0.5})
    log.append({0: 0.5, 1: 0.5})
    with pytest.raises(ValueError):
        log.append({0: 0.5, 1: 0.5})


# ---- forgetting ----

def test_no_decrease_means_zero_forgetting():
    log = _log([(0,), (1,), (2,)], [{0: 0.5}, {0: 0.6, 1: 0.7}, {0: 0.6, 1: 0.9, 2: 0.1}])
    assert forgetting_measure(log, 2) == 0.0
    assert forgetting_measure(log, 3) == 0.0
    assert relative_forgetting(log, 3) == 0.0


def test_single_class_forgetting_and_relative():
    log = _log([(0,), (1,)], [{0: 0.8}, {0: 0.3, 1: 0.9}])
    assert forgetting_measure(log, 2) == pytest.approx(0.5)
    assert relative_forgetting(log, 2) == pytest.approx(5 / 3)


def test_forgetting_needs_two_checkpoints():
    log = _final_only((0.3,))
    with pytest.raises(ValueError):
        forgetting_measure(log, 1)
    with pytest.raises(ValueError):
        relative_forgetting(log, 1)


def _brute_force(tasks, rows, k, clamp=True):
    f_tasks, a_tasks = [], []
    for j in range(1, k):
        drops = []
        for c in tasks[j - 1]:
            peak = max(rows[t - 1][c] for t in range(j, k))
            d = peak - rows[k - 1][c]
            drops.append(max(d, 0.0) if clamp else d)
        f_tasks.append(sum(drops) / len(drops))
        a_tasks.append(sum(rows[k - 1][c] for c in tasks[j - 1]) / len(tasks[j - 1]))
    return sum(f_tasks) / len(f_tasks), sum(f_tasks) / sum(a_tasks)


@pytest.mark.parametrize("seed", range(5))
def test_forgetting_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    tasks = [(0, 1), (2, 3), (4, 5)]
    rows = []
    for k in range(1, 4):
        seen = [c for t in tasks[:k] for c in t]
        rows.append({c: float(rng.uniform()) for c in seen})
    log = _log(tasks, rows)
    for k in (2, 3):
        f, r = _brute_force(tasks, rows, k)
        assert forgetting_measure(log, k) == pytest.approx(f, abs=1e-12)
        assert relative_forgetting(log, k) == pytest.approx(r, abs=1e-12)
    f_raw, _ = _brute_force(tasks, rows, 3, clamp=False)
    assert forgetting_measure(log, 3, clamp=False) == pytest.approx(f_raw, abs=1e-12)


def test_clamp_keeps_backward_transfer_from_cancelling_forgetting():
    # class 0 forgets 0.4, class 1 improves 0.4
    log = _log([(0, 1), (2,)], [{0: 0.8, 1: 0.2}, {0: 0.4, 1: 0.6, 2: 0.9}])
    assert forgetting_measure(log, 2) == pytest.approx(0.2)
    assert forgetting_measure(log, 2, clamp=False) == pytest.approx(0.0)


def test_forgetting_invariant_to_class_relabeling():
    rng = np.random.default_rng(11)
    tasks = [(0, 1), (2, 3), (4, 5)]
    rows = []
    for k in range(1, 4):
        rows.append({c: float(rng.uniform()) for t in tasks[:k] for c in t})
    perm = {c: p for c, p in zip(range(6), [5, 3, 4, 0, 2, 1])}
    p_tasks = [tuple(perm[c] for c in reversed(t)) for t in tasks]
    p_rows = [{perm[c]: v for c, v in row.items()} for row in rows]
    a, b = _log(tasks, rows), _log(p_tasks, p_rows)
    assert forgetting_measure(a, 3) == pytest.approx(forgetting_measure(b, 3), abs=1e-12)


def test_relative_forgetting_undefined_on_total_forgetting():
    clear_events()
    log = _log([(0,), (1,)], [{0: 0.7}, {0: 0.0, 1: 0.9}])
    assert relative_forgetting(log, 2) is None
    assert recent_events(stage="metrics", event="undefined_relative_forgetting")


def test_seed_mean_drops_undefined_relative_forgetting_and_counts_it():
    total = _log([(0,), (1,)], [{0: 0.7}, {0: 0.0, 1: 0.9}])
    partial = _log([(0,), (1,)], [{0: 0.8}, {0: 0.4, 1: 0.9}])
    values = [relative_forgetting(total, 2), relative_forgetting(partial, 2), float("nan")]
    mean, undefined = mean_over_defined(values)
    assert mean == pytest.approx(0.4 / 0.4)
    assert undefined == 2


def test_seed_mean_of_nothing_defined_is_nan():
    mean, undefined = mean_over_defined([None, None])
    assert np.isnan(mean) and undefined == 2


# ---- evaluate ----

def _six_samples():
    x = np.zeros((6, 1, 2, 2))
    return LabeledDataset(x, np.array([0, 0, 1, 1, 2, 2]), 3)


def test_constant_predictor_scores_one_class():
    spec = linear_spec((1, 2, 2), 3)
    acc = evaluate(spec, const_bias_params(spec, [1.0, 0.0, 0.0]), _six_samples(), [0, 1, 2])
    assert acc == {0: 1.0, 1: 0.0, 2: 0.0}


def test_evaluate_counts_hand_checked_predictions():
    spec = linear_spec((1, 2, 2), 3)
    params = const_bias_params(spec, [0.0, 0.0, 0.0])
    w = params.view(1, "W")
    # pixel i votes for class i
    w[...] = 0.0
    for i in range(3):
        w[i, i] = 1.0
    x = np.zeros((6, 1, 2, 2)).reshape(6, 4)
    x[[0, 1, 2, 3, 4, 5], [0, 1, 1, 2, 2, 0]] = 1.0
    ds = LabeledDataset(x.reshape(6, 1, 2, 2), np.array([0, 0, 1, 1, 2, 2]), 3)
    acc = evaluate(spec, params, ds, [0, 1, 2])
    assert acc == {0: 0.5, 1: 0.5, 2: 0.5}


def test_evaluate_marks_class_without_samples_undefined():
    clear_events()
    spec = linear_spec((1, 2, 2), 4)
    ds = LabeledDataset(np.zeros((4, 1, 2, 2)), np.array([0, 0, 1, 1]), 4)
    acc = evaluate(spec, const_bias_params(spec, [1.0, 0, 0, 0]), ds, [0, 1, 3])
    assert acc[0] == 1.0 and acc[1] == 0.0
    assert np.isnan(acc[3])
    assert recent_events(stage="metrics", event="undefined_class_accuracy")


# ---- report ----

def test_report_matrix_old_new_and_rows():
    log = _final_only((0, 0, 0, 0.0005, 0.826))
    rep = build_report(log)
    assert rep.task_matrix.shape == (5, 5)
    assert np.isnan(rep.task_matrix[4, 0])
    assert rep.task_matrix[4, 4] == pytest.approx(0.826)
    assert sorted(rep.forgetting) == [2, 3, 4, 5]
    old, new = rep.old_new[-1]
    assert old == pytest.approx(0.0005 / 4) and new == pytest.approx(0.826)
    assert np.isnan(rep.old_new[0][0])

    df = report_rows(rep, {"run_id": "r", "seed": 2021, "strategy": "finetune", "beta": "iid", "num_tasks": 5})
    assert list(df.columns) == METRIC_COLUMNS
    assert len(df) == 5
    last = df.iloc[-1]
    assert last["avg_acc"] == "16.53"
    assert df.iloc[0]["F"] == "" and df.iloc[0]["R"] == ""
    assert json.loads(last["per_task_acc"]) == ["0.00", "0.00", "0.00", "0.05", "82.60"]


def test_log_round_trips_through_dict():
    log = _log([(0,), (1,)], [{0: 0.8}, {0: float("nan"), 1: 0.9}])
    back = AccuracyLog.from_dict(json.loads(json.dumps(log.to_dict())))
    assert back.split == log.split
    assert back.class_acc(1, 2) == 0.9
    assert np.isnan(back.class_acc(0, 2))


def test_sweep_summary_reports_undefined_relative_forgetting():
    from services.exp_runner import RunRecord
    from services.exp_sweep import summarize

    records = []
    for seed, old_acc in ((1, 0.0), (2, 0.4), (3, 0.2)):
        log = _log([(0,), (1,)], [{0: 0.8}, {0: old_acc, 1: 0.9}])
        records.append(RunRecord(run_id=f"r{seed}", seed=seed, config={"strategy.name": "finetune"},
                                 split=log.split, accuracy_log=log, status="completed", report=build_report(log)))
    row = summarize(records, []).iloc[0]
    assert row["n_seeds"] == 3
    assert row["R_undefined"] == 1
    assert row["R_mean"] == pytest.approx((0.4 / 0.4 + 0.6 / 0.2) / 2)
    assert not np.isnan(row["R_std"])
