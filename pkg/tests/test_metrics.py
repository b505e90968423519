from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsbn.metrics import (MetricLog, PhaseRecord, UndefinedClassError, accuracy_matrix, class_recall, class_recalls,
                          decomposition_audit, mcr, read_metrics_csv, summarize)
from tsbn.model import LabelMap


def brute_recall(preds, labels, c):
    hit = tot = 0
    for p, y in zip(preds, labels):
        if y == c:
            tot += 1
            hit += p == c
    return Fraction(hit, tot)


def random_log(rng, n_classes=6):
    classes = list(range(n_classes))
    n = int(rng.integers(n_classes, 60))
    labels = np.concatenate([classes, rng.integers(0, n_classes, n - n_classes)])
    preds = rng.integers(0, n_classes, n)
    return preds, labels, classes


def test_recall_and_mcr_oracle_on_1000_logs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        preds, labels, classes = random_log(rng, int(rng.integers(2, 8)))
        exact = [brute_recall(preds, labels, c) for c in classes]
        for c, r in zip(classes, exact):
            assert class_recall(preds, labels, c) == float(r)
        assert mcr(preds, labels, classes) == pytest.approx(float(sum(exact) / len(exact)), abs=1e-15)


def test_decomposition_identity_on_1000_logs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        sizes = rng.integers(1, 4, size=int(rng.integers(1, 5)))
        ids = rng.permutation(int(sizes.sum()))
        lm = LabelMap()
        pos = 0
        for s in sizes:
            lm.add(ids[pos:pos + s])
            pos += s
        task_of, _ = lm.lookup_arrays()
        n = int(rng.integers(1, 50))
        labels = rng.integers(0, len(ids), n)
        pred_task = rng.integers(0, len(sizes), n)
        pred_global = np.array([lm.to_global(t, int(rng.integers(0, sizes[t]))) for t in pred_task])
        d = decomposition_audit(pred_task, pred_global, labels, lm)
        tp_ok = [pt == task_of[y] for pt, y in zip(pred_task, labels)]
        both = [a and pg == y for a, pg, y in zip(tp_ok, pred_global, labels)]
        assert d.tp == Fraction(sum(tp_ok), n)
        assert d.overall == Fraction(sum(both), n)
        assert d.overall == d.tp * d.wp_given_tp


def test_undefined_class():
    with pytest.raises(UndefinedClassError):
        class_recall([0], [1], 0)
    with pytest.raises(UndefinedClassError):
        class_recalls([0, 1], [0, 1], [0, 1, 2])


def test_mcr_is_class_balanced():
    # 9 samples of class 0 all right, 1 sample of class 1 wrong: MCR 0.5, accuracy 0.9
    labels = [0] * 9 + [1]
    preds = [0] * 10
    assert mcr(preds, labels, [0, 1]) == 0.5


def test_summarize_hand_example():
    assert summarize([0.9, 0.8, 0.7]) == (0.7, pytest.approx(0.8))
    with pytest.raises(ValueError):
        summarize([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
def test_summarize_bounds(mcrs):
    last, avg = summarize(mcrs)
    assert last == mcrs[-1]
    assert min(mcrs) - 1e-12 <= avg <= max(mcrs) + 1e-12


def _record(phase, mcr_, groups):
    rec = {c: mcr_ for g in groups for c in g}
    return PhaseRecord(phase, mcr_, 1.0, mcr_, mcr_, 10 * phase, 100 + 10 * phase, rec, groups, [1] * phase)


def test_metric_log_csv_json_roundtrip(tmp_path):
    log = MetricLog(3)
    log.append(_record(1, 1.0, [[0, 1]]))
    log.append(_record(2, 0.75, [[0, 1], [2, 3]]))
    log.append(_record(3, 0.5, [[0, 1], [2, 3], [4]]))
    with pytest.raises(ValueError):
        log.append(_record(4, 0.5, [[0]]))
    rows = read_metrics_csv(log.to_csv(tmp_path / "m.csv"))
    assert [r["last_flag"] for r in rows] == [0, 0, 1]
    assert [r["mcr"] for r in rows] == [1.0, 0.75, 0.5]
    assert (tmp_path / "m.csv").read_text().startswith("# schema: tsbn-metrics/1\n")
    back = MetricLog.from_json(log.to_json())
    assert back.records == log.records
    A = accuracy_matrix(log)
    assert A.shape == (3, 3)
    assert np.isnan(A[0, 1]) and A[2, 2] == 0.5


def test_metric_log_rejects_out_of_range():
    with pytest.raises(ValueError):
        MetricLog(2).append(_record(1, 1.5, [[0]]))
