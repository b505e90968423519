import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsbn.inference import (predict, predict_batch, predict_task, predict_within_task, read_predictions,
                            select_task, select_task_maxsoftmax, unknown_probability, unknown_probs_from_logits,
                            within_task, write_predictions)
from tsbn.model import Backbone, IncrementalModel


def test_select_task_argmin_with_ties():
    assert select_task([[0.5, 0.2, 0.9]]).tolist() == [1]
    assert select_task([[0.3, 0.3, 0.3]]).tolist() == [0]


def test_within_task_ignores_unknown_output():
    assert within_task(np.array([1.0, 2.0, 100.0]), 2).tolist() == [1]


def test_unknown_probs_uniform():
    p = unknown_probs_from_logits(np.zeros((2, 3)))
    np.testing.assert_allclose(p, 1 / 3)


def test_maxsoftmax_rule():
    a = np.array([[5.0, 0.0], [0.0, 0.1]])
    b = np.array([[0.0, 0.0, 0.0], [9.0, 0.0, 0.0]])
    assert select_task_maxsoftmax([a, b], [2, 3]).tolist() == [0, 1]


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(0, 1)))
def test_selected_task_has_minimal_unknown_probability(u):
    t = select_task(u)
    for i, ti in enumerate(t):
        assert u[i, ti] == u[i].min()
        assert ti == int(np.flatnonzero(u[i] == u[i].min())[0])


@pytest.fixture(scope="module")
def model():
    bb = Backbone("desk", 3, seed=1)
    bb.freeze()
    m = IncrementalModel(bb, seed=1)
    m.add_task(2, [3, 0])
    m.add_task(2, [1, 2])
    return m


def test_pipeline_is_consistent(model):
    x = np.random.default_rng(0).random((5, 3, 32, 32), dtype=np.float32)
    pb = predict_batch(model, x)
    for i in range(5):
        p = predict(model, x[i])
        assert p.predicted_task == pb.task[i] == predict_task(model, x[i])
        assert p.predicted_local_class == predict_within_task(model, x[i], p.predicted_task)
        assert p.predicted_global_class == model.label_map.to_global(p.predicted_task, p.predicted_local_class)
        assert len(p.unknown_probabilities) == 2
        assert p.class_distribution.sum() == pytest.approx(1.0)
        for t in range(2):
            assert unknown_probability(model, x[i], t) == pytest.approx(pb.unknown_probs[i, t], rel=1e-6)


def test_unknown_rule_needs_unknown_heads():
    bb = Backbone("desk", 3, seed=1)
    bb.freeze()
    m = IncrementalModel(bb, unknown_class=False)
    m.add_task(2)
    x = np.zeros((1, 3, 32, 32), np.float32)
    with pytest.raises(ValueError):
        predict_batch(m, x, "unknown")
    assert np.isnan(predict_batch(m, x, "maxsoftmax").unknown_probs).all()
    with pytest.raises(ValueError):
        predict_batch(m, x, "oracle")


def test_predictions_csv_roundtrip(model, tmp_path):
    x = np.random.default_rng(2).random((4, 3, 32, 32), dtype=np.float32)
    pb = predict_batch(model, x)
    path = write_predictions(tmp_path / "p.csv", pb, [3, 0, 1, 2], [0, 0, 1, 1], [10, 11, 12, 13])
    assert path.read_text().splitlines()[0] == "# schema: tsbn-predictions/1"
    rows = read_predictions(path)
    assert [r["sample_id"] for r in rows] == [10, 11, 12, 13]
    assert [r["pred_task"] for r in rows] == pb.task.tolist()
    for r, u in zip(rows, pb.unknown_probs):
        assert r["unknown_prob_per_task"] == u.tolist()
    assert not math.isnan(rows[0]["unknown_prob_per_task"][0])
