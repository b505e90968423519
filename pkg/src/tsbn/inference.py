"""Test-time pipeline: pick a task head (TP), then a class inside it (WP)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import IncrementalModel
from .nn import softmax

PREDICTIONS_SCHEMA = "tsbn-predictions/1"
TP_RULES = ("unknown", "maxsoftmax")


@dataclass
class Prediction:
    predicted_task: int
    predicted_local_class: int
    predicted_global_class: int
    unknown_probabilities: list[float]
    class_distribution: np.ndarray


@dataclass
class PredictionBatch:
    task: np.ndarray            # (N,)
    local: np.ndarray           # (N,)
    global_: np.ndarray         # (N,)
    unknown_probs: np.ndarray   # (N, T); NaN for heads without an unknown output
    distribution: list          # per-sample softmax of the selected head

    def __len__(self):
        return len(self.task)

    def __getitem__(self, i) -> Prediction:
        return Prediction(int(self.task[i]), int(self.local[i]), int(self.global_[i]),
                          self.unknown_probs[i].tolist(), self.distribution[i])


def head_logits(model: IncrementalModel, x, batch_size=256) -> list[np.ndarray]:
    """Eval-mode logits of every registered head, computed in chunks."""
    out = []
    for t, head in enumerate(model.heads):
        chunks = []
        for s in range(0, len(x), batch_size):
            feats, _ = model.features(x[s:s + batch_size], t, "eval")
            chunks.append(head.logits(feats)[0])
        out.append(np.concatenate(chunks) if chunks else np.zeros((0, head.out_dim), np.float32))
    return out


def unknown_probs_from_logits(logits: np.ndarray) -> np.ndarray:
    """Softmax over all outputs of a head, keeping the last (unknown) column."""
    return softmax(logits.astype(np.float64))[:, -1]


def unknown_probability(model: IncrementalModel, x, t: int):
    model._check_task(t)
    if not model.heads[t].has_unknown:
        raise ValueError(f"head {t} has no unknown class")
    single = x.ndim == 3
    xb = x[None] if single else x
    feats, _ = model.features(xb, t, "eval")
    p = unknown_probs_from_logits(model.heads[t].logits(feats)[0])
    return float(p[0]) if single else p


def select_task(unknown_probs) -> np.ndarray:
    """Row-wise argmin over tasks; ``argmin`` keeps the lowest task id on ties."""
    return np.argmin(np.atleast_2d(np.asarray(unknown_probs)), axis=1)


def select_task_maxsoftmax(per_head_logits, known_counts) -> np.ndarray:
    scores = np.stack([softmax(lg.astype(np.float64))[:, :k].max(axis=1)
                       for lg, k in zip(per_head_logits, known_counts)], axis=1)
    return np.argmax(scores, axis=1)


def within_task(logits, known: int) -> np.ndarray:
    """Argmax over the known-class slice only; the unknown output never wins."""
    return np.argmax(np.atleast_2d(logits)[:, :known], axis=1)


def predict_batch(model: IncrementalModel, x, tp_rule="unknown", per_head_logits=None) -> PredictionBatch:
    if model.num_tasks < 1:
        raise ValueError("model has no tasks")
    if tp_rule not in TP_RULES:
        raise ValueError(f"tp_rule must be one of {TP_RULES}")
    logits = per_head_logits if per_head_logits is not None else head_logits(model, x)
    n = len(logits[0])
    unk = np.full((n, model.num_tasks), np.nan)
    for t, (h, lg) in enumerate(zip(model.heads, logits)):
        if h.has_unknown:
            unk[:, t] = unknown_probs_from_logits(lg)
    if tp_rule == "unknown":
        if not model.unknown_class:
            raise ValueError("the unknown-probability rule needs heads with an unknown class")
        task = select_task(unk)
    else:
        task = select_task_maxsoftmax(logits, [h.known_classes for h in model.heads])
    local = np.empty(n, np.int64)
    glob = np.empty(n, np.int64)
    dist = []
    for i in range(n):
        t = int(task[i])
        lg = logits[t][i]
        local[i] = within_task(lg, model.heads[t].known_classes)[0]
        glob[i] = model.label_map.to_global(t, int(local[i]))
        dist.append(softmax(lg.astype(np.float64)))
    return PredictionBatch(task.astype(np.int64), local, glob, unk, dist)


def predict_task(model: IncrementalModel, x) -> int:
    return int(predict_batch(model, x[None]).task[0])


def predict_task_maxsoftmax(model: IncrementalModel, x) -> int:
    return int(predict_batch(model, x[None], "maxsoftmax").task[0])


def predict_within_task(model: IncrementalModel, x, t: int) -> int:
    model._check_task(t)
    feats, _ = model.features(x[None], t, "eval")
    return int(within_task(model.heads[t].logits(feats)[0], model.heads[t].known_classes)[0])


def predict(model: IncrementalModel, x, tp_rule="unknown") -> Prediction:
    return predict_batch(model, x[None], tp_rule)[0]


def write_predictions(path, preds: PredictionBatch, true_global, true_task, sample_ids=None) -> Path:
    path = Path(path)
    ids = np.arange(len(preds)) if sample_ids is None else sample_ids
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {PREDICTIONS_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "true_global", "true_task", "pred_task", "pred_global", "unknown_prob_per_task"])
        for i in range(len(preds)):
            packed = ";".join("nan" if np.isnan(p) else repr(float(p)) for p in preds.unknown_probs[i])
            w.writerow([int(ids[i]), int(true_global[i]), int(true_task[i]), int(preds.task[i]),
                        int(preds.global_[i]), packed])
    return path


def read_predictions(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema: {PREDICTIONS_SCHEMA}":
            raise ValueError(f"{path}: unexpected schema line {first!r}")
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("sample_id", "true_global", "true_task", "pred_task", "pred_global"):
            r[k] = int(r[k])
        r["unknown_prob_per_task"] = [float(v) for v in r["unknown_prob_per_task"].split(";")]
    return rows
