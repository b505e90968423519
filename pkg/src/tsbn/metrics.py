"""Mean class recall and the TP/WP accuracy decomposition.

Counts stay integers until the final division.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

METRICS_SCHEMA = "tsbn-metrics/1"
METRICS_COLUMNS = ["phase", "mcr", "last_flag", "tp_acc", "wp_given_tp", "overall_acc",
                   "trainable_params", "total_params"]


class UndefinedClassError(ValueError):
    pass


def class_recall(preds, labels, c) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    mask = labels == c
    n_c = int(mask.sum())
    if n_c == 0:
        raise UndefinedClassError(f"class {c} has no samples")
    return int((preds[mask] == c).sum()) / n_c


def class_recalls(preds, labels, classes) -> dict[int, float]:
    preds, labels = np.asarray(preds), np.asarray(labels)
    missing = [int(c) for c in classes if not np.any(labels == c)]
    if missing:
        raise UndefinedClassError(f"classes without test samples: {missing}")
    return {int(c): class_recall(preds, labels, c) for c in classes}


def mcr(preds, labels, classes_seen) -> float:
    """Unweighted mean of per-class recalls (mean over classes, not samples)."""
    rec = class_recalls(preds, labels, classes_seen)
    if not rec:
        raise UndefinedClassError("no classes given")
    return sum(rec.values()) / len(rec)


@dataclass(frozen=True)
class Decomposition:
    tp: Fraction
    wp_given_tp: Fraction
    overall: Fraction

    def as_floats(self) -> tuple[float, float, float]:
        return float(self.tp), float(self.wp_given_tp), float(self.overall)


def decomposition_audit(pred_task, pred_global, labels, label_map) -> Decomposition:
    """Overall accuracy as TP accuracy times WP accuracy on the TP-correct subset."""
    pred_task, pred_global, labels = map(np.asarray, (pred_task, pred_global, labels))
    task_of, _ = label_map.lookup_arrays()
    n = len(labels)
    if n == 0:
        return Decomposition(Fraction(0), Fraction(0), Fraction(0))
    tp_ok = pred_task == task_of[labels]
    ok = tp_ok & (pred_global == labels)
    n_tp, n_ok = int(tp_ok.sum()), int(ok.sum())
    wp = Fraction(n_ok, n_tp) if n_tp else Fraction(0)
    return Decomposition(Fraction(n_tp, n), wp, Fraction(n_ok, n))


@dataclass
class PhaseRecord:
    phase: int
    mcr: float
    tp_acc: float
    wp_given_tp: float
    overall_acc: float
    trainable_params: int
    total_params: int
    class_recall: dict[int, float] = field(default_factory=dict)
    task_classes: list[list[int]] = field(default_factory=list)
    tp_counts: list[int] = field(default_factory=list)   # how often each task head was selected

    def task_mcr(self) -> list[float]:
        return [float(np.mean([self.class_recall[c] for c in g])) for g in self.task_classes]


@dataclass
class MetricLog:
    schedule_length: int
    records: list[PhaseRecord] = field(default_factory=list)

    def append(self, rec: PhaseRecord):
        if len(self.records) >= self.schedule_length:
            raise ValueError("metric log already holds a record for every phase")
        if not 0.0 <= rec.mcr <= 1.0:
            raise ValueError(f"MCR {rec.mcr} outside [0, 1]")
        self.records.append(rec)

    @property
    def mcrs(self) -> list[float]:
        return [r.mcr for r in self.records]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema: {METRICS_SCHEMA}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_COLUMNS)
            for r in self.records:
                last = int(r.phase == self.schedule_length)
                w.writerow([r.phase, repr(r.mcr), last, repr(r.tp_acc), repr(r.wp_given_tp),
                            repr(r.overall_acc), r.trainable_params, r.total_params])
        return path

    def to_json(self, path=None) -> str:
        d = {"schema": METRICS_SCHEMA, "schedule_length": self.schedule_length,
             "records": [asdict(r) for r in self.records]}
        if self.records:
            last, avg = summarize(self)
            d["last_mcr"], d["avg_mcr"] = last, avg
        text = json.dumps(d, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text) -> "MetricLog":
        d = json.loads(text)
        log = cls(d["schedule_length"])
        for r in d["records"]:
            r["class_recall"] = {int(k): v for k, v in r["class_recall"].items()}
            log.records.append(PhaseRecord(**r))
        return log


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema: {METRICS_SCHEMA}":
            raise ValueError(f"{path}: unexpected schema line {first!r}")
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({"phase": int(r["phase"]), "mcr": float(r["mcr"]), "last_flag": int(r["last_flag"]),
                    "tp_acc": float(r["tp_acc"]), "wp_given_tp": float(r["wp_given_tp"]),
                    "overall_acc": float(r["overall_acc"]), "trainable_params": int(r["trainable_params"]),
                    "total_params": int(r["total_params"])})
    return out


def summarize(log) -> tuple[float, float]:
    """``(Last-MCR, Avg-MCR)`` from a MetricLog or a plain sequence of MCRs."""
    mcrs = log.mcrs if isinstance(log, MetricLog) else list(log)
    if not mcrs:
        raise ValueError("cannot summarize an empty log")
    return mcrs[-1], sum(mcrs) / len(mcrs)


def accuracy_matrix(log: MetricLog) -> np.ndarray:
    """A[i, j] = MCR over task j's classes after phase i (NaN above the diagonal)."""
    t = len(log.records)
    width = max((len(r.task_classes) for r in log.records), default=0)
    A = np.full((t, width), np.nan)
    for i, r in enumerate(log.records):
        for j, v in enumerate(r.task_mcr()):
            A[i, j] = v
    return A
