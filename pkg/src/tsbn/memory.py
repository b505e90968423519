"""Budget-bounded exemplar memory with herding selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConfigError


class QuotaError(ValueError):
    pass


def herding_select(features, m: int) -> list[int]:
    """Greedily pick ``m`` rows whose running mean tracks the mean of all rows.

    Rows are expected to be L2-normalized already. Step k picks the unchosen
    row minimising ||mu - (f_i + sum of chosen) / k||; ``argmin`` returns the
    first minimiser, so ties go to the lowest index.
    """
    f = np.asarray(features, dtype=np.float64)
    n = len(f)
    if not 1 <= m <= n:
        raise QuotaError(f"cannot herd {m} exemplars from {n} samples")
    mu = f.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros_like(mu)
    taken = np.zeros(n, dtype=bool)
    for k in range(1, m + 1):
        cand = (running[None, :] + f) / k
        dist = np.sqrt(((mu[None, :] - cand) ** 2).sum(axis=1))
        dist[taken] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        taken[i] = True
        running += f[i]
    return chosen


def l2_normalize(feats, eps=1e-12):
    feats = np.asarray(feats, dtype=np.float64)
    return feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), eps)


@dataclass
class ExemplarMemory:
    """Per-class exemplar lists of dataset indices, kept in selection order."""

    budget: int
    exemplars: dict[int, list[int]] = field(default_factory=dict)
    class_task: dict[int, int] = field(default_factory=dict)
    policy: str = "herding"

    def __post_init__(self):
        if self.policy not in ("herding", "random"):
            raise ConfigError(f"unknown exemplar policy {self.policy!r}")

    def __len__(self):
        return sum(len(v) for v in self.exemplars.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def quota(self, total_classes: int) -> int:
        q = self.budget // total_classes
        if q < 1:
            raise ConfigError(f"memory budget {self.budget} is smaller than the {total_classes} classes seen")
        return q

    def entries(self):
        """Flat arrays ``(dataset_index, global_class, task_id)`` in class order."""
        idx, cls, task = [], [], []
        for c in self.classes:
            lst = self.exemplars[c]
            idx += lst
            cls += [c] * len(lst)
            task += [self.class_task[c]] * len(lst)
        return np.array(idx, np.int64), np.array(cls, np.int64), np.array(task, np.int64)

    def to_dict(self) -> dict:
        return {"budget": self.budget, "policy": self.policy,
                "exemplars": {str(c): list(map(int, v)) for c, v in self.exemplars.items()},
                "class_task": {str(c): int(t) for c, t in self.class_task.items()}}

    @classmethod
    def from_dict(cls, d) -> "ExemplarMemory":
        return cls(int(d["budget"]), {int(c): list(v) for c, v in d["exemplars"].items()},
                   {int(c): int(t) for c, t in d["class_task"].items()}, d.get("policy", "herding"))


def update_memory(memory: ExemplarMemory, features_by_class: dict, task_id: int, rng=None) -> ExemplarMemory:
    """Requota and add the classes of a finished task.

    ``features_by_class`` maps each new global class to ``(dataset_indices,
    features)``, features taken from that task's own sub-model in eval mode.
    Existing lists are cut to the new quota, which keeps them herding-exact
    because greedy selection is prefix-consistent.
    """
    total = len(set(memory.exemplars) | set(features_by_class))
    q = memory.quota(total)
    for c in list(memory.exemplars):
        memory.exemplars[c] = memory.exemplars[c][:q]
    for c in sorted(features_by_class):
        indices, feats = features_by_class[c]
        indices = np.asarray(indices)
        m = min(q, len(indices))
        if memory.policy == "herding":
            order = herding_select(l2_normalize(feats), m)
        else:
            order = (rng if rng is not None else np.random.default_rng(0)).permutation(len(indices))[:m]
        memory.exemplars[c] = [int(indices[i]) for i in order]
        memory.class_task[c] = task_id
    return memory


def replay_iter(memory: ExemplarMemory, batch_size: int, rng):
    """One epoch over the memory in shuffled order; empty memory yields nothing."""
    idx, cls, task = memory.entries()
    if len(idx) == 0:
        return
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    perm = rng.permutation(len(idx))
    for s in range(0, len(perm), batch_size):
        sel = perm[s:s + batch_size]
        yield idx[sel], cls[sel], task[sel]
