"""Experiment configuration: nested dataclasses loaded from YAML.

Epoch counts and LR milestones are written at full scale and
multiplied by ``epochs_scale`` when a run starts; see ``scaled_stage``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import AUGMENT_POLICIES, SyntheticSpec
from .model import BN_INIT_CHOICES, ConfigError
from .nn import SGDConfig


@dataclass
class DataConfig:
    source: str = "synthetic"                 # synthetic | directory
    root: str | None = None
    image_size: int | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    num_tasks: int = 5
    classes_per_task: int | None = None
    order: typing.Any = None                  # named order or explicit groups
    shuffle_classes: bool = True
    augment: str = "none"
    mean: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list = field(default_factory=lambda: [0.25, 0.25, 0.25])


@dataclass
class PretrainConfig:
    enabled: bool = True
    source: str = "aux"                       # aux (held-out classes) | task_fraction
    task_fraction: float = 0.5
    epochs: int = 8
    batch_size: int = 64
    sgd: SGDConfig = field(default_factory=lambda: SGDConfig(0.05, 0.9, 5e-4, (5, 7), 0.1))


@dataclass
class StageAConfig:
    epochs: int = 200
    batch_size: int = 32
    memory_batch_size: int = 32
    sgd: SGDConfig = field(default_factory=lambda: SGDConfig(0.01, 0.9, 5e-4, (70, 130, 170), 0.1))


@dataclass
class StageBConfig:
    epochs: int = 100
    batch_size: int = 32
    sgd: SGDConfig = field(default_factory=lambda: SGDConfig(0.001, 0.9, 5e-4, (55, 80), 0.1))


@dataclass
class Ablation:
    task_specific_bn: bool = True
    unknown_class: bool = True
    alignment: bool = True


@dataclass
class ExperimentConfig:
    name: str = "desk"
    seeds: list = field(default_factory=lambda: [0])
    data: DataConfig = field(default_factory=DataConfig)
    backbone: typing.Any = "desk"             # preset name or explicit layer list
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage_a: StageAConfig = field(default_factory=StageAConfig)
    stage_b: StageBConfig = field(default_factory=StageBConfig)
    epochs_scale: float = 0.15
    memory_budget: int = 200
    exemplar_policy: str = "herding"
    bn_init: str = "pretrained"
    ablation: Ablation = field(default_factory=Ablation)
    tp_rule: str | None = None                # None -> derived from ablation.unknown_class
    output_dir: str = "runs"

    @property
    def effective_tp_rule(self) -> str:
        if self.tp_rule is not None:
            return self.tp_rule
        return "unknown" if self.ablation.unknown_class else "maxsoftmax"

    def validate(self) -> "ExperimentConfig":
        errs = []

        def need(cond, path, msg):
            if not cond:
                errs.append(f"{path}: {msg}")

        need(len(self.seeds) >= 1, "seeds", "at least one seed")
        need(self.data.source in ("synthetic", "directory"), "data.source", "synthetic or directory")
        need(self.data.source != "directory" or self.data.root, "data.root", "required for directory source")
        need(self.data.augment in AUGMENT_POLICIES, "data.augment", f"one of {AUGMENT_POLICIES}")
        need(self.data.num_tasks >= 1, "data.num_tasks", "must be >= 1")
        need(self.pretrain.source in ("aux", "task_fraction"), "pretrain.source", "aux or task_fraction")
        need(0 < self.pretrain.task_fraction < 1, "pretrain.task_fraction", "must lie in (0, 1)")
        need(self.pretrain.epochs >= 1, "pretrain.epochs", "must be >= 1")
        need(self.stage_a.epochs >= 1, "stage_a.epochs", "must be >= 1")
        need(self.stage_b.epochs >= 0, "stage_b.epochs", "must be >= 0")
        need(self.stage_a.batch_size >= 1, "stage_a.batch_size", "must be >= 1")
        need(self.stage_a.memory_batch_size >= 1, "stage_a.memory_batch_size", "must be >= 1")
        need(self.stage_b.batch_size >= 1, "stage_b.batch_size", "must be >= 1")
        need(self.epochs_scale > 0, "epochs_scale", "must be positive")
        need(self.memory_budget >= 1, "memory_budget", "must be >= 1")
        need(self.exemplar_policy in ("herding", "random"), "exemplar_policy", "herding or random")
        need(self.bn_init in BN_INIT_CHOICES, "bn_init", f"one of {BN_INIT_CHOICES}")
        need(self.tp_rule in (None, "unknown", "maxsoftmax"), "tp_rule", "unknown or maxsoftmax")
        need(self.ablation.unknown_class or not self.ablation.alignment, "ablation.alignment",
             "alignment needs the unknown class")
        need(self.ablation.unknown_class or self.effective_tp_rule == "maxsoftmax", "tp_rule",
             "without the unknown class the TP rule must be maxsoftmax")
        if self.data.source == "synthetic":
            n = self.data.synthetic.num_classes
            per = self.data.classes_per_task or n // max(self.data.num_tasks, 1)
            need(self.data.order is not None or per * self.data.num_tasks <= n,
                 "data.num_tasks", f"{self.data.num_tasks} tasks x {per} classes exceed {n} classes")
            need(self.memory_budget >= min(per * self.data.num_tasks, n), "memory_budget",
                 f"budget {self.memory_budget} is smaller than the number of classes")
            need(not self.pretrain.enabled or self.pretrain.source != "aux"
                 or self.data.synthetic.pretrain_classes > 0,
                 "data.synthetic.pretrain_classes", "aux pretraining needs auxiliary classes")
        if errs:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errs))
        return self

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def output_root(self) -> Path:
        return Path(os.environ.get("TSBN_RUN_DIR") or self.output_dir)


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or '<root>'}: unknown keys {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        tp = hints[f.name]
        val = data[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, val, sub)
        else:
            kwargs[f.name] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


def scaled_stage(epochs: int, sgd: SGDConfig, scale: float) -> tuple[int, SGDConfig]:
    """Scale an epoch budget and its LR milestones by the same factor."""
    if scale == 1:
        return epochs, sgd
    if epochs == 0:
        return 0, sgd
    n = max(1, round(epochs * scale))
    ms = sorted({round(m * scale) for m in sgd.milestones if 0 < round(m * scale) < n})
    return n, dataclasses.replace(sgd, milestones=tuple(ms))
