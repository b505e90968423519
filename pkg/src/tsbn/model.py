"""Shared frozen conv backbone with per-task BN banks and classification heads.

A layer spec is a list of tuples::

    ("conv", out_channels, kernel, stride, padding)
    ("bn",)
    ("relu",)
    ("maxpool", size, stride, padding)
    ("block", out_channels, stride)      # ResNet basic block
    ("gap",)                             # global average pool, must be last

Every ``bn`` (including the ones inside blocks) is a BN *site*; a BN bank
holds one BatchNormState per site and is bound to the backbone at call time.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import BatchNormState, Parameter


class TaskIdError(KeyError):
    pass


class ConfigError(ValueError):
    pass


DESK_LAYERS = [
    ("conv", 16, 3, 1, 1), ("bn",), ("relu",), ("maxpool", 2, 2, 0),
    ("conv", 32, 3, 1, 1), ("bn",), ("relu",), ("maxpool", 2, 2, 0),
    ("conv", 64, 3, 1, 1), ("bn",), ("relu",), ("maxpool", 2, 2, 0),
    ("conv", 64, 3, 1, 1), ("bn",), ("relu",), ("gap",),
]

RESNET18_LAYERS = [
    ("conv", 64, 7, 2, 3), ("bn",), ("relu",), ("maxpool", 3, 2, 1),
    ("block", 64, 1), ("block", 64, 1),
    ("block", 128, 2), ("block", 128, 1),
    ("block", 256, 2), ("block", 256, 1),
    ("block", 512, 2), ("block", 512, 1),
    ("gap",),
]

LAYER_PRESETS = {"desk": DESK_LAYERS, "resnet18": RESNET18_LAYERS}


def normalize_layer_spec(spec) -> list[tuple]:
    if isinstance(spec, str):
        if spec not in LAYER_PRESETS:
            raise ConfigError(f"unknown backbone preset {spec!r}; known: {sorted(LAYER_PRESETS)}")
        spec = LAYER_PRESETS[spec]
    out = []
    arity = {"conv": 5, "bn": 1, "relu": 1, "maxpool": 4, "block": 3, "gap": 1}
    for item in spec:
        item = tuple(item)
        kind = item[0]
        if kind not in arity or len(item) != arity[kind]:
            raise ConfigError(f"bad layer entry {item!r}")
        out.append((kind,) + tuple(int(v) for v in item[1:]))
    if not out or out[-1][0] != "gap":
        raise ConfigError("layer spec must end with a 'gap' layer")
    return out


# --------------------------------------------------------------------------
# layers


class _Run:
    """Per-call binding of a BN bank and mode; keeps forward state-free."""

    __slots__ = ("bank", "mode", "record")

    def __init__(self, bank, mode, record):
        self.bank, self.mode, self.record = bank, mode, record


class _Conv:
    def __init__(self, in_ch, out_ch, k, stride, pad, rng):
        fan_in = in_ch * k * k
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k)).astype(nn.DTYPE)
        self.param = Parameter(w, trainable=True, decay=True)
        self.stride, self.pad = stride, pad

    def forward(self, x, run):
        keep = run.record and self.param.trainable
        return nn.conv2d_forward(x, self.param, self.stride, self.pad, keep_cols=keep)

    def backward(self, dy, cache, run, need_dx=True):
        dx, dw = nn.conv2d_backward(dy, cache, need_dx)
        if dw is not None:
            self.param.grad += dw
        return dx


class _BN:
    def __init__(self, site):
        self.site = site

    def forward(self, x, run):
        return nn.batchnorm_forward(x, run.bank[self.site], run.mode)

    def backward(self, dy, cache, run, need_dx=True):
        dx, dg, db = nn.batchnorm_backward(dy, cache)
        st = run.bank[self.site]
        if st.gamma.trainable:
            st.gamma.grad += dg
            st.beta.grad += db
        return dx


class _ReLU:
    def forward(self, x, run):
        return nn.relu_forward(x)

    def backward(self, dy, cache, run, need_dx=True):
        return nn.relu_backward(dy, cache)


class _MaxPool:
    def __init__(self, size, stride, pad):
        self.size, self.stride, self.pad = size, stride, pad

    def forward(self, x, run):
        return nn.maxpool_forward(x, self.size, self.stride, self.pad)

    def backward(self, dy, cache, run, need_dx=True):
        return nn.maxpool_backward(dy, cache)


class _GAP:
    def forward(self, x, run):
        return nn.global_avgpool_forward(x)

    def backward(self, dy, cache, run, need_dx=True):
        return nn.global_avgpool_backward(dy, cache)


class _Block:
    """conv-bn-relu-conv-bn plus identity (or 1x1 conv-bn) shortcut, then relu."""

    def __init__(self, in_ch, out_ch, stride, next_site, rng):
        self.main = [_Conv(in_ch, out_ch, 3, stride, 1, rng), _BN(next_site), _ReLU(),
                     _Conv(out_ch, out_ch, 3, 1, 1, rng), _BN(next_site + 1)]
        self.short = []
        if stride != 1 or in_ch != out_ch:
            self.short = [_Conv(in_ch, out_ch, 1, stride, 0, rng), _BN(next_site + 2)]
        self.convs = [self.main[0], self.main[3]] + self.short[:1]
        self.n_sites = 3 if self.short else 2

    def forward(self, x, run):
        h, mc = _seq_forward(self.main, x, run)
        s, sc = _seq_forward(self.short, x, run)
        y, mask = nn.relu_forward(h + s)
        return y, (mc, sc, mask)

    def backward(self, dy, cache, run, need_dx=True):
        mc, sc, mask = cache
        d = nn.relu_backward(dy, mask)
        return _seq_backward(self.main, d, mc, run) + _seq_backward(self.short, d, sc, run)


def _seq_forward(layers, x, run):
    caches = []
    for layer in layers:
        x, c = layer.forward(x, run)
        caches.append(c)
    return x, caches


def _seq_backward(layers, dy, caches, run, first_needs_dx=True):
    for i in range(len(layers) - 1, -1, -1):
        dy = layers[i].backward(dy, caches[i], run, need_dx=(i > 0 or first_needs_dx))
    return dy


class Backbone:
    """The convolutional trunk; conv kernels live here, BN parameters do not."""

    def __init__(self, layer_spec="desk", in_channels=3, seed=0):
        self.layer_spec = normalize_layer_spec(layer_spec)
        self.in_channels = in_channels
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.layers = []
        self.bn_channels: list[int] = []
        ch = in_channels
        for item in self.layer_spec:
            kind = item[0]
            if kind == "conv":
                _, out, k, s, p = item
                self.layers.append(_Conv(ch, out, k, s, p, rng))
                ch = out
            elif kind == "bn":
                self.layers.append(_BN(len(self.bn_channels)))
                self.bn_channels.append(ch)
            elif kind == "relu":
                self.layers.append(_ReLU())
            elif kind == "maxpool":
                self.layers.append(_MaxPool(*item[1:]))
            elif kind == "block":
                _, out, s = item
                blk = _Block(ch, out, s, len(self.bn_channels), rng)
                self.bn_channels += [out] * blk.n_sites
                self.layers.append(blk)
                ch = out
            elif kind == "gap":
                self.layers.append(_GAP())
        self.feature_dim = ch
        self.frozen = False

    @property
    def conv_params(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            if isinstance(layer, _Conv):
                out.append(layer.param)
            elif isinstance(layer, _Block):
                out += [c.param for c in layer.convs]
        return out

    def fresh_bank(self, task_id=-1) -> "BNBank":
        return BNBank(task_id, [BatchNormState.fresh(c) for c in self.bn_channels])

    def freeze(self):
        for p in self.conv_params:
            p.trainable = False
            p.grad = np.zeros_like(p.value)
        self.frozen = True

    def forward(self, x, bank: "BNBank", mode="eval", record=False):
        """Returns ``(features, tape)``; ``tape`` is None unless ``record``."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise nn.ShapeError(f"backbone expects (N, {self.in_channels}, H, W) input, got {x.shape}")
        bank.check_layout(self.bn_channels)
        run = _Run(bank.states, mode, record)
        # float64 passes through untouched so the whole trunk can be gradient-checked
        x = x if x.dtype == np.float64 else x.astype(nn.DTYPE, copy=False)
        feats, caches = _seq_forward(self.layers, x, run)
        return feats, ((run, caches) if record else None)

    def backward(self, dfeat, tape):
        run, caches = tape
        if self.frozen and not any(s.gamma.trainable for s in run.bank):
            return
        dfeat = dfeat if dfeat.dtype == np.float64 else dfeat.astype(nn.DTYPE, copy=False)
        _seq_backward(self.layers, dfeat, caches, run, first_needs_dx=False)


# --------------------------------------------------------------------------
# per-task state


@dataclass(eq=False)
class BNBank:
    task_id: int
    states: list[BatchNormState]

    def check_layout(self, channels):
        if [s.channels for s in self.states] != list(channels):
            raise nn.ShapeError(f"BN bank layout {[s.channels for s in self.states]} != backbone {list(channels)}")

    def params(self) -> list[Parameter]:
        return [p for s in self.states for p in (s.gamma, s.beta)]

    def copy(self, task_id, trainable=True) -> "BNBank":
        return BNBank(task_id, [s.copy(trainable) for s in self.states])

    def set_trainable(self, flag: bool):
        for p in self.params():
            p.trainable = flag


@dataclass(eq=False)
class TaskHead:
    task_id: int
    known_classes: int
    weight: Parameter
    bias: Parameter
    has_unknown: bool = True

    @property
    def unknown_index(self) -> int:
        if not self.has_unknown:
            raise ValueError(f"head {self.task_id} has no unknown class")
        return self.known_classes

    @property
    def out_dim(self) -> int:
        return self.known_classes + int(self.has_unknown)

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def logits(self, feats):
        return nn.linear_forward(feats, self.weight, self.bias)


@dataclass
class LabelMap:
    """Bijection between (task, local class) and global class ids."""

    task_classes: list[list[int]] = field(default_factory=list)

    def add(self, class_ids) -> int:
        class_ids = [int(c) for c in class_ids]
        seen = set(self.all_classes())
        if len(set(class_ids)) != len(class_ids) or seen.intersection(class_ids):
            raise ConfigError(f"task classes {class_ids} overlap with existing classes")
        self.task_classes.append(class_ids)
        return len(self.task_classes) - 1

    def all_classes(self) -> list[int]:
        return [c for group in self.task_classes for c in group]

    def to_global(self, task: int, local: int) -> int:
        return self.task_classes[task][local]

    def to_local(self, global_id: int) -> tuple[int, int]:
        for t, group in enumerate(self.task_classes):
            if global_id in group:
                return t, group.index(global_id)
        raise KeyError(f"class {global_id} is not registered")

    def lookup_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``global -> task`` and ``global -> local`` tables (-1 for unknown ids)."""
        size = max(self.all_classes(), default=-1) + 1
        task = np.full(size, -1, np.int64)
        local = np.full(size, -1, np.int64)
        for t, group in enumerate(self.task_classes):
            for i, c in enumerate(group):
                task[c], local[c] = t, i
        return task, local


# --------------------------------------------------------------------------
# the incremental model

BN_INIT_CHOICES = ("pretrained", "previous", "fresh")


class IncrementalModel:
    """One frozen backbone plus T (BN bank, head) pairs, i.e. T sub-models.

    ``template`` holds the pretrained backbone's BN states; new banks start
    as copies of it (``bn_init="pretrained"``), of the latest bank
    (``"previous"``) or from gamma=1, beta=0 (``"fresh"``). With
    ``shared_bn`` every task binds the frozen template instead.
    """

    def __init__(self, backbone: Backbone, template: BNBank | None = None, *,
                 bn_init="pretrained", shared_bn=False, unknown_class=True, seed=0):
        if bn_init not in BN_INIT_CHOICES:
            raise ConfigError(f"bn_init must be one of {BN_INIT_CHOICES}, got {bn_init!r}")
        self.backbone = backbone
        self.template = template if template is not None else backbone.fresh_bank()
        self.template.set_trainable(False)
        self.bn_init = bn_init
        self.shared_bn = shared_bn
        self.unknown_class = unknown_class
        self.seed = seed
        self.banks: list[BNBank] = []
        self.heads: list[TaskHead] = []
        self.label_map = LabelMap()

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def add_task(self, num_classes: int, class_ids=None) -> int:
        if not self.backbone.frozen:
            raise ConfigError("freeze the backbone before adding tasks")
        if num_classes < 1:
            raise ConfigError(f"a task needs at least one class, got {num_classes}")
        if class_ids is None:
            start = max(self.label_map.all_classes(), default=-1) + 1
            class_ids = range(start, start + num_classes)
        class_ids = list(class_ids)
        if len(class_ids) != num_classes:
            raise ConfigError(f"{num_classes} classes declared but {len(class_ids)} ids given")
        t = self.label_map.add(class_ids)
        if self.shared_bn:
            bank = self.template
        elif self.bn_init == "previous" and self.banks:
            bank = self.banks[-1].copy(t)
        elif self.bn_init == "fresh":
            bank = self.backbone.fresh_bank(t)
        else:
            bank = self.template.copy(t)
        self.banks.append(bank)
        # head init depends only on (seed, task) so resumed runs match
        rng = np.random.default_rng([self.seed, 7919, t])
        d = self.feature_dim
        out = num_classes + int(self.unknown_class)
        bound = 1.0 / math.sqrt(d)
        w = rng.uniform(-bound, bound, size=(out, d)).astype(nn.DTYPE)
        self.heads.append(TaskHead(t, num_classes, Parameter(w, decay=True),
                                   Parameter(np.zeros(out, nn.DTYPE)), self.unknown_class))
        return t

    def _check_task(self, t):
        if not 0 <= t < self.num_tasks:
            raise TaskIdError(f"task {t} is not registered (have {self.num_tasks})")

    def bn_mode(self, mode: str) -> str:
        # the shared template is frozen, including its running statistics
        return "eval" if self.shared_bn else mode

    def features(self, x, t, mode="eval", record=False):
        self._check_task(t)
        return self.backbone.forward(x, self.banks[t], self.bn_mode(mode), record)

    def task_params(self, t) -> list[Parameter]:
        """Stage-A trainable set: the task's BN bank (unless shared) and head."""
        self._check_task(t)
        bank = [] if self.shared_bn else self.banks[t].params()
        return bank + self.heads[t].params()

    def head_params(self, upto=None) -> list[Parameter]:
        heads = self.heads if upto is None else self.heads[:upto]
        return [p for h in heads for p in h.params()]

    def all_bank_states(self) -> list[BNBank]:
        out, seen = [], set()
        for b in [self.template] + self.banks:
            if id(b) not in seen:
                seen.add(id(b))
                out.append(b)
        return out


def forward_features(model: IncrementalModel, batch, t: int, mode="eval"):
    return model.features(batch, t, mode)[0]


def forward_logits(model: IncrementalModel, batch, t: int, mode="eval"):
    feats = forward_features(model, batch, t, mode)
    return model.heads[t].logits(feats)[0]


def add_task(model: IncrementalModel, num_classes: int, class_ids=None) -> int:
    return model.add_task(num_classes, class_ids)


# --------------------------------------------------------------------------
# accounting and hashing


def task_param_count(bn_channels, feature_dim, num_classes, unknown_class=True, shared_bn=False) -> int:
    """Analytic per-task growth: gamma+beta per BN channel plus the head."""
    out = num_classes + int(unknown_class)
    bn = 0 if shared_bn else 2 * sum(bn_channels)
    return bn + out * feature_dim + out


def parameter_report(model: IncrementalModel) -> dict:
    frozen = sum(p.size for p in model.backbone.conv_params)
    per_task = []
    for t, head in enumerate(model.heads):
        bank = model.banks[t]
        bank_size = 0 if bank is model.template else sum(p.size for p in bank.params())
        per_task.append(bank_size + head.weight.size + head.bias.size)
    template = sum(p.size for p in model.template.params())
    trainable = sum(per_task)
    return {
        "frozen": frozen,
        "template_bn": template,
        "per_task": per_task,
        "trainable": trainable,
        "total": frozen + template + trainable,
    }


def hash_arrays(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def backbone_hash(model: IncrementalModel) -> str:
    return hash_arrays(p.value for p in model.backbone.conv_params)


def bank_hash(bank: BNBank) -> str:
    return hash_arrays(a for s in bank.states
                       for a in (s.gamma.value, s.beta.value, s.running_mean, s.running_var))


def head_hash(head: TaskHead) -> str:
    return hash_arrays([head.weight.value, head.bias.value])
