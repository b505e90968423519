"""Backbone pretraining, the two per-task training stages and the incremental driver."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import read_checkpoint, save_checkpoint
from .config import ExperimentConfig, StageAConfig, StageBConfig, dump_config, scaled_stage
from .data import Benchmark, Dataset, TaskSchedule, augment, load_image_directory, normalize, \
    split_tasks, synthesize
from .inference import head_logits, predict_batch, write_predictions
from .memory import ExemplarMemory, update_memory
from .metrics import MetricLog, PhaseRecord, class_recalls, decomposition_audit
from .model import Backbone, BNBank, ConfigError, IncrementalModel, backbone_hash, bank_hash, \
    head_hash, parameter_report

log = logging.getLogger(__name__)

EPOCH_LOG_SCHEMA = "tsbn-epochs/1"
_STREAM = {"pretrain": 1, "stage_a": 2, "memory": 3, "stage_b": 4}


def _rng(seed, phase, stage):
    # independent stream per (seed, phase, stage) so a resumed run replays exactly
    return np.random.default_rng([seed, phase, _STREAM[stage]])


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    backbone: Backbone
    template: BNBank
    train_accuracy: float
    losses: list[float]


def pretrain_backbone(dataset: Dataset | None, layer_spec="desk", epochs=8, batch_size=64,
                      sgd: nn.SGDConfig | None = None, seed=0, mean=(0.5,) * 3, std=(0.25,) * 3,
                      augment_policy="none", in_channels=None) -> PretrainResult:
    """Train backbone + throwaway linear head with plain CE, then freeze the convs.

    With ``dataset=None`` the backbone stays at its random initialisation and
    the BN template is gamma=1, beta=0 with unit running statistics.
    """
    if dataset is not None and len(dataset) == 0:
        raise ConfigError("pretrain split is empty")
    ch = in_channels if in_channels is not None else (dataset.images.shape[1] if dataset is not None else 3)
    backbone = Backbone(layer_spec, ch, seed)
    template = backbone.fresh_bank(-1)
    losses, acc = [], float("nan")
    if dataset is not None:
        sgd = sgd or nn.SGDConfig(0.05, 0.9, 5e-4, (), 0.1)
        rng = _rng(seed, 0, "pretrain")
        k = dataset.num_classes
        d = backbone.feature_dim
        bound = 1.0 / np.sqrt(d)
        w = nn.Parameter(rng.uniform(-bound, bound, (k, d)).astype(nn.DTYPE), decay=True)
        b = nn.Parameter(np.zeros(k, nn.DTYPE))
        opt = nn.SGD(backbone.conv_params + template.params() + [w, b], sgd)
        for epoch in range(epochs):
            total, count = 0.0, 0
            for idx in _batches(len(dataset), batch_size, rng):
                if len(idx) < 2:
                    continue
                x = augment(dataset.images[idx], augment_policy, mean, std, rng)
                feats, tape = backbone.forward(x, template, "train", record=True)
                logits, lc = nn.linear_forward(feats, w, b)
                loss, dlog = nn.softmax_cross_entropy(logits, dataset.labels[idx])
                opt.zero_grad()
                dfeat, dw, db = nn.linear_backward(dlog, lc)
                w.grad += dw
                b.grad += db
                backbone.backward(dfeat, tape)
                opt.step(epoch)
                total += loss * len(idx)
                count += len(idx)
            losses.append(total / max(count, 1))
        correct = 0
        for s in range(0, len(dataset), 256):
            x = normalize(dataset.images[s:s + 256], mean, std)
            feats, _ = backbone.forward(x, template, "eval")
            correct += int((np.argmax(nn.linear_forward(feats, w, b)[0], axis=1) == dataset.labels[s:s + 256]).sum())
        acc = correct / len(dataset)
    backbone.freeze()
    template.set_trainable(False)
    return PretrainResult(backbone, template, acc, losses)


# --------------------------------------------------------------------------
# stage A: new task BN bank + head, unknown class fed by replayed memory


def _ce_terms(logits, targets):
    """Mean CE and its gradient; empty batches contribute exactly zero."""
    if len(targets) == 0:
        return 0.0, np.zeros_like(logits)
    return nn.softmax_cross_entropy(logits, targets)


def stage_a_objective(new_logits, new_labels, mem_logits):
    """Loss and logit gradients of the two-part unknown-class objective."""
    new_labels = np.asarray(new_labels)
    unknown = new_logits.shape[1] - 1
    if len(new_labels) and new_labels.max() >= unknown:
        raise ValueError(f"new-task label {int(new_labels.max())} collides with the unknown index {unknown}")
    l_new, g_new = _ce_terms(new_logits, new_labels)
    mem_targets = np.full(len(mem_logits), unknown, dtype=np.int64)
    l_mem, g_mem = _ce_terms(mem_logits, mem_targets)
    return l_new + l_mem, g_new, g_mem


def stage_a_loss(new_logits, new_labels, mem_logits) -> float:
    """Mean CE of new samples on their labels + mean CE of memory samples on "unknown"."""
    return stage_a_objective(new_logits, new_labels, mem_logits)[0]


def _memory_cycle(memory_idx, batch_size, rng):
    """Endless shuffled passes over the replay indices (cycles when D_t is longer)."""
    if len(memory_idx) == 0:
        while True:
            yield memory_idx
    while True:
        for sel in _batches(len(memory_idx), batch_size, rng):
            yield memory_idx[sel]


def train_stage_a(model: IncrementalModel, t: int, images, local_labels, memory_images, cfg: StageAConfig,
                  rng, mean, std, augment_policy="none") -> list[float]:
    """Optimise only the task's BN bank and head; returns per-epoch mean loss.

    ``memory_images`` are raw replay samples from earlier tasks; they share the
    forward pass (and therefore the train-mode BN statistics) with the new
    batch and are pushed towards the unknown output.
    """
    if len(images) == 0:
        raise ConfigError(f"task {t} has no training data")
    head = model.heads[t]
    use_memory = head.has_unknown and len(memory_images) > 0
    opt = nn.SGD(model.task_params(t), cfg.sgd)
    mem_stream = _memory_cycle(np.arange(len(memory_images) if use_memory else 0), cfg.memory_batch_size, rng)
    losses = []
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for idx in _batches(len(images), cfg.batch_size, rng):
            x_new = augment(images[idx], augment_policy, mean, std, rng)
            midx = next(mem_stream)
            if len(idx) + len(midx) < 2:
                continue
            x = x_new
            if len(midx):
                x = np.concatenate([x_new, augment(memory_images[midx], augment_policy, mean, std, rng)])
            feats, tape = model.features(x, t, "train", record=True)
            logits, lc = head.logits(feats)
            na = len(idx)
            if head.has_unknown:
                loss, g_new, g_mem = stage_a_objective(logits[:na], local_labels[idx], logits[na:])
                dlog = np.concatenate([g_new, g_mem])
            else:
                loss, dlog = nn.softmax_cross_entropy(logits, local_labels[idx])
            opt.zero_grad()
            dfeat, dw, db = nn.linear_backward(dlog, lc)
            head.weight.grad += dw
            head.bias.grad += db
            model.backbone.backward(dfeat, tape)
            opt.step(epoch)
            total += loss
            steps += 1
        losses.append(total / max(steps, 1))
    return losses


# --------------------------------------------------------------------------
# stage B: align the unknown output of every head on the full memory


def alignment_objective(per_head_logits, sample_task, sample_local, known_counts):
    """Loss and per-head logit gradients of the alignment objective.

    Head j scores its own samples against their local label and every other
    sample against its unknown index; the double sum is divided by
    ``batch * num_heads``.
    """
    t = len(per_head_logits)
    if t == 0:
        raise ValueError("alignment needs at least one head")
    n = len(sample_task)
    total = 0.0
    grads = []
    for j, (lg, k) in enumerate(zip(per_head_logits, known_counts)):
        target = np.where(sample_task == j, sample_local, k).astype(np.int64)
        loss, g = nn.softmax_cross_entropy(lg, target)    # mean over batch
        total += loss
        grads.append(g / t)
    return (total / t if n else 0.0), grads


def stage_b_loss(model: IncrementalModel, images, global_labels, t: int | None = None) -> float:
    """Alignment loss of a (normalised) memory batch over heads ``0..t-1``."""
    t = model.num_tasks if t is None else t
    if t < 1:
        raise ValueError("alignment needs at least one trained task")
    task_of, local_of = model.label_map.lookup_arrays()
    labels = np.asarray(global_labels)
    logits = []
    for j in range(t):
        feats, _ = model.features(images, j, "eval")
        logits.append(model.heads[j].logits(feats)[0])
    return alignment_objective(logits, task_of[labels], local_of[labels],
                               [h.known_classes for h in model.heads[:t]])[0]


def train_stage_b(model: IncrementalModel, memory_images, memory_labels, cfg: StageBConfig, rng) -> list[float]:
    """Head-only fine-tuning; BN stays in eval mode so features are fixed and cached."""
    if cfg.epochs == 0:
        return []
    if len(memory_images) == 0:
        log.warning("alignment skipped: memory is empty")
        return []
    t = model.num_tasks
    task_of, local_of = model.label_map.lookup_arrays()
    s_task, s_local = task_of[memory_labels], local_of[memory_labels]
    feats = []
    for j in range(t):
        chunks = [model.features(memory_images[s:s + 256], j, "eval")[0] for s in range(0, len(memory_images), 256)]
        feats.append(np.concatenate(chunks))
    heads = model.heads[:t]
    known = [h.known_classes for h in heads]
    opt = nn.SGD(model.head_params(t), cfg.sgd)
    losses = []
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for idx in _batches(len(memory_images), cfg.batch_size, rng):
            caches = [h.logits(f[idx]) for h, f in zip(heads, feats)]
            loss, grads = alignment_objective([c[0] for c in caches], s_task[idx], s_local[idx], known)
            opt.zero_grad()
            for h, (_, lc), g in zip(heads, caches, grads):
                _, dw, db = nn.linear_backward(g, lc)
                h.weight.grad += dw
                h.bias.grad += db
            opt.step(epoch)
            total += loss
            steps += 1
        losses.append(total / max(steps, 1))
    return losses


# --------------------------------------------------------------------------
# evaluation


def evaluate(model: IncrementalModel, test: Dataset, classes, mean, std, tp_rule="unknown", phase=0):
    """Score the model on the test samples of ``classes``; returns (PhaseRecord, predictions, indices)."""
    idx = test.indices_of(classes)
    x = normalize(test.images[idx], mean, std)
    labels = test.labels[idx]
    preds = predict_batch(model, x, tp_rule, head_logits(model, x))
    recalls = class_recalls(preds.global_, labels, classes)
    dec = decomposition_audit(preds.task, preds.global_, labels, model.label_map)
    tp, wp, overall = dec.as_floats()
    rep = parameter_report(model)
    rec = PhaseRecord(phase=phase, mcr=sum(recalls.values()) / len(recalls), tp_acc=tp, wp_given_tp=wp,
                      overall_acc=overall, trainable_params=rep["trainable"], total_params=rep["total"],
                      class_recall=recalls, task_classes=[list(g) for g in model.label_map.task_classes],
                      tp_counts=np.bincount(preds.task, minlength=model.num_tasks).tolist())
    return rec, preds, idx


# --------------------------------------------------------------------------
# driver


@dataclass
class RunResult:
    log: MetricLog
    model: IncrementalModel
    memory: ExemplarMemory
    schedule: TaskSchedule
    pretrain_accuracy: float
    audit: list[dict] = field(default_factory=list)
    epoch_records: list[tuple] = field(default_factory=list)


def build_benchmark(cfg: ExperimentConfig) -> Benchmark:
    if cfg.data.source == "synthetic":
        return synthesize(cfg.data.synthetic)
    return load_image_directory(cfg.data.root, cfg.data.image_size)


def _split_task_fraction(bench: Benchmark, schedule: TaskSchedule, fraction, seed):
    """Carve a pretrain split out of the first task's training samples."""
    rng = np.random.default_rng([seed, 17])
    train = bench.train
    pick = []
    for c in schedule.groups[0]:
        idx = np.flatnonzero(train.labels == c)
        take = max(1, int(round(fraction * len(idx))))
        if take >= len(idx):
            raise ConfigError(f"pretrain.task_fraction leaves class {c} without training samples")
        pick.append(rng.permutation(idx)[:take])
    pick = np.sort(np.concatenate(pick))
    keep = np.setdiff1d(np.arange(len(train)), pick)
    classes = schedule.groups[0]
    remap = {c: i for i, c in enumerate(classes)}
    pre = Dataset(train.images[pick], [remap[c] for c in train.labels[pick]],
                  [train.class_names[c] for c in classes], "pretrain", train.ids[pick])
    rest = Dataset(train.images[keep], train.labels[keep], train.class_names, "train", train.ids[keep])
    return Benchmark(rest, bench.test, pre)


def prepare_data(cfg: ExperimentConfig, seed: int, benchmark: Benchmark | None = None):
    """Benchmark and task schedule of one seed; carves the pretrain split if configured."""
    bench = benchmark if benchmark is not None else build_benchmark(cfg)
    train = bench.train
    schedule = split_tasks(train.num_classes, cfg.data.num_tasks, cfg.data.classes_per_task, seed,
                           cfg.data.order, train.class_names, cfg.data.shuffle_classes)
    if cfg.pretrain.enabled and cfg.pretrain.source == "task_fraction":
        bench = _split_task_fraction(bench, schedule, cfg.pretrain.task_fraction, seed)
    return bench, schedule


def pretrain_for(cfg: ExperimentConfig, bench: Benchmark, seed: int) -> PretrainResult:
    pre_data = bench.pretrain if cfg.pretrain.enabled else None
    if cfg.pretrain.enabled and pre_data is None:
        raise ConfigError("pretraining is enabled but the benchmark has no pretrain split")
    return pretrain_backbone(pre_data, cfg.backbone, cfg.pretrain.epochs, cfg.pretrain.batch_size,
                             cfg.pretrain.sgd, seed, cfg.data.mean, cfg.data.std, cfg.data.augment,
                             bench.train.images.shape[1])


# rows of the ablation table, in order: (label, task_specific_bn, unknown_class, alignment)
ABLATION_VARIANTS = [
    ("tsbn", True, False, False),
    ("tsbn+unknown", True, True, False),
    ("unknown+alignment", False, True, True),
    ("full", True, True, True),
]


def ablation_configs(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """The four ablation variants of ``cfg``; only the flags and derived TP rule differ."""
    out = []
    for label, tsbn, unknown, align in ABLATION_VARIANTS:
        abl = dataclasses.replace(cfg.ablation, task_specific_bn=tsbn, unknown_class=unknown, alignment=align)
        out.append((label, dataclasses.replace(cfg, name=f"{cfg.name}-{label}", ablation=abl, tp_rule=None)))
    return out


def _snapshot(model):
    return {"phi": backbone_hash(model),
            "banks": [bank_hash(b) for b in model.banks],
            "heads": [head_hash(h) for h in model.heads]}


def run_incremental(cfg: ExperimentConfig, seed: int | None = None, run_dir=None, resume=False,
                    benchmark: Benchmark | None = None, pretrained: PretrainResult | None = None) -> RunResult:
    """Pretrain (or resume), then for each task: add -> stage A -> memory -> stage B -> evaluate.

    ``pretrained`` lets several runs on the same seed share one pretraining
    pass; it is deep-copied, so the caller's backbone is never touched.
    """
    seed = cfg.seeds[0] if seed is None else seed
    run_dir = Path(run_dir) if run_dir is not None else None
    mean, std = cfg.data.mean, cfg.data.std
    bench, schedule = prepare_data(cfg, seed, benchmark)
    train, test = bench.train, bench.test
    n_classes = sum(len(g) for g in schedule.groups)
    if cfg.memory_budget < n_classes:
        raise ConfigError(f"memory_budget {cfg.memory_budget} is smaller than the {n_classes} scheduled classes")
    a_epochs, a_sgd = scaled_stage(cfg.stage_a.epochs, cfg.stage_a.sgd, cfg.epochs_scale)
    b_epochs, b_sgd = scaled_stage(cfg.stage_b.epochs, cfg.stage_b.sgd, cfg.epochs_scale)
    cfg_a = StageAConfig(a_epochs, cfg.stage_a.batch_size, cfg.stage_a.memory_batch_size, a_sgd)
    cfg_b = StageBConfig(b_epochs if cfg.ablation.alignment else 0, cfg.stage_b.batch_size, b_sgd)
    tp_rule = cfg.effective_tp_rule

    ckpt_dir = run_dir / "checkpoints" if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, run_dir / "config.yaml")

    metric_log = MetricLog(schedule.num_tasks)
    memory = ExemplarMemory(cfg.memory_budget, policy=cfg.exemplar_policy)
    audit: list[dict] = []
    epoch_records: list[tuple] = []
    start_phase = 1
    pre_acc = float("nan")
    model = None

    if resume and ckpt_dir is not None and ckpt_dir.is_dir():
        done = sorted(int(p.stem.split("_")[1]) for p in ckpt_dir.glob("phase_*.ckpt"))
        source = ckpt_dir / f"phase_{done[-1]}.ckpt" if done else ckpt_dir / "pretrain.ckpt"
        if source.exists():
            model, extra = read_checkpoint(source)
            if extra.get("seed") != seed or extra.get("schedule") != schedule.groups:
                raise ConfigError(f"{source} was written by a different seed or schedule")
            pre_acc = extra.get("pretrain_accuracy", float("nan"))
            audit = extra.get("audit", [])
            epoch_records = [tuple(r) for r in extra.get("epochs", [])]
            if "memory" in extra:
                memory = ExemplarMemory.from_dict(extra["memory"])
            if "metrics" in extra:
                metric_log = MetricLog.from_json(extra["metrics"])
            start_phase = (done[-1] + 1) if done else 1
            log.info("resuming from %s at phase %d", source, start_phase)

    def extra_payload():
        return {"seed": seed, "schedule": schedule.groups, "pretrain_accuracy": pre_acc, "audit": audit,
                "epochs": [list(r) for r in epoch_records], "memory": memory.to_dict(),
                "metrics": metric_log.to_json(), "config_digest": cfg.digest()}

    if model is None:
        pre = copy.deepcopy(pretrained) if pretrained is not None else pretrain_for(cfg, bench, seed)
        pre_acc = pre.train_accuracy
        for e, l in enumerate(pre.losses):
            epoch_records.append((0, "pretrain", e, l))
        model = IncrementalModel(pre.backbone, pre.template, bn_init=cfg.bn_init,
                                 shared_bn=not cfg.ablation.task_specific_bn,
                                 unknown_class=cfg.ablation.unknown_class, seed=seed)
        audit.append({"phase": 0, "stage": "freeze", **_snapshot(model)})
        if ckpt_dir is not None:
            save_checkpoint(model, ckpt_dir / "pretrain.ckpt", extra_payload())

    last_preds = None
    for phase in range(start_phase, schedule.num_tasks + 1):
        classes = schedule.groups[phase - 1]
        t = model.add_task(len(classes), classes)
        _, local_of = model.label_map.lookup_arrays()
        idx = train.indices_of(classes)
        mem_idx, mem_cls, _ = memory.entries()

        before = _snapshot(model)
        losses = train_stage_a(model, t, train.images[idx], local_of[train.labels[idx]],
                               train.images[mem_idx], cfg_a, _rng(seed, phase, "stage_a"),
                               mean, std, cfg.data.augment)
        audit.append({"phase": phase, "stage": "stage_a", "before": before, "after": _snapshot(model)})
        epoch_records += [(phase, "stage_a", e, l) for e, l in enumerate(losses)]

        feats = {}
        for c in classes:
            cidx = np.flatnonzero(train.labels == c)
            x = normalize(train.images[cidx], mean, std)
            f = np.concatenate([model.features(x[s:s + 256], t, "eval")[0] for s in range(0, len(x), 256)])
            feats[c] = (cidx, f)
        update_memory(memory, feats, t, _rng(seed, phase, "memory"))

        mem_idx, mem_cls, _ = memory.entries()
        before = _snapshot(model)
        b_losses = train_stage_b(model, normalize(train.images[mem_idx], mean, std), mem_cls, cfg_b,
                                 _rng(seed, phase, "stage_b")) if model.unknown_class else []
        audit.append({"phase": phase, "stage": "stage_b", "before": before, "after": _snapshot(model)})
        epoch_records += [(phase, "stage_b", e, l) for e, l in enumerate(b_losses)]

        seen = [c for g in schedule.groups[:phase] for c in g]
        rec, last_preds, eval_idx = evaluate(model, test, seen, mean, std, tp_rule, phase)
        metric_log.append(rec)
        log.info("phase %d: MCR %.4f TP %.4f", phase, rec.mcr, rec.tp_acc)
        if ckpt_dir is not None:
            save_checkpoint(model, ckpt_dir / f"phase_{phase}.ckpt", extra_payload())
            if last_preds is not None:
                task_of, _ = model.label_map.lookup_arrays()
                labels = test.labels[eval_idx]
                write_predictions(run_dir / "predictions.csv", last_preds, labels, task_of[labels],
                                  test.ids[eval_idx])

    result = RunResult(metric_log, model, memory, schedule, pre_acc, audit, epoch_records)
    if run_dir is not None:
        write_run_outputs(result, run_dir)
    return result


def write_run_outputs(result: RunResult, run_dir) -> None:
    run_dir = Path(run_dir)
    result.log.to_csv(run_dir / "metrics.csv")
    result.log.to_json(run_dir / "metrics.json")
    with open(run_dir / "epochs.csv", "w", newline="") as fh:
        fh.write(f"# schema: {EPOCH_LOG_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "stage", "epoch", "loss"])
        for phase, stage, epoch, loss in result.epoch_records:
            w.writerow([phase, stage, epoch, repr(float(loss))])
