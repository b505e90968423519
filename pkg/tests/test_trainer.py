import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsbn import nn
from tsbn.config import StageAConfig, StageBConfig
from tsbn.data import normalize, synthesize
from tsbn.inference import unknown_probs_from_logits
from tsbn.model import ConfigError, IncrementalModel, backbone_hash, bank_hash, head_hash
from tsbn.trainer import (ABLATION_VARIANTS, ablation_configs, alignment_objective, pretrain_backbone, run_incremental,
                          stage_a_loss, stage_a_objective, stage_b_loss, train_stage_a, train_stage_b)

from helpers import tiny_config, tiny_spec


def _ce64(logits, target):
    z = np.asarray(logits, np.float64)
    return math.log(np.exp(z - z.max()).sum()) + z.max() - z[target]


def stage_a_oracle(new_logits, new_labels, mem_logits):
    unknown = new_logits.shape[1] - 1
    a = sum(_ce64(l, y) for l, y in zip(new_logits, new_labels)) / len(new_labels)
    b = sum(_ce64(l, unknown) for l in mem_logits) / len(mem_logits) if len(mem_logits) else 0.0
    return a + b


def alignment_oracle(per_head, sample_task, sample_local, known):
    total = 0.0
    for j, lg in enumerate(per_head):
        for i in range(len(sample_task)):
            target = sample_local[i] if sample_task[i] == j else known[j]
            total += _ce64(lg[i], target)
    return total / (len(sample_task) * len(per_head))


# --------------------------------------------------------------------------
# unknown-class objective


def test_stage_a_loss_perfect_predictions():
    new = np.array([[30.0, 0, 0], [0, 30.0, 0]])
    mem = np.array([[0, 0, 30.0]])
    assert stage_a_loss(new, [0, 1], mem) < 1e-6


def test_stage_a_loss_uniform_is_two_log3():
    assert stage_a_loss(np.zeros((4, 3)), [0, 1, 0, 1], np.zeros((5, 3))) == pytest.approx(2 * math.log(3))


def test_stage_a_loss_empty_memory_is_plain_ce():
    rng = np.random.default_rng(0)
    new = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)
    assert stage_a_loss(new, y, np.zeros((0, 4))) == nn.softmax_cross_entropy(new, y)[0]


def test_stage_a_label_collision():
    with pytest.raises(ValueError):
        stage_a_loss(np.zeros((2, 3)), [0, 2], np.zeros((1, 3)))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(0, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_stage_a_loss_matches_oracle(n_new, n_mem, c, seed):
    rng = np.random.default_rng(seed)
    new = rng.standard_normal((n_new, c + 1)) * 4
    mem = rng.standard_normal((n_mem, c + 1)) * 4
    y = rng.integers(0, c, n_new)
    got, want = stage_a_loss(new, y, mem), stage_a_oracle(new, y, mem)
    assert abs(got - want) <= 1e-6 * abs(want)


def test_stage_a_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    new, mem = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
    y = np.array([0, 2, 1])
    _, g_new, g_mem = stage_a_objective(new, y, mem)
    for arr, g in ((new, g_new), (mem, g_mem)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + 1e-6
            up = stage_a_loss(new, y, mem)
            arr[idx] = old - 1e-6
            down = stage_a_loss(new, y, mem)
            arr[idx] = old
            assert g[idx] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-8)


# --------------------------------------------------------------------------
# alignment objective


def test_alignment_single_task_is_plain_ce():
    rng = np.random.default_rng(0)
    lg = rng.standard_normal((5, 3))
    loc = rng.integers(0, 2, 5)
    loss, _ = alignment_objective([lg], np.zeros(5, int), loc, [2])
    assert loss == pytest.approx(nn.softmax_cross_entropy(lg, loc)[0], rel=1e-12)


def test_alignment_uniform_two_heads_is_log3():
    loss, _ = alignment_objective([np.zeros((1, 3)), np.zeros((1, 3))], np.array([1]), np.array([0]), [2, 2])
    assert loss == pytest.approx(math.log(3))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_alignment_matches_double_sum(known, n, seed):
    rng = np.random.default_rng(seed)
    heads = [rng.standard_normal((n, k + 1)) * 3 for k in known]
    task = rng.integers(0, len(known), n)
    local = np.array([rng.integers(0, known[t]) for t in task])
    got, _ = alignment_objective(heads, task, local, known)
    want = alignment_oracle(heads, task, local, known)
    assert abs(got - want) <= 1e-6 * abs(want)


def test_alignment_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    heads = [rng.standard_normal((3, 3)), rng.standard_normal((3, 4))]
    task, local = np.array([0, 1, 1]), np.array([1, 2, 0])
    _, grads = alignment_objective(heads, task, local, [2, 3])
    for h, g in zip(heads, grads):
        for idx in np.ndindex(h.shape):
            old = h[idx]
            h[idx] = old + 1e-6
            up = alignment_objective(heads, task, local, [2, 3])[0]
            h[idx] = old - 1e-6
            down = alignment_objective(heads, task, local, [2, 3])[0]
            h[idx] = old
            assert g[idx] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-8)


def test_stage_b_loss_needs_a_task():
    pre = pretrain_backbone(None, "desk", seed=0)
    m = IncrementalModel(pre.backbone, pre.template)
    with pytest.raises(ValueError):
        stage_b_loss(m, np.zeros((1, 3, 32, 32), np.float32), [0])


def test_stage_b_loss_matches_model_oracle():
    pre = pretrain_backbone(None, "desk", seed=0)
    m = IncrementalModel(pre.backbone, pre.template, seed=0)
    m.add_task(2, [0, 1])
    m.add_task(2, [2, 3])
    x = np.random.default_rng(0).random((4, 3, 32, 32), dtype=np.float32)
    labels = np.array([0, 3, 2, 1])
    heads = [m.heads[j].logits(m.features(x, j, "eval")[0])[0] for j in range(2)]
    want = alignment_oracle(heads, np.array([0, 1, 1, 0]), np.array([0, 1, 0, 1]), [2, 2])
    assert stage_b_loss(m, x, labels) == pytest.approx(want, rel=1e-6)


# --------------------------------------------------------------------------
# training stages on tiny data


@pytest.fixture(scope="module")
def tiny():
    bench = synthesize(tiny_spec())
    pre = pretrain_backbone(bench.pretrain, "desk", epochs=2, batch_size=8, seed=0)
    return bench, pre


def _two_task_model(tiny):
    bench, pre = tiny
    m = IncrementalModel(pre.backbone, pre.template.copy(-1, trainable=False), seed=0)
    m.add_task(2, [0, 1])
    m.add_task(2, [2, 3])
    return m


def test_pretrain_without_data_is_random_frozen():
    res = pretrain_backbone(None, "desk", seed=1)
    assert res.backbone.frozen and math.isnan(res.train_accuracy)
    assert not any(p.trainable for p in res.template.params())
    with pytest.raises(ConfigError):
        pretrain_backbone(synthesize(tiny_spec()).train.__class__(np.zeros((0, 3, 16, 16)), [], ["a"], "p"))


def test_stage_a_touches_only_its_own_task(tiny):
    bench, _ = tiny
    m = _two_task_model(tiny)
    x = normalize(bench.train.images, [0.5] * 3, [0.25] * 3)
    before = (backbone_hash(m), bank_hash(m.banks[0]), head_hash(m.heads[0]), bank_hash(m.template),
              bank_hash(m.banks[1]))
    idx = bench.train.indices_of([2, 3])
    train_stage_a(m, 1, bench.train.images[idx], bench.train.labels[idx] - 2, bench.train.images[:6],
                  StageAConfig(2, 8, 4, nn.SGDConfig(0.01)), np.random.default_rng(0), [0.5] * 3, [0.25] * 3)
    after = (backbone_hash(m), bank_hash(m.banks[0]), head_hash(m.heads[0]), bank_hash(m.template),
             bank_hash(m.banks[1]))
    assert after[:4] == before[:4]
    assert after[4] != before[4]


def test_stage_a_empty_data(tiny):
    m = _two_task_model(tiny)
    with pytest.raises(ConfigError):
        train_stage_a(m, 0, np.zeros((0, 3, 16, 16), np.float32), np.zeros(0, int), np.zeros((0, 3, 16, 16)),
                      StageAConfig(1, 8, 4, nn.SGDConfig()), np.random.default_rng(0), [0.5] * 3, [0.25] * 3)


def test_stage_b_only_moves_heads(tiny):
    bench, _ = tiny
    m = _two_task_model(tiny)
    idx = np.concatenate([bench.train.indices_of([c])[:3] for c in range(4)])
    x = normalize(bench.train.images[idx], [0.5] * 3, [0.25] * 3)
    frozen = (backbone_hash(m), [bank_hash(b) for b in m.banks])
    heads = [head_hash(h) for h in m.heads]
    losses = train_stage_b(m, x, bench.train.labels[idx], StageBConfig(3, 4, nn.SGDConfig(0.05)),
                           np.random.default_rng(0))
    assert len(losses) == 3
    assert (backbone_hash(m), [bank_hash(b) for b in m.banks]) == frozen
    assert all(a != b for a, b in zip(heads, [head_hash(h) for h in m.heads]))


def test_stage_b_zero_epochs_and_empty_memory(tiny, caplog):
    m = _two_task_model(tiny)
    h = [head_hash(x) for x in m.heads]
    assert train_stage_b(m, np.zeros((2, 3, 16, 16), np.float32), np.array([0, 2]),
                         StageBConfig(0, 4, nn.SGDConfig()), np.random.default_rng(0)) == []
    assert train_stage_b(m, np.zeros((0, 3, 16, 16), np.float32), np.zeros(0, int),
                         StageBConfig(2, 4, nn.SGDConfig()), np.random.default_rng(0)) == []
    assert "memory is empty" in caplog.text
    assert [head_hash(x) for x in m.heads] == h


# --------------------------------------------------------------------------
# driver


def test_single_task_run_is_supervised_learning(tmp_path):
    cfg = tiny_config(data={"synthetic": dataclasses.asdict(tiny_spec()), "num_tasks": 1, "classes_per_task": 4})
    res = run_incremental(cfg, 0)
    assert len(res.log.records) == 1
    rec = res.log.records[0]
    assert rec.tp_acc == 1.0
    assert rec.mcr == pytest.approx(rec.wp_given_tp * 1.0, abs=0.5)
    assert rec.tp_counts == [len(res.schedule.groups[0]) * 6]


def test_same_seed_same_metrics(tmp_path):
    cfg = tiny_config()
    run_incremental(cfg, 5, tmp_path / "a")
    run_incremental(cfg, 5, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "predictions.csv").read_bytes() == (tmp_path / "b" / "predictions.csv").read_bytes()


def test_resume_after_interruption_matches_full_run(tmp_path):
    cfg = tiny_config(data={"synthetic": {"num_classes": 6, "train_per_class": 12, "test_per_class": 6,
                                          "image_size": 16, "pretrain_classes": 2, "pretrain_per_class": 12,
                                          "seed": 3}, "num_tasks": 3},
                      memory_budget=12)
    full = run_incremental(cfg, 2, tmp_path / "full")
    run_incremental(cfg, 2, tmp_path / "cut")
    (tmp_path / "cut" / "checkpoints" / "phase_3.ckpt").unlink()
    (tmp_path / "cut" / "checkpoints" / "phase_2.ckpt").unlink()
    resumed = run_incremental(cfg, 2, tmp_path / "cut", resume=True)
    assert resumed.log.mcrs == full.log.mcrs
    assert (tmp_path / "cut" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()
    assert [head_hash(h) for h in resumed.model.heads] == [head_hash(h) for h in full.model.heads]


def test_resume_rejects_other_seed(tmp_path):
    cfg = tiny_config()
    run_incremental(cfg, 1, tmp_path / "r")
    with pytest.raises(ConfigError):
        run_incremental(cfg, 2, tmp_path / "r", resume=True)


def test_audit_records_freeze_and_isolation(tmp_path):
    res = run_incremental(tiny_config(), 0)
    phi = res.audit[0]["phi"]
    for entry in res.audit[1:]:
        assert entry["before"]["phi"] == entry["after"]["phi"] == phi
        if entry["stage"] == "stage_b":
            assert entry["before"]["banks"] == entry["after"]["banks"]
        else:
            t = entry["phase"] - 1
            assert entry["before"]["banks"][:t] == entry["after"]["banks"][:t]
            assert entry["before"]["heads"][:t] == entry["after"]["heads"][:t]


def test_disabled_pretraining_still_runs():
    res = run_incremental(tiny_config(pretrain={"enabled": False}), 0)
    assert len(res.log.records) == 2 and math.isnan(res.pretrain_accuracy)


def test_task_fraction_pretraining():
    res = run_incremental(tiny_config(pretrain={"source": "task_fraction", "task_fraction": 0.5, "epochs": 1,
                                                "batch_size": 8}), 0)
    assert len(res.log.records) == 2


def test_ablation_variants_share_everything_but_flags():
    cfg = tiny_config()
    variants = ablation_configs(cfg)
    assert [v[0] for v in variants] == [v[0] for v in ABLATION_VARIANTS]
    flags = [(c.ablation.task_specific_bn, c.ablation.unknown_class, c.ablation.alignment) for _, c in variants]
    assert flags == [(True, False, False), (True, True, False), (False, True, True), (True, True, True)]
    assert [c.effective_tp_rule for _, c in variants] == ["maxsoftmax", "unknown", "unknown", "unknown"]
    strip = lambda c: {k: v for k, v in c.to_dict().items() if k not in ("ablation", "name", "tp_rule")}
    assert all(strip(c) == strip(cfg) for _, c in variants)
