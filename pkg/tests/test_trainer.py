import copy
from dataclasses import replace

import numpy as np
import pytest

from deskmtl import diffcore as dc
from deskmtl.scheduler import SchedulerConfig, TaskPhase
from deskmtl.trainer import (AdamW, Mode, TrainConfig, build_state, finetune_config, mtl_step,
                             polynomial_lr, save_trainer_checkpoint, single_task_step, train)


def test_polynomial_lr():
    assert polynomial_lr(1.0, 0, 10) == 1.0
    assert polynomial_lr(1.0, 5, 10) == 0.5
    assert polynomial_lr(1.0, 5, 10, power=2.0) == 0.25
    assert polynomial_lr(1.0, 20, 10) == 0.0


def test_adamw_matches_hand_oracle(rng):
    p = dc.Tensor(rng.normal(size=3), requires_grad=True)
    p.grad = np.zeros(3)
    x0 = p.values.copy()
    opt = AdamW([p], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.1)
    m = v = np.zeros(3)
    x = x0.copy()
    for t in range(1, 4):
        g = rng.normal(size=3)
        p.grad[...] = g
        opt.step(0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * ((m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8) + 0.1 * x)
    np.testing.assert_allclose(p.values, x, rtol=1e-12)


@pytest.mark.parametrize("bad", [
    dict(mode=Mode.FINETUNE),
    dict(mode=Mode.MTL_PREFINETUNE, n=1),
    dict(mode=Mode.SINGLE_TASK, n=2),
    dict(mode=Mode.SINGLE_TASK, optimizer="lamb"),
])
def test_config_validation(bad, tiny_suite):
    n = bad.pop("n", 1)
    with pytest.raises(ValueError):
        TrainConfig(tasks=tiny_suite.specs[:n], **bad)


def test_one_task_mtl_step_equals_single_task_step(make_cfg, tiny_data):
    cfg = make_cfg(Mode.SINGLE_TASK, pcgrad_online=False, loss_scaling=False, hses=False,
                   resurrection=False)
    a, b = build_state(cfg, tiny_data), build_state(cfg, tiny_data)
    for _ in range(4):
        single_task_step(a)
        mtl_step(b)
    assert np.array_equal(a.encoder.flat_params(), b.encoder.flat_params())
    tid = cfg.tasks[0].task_id
    for p, q in zip(a.runtimes[tid].head, b.runtimes[tid].head):
        assert np.array_equal(p.values, q.values)


def test_loss_scaling_equals_learning_rate_rescaling_under_sgd(make_cfg, tiny_suite, tiny_data):
    spec = tiny_suite.specs[1]  # multiclass: ln 3 scale
    c = spec.task_type.log_output_space
    base = make_cfg(Mode.SINGLE_TASK, tasks=[spec], optimizer="sgd", weight_decay=0.0, lr0=0.05)
    scaled = build_state(replace(base, loss_scaling=True), tiny_data)
    plain = build_state(replace(base, loss_scaling=False, lr0=0.05 / c), tiny_data)
    for _ in range(5):
        single_task_step(scaled)
        single_task_step(plain)
    np.testing.assert_allclose(scaled.encoder.flat_params(), plain.encoder.flat_params(),
                               rtol=0, atol=1e-12)


def test_training_is_deterministic(make_cfg, tiny_data):
    cfg = make_cfg()
    r1, r2 = train(cfg, tiny_data), train(cfg, tiny_data)
    assert [r.key() for r in r1.records] == [r.key() for r in r2.records]
    assert np.array_equal(r1.state.encoder.flat_params(), r2.state.encoder.flat_params())


def test_different_seeds_differ(make_cfg, tiny_data):
    a = train(make_cfg(seed=0), tiny_data).state.encoder.flat_params()
    b = train(make_cfg(seed=1), tiny_data).state.encoder.flat_params()
    assert not np.array_equal(a, b)


def test_stopped_head_is_frozen_while_encoder_still_moves(make_cfg, tiny_suite, tiny_data):
    cfg = make_cfg(tasks=tiny_suite.specs[:2])
    state = build_state(cfg, tiny_data)
    stopped = cfg.tasks[0].task_id
    state.runtimes[stopped].phase = TaskPhase.STOPPED
    head_before = [p.values.copy() for p in state.runtimes[stopped].head]
    enc_before = state.encoder.flat_params()
    out = mtl_step(state)
    assert stopped in out["losses"]  # still contributes with HSES on
    assert all(np.array_equal(p.values, h) for p, h in zip(state.runtimes[stopped].head, head_before))
    assert not np.array_equal(enc_before, state.encoder.flat_params())


def test_stopped_task_drops_out_without_hses(make_cfg, tiny_suite, tiny_data):
    state = build_state(make_cfg(tasks=tiny_suite.specs[:2], hses=False), tiny_data)
    stopped = state.cfg.tasks[0].task_id
    state.runtimes[stopped].phase = TaskPhase.STOPPED
    assert stopped not in mtl_step(state)["losses"]


def test_uniform_sampling_counts(make_cfg, tiny_data):
    state = build_state(make_cfg(max_steps=50), tiny_data)
    for _ in range(5):
        mtl_step(state)
    drawn = {tid: it.drawn for tid, it in state.iterators.items()}
    assert set(drawn.values()) == {5 * state.cfg.per_task_batch}


def test_train_records_and_transitions(make_cfg, tiny_data, tmp_path):
    cfg = make_cfg(max_steps=12, scheduler=SchedulerConfig(eval_interval=2, patience=1))
    res = train(cfg, tiny_data, out_dir=tmp_path)
    assert {r.split for r in res.records} == {"dev"}
    assert set(res.final) == {t.task_id for t in cfg.tasks}
    assert all(rt.phase is TaskPhase.FINISHED for rt in res.state.runtimes.values())
    assert (tmp_path / "metrics.jsonl").exists() and (tmp_path / "transitions.jsonl").exists()
    steps = [t.step for t in res.transitions]
    assert steps == sorted(steps)


def test_finetune_from_checkpoint(make_cfg, tiny_suite, tiny_data, tmp_path):
    pre = train(make_cfg(), tiny_data)
    ck = save_trainer_checkpoint(tmp_path / "pre.npz", pre.state)
    primary = tiny_suite.specs[0]
    cfg = finetune_config(make_cfg(Mode.SINGLE_TASK), primary, str(ck))
    state = build_state(cfg, tiny_data)
    np.testing.assert_array_equal(state.encoder.flat_params(), pre.state.encoder.flat_params())
    res = train(cfg, tiny_data)
    assert res.steps_run == cfg.max_steps and not res.config.hses


def test_restore_best_returns_best_dev_checkpoint(make_cfg, tiny_data):
    cfg = make_cfg(Mode.SINGLE_TASK, max_steps=9, lr0=3e-2, early_stopping=False)
    res = train(cfg, tiny_data, final_split="dev")
    tid = cfg.tasks[0].task_id
    best = min(r.loss for r in res.records)
    assert res.final[tid].loss == pytest.approx(best, rel=1e-12)


def test_nonfinite_loss_aborts(make_cfg, tiny_data):
    from deskmtl.trainer import TrainingAborted
    cfg = make_cfg(Mode.SINGLE_TASK)
    state = build_state(cfg, tiny_data)
    state.encoder.params["ln_f.g"].values[...] = np.nan
    with pytest.raises(TrainingAborted):
        single_task_step(state)


def test_missing_dataset(make_cfg, tiny_data):
    data = copy.copy(tiny_data)
    data.pop(next(iter(data)))
    with pytest.raises(KeyError):
        build_state(make_cfg(), data)
