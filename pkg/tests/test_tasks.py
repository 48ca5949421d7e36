import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import f1_score

from deskmtl import diffcore as dc
from deskmtl.tasks import (TaskSpec, TaskType, compute_metrics, loss_from_logits, make_head,
                           predict, scale_loss, task_loss)


def spec(tt, tid="t"):
    return TaskSpec(tid, "fam", tt)


@pytest.mark.parametrize("tt,raw,expected", [
    (TaskType.binary(), math.log(2), 1.0),
    (TaskType.multiclass(4), math.log(4), 1.0),
    (TaskType.multilabel(3), 1.0, 1 / math.log(8)),
    (TaskType.regression(), math.log(2), 1.0),
    (TaskType.token(5), math.log(5), 1.0),
])
def test_scale_loss_values(tt, raw, expected):
    out = scale_loss(dc.Tensor(np.array(raw)), spec(tt)).item()
    assert out == pytest.approx(expected, rel=1e-12)


def test_multilabel_output_space_is_capped():
    assert TaskType.multilabel(40).log_output_space == pytest.approx(20 * math.log(2))
    assert TaskType.multilabel(40).output_space_size == 2 ** 20


def test_binary_loss_at_zero_logits_is_ln2():
    loss = loss_from_logits(spec(TaskType.binary()), dc.Tensor(np.zeros((4, 1))), np.array([0, 1, 1, 0]))
    assert loss.item() == pytest.approx(math.log(2), rel=1e-12)


def test_regression_loss_is_mse():
    loss = loss_from_logits(spec(TaskType.regression()), dc.Tensor(np.array([[1.0], [3.0]])),
                            np.array([2.0, 1.0]))
    assert loss.item() == pytest.approx((1 + 4) / 2)


def test_regression_mse_two():
    loss = loss_from_logits(spec(TaskType.regression()), dc.Tensor(np.zeros((2, 1))), np.array([2.0, 0.0]))
    assert loss.item() == pytest.approx(2.0, rel=1e-12)


def test_token_loss_ignores_masked_positions():
    s = spec(TaskType.token(3))
    logits = np.zeros((1, 3, 3))
    logits[0, 2] = [50.0, -50.0, 0.0]  # masked, would dominate otherwise
    labels = np.array([[0, 1, 1]])
    mask = np.array([[True, True, False]])
    loss = loss_from_logits(s, dc.Tensor(logits), labels, mask)
    assert loss.item() == pytest.approx(math.log(3))


def test_token_loss_requires_mask():
    with pytest.raises(ValueError, match="mask"):
        loss_from_logits(spec(TaskType.token(3)), dc.Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int))


@pytest.mark.parametrize("tt,labels", [
    (TaskType.binary(), np.array([0, 2])),
    (TaskType.multiclass(3), np.array([[0], [1]])),
    (TaskType.multilabel(3), np.array([[0, 1], [1, 1]])),
])
def test_label_shape_errors_name_task(tt, labels):
    logits = dc.Tensor(np.zeros((2, tt.out_width)))
    with pytest.raises(ValueError, match="bad_task"):
        loss_from_logits(spec(tt, "bad_task"), logits, labels)


@pytest.mark.parametrize("tt", [TaskType.binary(), TaskType.multiclass(4), TaskType.multilabel(3),
                                TaskType.regression()])
def test_head_output_shape_and_loss_finite(tt, rng):
    rt = make_head(spec(tt), 8, seed=1)
    enc_out = dc.Tensor(rng.normal(size=(5, 6, 8)))
    if tt.kind.value == "multilabel":
        labels = rng.integers(0, 2, size=(5, 3))
    elif tt.kind.value == "regression":
        labels = rng.normal(size=5)
    else:
        labels = rng.integers(0, max(2, tt.n_classes or 2), size=5)
    assert np.isfinite(task_loss(rt, enc_out, labels).item())
    from deskmtl.tasks import head_forward
    assert head_forward(rt, enc_out).shape == (5, tt.out_width)


def test_head_init_is_seeded_per_task():
    a = make_head(spec(TaskType.binary(), "a"), 8, seed=0)
    a2 = make_head(spec(TaskType.binary(), "a"), 8, seed=0)
    b = make_head(spec(TaskType.binary(), "b"), 8, seed=0)
    assert np.array_equal(a.head[0].values, a2.head[0].values)
    assert not np.array_equal(a.head[0].values, b.head[0].values)


def test_binary_f1_hand_value():
    # tp=2, fp=1, fn=1 -> precision = recall = 2/3
    pred = np.array([1, 1, 1, 0, 0])
    true = np.array([1, 1, 0, 1, 0])
    m = compute_metrics(pred, true, TaskType.binary())
    assert m["f1_binary"] == pytest.approx(2 / 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(5, 60))
def test_metrics_match_sklearn(seed, c, n):
    rng = np.random.default_rng(seed)
    true = rng.integers(0, c, n)
    pred = rng.integers(0, c, n)
    tt = TaskType.binary() if c == 2 else TaskType.multiclass(c)
    m = compute_metrics(pred, true, tt)
    assert m["f1_macro"] == pytest.approx(f1_score(true, pred, average="macro", zero_division=0))
    assert m["f1_weighted"] == pytest.approx(f1_score(true, pred, average="weighted", zero_division=0))
    assert m["accuracy"] == pytest.approx(np.mean(true == pred))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_macro_f1_invariant_to_label_permutation(seed):
    rng = np.random.default_rng(seed)
    c = 4
    true = rng.integers(0, c, 40)
    pred = rng.integers(0, c, 40)
    perm = rng.permutation(c)
    tt = TaskType.multiclass(c)
    a = compute_metrics(pred, true, tt)["f1_macro"]
    b = compute_metrics(perm[pred], perm[true], tt)["f1_macro"]
    assert a == pytest.approx(b)


def test_multilabel_metrics_match_sklearn(rng):
    true = rng.integers(0, 2, size=(30, 4))
    pred = rng.integers(0, 2, size=(30, 4))
    m = compute_metrics(pred, true, TaskType.multilabel(4))
    assert m["f1_macro"] == pytest.approx(f1_score(true, pred, average="macro", zero_division=0))
    assert m["f1_binary"] == pytest.approx(f1_score(true, pred, average="micro", zero_division=0))


def test_token_metrics_respect_mask():
    pred = np.array([[1, 1, 0]])
    true = np.array([[1, 1, 1]])
    m = compute_metrics(pred, true, TaskType.token(2), mask=np.array([[True, True, False]]))
    assert m["accuracy"] == 1.0


def test_predict_rules():
    assert predict(spec(TaskType.binary()), np.array([[0.3], [-0.1]])).tolist() == [1, 0]
    assert predict(spec(TaskType.multiclass(3)), np.array([[0, 2, 1.0]])).tolist() == [1]


def test_empty_metrics_rejected():
    with pytest.raises(ValueError):
        compute_metrics(np.array([]), np.array([]), TaskType.binary())


@pytest.mark.parametrize("bad", [dict(kind="multiclass"), dict(kind="multiclass", n_classes=1),
                                 dict(kind="binary", n_classes=7), dict(kind="nope")])
def test_task_type_validation(bad):
    with pytest.raises(ValueError):
        TaskType.from_dict(bad)


def test_task_type_roundtrip():
    tt = TaskType.multilabel(6)
    assert TaskType.from_dict(tt.to_dict()) == tt
