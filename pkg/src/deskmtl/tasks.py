"""Task descriptions, task-specific heads, losses and metrics."""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

MULTILABEL_CAP = 20

FAMILIES = (
    "Subjective bias",
    "News/Media bias",
    "Hate speech",
    "Gender bias",
    "Sentiment analysis",
    "Fake news",
    "Emotionality",
    "Group bias",
    "Stance detection",
)


class TaskKind(str, enum.Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"
    MULTILABEL = "multilabel"
    REGRESSION = "regression"
    TOKEN = "token"


@dataclass(frozen=True)
class TaskType:
    kind: TaskKind
    n_classes: int | None = None

    def __post_init__(self):
        kind = TaskKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in (TaskKind.MULTICLASS, TaskKind.TOKEN):
            if self.n_classes is None or self.n_classes < 2:
                raise ValueError(f"{kind.value} needs n_classes >= 2")
        elif kind is TaskKind.MULTILABEL:
            if self.n_classes is None or self.n_classes < 1:
                raise ValueError("multilabel needs n_classes >= 1")
        elif self.n_classes not in (None, 1, 2):
            raise ValueError(f"{kind.value} takes no class count")

    @classmethod
    def binary(cls):
        return cls(TaskKind.BINARY)

    @classmethod
    def multiclass(cls, c: int):
        return cls(TaskKind.MULTICLASS, c)

    @classmethod
    def multilabel(cls, c: int):
        return cls(TaskKind.MULTILABEL, c)

    @classmethod
    def regression(cls):
        return cls(TaskKind.REGRESSION)

    @classmethod
    def token(cls, c: int):
        return cls(TaskKind.TOKEN, c)

    @property
    def is_classification(self) -> bool:
        return self.kind is not TaskKind.REGRESSION

    @property
    def out_width(self) -> int:
        if self.kind in (TaskKind.BINARY, TaskKind.REGRESSION):
            return 1
        return int(self.n_classes)

    @property
    def log_output_space(self) -> float:
        """Natural log of the output-space size (multi-label as c*ln 2)."""
        if self.kind is TaskKind.MULTILABEL:
            return min(self.n_classes, MULTILABEL_CAP) * math.log(2.0)
        if self.kind in (TaskKind.MULTICLASS, TaskKind.TOKEN):
            return math.log(self.n_classes)
        return math.log(2.0)

    @property
    def output_space_size(self) -> int:
        if self.kind is TaskKind.MULTILABEL:
            return 2 ** min(self.n_classes, MULTILABEL_CAP)
        if self.kind in (TaskKind.MULTICLASS, TaskKind.TOKEN):
            return int(self.n_classes)
        return 2

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskType":
        return cls(TaskKind(d["kind"]), d.get("n_classes"))


@dataclass
class TaskSpec:
    task_id: str
    family: str
    task_type: TaskType
    dataset_ref: Any = None

    @property
    def output_space_size(self) -> int:
        return self.task_type.output_space_size


@dataclass
class TaskRuntime:
    """Mutable training state of one task: head weights plus scheduler
    bookkeeping (phase and counters are managed by ``scheduler``)."""

    spec: TaskSpec
    head: list[Tensor]
    phase: Any = None
    best_val_loss: float = math.inf
    patience_count: int = 0
    above_count: int = 0
    n_resurrections: int = 0
    history: list = field(default_factory=list)

    @property
    def task_id(self) -> str:
        return self.spec.task_id


def stable_hash(s: str) -> int:
    return zlib.crc32(s.encode("utf-8"))


def make_head(spec: TaskSpec, d_model: int, seed: int = 0, init_std: float = 0.02) -> TaskRuntime:
    """Two dense layers (d -> d, tanh, -> out_width) for one task."""
    from .scheduler import TaskPhase

    rng = np.random.default_rng([seed, stable_hash(spec.task_id)])
    width = spec.task_type.out_width
    tid = spec.task_id
    head = [
        Tensor(rng.normal(0.0, init_std, (d_model, d_model)), True, f"{tid}.w1"),
        Tensor(np.zeros(d_model), True, f"{tid}.b1"),
        Tensor(rng.normal(0.0, init_std, (d_model, width)), True, f"{tid}.w2"),
        Tensor(np.zeros(width), True, f"{tid}.b2"),
    ]
    return TaskRuntime(spec=spec, head=head, phase=TaskPhase.ACTIVE)


def head_forward(rt: TaskRuntime, encoder_out: Tensor) -> Tensor:
    """Logits: b x width from CLS for sequence tasks, b x s x width for
    token-level tasks."""
    w1, b1, w2, b2 = rt.head
    x = encoder_out
    if rt.spec.task_type.kind is not TaskKind.TOKEN:
        x = dc.slice_(x, (slice(None), 0, slice(None)))
    h = dc.tanh(dc.matmul(x, w1) + b1)
    return dc.matmul(h, w2) + b2


def task_loss(rt: TaskRuntime, encoder_out: Tensor, labels, label_mask=None) -> Tensor:
    """Raw (unscaled) loss of the task's head on ``encoder_out``."""
    return loss_from_logits(rt.spec, head_forward(rt, encoder_out), labels, label_mask)


def loss_from_logits(spec: TaskSpec, logits: Tensor, labels, label_mask=None) -> Tensor:
    tt = spec.task_type
    labels = np.asarray(labels)
    b = logits.shape[0]
    try:
        if tt.kind is TaskKind.BINARY:
            _check(labels.shape == (b,) and np.isin(labels, (0, 1)).all(), spec, "binary 0/1 labels")
            return dc.binary_cross_entropy(logits, labels.reshape(b, 1))
        if tt.kind is TaskKind.MULTICLASS:
            _check(labels.shape == (b,), spec, "one class index per example")
            return dc.cross_entropy(logits, labels)
        if tt.kind is TaskKind.MULTILABEL:
            _check(labels.shape == (b, tt.n_classes), spec, f"multi-hot vectors of width {tt.n_classes}")
            return dc.binary_cross_entropy(logits, labels)
        if tt.kind is TaskKind.REGRESSION:
            _check(labels.shape == (b,), spec, "one real target per example")
            return dc.mse(logits, labels.reshape(b, 1).astype(np.float64))
        s = logits.shape[1]
        _check(labels.shape == (b, s), spec, "per-token label matrix matching the batch")
        if label_mask is None:
            raise ValueError(f"task {spec.task_id!r}: token-level batch needs a label mask")
        flat = dc.reshape(logits, (b * s, tt.n_classes))
        return dc.cross_entropy(flat, labels.reshape(-1), mask=np.asarray(label_mask).reshape(-1))
    except (ValueError, dc.ShapeError) as exc:
        if spec.task_id in str(exc):
            raise
        raise ValueError(f"task {spec.task_id!r}: {exc}") from exc


def _check(ok: bool, spec: TaskSpec, what: str) -> None:
    if not ok:
        raise ValueError(f"task {spec.task_id!r} ({spec.task_type.kind.value}) expects {what}")


def scale_loss(raw: Tensor, spec: TaskSpec) -> Tensor:
    """Divide by ln(output-space size) to balance tasks of different width."""
    return dc.scale(raw, 1.0 / spec.task_type.log_output_space)


def predict(spec: TaskSpec, logits: np.ndarray) -> np.ndarray:
    kind = spec.task_type.kind
    if kind is TaskKind.BINARY:
        return (logits.reshape(-1) > 0).astype(np.int64)
    if kind is TaskKind.MULTILABEL:
        return (logits > 0).astype(np.int64)
    if kind is TaskKind.REGRESSION:
        return logits.reshape(-1)
    return logits.argmax(axis=-1)


# ---------------------------------------------------------------------------
# metrics


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def _class_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int):
    f1s, support = [], []
    for k in range(n_classes):
        tp = int(np.sum((y_pred == k) & (y_true == k)))
        fp = int(np.sum((y_pred == k) & (y_true != k)))
        fn = int(np.sum((y_pred != k) & (y_true == k)))
        f1s.append(_prf(tp, fp, fn))
        support.append(int(np.sum(y_true == k)))
    return np.array(f1s), np.array(support, dtype=float)


def compute_metrics(predictions, labels, task_type: TaskType, mask=None) -> dict:
    """Accuracy plus macro / binary (positive-class) / weighted F1.

    Regression returns only ``mse``. Token-level inputs are b x s arrays
    filtered by ``mask``.
    """
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        pred, true = pred[m], true[m]
    if true.size == 0:
        raise ValueError("compute_metrics: no examples")
    if task_type.kind is TaskKind.REGRESSION:
        d = pred.astype(float) - true.astype(float)
        return {"accuracy": None, "f1_macro": None, "f1_binary": None,
                "f1_weighted": None, "mse": float(np.mean(d * d))}
    if task_type.kind is TaskKind.MULTILABEL:
        acc = float(np.mean(pred == true))
        per = [_prf(int(np.sum((pred[:, j] == 1) & (true[:, j] == 1))),
                    int(np.sum((pred[:, j] == 1) & (true[:, j] == 0))),
                    int(np.sum((pred[:, j] == 0) & (true[:, j] == 1))))
               for j in range(true.shape[1])]
        support = true.sum(axis=0).astype(float)
        micro = _prf(int(np.sum((pred == 1) & (true == 1))), int(np.sum((pred == 1) & (true == 0))),
                     int(np.sum((pred == 0) & (true == 1))))
        weighted = float(np.dot(per, support) / support.sum()) if support.sum() else 0.0
        return {"accuracy": acc, "f1_macro": float(np.mean(per)), "f1_binary": micro,
                "f1_weighted": weighted}
    pred = pred.reshape(-1).astype(np.int64)
    true = true.reshape(-1).astype(np.int64)
    n_classes = 2 if task_type.kind is TaskKind.BINARY else int(task_type.n_classes)
    f1s, support = _class_f1(true, pred, n_classes)
    present = (support > 0) | np.array([np.any(pred == k) for k in range(n_classes)])
    macro = float(f1s[present].mean()) if present.any() else 0.0
    return {
        "accuracy": float(np.mean(pred == true)),
        "f1_macro": macro,
        "f1_binary": float(f1s[1]) if n_classes == 2 else None,
        "f1_weighted": float(np.dot(f1s, support) / support.sum()),
    }
