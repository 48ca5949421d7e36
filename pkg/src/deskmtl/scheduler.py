"""Head-specific early stopping with resurrection.

Each task walks ACTIVE -> STOPPED -> RESURRECTED -> STOPPED ... and ends in
FINISHED, either when it would exceed its resurrection allowance or when
the run's step budget runs out.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass

log = logging.getLogger(__name__)


class TaskPhase(str, enum.Enum):
    ACTIVE = "ACTIVE"
    STOPPED = "STOPPED"
    RESURRECTED = "RESURRECTED"
    FINISHED = "FINISHED"


LEGAL = {
    (TaskPhase.ACTIVE, TaskPhase.STOPPED),
    (TaskPhase.STOPPED, TaskPhase.RESURRECTED),
    (TaskPhase.RESURRECTED, TaskPhase.STOPPED),
    (TaskPhase.ACTIVE, TaskPhase.FINISHED),
    (TaskPhase.STOPPED, TaskPhase.FINISHED),
    (TaskPhase.RESURRECTED, TaskPhase.FINISHED),
}


@dataclass(frozen=True)
class SchedulerConfig:
    eval_interval: int = 50
    patience: int = 3
    resurrection_delta: float = 0.01
    resurrection_confirm: int = 2
    max_resurrections: int = 2

    def __post_init__(self):
        if self.eval_interval < 1 or self.patience < 1 or self.resurrection_confirm < 1:
            raise ValueError("eval_interval, patience and resurrection_confirm must be positive")
        if self.resurrection_delta < 0 or self.max_resurrections < 0:
            raise ValueError("resurrection_delta and max_resurrections must be non-negative")


@dataclass(frozen=True)
class Transition:
    step: int
    task_id: str
    old: TaskPhase
    new: TaskPhase
    val_loss: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "task_id": self.task_id, "old": self.old.value,
                           "new": self.new.value, "val_loss": self.val_loss})


def _move(rt, new: TaskPhase, val_loss: float, step: int) -> None:
    old = rt.phase
    if (old, new) not in LEGAL:
        raise RuntimeError(f"illegal transition {old} -> {new} for {rt.task_id}")
    rt.phase = new
    rt.history.append(Transition(step, rt.task_id, old, new, val_loss))


def observe_validation(rt, val_loss: float, cfg: SchedulerConfig, step: int = 0,
                       allow_resurrection: bool = True) -> TaskPhase:
    """Feed one validation loss into the task's state machine."""
    phase = rt.phase
    if phase is TaskPhase.FINISHED:
        return phase
    if math.isnan(val_loss):
        log.error("task %s: NaN validation loss at step %d; finishing task", rt.task_id, step)
        _move(rt, TaskPhase.FINISHED, val_loss, step)
        return rt.phase

    if phase in (TaskPhase.ACTIVE, TaskPhase.RESURRECTED):
        if val_loss < rt.best_val_loss:
            rt.best_val_loss = val_loss
            rt.patience_count = 0
        else:
            rt.patience_count += 1
        if rt.patience_count >= cfg.patience:
            if phase is TaskPhase.RESURRECTED:
                rt.n_resurrections += 1
            rt.above_count = 0
            _move(rt, TaskPhase.STOPPED, val_loss, step)
    elif phase is TaskPhase.STOPPED and allow_resurrection:
        if val_loss > rt.best_val_loss * (1.0 + cfg.resurrection_delta):
            rt.above_count += 1
        else:
            rt.above_count = 0
        if rt.above_count >= cfg.resurrection_confirm:
            rt.above_count = 0
            if rt.n_resurrections >= cfg.max_resurrections:
                _move(rt, TaskPhase.FINISHED, val_loss, step)
            else:
                rt.patience_count = 0
                _move(rt, TaskPhase.RESURRECTED, val_loss, step)
    return rt.phase


def should_update_head(rt) -> bool:
    return rt.phase in (TaskPhase.ACTIVE, TaskPhase.RESURRECTED)


def finish(rt, step: int, val_loss: float = math.nan) -> None:
    """Budget exhaustion: move any non-terminal task to FINISHED."""
    if rt.phase is not TaskPhase.FINISHED:
        _move(rt, TaskPhase.FINISHED, val_loss, step)
