"""Training loops: single-task, multi-task pre-finetuning and finetuning.

A multi-task step draws one sub-batch per contributing task, backpropagates
each task separately, updates that task's head (unless its head is
frozen), folds the encoder gradient into the PCGrad-online accumulator and
finally applies one optimizer update to the shared encoder.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import surgery
from .encoder import Encoder, EncoderConfig, load_checkpoint, save_checkpoint
from .sampling import DEFAULT_BATCH, TaskIterator, next_subbatch, sequential_batches, split_dataset
from .scheduler import SchedulerConfig, TaskPhase, Transition, finish, observe_validation, should_update_head
from .tasks import (TaskKind, TaskRuntime, TaskSpec, compute_metrics, head_forward, loss_from_logits,
                    make_head, predict, scale_loss, stable_hash)

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    SINGLE_TASK = "single_task"
    MTL_PREFINETUNE = "mtl_prefinetune"
    FINETUNE = "finetune"


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: Mode
    tasks: list[TaskSpec]
    per_task_batch: int = DEFAULT_BATCH
    max_steps: int = 1000
    lr0: float = 3e-4
    lr_power: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adamw"
    seed: int = 0
    split_seed: int = 321
    hses: bool = True
    resurrection: bool = True
    loss_scaling: bool = True
    pcgrad_online: bool = True
    early_stopping: bool = True
    restore_best: bool = True
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    warm_start_checkpoint: str | None = None
    eval_batch: int = 256

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.mode is Mode.FINETUNE and not self.warm_start_checkpoint:
            raise ValueError("FINETUNE needs warm_start_checkpoint")
        if self.mode is Mode.MTL_PREFINETUNE and len(self.tasks) < 2:
            raise ValueError("MTL_PREFINETUNE needs at least two tasks")
        if self.mode is not Mode.MTL_PREFINETUNE and len(self.tasks) != 1:
            raise ValueError(f"{self.mode.value} trains exactly one task")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def toggles(self) -> dict[str, bool]:
        return {"hses": self.hses, "resurrection": self.resurrection,
                "loss_scaling": self.loss_scaling, "pcgrad_online": self.pcgrad_online}

    def describe(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["tasks"] = [t.task_id for t in self.tasks]
        return d


@dataclass
class MetricsRecord:
    step: int
    task_id: str
    split: str
    loss: float
    accuracy: float | None
    f1_macro: float | None
    f1_binary: float | None
    f1_weighted: float | None
    phase: str
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)

    def key(self) -> tuple:
        """Everything except wall time (used for determinism checks)."""
        d = asdict(self)
        d.pop("wall_time")
        return tuple(d.values())


# ---------------------------------------------------------------------------
# optimisation


def polynomial_lr(lr0: float, step: int, max_steps: int, power: float = 1.0) -> float:
    """lr0 * (1 - step/max_steps)^power, clamped at 0 past the budget."""
    frac = min(max(step, 0) / max_steps, 1.0)
    return lr0 * (1.0 - frac) ** power


class AdamW:
    """Adam with decoupled weight decay over a fixed list of tensors."""

    def __init__(self, params: Sequence[dc.Tensor], beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update += self.weight_decay * p.values
            p.values -= lr * update

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}/m{i}"] = m
            out[f"{prefix}/v{i}"] = v
        return out


class SGD:
    """Plain gradient descent with decoupled decay (for linear-in-gradient checks)."""

    def __init__(self, params: Sequence[dc.Tensor], weight_decay=0.0, **_):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for p in self.params:
            if self.weight_decay:
                p.values -= lr * (p.grad + self.weight_decay * p.values)
            else:
                p.values -= lr * p.grad

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}/t": np.array(self.t)}


def optimizer_update(opt, cfg: TrainConfig, step: int) -> float:
    """Apply one update at the scheduled learning rate; returns that rate."""
    lr = polynomial_lr(cfg.lr0, step, cfg.max_steps, cfg.lr_power)
    opt.step(lr)
    return lr


def _make_opt(cfg: TrainConfig, params):
    if cfg.optimizer == "sgd":
        return SGD(params, weight_decay=cfg.weight_decay)
    return AdamW(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainerState:
    cfg: TrainConfig
    encoder: Encoder
    runtimes: dict[str, TaskRuntime]
    datasets: dict
    splits: dict
    iterators: dict[str, TaskIterator]
    enc_opt: object
    head_opts: dict[str, object]
    acc: surgery.GradAccumulator
    step: int = 0
    transitions: list[Transition] = field(default_factory=list)
    t0: float = field(default_factory=time.perf_counter)

    def contributing(self) -> list[str]:
        """Tasks that draw a sub-batch this step."""
        out = []
        for tid, rt in self.runtimes.items():
            if rt.phase in (TaskPhase.ACTIVE, TaskPhase.RESURRECTED):
                out.append(tid)
            elif rt.phase is TaskPhase.STOPPED and self.cfg.hses:
                out.append(tid)
        return out


def build_state(cfg: TrainConfig, datasets: dict, encoder: Encoder | None = None) -> TrainerState:
    if encoder is None:
        if cfg.warm_start_checkpoint:
            encoder, _, _ = load_checkpoint(cfg.warm_start_checkpoint)
            if encoder.config != cfg.encoder:
                log.info("using encoder config stored in checkpoint %s", cfg.warm_start_checkpoint)
        else:
            encoder = Encoder(cfg.encoder, seed=cfg.seed)
            encoder._dropout_rng = np.random.default_rng([cfg.seed, 7])
    if cfg.warm_start_checkpoint:
        encoder._dropout_rng = np.random.default_rng([cfg.seed, 7])
    d = encoder.config.d_model
    runtimes, splits, iters, head_opts = {}, {}, {}, {}
    for spec in cfg.tasks:
        tid = spec.task_id
        if tid not in datasets:
            raise KeyError(f"no dataset for task {tid!r}")
        rt = make_head(spec, d, seed=cfg.seed, init_std=encoder.config.init_std)
        runtimes[tid] = rt
        encoder.register_head(tid, rt.head)
        splits[tid] = split_dataset(len(datasets[tid]), cfg.split_seed)
        iters[tid] = TaskIterator(tid, splits[tid].train, seed=_task_seed(cfg.seed, tid))
        head_opts[tid] = _make_opt(cfg, rt.head)
    enc_opt = _make_opt(cfg, encoder.shared_params)
    mode = surgery.PCGRAD if cfg.pcgrad_online else surgery.NAIVE
    acc = surgery.GradAccumulator(encoder.shared_dim(), mode=mode)
    return TrainerState(cfg, encoder, runtimes, datasets, splits, iters, enc_opt, head_opts, acc)


def _task_seed(seed: int, task_id: str) -> list[int]:
    return [seed, stable_hash(task_id)]


# ---------------------------------------------------------------------------
# steps


def _task_forward_backward(state: TrainerState, tid: str) -> float:
    cfg = state.cfg
    rt = state.runtimes[tid]
    idx = next_subbatch(state.iterators[tid], cfg.per_task_batch)
    tokens, labels, mask = state.datasets[tid].batch(idx)
    out = state.encoder.encode(tokens, train_mode=True)
    raw = loss_from_logits(rt.spec, head_forward(rt, out), labels, mask)
    value = raw.item()
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite loss {value} on task {tid!r} at step {state.step}")
    loss = scale_loss(raw, rt.spec) if cfg.loss_scaling else raw
    dc.backward(loss)
    return value


def _head_update(state: TrainerState, tid: str) -> None:
    rt = state.runtimes[tid]
    if should_update_head(rt):
        optimizer_update(state.head_opts[tid], state.cfg, state.step)
    for p in rt.head:
        p.zero_grad()


def single_task_step(state: TrainerState) -> dict:
    """Plain loop: one task, full-model update."""
    (tid,) = state.contributing()
    state.encoder.zero_grad()
    loss = _task_forward_backward(state, tid)
    _head_update(state, tid)
    optimizer_update(state.enc_opt, state.cfg, state.step)
    state.encoder.zero_grad()
    state.step += 1
    return {"step": state.step, "losses": {tid: loss}}


def mtl_step(state: TrainerState) -> dict:
    cfg = state.cfg
    tasks = state.contributing()
    if not tasks:
        raise RuntimeError("mtl_step with no contributing task")
    order = surgery.shuffle_task_order(tasks, state.step, cfg.seed)
    enc = state.encoder
    losses = {}
    for tid in order:
        enc.zero_grad()
        losses[tid] = _task_forward_backward(state, tid)
        _head_update(state, tid)
        surgery.accumulate(state.acc, enc.grad_flat, tid)
    surgery.finalize(state.acc, out=enc.grad_flat)
    optimizer_update(state.enc_opt, cfg, state.step)
    enc.zero_grad()
    state.step += 1
    return {"step": state.step, "losses": losses, "order": order}


# ---------------------------------------------------------------------------
# evaluation


def evaluate(state: TrainerState, task_id: str, split: str = "dev") -> MetricsRecord:
    """Sequential no-dropout pass over a split; raw (unscaled) loss."""
    if split not in ("dev", "test", "train"):
        raise ValueError(f"unknown split {split!r}")
    rt = state.runtimes[task_id]
    ds = state.datasets[task_id]
    idx_all = state.splits[task_id][split]
    kind = rt.spec.task_type.kind
    total, weight = 0.0, 0.0
    preds, labs, masks = [], [], []
    with dc.no_grad():
        for idx in sequential_batches(idx_all, state.cfg.eval_batch):
            tokens, labels, mask = ds.batch(idx)
            logits = head_forward(rt, state.encoder.encode(tokens, train_mode=False))
            loss = loss_from_logits(rt.spec, logits, labels, mask).item()
            w = float(mask.sum()) if kind is TaskKind.TOKEN else float(len(idx))
            total += loss * w
            weight += w
            p = predict(rt.spec, logits.values)
            if kind is TaskKind.TOKEN:
                preds.extend(p[mask])
                labs.extend(labels[mask])
            else:
                preds.append(p)
                labs.append(labels)
    if kind is TaskKind.TOKEN:
        pred_arr, lab_arr = np.array(preds), np.array(labs)
    else:
        pred_arr, lab_arr = np.concatenate(preds), np.concatenate(labs)
    m = compute_metrics(pred_arr, lab_arr, rt.spec.task_type)
    return MetricsRecord(state.step, task_id, split, total / weight, m["accuracy"], m["f1_macro"],
                         m["f1_binary"], m["f1_weighted"], rt.phase.value,
                         time.perf_counter() - state.t0)


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    config: TrainConfig
    records: list[MetricsRecord]
    transitions: list[Transition]
    final: dict[str, MetricsRecord]
    final_dev: dict[str, MetricsRecord]
    steps_run: int
    state: TrainerState

    def curve(self, task_id: str, split: str = "dev", metric: str = "f1_macro") -> list[tuple[int, float]]:
        return [(r.step, getattr(r, metric)) for r in self.records
                if r.task_id == task_id and r.split == split]


def _snapshot(state: TrainerState, tid: str) -> tuple:
    return (state.encoder.state_dict(), [p.values.copy() for p in state.runtimes[tid].head])


def _restore(state: TrainerState, tid: str, snap) -> None:
    enc, head = snap
    state.encoder.load_state_dict(enc)
    for p, v in zip(state.runtimes[tid].head, head):
        p.values[...] = v


def train(cfg: TrainConfig, datasets: dict, out_dir=None, encoder: Encoder | None = None,
          final_split: str = "test") -> RunResult:
    """Run training to the step budget (or until nothing is left to train),
    evaluating dev every ``eval_interval`` steps and ``final_split`` at the end."""
    state = build_state(cfg, datasets, encoder)
    records: list[MetricsRecord] = []
    sc = cfg.scheduler
    single = cfg.mode is not Mode.MTL_PREFINETUNE
    best_snap, best_loss = None, math.inf
    stepper = single_task_step if single else mtl_step

    while state.step < cfg.max_steps:
        if not state.contributing():
            break
        stepper(state)
        if state.step % sc.eval_interval == 0 or state.step == cfg.max_steps:
            for tid, rt in state.runtimes.items():
                if rt.phase is TaskPhase.FINISHED:
                    continue
                rec = evaluate(state, tid, "dev")
                records.append(rec)
                if single and cfg.restore_best and rec.loss < best_loss:
                    best_loss = rec.loss
                    best_snap = _snapshot(state, tid)
                if cfg.early_stopping:
                    before = len(rt.history)
                    observe_validation(rt, rec.loss, sc, step=state.step,
                                       allow_resurrection=cfg.resurrection)
                    state.transitions.extend(rt.history[before:])

    if single and cfg.restore_best and best_snap is not None:
        _restore(state, cfg.tasks[0].task_id, best_snap)
    for tid, rt in state.runtimes.items():
        before = len(rt.history)
        finish(rt, state.step)
        state.transitions.extend(rt.history[before:])
    final = {tid: evaluate(state, tid, final_split) for tid in state.runtimes}
    final_dev = {tid: evaluate(state, tid, "dev") for tid in state.runtimes}
    result = RunResult(cfg, records, state.transitions, final, final_dev, state.step, state)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_run(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        for r in result.records + list(result.final.values()):
            fh.write(json.dumps(r.to_dict()) + "\n")
    with open(out / "transitions.jsonl", "w") as fh:
        for t in result.transitions:
            fh.write(t.to_json() + "\n")
    (out / "config.json").write_text(json.dumps(result.config.describe(), indent=2, default=str))


def save_trainer_checkpoint(path, state: TrainerState) -> Path:
    """Encoder weights plus every head and optimizer moment."""
    extra = {}
    for tid, rt in state.runtimes.items():
        for i, p in enumerate(rt.head):
            extra[f"head/{tid}/{i}"] = p.values
        extra.update(state.head_opts[tid].state(f"opt/{tid}"))
    extra.update(state.enc_opt.state("opt/__encoder__"))
    meta = {"step": state.step, "tasks": list(state.runtimes),
            "phases": {t: rt.phase.value for t, rt in state.runtimes.items()}}
    return save_checkpoint(path, state.encoder, extra, meta)


def finetune_config(base: TrainConfig, primary: TaskSpec, checkpoint: str, **overrides) -> TrainConfig:
    fields = dict(mode=Mode.FINETUNE, tasks=[primary], warm_start_checkpoint=str(checkpoint),
                  hses=False, resurrection=False)
    fields.update(overrides)
    return replace(base, **fields)
