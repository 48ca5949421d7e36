"""Gradient-based auxiliary task selection.

Each task is trained alone while the absolute attention-head gradients of
every step are summed into an L x H grid; rows are L1-normalised, grids
are compared with Kendall's tau-b against the primary task's grid, and
candidates are sorted by that correlation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import Encoder
from .tasks import TaskSpec, make_head
from .trainer import Mode, TrainConfig, build_state, optimizer_update, _task_forward_backward

SELECTION_SEED = 321
DEFAULT_PHASE1_STEPS = 500
# every phase-1 head is drawn from this key so all tasks start from one model state
PHASE1_HEAD_KEY = "__phase1__"


@dataclass
class ImportanceMatrix:
    task_id: str
    values: np.ndarray
    steps_accumulated: int = 0
    zero_rows: list[int] = field(default_factory=list)
    low_signal: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class CorrelationResult:
    task_id: str
    tau: float | None

    @property
    def defined(self) -> bool:
        return self.tau is not None


def normalize_rows(raw: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """L1-normalise each layer row; all-zero rows stay zero and are reported."""
    raw = np.asarray(raw, dtype=np.float64)
    sums = raw.sum(axis=1)
    zero = [int(i) for i in np.flatnonzero(sums == 0)]
    out = np.zeros_like(raw)
    nz = sums > 0
    out[nz] = raw[nz] / sums[nz, None]
    return out, zero


def importance_from_raw(task_id: str, raw: np.ndarray, steps: int = 0,
                        low_signal: bool = False) -> ImportanceMatrix:
    values, zero = normalize_rows(raw)
    return ImportanceMatrix(task_id, values, steps, zero, low_signal or bool(zero))


def phase1_steps(n_train: int, batch: int, cap: int = DEFAULT_PHASE1_STEPS) -> int:
    """One epoch or ``cap`` steps, whichever is smaller."""
    return max(1, min(cap, math.ceil(n_train / batch)))


def build_importance(task: TaskSpec, datasets: dict, cfg: TrainConfig, steps: int | None = None,
                     seed: int = SELECTION_SEED, encoder: Encoder | None = None,
                     shared_head_init: bool = True) -> ImportanceMatrix:
    """Train ``task`` alone for ``steps`` steps, summing |head gradients|.

    ``cfg`` supplies optimiser and encoder settings (and a warm-start
    checkpoint if one is configured); its task list and mode are replaced.
    With ``shared_head_init`` the task head is initialised identically for
    every task (same shapes permitting), so matrices differ only through
    the data.
    """
    run_cfg = replace(cfg, mode=Mode.SINGLE_TASK, tasks=[task], seed=seed,
                      early_stopping=False, hses=False, resurrection=False, restore_best=False)
    if run_cfg.warm_start_checkpoint is None and cfg.mode is Mode.FINETUNE:
        raise ValueError("FINETUNE config without checkpoint")
    state = build_state(run_cfg, datasets, encoder)
    tid = task.task_id
    if shared_head_init:
        ref = make_head(TaskSpec(PHASE1_HEAD_KEY, task.family, task.task_type),
                        state.encoder.config.d_model, seed, state.encoder.config.init_std)
        for p, q in zip(state.runtimes[tid].head, ref.head):
            p.values[...] = q.values
    if steps is None:
        steps = phase1_steps(len(state.splits[task.task_id].train), cfg.per_task_batch)
    if steps < 1:
        raise ValueError("build_importance needs steps >= 1")
    run_cfg = replace(run_cfg, max_steps=max(steps, 1))
    state.cfg = run_cfg
    enc = state.encoder
    L, H = enc.config.n_layers, enc.config.n_heads
    total = np.zeros((L, H))
    for _ in range(steps):
        enc.zero_grad()
        _task_forward_backward(state, tid)
        grid, _ = enc.head_grad_norms()
        total += grid
        optimizer_update(state.head_opts[tid], run_cfg, state.step)
        optimizer_update(state.enc_opt, run_cfg, state.step)
        for p in state.runtimes[tid].head:
            p.zero_grad()
        state.step += 1
    enc.zero_grad()
    train_idx = state.splits[tid].train
    ds = datasets[tid]
    labels = ds.labels[train_idx]
    if ds.label_mask is not None:
        labels = labels[ds.label_mask[train_idx]]
    constant = np.unique(np.asarray(labels).reshape(len(labels), -1), axis=0).shape[0] <= 1
    return importance_from_raw(tid, total, steps, low_signal=constant)


# ---------------------------------------------------------------------------
# Kendall tau-b


def _pair_counts(a: np.ndarray, b: np.ndarray) -> tuple[int, int, int, int]:
    """(concordant, discordant, ties only in a, ties only in b) over i < j."""
    n = a.size
    iu = np.triu_indices(n, k=1)
    da = np.sign(a[:, None] - a[None, :])[iu]
    db = np.sign(b[:, None] - b[None, :])[iu]
    prod = da * db
    conc = int(np.sum(prod > 0))
    disc = int(np.sum(prod < 0))
    ties_a = int(np.sum((da == 0) & (db != 0)))
    ties_b = int(np.sum((db == 0) & (da != 0)))
    return conc, disc, ties_a, ties_b


def tau_b_from_counts(conc: int, disc: int, ties_a: int, ties_b: int) -> float | None:
    denom = (conc + disc + ties_a) * (conc + disc + ties_b)
    if denom == 0:
        return None
    return (conc - disc) / math.sqrt(denom)


def kendall_tau(a, b) -> float | None:
    """Tie-corrected Kendall tau-b; None when either input is constant."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size or a.size < 2:
        raise ValueError(f"kendall_tau needs equal lengths >= 2, got {a.size} and {b.size}")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return None
    return tau_b_from_counts(*_pair_counts(a, b))


def rank_tasks(primary: ImportanceMatrix, candidates: Sequence[ImportanceMatrix]) -> list[CorrelationResult]:
    """Candidates by descending tau (task id breaks ties; undefined last)."""
    out = []
    for m in candidates:
        if m.shape != primary.shape:
            raise ValueError(f"{m.task_id}: matrix shape {m.shape} != primary {primary.shape}")
        out.append(CorrelationResult(m.task_id, kendall_tau(primary.flat(), m.flat())))
    return sorted(out, key=lambda r: (r.tau is None, -(r.tau or 0.0), r.task_id))


# ---------------------------------------------------------------------------
# persistence


def save_matrix(path, m: ImportanceMatrix) -> None:
    L, H = m.shape
    lines = [f"# task_id: {m.task_id}", f"# shape: {L} {H}", f"# steps: {m.steps_accumulated}",
             f"# low_signal: {int(m.low_signal)}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in m.values]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix(path) -> ImportanceMatrix:
    meta, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            meta[k.strip()] = v.strip()
        elif line.strip():
            rows.append([float(x) for x in line.split()])
    values = np.array(rows)
    _, zero = normalize_rows(values)
    return ImportanceMatrix(meta["task_id"], values, int(meta.get("steps", 0)), zero,
                            bool(int(meta.get("low_signal", 0))))


def write_ranking(path, ranked: Sequence[CorrelationResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "tau"])
        for r in ranked:
            w.writerow([r.task_id, "" if r.tau is None else repr(r.tau)])


# ---------------------------------------------------------------------------
# k-sweep


@dataclass
class SweepRow:
    k: int
    tasks: list[str]
    dev_loss: float | None
    dev_f1: float | None
    error: str | None = None


def sweep_k(ranked: Sequence[CorrelationResult], primary: TaskSpec, specs: dict[str, TaskSpec],
            datasets: dict, prefinetune_cfg: TrainConfig, finetune_cfg: TrainConfig, work_dir,
            seed: int = SELECTION_SEED, ks: Sequence[int] | None = None) -> tuple[int, list[SweepRow]]:
    """Pre-finetune on the top-k candidates for each k, finetune the
    primary task, and pick the k with the lowest primary dev loss."""
    from .experiments import prefinetune_then_finetune

    if not ranked:
        raise ValueError("sweep_k needs at least one ranked candidate")
    ks = list(ks) if ks is not None else list(range(1, len(ranked) + 1))
    rows = []
    for k in ks:
        top = [specs[r.task_id] for r in ranked[:k]]
        try:
            res = prefinetune_then_finetune(top, primary, datasets, prefinetune_cfg, finetune_cfg,
                                            [seed], Path(work_dir) / f"k{k:03d}", prefinetune_seed=seed)
            fin = res["runs"][0]
            rows.append(SweepRow(k, [t.task_id for t in top], fin["best_dev_loss"], fin["best_dev_f1"]))
        except Exception as exc:  # recorded, excluded from argmin
            rows.append(SweepRow(k, [t.task_id for t in top], None, None, f"{type(exc).__name__}: {exc}"))
    ok = [r for r in rows if r.error is None]
    if not ok:
        raise RuntimeError("every sweep run failed")
    best = min(ok, key=lambda r: (r.dev_loss, r.k))
    return best.k, rows


def write_sweep(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "dev_loss", "dev_F1", "tasks", "error"])
        for r in rows:
            w.writerow([r.k, "" if r.dev_loss is None else repr(r.dev_loss),
                        "" if r.dev_f1 is None else repr(r.dev_f1), ";".join(r.tasks), r.error or ""])
