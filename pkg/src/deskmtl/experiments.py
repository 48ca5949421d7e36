"""Experiment recipes: baselines, pre-finetune/finetune, family transfer,
ablation grid, plus seed aggregation and report files.

Every recipe writes per-run JSONL next to a CSV summary so each number in a
report can be recomputed from the persisted per-seed records.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoder import load_checkpoint
from .tasks import TaskKind, TaskSpec
from .trainer import Mode, RunResult, TrainConfig, save_trainer_checkpoint, train

log = logging.getLogger(__name__)

DEFAULT_SEEDS = tuple(range(30))
WORKERS_ENV = "DESKMTL_WORKERS"
TOGGLES = ("hses", "resurrection", "loss_scaling", "pcgrad_online")

# Reference values reported for the full-scale (RoBERTa, 59 real tasks) setup.
# They document the report layout; desk-scale runs are not expected to match.
REFERENCE = {
    "baseline_f1": (80.83, 0.69),
    "mtl_all_f1": (84.1, 1.33),
    "gradts_top_tau": ("Persuasive techniques", 0.73),
    "gradts_last_tau": ("Fake news detection", 0.63),
    "transfer_to_fake_news_pct": 1.79,
    "transfer_to_emotionality_pct": -6.56,
    "ablation_loss_reduction_pct": 5.0,
    "ablation_variance_reduction_pct": 85.0,
}


class OutputExists(FileExistsError):
    pass


def prepare_output(path, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputExists(f"{path} is not empty; pass force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_jobs(fn: Callable, jobs: Sequence[tuple]) -> list:
    """Map ``fn`` over argument tuples, in a process pool when configured."""
    n = worker_count()
    if n == 1 or len(jobs) < 2:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# ---------------------------------------------------------------------------
# scores and aggregation


def score(rec, spec: TaskSpec) -> float:
    """Higher-is-better task score: macro F1, or negative loss for regression."""
    if spec.task_type.kind is TaskKind.REGRESSION:
        return -rec.loss
    return rec.f1_macro


def relative_change(joint: float, single: float, spec: TaskSpec) -> float:
    """(joint - single) / single on macro F1; for regression the loss
    version (single - joint) / single so that positive means better."""
    if spec.task_type.kind is TaskKind.REGRESSION:
        return (single - joint) / single
    return (joint - single) / single


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def steps_to_reach(curve: Sequence[tuple[int, float]], target: float) -> int | None:
    for step, value in curve:
        if value is not None and value >= target:
            return step
    return None


def _write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, default=float) + "\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def summarize_runs(runs: Sequence[dict]) -> dict:
    ok = [r for r in runs if r.get("error") is None]
    out = {"n_runs": len(runs), "n_ok": len(ok), "failed_seeds": [r["seed"] for r in runs if r.get("error")]}
    for key in ("test_f1", "test_acc", "test_loss"):
        vals = [r[key] for r in ok if r.get(key) is not None]
        out[key + "_mean"], out[key + "_std"] = mean_std(vals)
    return out


def _run_row(seed: int, res: RunResult, spec: TaskSpec) -> dict:
    fin, dev = res.final[spec.task_id], res.final_dev[spec.task_id]
    curve = res.curve(spec.task_id)
    dev_f1s = [v for _, v in curve if v is not None]
    return {
        "seed": seed,
        "task_id": spec.task_id,
        "test_f1": fin.f1_macro,
        "test_acc": fin.accuracy,
        "test_loss": fin.loss,
        "best_dev_loss": dev.loss,
        "best_dev_f1": dev.f1_macro,
        "max_dev_f1": max(dev_f1s) if dev_f1s else None,
        "steps_run": res.steps_run,
        "curve": curve,
        "error": None,
    }


# ---------------------------------------------------------------------------
# recipes


def _single_run(cfg: TrainConfig, datasets: dict, seed: int, out_dir) -> dict:
    spec = cfg.tasks[0]
    try:
        res = train(replace(cfg, seed=seed), datasets, out_dir=out_dir)
        return _run_row(seed, res, spec)
    except Exception as exc:  # recorded, excluded from aggregates
        log.exception("seed %d failed", seed)
        return {"seed": seed, "task_id": spec.task_id, "error": f"{type(exc).__name__}: {exc}"}


def run_baseline(primary: TaskSpec, datasets: dict, cfg: TrainConfig, seeds: Sequence[int],
                 out_dir=None) -> dict:
    """Single-task training of ``primary`` for each seed; mean/std of test scores."""
    if not seeds:
        raise ValueError("seed list is empty")
    cfg = replace(cfg, mode=Mode.SINGLE_TASK, tasks=[primary], warm_start_checkpoint=None,
                  hses=False, resurrection=False)
    out = Path(out_dir) if out_dir else None
    jobs = [(cfg, datasets, s, (out / f"seed{s}") if out else None) for s in seeds]
    runs = run_jobs(_single_run, jobs)
    report = {"recipe": "baseline", "primary": primary.task_id, "runs": runs,
              "summary": summarize_runs(runs)}
    if out:
        _persist_seed_report(out, report)
    return report


def prefinetune(aux: Sequence[TaskSpec], datasets: dict, cfg: TrainConfig, checkpoint, seed: int,
                out_dir=None) -> RunResult:
    """Multi-task pre-finetuning on ``aux``; writes an encoder checkpoint.

    A single auxiliary task is trained with the single-task loop."""
    if not aux:
        raise ValueError("pre-finetuning needs at least one auxiliary task")
    mode = Mode.MTL_PREFINETUNE if len(aux) > 1 else Mode.SINGLE_TASK
    run_cfg = replace(cfg, mode=mode, tasks=list(aux), seed=seed, warm_start_checkpoint=None,
                      restore_best=False)
    res = train(run_cfg, datasets, out_dir=out_dir, final_split="dev")
    save_trainer_checkpoint(checkpoint, res.state)
    return res


def prefinetune_then_finetune(aux: Sequence[TaskSpec], primary: TaskSpec, datasets: dict,
                              pre_cfg: TrainConfig, ft_cfg: TrainConfig, seeds: Sequence[int],
                              out_dir, prefinetune_seed: int | None = None) -> dict:
    """Pre-finetune once on ``aux``, then finetune ``primary`` per seed."""
    if not aux:
        raise ValueError("auxiliary task set is empty")
    if not seeds:
        raise ValueError("seed list is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    includes_primary = any(t.task_id == primary.task_id for t in aux)
    if includes_primary:
        log.warning("primary task %s is part of the auxiliary set", primary.task_id)
    ckpt = out / "prefinetune.npz"
    pseed = seeds[0] if prefinetune_seed is None else prefinetune_seed
    pre = prefinetune(aux, datasets, pre_cfg, ckpt, pseed, out_dir=out / "prefinetune")
    enc, _, _ = load_checkpoint(ckpt)
    if enc.config != ft_cfg.encoder:
        raise ValueError("finetune encoder config does not match the pre-finetuned checkpoint")
    cfg = replace(ft_cfg, mode=Mode.FINETUNE, tasks=[primary], warm_start_checkpoint=str(ckpt),
                  hses=False, resurrection=False)
    jobs = [(cfg, datasets, s, out / f"seed{s}") for s in seeds]
    runs = run_jobs(_single_run, jobs)
    report = {"recipe": "prefinetune_finetune", "primary": primary.task_id,
              "aux": [t.task_id for t in aux], "aux_includes_primary": includes_primary,
              "prefinetune_seed": pseed, "prefinetune_steps": pre.steps_run,
              "runs": runs, "summary": summarize_runs(runs)}
    _persist_seed_report(out, report)
    return report


def aux_preset(name: str, specs: Sequence[TaskSpec], primary: TaskSpec, k: int = 10,
               ranked: Sequence | None = None, seed: int = 321) -> list[TaskSpec]:
    """The three auxiliary-set arms: ``random``, ``gradts`` and ``all``."""
    pool = [s for s in specs if s.task_id != primary.task_id]
    if name == "all":
        return pool
    if name == "random":
        idx = np.random.default_rng(seed).permutation(len(pool))[:k]
        return [pool[i] for i in sorted(idx)]
    if name == "gradts":
        if ranked is None:
            raise ValueError("gradts preset needs a ranking")
        by_id = {s.task_id: s for s in pool}
        return [by_id[r.task_id] for r in ranked if r.task_id in by_id][:k]
    raise ValueError(f"unknown auxiliary preset {name!r}")


def _persist_seed_report(out: Path, report: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "runs.jsonl", report["runs"])
    s = report["summary"]
    _write_csv(out / "summary.csv", list(s.keys()),
               [[json.dumps(v) if isinstance(v, list) else v for v in s.values()]])
    meta = {k: v for k, v in report.items() if k not in ("runs",)}
    (out / "report.json").write_text(json.dumps(meta, indent=2, default=float))


# -- family transfer ----------------------------------------------------------


@dataclass
class FamilyTransferMatrix:
    families: list[str]
    within: dict[str, float]
    pairwise: dict[tuple[str, str], float]   # (source, target) -> relative change minus target's within

    def matrix(self) -> np.ndarray:
        n = len(self.families)
        m = np.zeros((n, n))
        for i, a in enumerate(self.families):
            for j, b in enumerate(self.families):
                m[i, j] = self.within[a] if a == b else self.pairwise[(a, b)]
        return m

    def transfer_from(self) -> dict[str, float]:
        return {a: float(np.mean([self.pairwise[(a, b)] for b in self.families if b != a]))
                for a in self.families}

    def transfer_to(self) -> dict[str, float]:
        return {b: float(np.mean([self.pairwise[(a, b)] for a in self.families if a != b]))
                for b in self.families}


def _mtl_scores(tasks: Sequence[TaskSpec], datasets, cfg: TrainConfig, seed: int) -> dict[str, float]:
    if len(tasks) == 1:
        run_cfg = replace(cfg, mode=Mode.SINGLE_TASK, tasks=list(tasks), seed=seed,
                          hses=False, resurrection=False, warm_start_checkpoint=None)
    else:
        run_cfg = replace(cfg, mode=Mode.MTL_PREFINETUNE, tasks=list(tasks), seed=seed,
                          warm_start_checkpoint=None)
    res = train(run_cfg, datasets)
    return {t.task_id: score(res.final[t.task_id], t) for t in tasks}


def run_family_transfer(specs: Sequence[TaskSpec], datasets: dict, cfg: TrainConfig,
                        seeds: Sequence[int], out_dir=None) -> FamilyTransferMatrix:
    """Within-family and pairwise-family joint training relative to single-task scores."""
    fams: dict[str, list[TaskSpec]] = {}
    for s in specs:
        fams.setdefault(s.family, []).append(s)
    for f in [f for f, ts in fams.items() if len(ts) < 2]:
        log.warning("family %s has fewer than two tasks; excluded", f)
        fams.pop(f)
    names = sorted(fams)
    by_id = {s.task_id: s for fam in fams.values() for s in fam}
    rows = []

    def rel(joint, single, tids):
        return float(np.mean([relative_change(joint[t], single[t], by_id[t]) for t in tids]))

    within_s, pair_s = {f: [] for f in names}, {(a, b): [] for a in names for b in names if a != b}
    for seed in seeds:
        single = {}
        for s in by_id.values():
            single.update(_mtl_scores([s], datasets, cfg, seed))
        within = {}
        for f in names:
            joint = _mtl_scores(fams[f], datasets, cfg, seed)
            within[f] = rel(joint, single, [t.task_id for t in fams[f]])
            within_s[f].append(within[f])
            rows.append({"seed": seed, "source": f, "target": f, "rel_change": within[f]})
        for a, b in itertools.combinations(names, 2):
            joint = _mtl_scores(fams[a] + fams[b], datasets, cfg, seed)
            for src, dst in ((a, b), (b, a)):
                change = rel(joint, single, [t.task_id for t in fams[dst]])
                pair_s[(src, dst)].append(change - within[dst])
                rows.append({"seed": seed, "source": src, "target": dst, "rel_change": change,
                             "vs_within": change - within[dst]})
        rows.extend({"seed": seed, "task_id": t, "single_score": v} for t, v in single.items())
    ftm = FamilyTransferMatrix(names, {f: float(np.mean(v)) for f, v in within_s.items()},
                               {k: float(np.mean(v)) for k, v in pair_s.items()})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out / "transfer_runs.jsonl", rows)
        m = ftm.matrix()
        _write_csv(out / "transfer_matrix.csv", ["source"] + names,
                   [[a] + [repr(float(x)) for x in m[i]] for i, a in enumerate(names)])
        tf, tt = ftm.transfer_from(), ftm.transfer_to()
        _write_csv(out / "transfer_summary.csv", ["family", "within", "transfer_from", "transfer_to"],
                   [[f, ftm.within[f], tf[f], tt[f]] for f in names])
    return ftm


# -- ablation grid ------------------------------------------------------------


def toggle_grid() -> list[dict[str, bool]]:
    return [dict(zip(TOGGLES, bits)) for bits in itertools.product((False, True), repeat=4)]


def _ablation_run(cfg: TrainConfig, datasets, toggles: dict, seed: int) -> dict:
    run_cfg = replace(cfg, mode=Mode.MTL_PREFINETUNE, seed=seed, warm_start_checkpoint=None, **toggles)
    try:
        res = train(run_cfg, datasets)
    except Exception as exc:
        return {**toggles, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}
    losses = {t: r.loss for t, r in res.final.items()}
    return {**toggles, "seed": seed, "mean_eval_loss": float(np.mean(list(losses.values()))),
            "task_losses": losses, "steps_run": res.steps_run, "error": None}


def run_ablation_grid(tasks: Sequence[TaskSpec], datasets: dict, cfg: TrainConfig,
                      seeds: Sequence[int], out_dir=None) -> dict:
    """Train all 16 toggle combinations; per-cell mean final evaluation loss."""
    if len(tasks) < 2:
        raise ValueError("ablation grid needs at least two tasks")
    cfg = replace(cfg, tasks=list(tasks))
    grid = toggle_grid()
    jobs = [(cfg, datasets, tg, s) for tg in grid for s in seeds]
    runs = run_jobs(_ablation_run, jobs)
    cells = []
    for tg in grid:
        mine = [r for r in runs if all(r[k] == v for k, v in tg.items()) and r["error"] is None]
        cells.append({**tg, "mean_eval_loss": float(np.mean([r["mean_eval_loss"] for r in mine]))
                      if mine else math.nan, "n_seeds": len(mine)})
    report = {"recipe": "ablation", "cells": cells, "runs": runs, "methods": ablation_summary(cells)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out / "ablation_runs.jsonl", runs)
        _write_csv(out / "ablation_grid.csv", list(TOGGLES) + ["mean_eval_loss", "n_seeds"],
                   [[c[k] for k in TOGGLES] + [repr(c["mean_eval_loss"]), c["n_seeds"]] for c in cells])
        _write_csv(out / "ablation_methods.csv",
                   ["method", "mean_on", "mean_off", "var_on", "var_off"],
                   [[m, v["mean_on"], v["mean_off"], v["var_on"], v["var_off"]]
                    for m, v in report["methods"].items()])
    return report


def ablation_summary(cells: Sequence[dict]) -> dict:
    """Mean and across-cell variance of the cell losses with each method on/off."""
    out = {}
    for m in TOGGLES:
        on = [c["mean_eval_loss"] for c in cells if c[m]]
        off = [c["mean_eval_loss"] for c in cells if not c[m]]
        out[m] = {"mean_on": float(np.mean(on)), "mean_off": float(np.mean(off)),
                  "var_on": float(np.var(on)), "var_off": float(np.var(off))}
    return out


# ---------------------------------------------------------------------------
# text rendering


def render_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ---------------------------------------------------------------------------
# experiment configuration files


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


_TRAIN_KEYS = {f for f in TrainConfig.__dataclass_fields__} - {"mode", "tasks", "scheduler", "encoder"}
_TOP_KEYS = {"recipe", "manifest", "synth", "output_dir", "seeds", "tasks", "primary", "aux", "aux_k",
             "train", "encoder", "scheduler", "prefinetune", "finetune", "gradts", "prefinetune_seed"}


@dataclass
class ExperimentConfig:
    """One experiment: data source, training overrides, seeds and output.

    Stored as JSON; see the README for the schema. ``train`` holds
    TrainConfig overrides shared by every stage, ``prefinetune`` and
    ``finetune`` hold stage-specific overrides on top of it.
    """

    recipe: str
    output_dir: str
    seeds: list[int]
    manifest: str | None = None
    synth: dict | None = None
    tasks: list[str] | None = None
    primary: str | None = None
    aux: object = "all"
    aux_k: int = 10
    train: dict = None
    encoder: dict = None
    scheduler: dict = None
    prefinetune: dict = None
    finetune: dict = None
    gradts: dict = None
    prefinetune_seed: int | None = None

    def __post_init__(self):
        for name in ("train", "encoder", "scheduler", "prefinetune", "finetune", "gradts"):
            if getattr(self, name) is None:
                setattr(self, name, {})
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if (self.manifest is None) == (self.synth is None):
            raise ConfigError("exactly one of 'manifest' and 'synth' must be given")
        for section in (self.train, self.prefinetune, self.finetune):
            bad = set(section) - _TRAIN_KEYS
            if bad:
                raise ConfigError(f"unknown training keys: {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        bad = set(d) - _TOP_KEYS
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        d = dict(d)
        d.setdefault("recipe", "train")
        d.setdefault("seeds", list(DEFAULT_SEEDS))
        if "output_dir" not in d:
            raise ConfigError("config needs 'output_dir'")
        if base_dir is not None and d.get("manifest") and not Path(d["manifest"]).is_absolute():
            d["manifest"] = str(Path(base_dir) / d["manifest"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(d, base_dir=Path(path).parent)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    # -- building blocks ----------------------------------------------------

    def encoder_config(self):
        from .encoder import EncoderConfig
        try:
            return EncoderConfig(**self.encoder)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"encoder: {exc}") from exc

    def scheduler_config(self):
        from .scheduler import SchedulerConfig
        try:
            return SchedulerConfig(**self.scheduler)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scheduler: {exc}") from exc

    def train_config(self, mode: Mode, tasks: Sequence[TaskSpec], stage: str | None = None,
                     **fixed) -> TrainConfig:
        fields = dict(self.train)
        if stage:
            fields.update(getattr(self, stage))
        fields.update(fixed)
        try:
            return TrainConfig(mode=mode, tasks=list(tasks), encoder=self.encoder_config(),
                               scheduler=self.scheduler_config(), **fields)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"training config: {exc}") from exc

    def load_data(self) -> tuple[list[TaskSpec], dict]:
        """Task specs and tokenized datasets from the manifest or the synth block."""
        from .pipeline import SynthFamilyConfig, TaskDataset, generate_synthetic, load_examples, read_task_manifest
        enc = self.encoder_config()
        if self.synth is not None:
            s = dict(self.synth)
            try:
                fam = s.pop("families", 9)
                per = s.pop("tasks_per_family", 3)
                seed = s.pop("seed", 0)
                related = s.pop("related", None)
                if "seq_len" in s:
                    s["seq_len"] = tuple(s["seq_len"])
                if s.get("task_sizes") is not None:
                    s["task_sizes"] = tuple(s["task_sizes"])
                if "task_types" in s:
                    s["task_types"] = tuple(s["task_types"])
                suite = generate_synthetic(SynthFamilyConfig(**s), fam, per, seed, related=related)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"synth: {exc}") from exc
            specs, datasets = suite.specs, suite.datasets(enc.vocab_size, enc.max_seq_len)
        else:
            try:
                specs = read_task_manifest(self.manifest)
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"manifest: {exc}") from exc
            datasets = {}
            for sp in specs:
                if not sp.dataset_ref:
                    raise ConfigError(f"task {sp.task_id} has no dataset path")
                ex = load_examples(sp.dataset_ref, sp.task_id, sp.task_type)
                datasets[sp.task_id] = TaskDataset.from_examples(sp.task_id, sp.task_type, ex,
                                                                 enc.vocab_size, enc.max_seq_len)
        if self.tasks is not None:
            by_id = {s.task_id: s for s in specs}
            missing = [t for t in self.tasks if t not in by_id]
            if missing:
                raise ConfigError(f"unknown task ids: {missing}")
            specs = [by_id[t] for t in self.tasks]
        return specs, datasets

    def primary_spec(self, specs: Sequence[TaskSpec]) -> TaskSpec:
        if self.primary is None:
            raise ConfigError("this recipe needs 'primary'")
        for s in specs:
            if s.task_id == self.primary:
                return s
        raise ConfigError(f"primary task {self.primary!r} not in the task list")
