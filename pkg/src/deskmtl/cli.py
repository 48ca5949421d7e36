"""Command line entry point: ``deskmtl <command> --config FILE [overrides]``.

Exit codes: 0 success, 2 configuration error, 3 run failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import gradts as gt
from .experiments import ConfigError, ExperimentConfig
from .trainer import Mode, train

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3
log = logging.getLogger("deskmtl")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--output-dir", help="override output_dir")
    p.add_argument("--seeds", help="comma-separated seed list, e.g. 0,1,2")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty output dir")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deskmtl", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, help_ in [("train", "single-task or multi-task training"),
                        ("prefinetune", "multi-task pre-finetuning; writes a checkpoint"),
                        ("transfer", "within/between family transfer matrix"),
                        ("ablate", "16-cell toggle grid")]:
        _add_common(sub.add_parser(name, help=help_))
    p = sub.add_parser("finetune", help="finetune the primary task (per seed) from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="pre-finetuned checkpoint; without it the aux set is pre-finetuned first")
    p.add_argument("--baseline", action="store_true", help="also run the single-task baseline")

    g = sub.add_parser("gradts", help="auxiliary task selection")
    gsub = g.add_subparsers(dest="gradts_command", required=True)
    p = gsub.add_parser("rank", help="importance matrices and Kendall ranking")
    _add_common(p)
    p.add_argument("--steps", type=int, help="phase-1 steps per task (default: one epoch, at most 500)")
    p = gsub.add_parser("sweep", help="pick k by primary dev loss")
    _add_common(p)
    p.add_argument("--ranking", required=True, help="ranking.csv written by 'gradts rank'")
    p.add_argument("--ks", help="comma-separated k values (default 1..n)")

    p = sub.add_parser("clean", help="clean and dedup JSONL text records")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("synth", help="write a synthetic task suite (JSONL + manifests)")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--families", type=int, default=9)
    p.add_argument("--tasks-per-family", type=int, default=3)
    p.add_argument("--examples", type=int, default=2000)
    p.add_argument("--overlap", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--related", help="comma-separated family indices sharing the anchor lexicon")
    p.add_argument("--vocab", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("report", help="render tables and plots from a results directory")
    p.add_argument("--input", required=True, help="directory written by another command")
    p.add_argument("--no-plots", action="store_true")
    return ap


def _ints(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {s!r}") from exc


def load_config(args) -> ExperimentConfig:
    ec = ExperimentConfig.load(args.config)
    if args.output_dir:
        ec.output_dir = args.output_dir
    if args.seeds:
        ec.seeds = _ints(args.seeds)
        if not ec.seeds:
            raise ConfigError("seed list is empty")
    for flag, key in (("max_steps", "max_steps"), ("lr0", "lr0")):
        v = getattr(args, flag)
        if v is not None:
            ec.train[key] = v
    if args.eval_interval is not None:
        ec.scheduler["eval_interval"] = args.eval_interval
    return ec


def _out(ec: ExperimentConfig, force: bool) -> Path:
    try:
        out = ex.prepare_output(ec.output_dir, force)
    except ex.OutputExists as exc:
        raise ConfigError(str(exc)) from exc
    (out / "experiment.json").write_text(json.dumps(ec.to_dict(), indent=2))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    ec = load_config(args)
    specs, datasets = ec.load_data()
    mode = Mode.SINGLE_TASK if len(specs) == 1 else Mode.MTL_PREFINETUNE
    cfg = ec.train_config(mode, specs)
    out = _out(ec, args.force)
    rows = []
    for seed in ec.seeds:
        res = train(replace(cfg, seed=seed), datasets, out_dir=out / f"seed{seed}")
        for tid, rec in res.final.items():
            rows.append({"seed": seed, **rec.to_dict()})
    ex._write_jsonl(out / "final.jsonl", rows)
    print(ex.render_table(["seed", "task_id", "loss", "f1_macro", "accuracy"],
                          [[r["seed"], r["task_id"], r["loss"], r["f1_macro"], r["accuracy"]] for r in rows]))
    return EXIT_OK


def _aux_specs(ec: ExperimentConfig, specs, primary):
    aux = ec.aux
    if isinstance(aux, list):
        by_id = {s.task_id: s for s in specs}
        try:
            return [by_id[t] for t in aux]
        except KeyError as exc:
            raise ConfigError(f"unknown auxiliary task {exc}") from exc
    if aux in ("all", "random"):
        return ex.aux_preset(aux, specs, primary, k=ec.aux_k)
    if aux == "gradts":
        path = ec.gradts.get("ranking")
        if not path:
            raise ConfigError("aux 'gradts' needs gradts.ranking (a ranking.csv)")
        return ex.aux_preset("gradts", specs, primary, k=ec.aux_k, ranked=read_ranking(path))
    raise ConfigError(f"unknown aux preset {aux!r}")


def cmd_prefinetune(args) -> int:
    ec = load_config(args)
    specs, datasets = ec.load_data()
    primary = ec.primary_spec(specs) if ec.primary else None
    aux = _aux_specs(ec, specs, primary) if primary else specs
    if not aux:
        raise ConfigError("auxiliary task set is empty")
    cfg = ec.train_config(Mode.MTL_PREFINETUNE if len(aux) > 1 else Mode.SINGLE_TASK, aux, "prefinetune")
    out = _out(ec, args.force)
    seed = ec.prefinetune_seed if ec.prefinetune_seed is not None else ec.seeds[0]
    res = ex.prefinetune(aux, datasets, cfg, out / "prefinetune.npz", seed, out_dir=out / "prefinetune")
    print(f"pre-finetuned {len(aux)} tasks for {res.steps_run} steps -> {out / 'prefinetune.npz'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    ec = load_config(args)
    specs, datasets = ec.load_data()
    primary = ec.primary_spec(specs)
    out = _out(ec, args.force)
    reports = {}
    if args.baseline:
        base_cfg = ec.train_config(Mode.SINGLE_TASK, [primary], "finetune")
        reports["baseline"] = ex.run_baseline(primary, datasets, base_cfg, ec.seeds, out / "baseline")
    if args.checkpoint:
        from .encoder import load_checkpoint
        enc, _, _ = load_checkpoint(args.checkpoint)
        if enc.config != ec.encoder_config():
            raise ConfigError("finetune encoder config does not match the checkpoint")
        cfg = ec.train_config(Mode.FINETUNE, [primary], "finetune",
                              warm_start_checkpoint=str(args.checkpoint), hses=False, resurrection=False)
        runs = ex.run_jobs(ex._single_run, [(cfg, datasets, s, out / "finetune" / f"seed{s}") for s in ec.seeds])
        rep = {"recipe": "finetune", "primary": primary.task_id, "checkpoint": str(args.checkpoint),
               "runs": runs, "summary": ex.summarize_runs(runs)}
        ex._persist_seed_report(out / "finetune", rep)
    else:
        aux = _aux_specs(ec, specs, primary)
        pre_cfg = ec.train_config(Mode.MTL_PREFINETUNE if len(aux) > 1 else Mode.SINGLE_TASK,
                                  aux or [primary], "prefinetune")
        ft_cfg = ec.train_config(Mode.SINGLE_TASK, [primary], "finetune")
        rep = ex.prefinetune_then_finetune(aux, primary, datasets, pre_cfg, ft_cfg, ec.seeds,
                                           out / "finetune", ec.prefinetune_seed)
    reports["finetune"] = rep
    if "baseline" in reports:
        write_efficiency(out / "step_efficiency.csv", reports["baseline"]["runs"], rep["runs"])
    _print_summaries(reports)
    failed = any(r["summary"]["failed_seeds"] for r in reports.values())
    return EXIT_RUN if failed else EXIT_OK


def write_efficiency(path, base_runs, ft_runs) -> list[dict]:
    """Per seed: steps the finetuned run needs to reach the baseline's best dev F1."""
    rows = []
    for b, f in zip(base_runs, ft_runs):
        if b.get("error") or f.get("error"):
            continue
        target = b["max_dev_f1"]
        reach = ex.steps_to_reach(f["curve"], target)
        rows.append({"seed": b["seed"], "baseline_best_dev_f1": target, "baseline_steps": b["steps_run"],
                     "steps_to_reach": reach,
                     "fraction": None if reach is None else reach / b["steps_run"]})
    ex._write_csv(path, list(rows[0]) if rows else ["seed"], [list(r.values()) for r in rows])
    return rows


def _print_summaries(reports: dict) -> None:
    rows = []
    for name, rep in reports.items():
        s = rep["summary"]
        rows.append([name, s["n_ok"], s["test_f1_mean"], s["test_f1_std"], s["test_loss_mean"]])
    print(ex.render_table(["arm", "runs", "test_f1_mean", "test_f1_std", "test_loss_mean"], rows))


def read_ranking(path) -> list[gt.CorrelationResult]:
    with open(path, newline="") as fh:
        return [gt.CorrelationResult(r["task_id"], float(r["tau"]) if r["tau"] else None)
                for r in csv.DictReader(fh)]


def cmd_gradts_rank(args) -> int:
    ec = load_config(args)
    specs, datasets = ec.load_data()
    primary = ec.primary_spec(specs)
    cfg = ec.train_config(Mode.SINGLE_TASK, [primary], "prefinetune")
    out = _out(ec, args.force)
    seed = ec.gradts.get("seed", gt.SELECTION_SEED)
    steps = args.steps or ec.gradts.get("steps")
    mats = {}
    for s in specs:
        mats[s.task_id] = gt.build_importance(s, datasets, cfg, steps=steps, seed=seed)
        gt.save_matrix(out / f"importance_{s.task_id}.txt", mats[s.task_id])
    cands = [mats[s.task_id] for s in specs if s.task_id != primary.task_id]
    ranked = gt.rank_tasks(mats[primary.task_id], cands)
    gt.write_ranking(out / "ranking.csv", ranked)
    print(ex.render_table(["task_id", "tau"], [[r.task_id, r.tau] for r in ranked]))
    return EXIT_OK


def cmd_gradts_sweep(args) -> int:
    ec = load_config(args)
    specs, datasets = ec.load_data()
    primary = ec.primary_spec(specs)
    ranked = [r for r in read_ranking(args.ranking) if r.task_id != primary.task_id]
    by_id = {s.task_id: s for s in specs}
    # template only: prefinetune() swaps in each k's task list and mode
    any_aux = [by_id[r.task_id] for r in ranked[:2]]
    pre_cfg = ec.train_config(Mode.MTL_PREFINETUNE if len(any_aux) > 1 else Mode.SINGLE_TASK,
                              any_aux, "prefinetune")
    ft_cfg = ec.train_config(Mode.SINGLE_TASK, [primary], "finetune")
    out = _out(ec, args.force)
    ks = _ints(args.ks) if args.ks else ec.gradts.get("ks")
    k_best, rows = gt.sweep_k(ranked, primary, by_id, datasets, pre_cfg, ft_cfg, out,
                              seed=ec.gradts.get("seed", gt.SELECTION_SEED), ks=ks)
    gt.write_sweep(out / "sweep.csv", rows)
    print(ex.render_table(["k", "dev_loss", "dev_f1", "error"], [[r.k, r.dev_loss, r.dev_f1, r.error or ""] for r in rows]))
    print(f"k* = {k_best}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    ec = load_config(args)
    specs, datasets = ec.load_data()
    cfg = ec.train_config(Mode.MTL_PREFINETUNE, specs[:2], None)
    out = _out(ec, args.force)
    ftm = ex.run_family_transfer(specs, datasets, cfg, ec.seeds, out)
    tf, tt = ftm.transfer_from(), ftm.transfer_to()
    print(ex.render_table(["family", "within", "transfer_from", "transfer_to"],
                          [[f, ftm.within[f], tf[f], tt[f]] for f in ftm.families]))
    return EXIT_OK


def cmd_ablate(args) -> int:
    ec = load_config(args)
    specs, datasets = ec.load_data()
    cfg = ec.train_config(Mode.MTL_PREFINETUNE, specs, None)
    out = _out(ec, args.force)
    rep = ex.run_ablation_grid(specs, datasets, cfg, ec.seeds, out)
    print(ex.render_table(list(ex.TOGGLES) + ["mean_eval_loss"],
                          [[c[k] for k in ex.TOGGLES] + [c["mean_eval_loss"]] for c in rep["cells"]]))
    return EXIT_RUN if any(r.get("error") for r in rep["runs"]) else EXIT_OK


def cmd_clean(args) -> int:
    from .pipeline import clean_corpus, read_jsonl, write_jsonl
    out = Path(args.output)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    try:
        records = read_jsonl(args.input)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from exc
    kept, stats = clean_corpus(records)
    write_jsonl(out, kept)
    print(json.dumps(stats))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .pipeline import SynthFamilyConfig, generate_synthetic
    try:
        out = ex.prepare_output(args.output_dir, args.force)
        cfg = SynthFamilyConfig(vocab=args.vocab, overlap=args.overlap, label_noise=args.noise,
                                examples_per_task=args.examples)
        related = _ints(args.related) if args.related else None
        suite = generate_synthetic(cfg, args.families, args.tasks_per_family, args.seed, related=related)
    except (ValueError, ex.OutputExists) as exc:
        raise ConfigError(str(exc)) from exc
    manifest = suite.save(out)
    print(f"wrote {len(suite.specs)} tasks; manifest {manifest}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.input)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    csvs = sorted(root.rglob("*.csv"))
    if not csvs:
        raise ConfigError(f"no CSV reports under {root}")
    for path in csvs:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            continue
        print(f"\n== {path.relative_to(root)}")
        print(ex.render_table(rows[0], [[_num(v) for v in r] for r in rows[1:]]))
    if not args.no_plots:
        for p in render_plots(root):
            print(f"plot: {p}")
    return EXIT_OK


def _num(v: str):
    try:
        return float(v) if any(c in v for c in ".e") else int(v)
    except ValueError:
        return v


def render_plots(root: Path) -> list[Path]:
    """Static PNGs for the report files found under ``root``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made = []
    for path in root.rglob("transfer_matrix.csv"):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        names = rows[0][1:]
        m = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        fig, ax = plt.subplots(figsize=(6, 5))
        im = ax.imshow(100 * m, cmap="RdBu", vmin=-np.abs(100 * m).max(), vmax=np.abs(100 * m).max())
        ax.set_xticks(range(len(names)), names, rotation=60, ha="right", fontsize=7)
        ax.set_yticks(range(len(names)), names, fontsize=7)
        ax.set_xlabel("target family")
        ax.set_ylabel("source family")
        fig.colorbar(im, label="relative change (%)")
        fig.tight_layout()
        made.append(path.with_suffix(".png"))
        fig.savefig(made[-1], dpi=120)
        plt.close(fig)
    for path in root.rglob("ablation_runs.jsonl"):
        runs = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
        runs = [r for r in runs if r.get("error") is None]
        fig, axes = plt.subplots(1, len(ex.TOGGLES), figsize=(12, 3.5), sharey=True)
        for ax, m in zip(axes, ex.TOGGLES):
            on = [r["mean_eval_loss"] for r in runs if r[m]]
            off = [r["mean_eval_loss"] for r in runs if not r[m]]
            ax.boxplot([off, on])
            ax.set_xticks([1, 2], ["off", "on"])
            ax.set_title(m, fontsize=9)
        axes[0].set_ylabel("evaluation loss")
        fig.tight_layout()
        made.append(path.with_name("ablation_boxplot.png"))
        fig.savefig(made[-1], dpi=120)
        plt.close(fig)
    for path in root.rglob("runs.jsonl"):
        runs = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
        curves = [r["curve"] for r in runs if r.get("curve")]
        if not curves:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for c in curves:
            ax.plot([p[0] for p in c], [p[1] for p in c], alpha=0.5)
        ax.set_xlabel("step")
        ax.set_ylabel("dev macro F1")
        fig.tight_layout()
        made.append(path.with_name("dev_curves.png"))
        fig.savefig(made[-1], dpi=120)
        plt.close(fig)
    return made


COMMANDS = {"train": cmd_train, "prefinetune": cmd_prefinetune, "finetune": cmd_finetune,
            "transfer": cmd_transfer, "ablate": cmd_ablate, "clean": cmd_clean, "synth": cmd_synth,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gradts":
        fn = cmd_gradts_rank if args.gradts_command == "rank" else cmd_gradts_sweep
    else:
        fn = COMMANDS[args.command]
    try:
        return fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # run failure
        log.exception("run failed")
        print(f"run failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
