import json

import pytest

from deskmtl.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUN, main
from deskmtl.pipeline import read_task_manifest

ENCODER = {"vocab_size": 256, "max_seq_len": 16, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 8}


@pytest.fixture
def suite_dir(tmp_path):
    out = tmp_path / "suite"
    rc = main(["synth", "--output-dir", str(out), "--families", "2", "--tasks-per-family", "2",
               "--examples", "60", "--vocab", "256", "--seed", "1"])
    assert rc == EXIT_OK
    return out


def write_cfg(tmp_path, **kw):
    d = {"manifest": str(tmp_path / "suite" / "tasks.jsonl"), "output_dir": str(tmp_path / "run"),
         "seeds": [0], "encoder": ENCODER, "train": {"max_steps": 4, "per_task_batch": 4, "eval_batch": 32},
         "scheduler": {"eval_interval": 2}}
    d.update(kw)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return p


def test_synth_writes_manifest(suite_dir):
    specs = read_task_manifest(suite_dir / "tasks.jsonl")
    assert len(specs) == 4 and all((suite_dir / "data" / f"{s.task_id}.jsonl").exists() for s in specs)


def test_train_then_report(suite_dir, tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    run = tmp_path / "run"
    assert (run / "final.jsonl").exists() and (run / "seed0" / "metrics.jsonl").exists()
    # second run refuses to overwrite
    assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["train", "--config", str(cfg), "--force", "--max-steps", "2"]) == EXIT_OK


def test_finetune_with_baseline_and_report(suite_dir, tmp_path, capsys):
    specs = read_task_manifest(suite_dir / "tasks.jsonl")
    cfg = write_cfg(tmp_path, primary=specs[0].task_id, seeds=[0, 1])
    assert main(["finetune", "--config", str(cfg), "--baseline"]) == EXIT_OK
    run = tmp_path / "run"
    assert (run / "step_efficiency.csv").exists() and (run / "finetune" / "summary.csv").exists()
    capsys.readouterr()
    assert main(["report", "--input", str(run)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "summary.csv" in text and "dev_curves.png" in text


def test_gradts_rank(suite_dir, tmp_path):
    specs = read_task_manifest(suite_dir / "tasks.jsonl")
    cfg = write_cfg(tmp_path, primary=specs[0].task_id)
    assert main(["gradts", "rank", "--config", str(cfg), "--steps", "2"]) == EXIT_OK
    lines = (tmp_path / "run" / "ranking.csv").read_text().splitlines()
    assert lines[0] == "task_id,tau" and len(lines) == 4


def test_clean_command(tmp_path, capsys):
    src = tmp_path / "raw.jsonl"
    src.write_text("\n".join(json.dumps({"text": t, "label": 1}) for t in
                             ["a perfectly fine sentence here", "a perfectly  fine sentence here", "short"]))
    dst = tmp_path / "clean.jsonl"
    assert main(["clean", "--input", str(src), "--output", str(dst)]) == EXIT_OK
    assert len(dst.read_text().splitlines()) == 1
    assert json.loads(capsys.readouterr().out.strip())["duplicates"] == 1
    assert main(["clean", "--input", str(src), "--output", str(dst)]) == EXIT_CONFIG


@pytest.mark.parametrize("cfg_text", ["{broken", json.dumps({"output_dir": "x"}),
                                      json.dumps({"output_dir": "x", "manifest": "m", "unknown": 1})])
def test_config_errors_exit_2(tmp_path, cfg_text):
    p = tmp_path / "bad.json"
    p.write_text(cfg_text)
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG


def test_missing_primary_exit_2(suite_dir, tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["finetune", "--config", str(cfg)]) == EXIT_CONFIG


def test_run_failure_exit_3(suite_dir, tmp_path):
    specs = read_task_manifest(suite_dir / "tasks.jsonl")
    binary = next(s for s in specs if s.task_type.kind.value == "binary")
    path = suite_dir / "data" / f"{binary.task_id}.jsonl"
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    path.write_text("\n".join(json.dumps({**r, "label": 7}) for r in rows))
    cfg = write_cfg(tmp_path, tasks=[binary.task_id])
    assert main(["train", "--config", str(cfg)]) == EXIT_RUN


def test_report_on_empty_dir_exit_2(tmp_path):
    assert main(["report", "--input", str(tmp_path)]) == EXIT_CONFIG
