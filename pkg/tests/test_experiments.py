import json

import pandas as pd
import pytest

import run_experiments
from config import BudgetBlock, ConfigError, DatasetBlock, EmbeddingBlock, ExperimentConfig, ModelBlock
from models.cell import read_architecture_file
from services.experiments import (
    BEST_FILE,
    CANDIDATES_FILE,
    CONFIG_FILE,
    RUN_FILE,
    STUDY_FILE,
    baseline_child,
    check_transfer,
    cmd_export_arch_table,
    cmd_random_baseline,
    cmd_report,
    cmd_search,
    cmd_transfer,
    cmd_tune_baseline,
    cmd_tune_derived,
    find_run_dirs,
    format_report,
    prepare_run,
)
from services.hpt import DONE, FAILED, StudyLog, Trial
from tests.conftest import REFERENCE_ARCHS

TINY_BUDGET = dict(preset="desk", trials=2, search_epochs=1, max_epochs=2, patience=1,
                   concurrency=1, mode="random", derive_count=2, controller_steps_per_epoch=1,
                   samples_per_step=2)
TINY_CHILD = {"batch_size": 8, "hidden_dim": 4, "learning_rate": 0.005}


def tiny_config(root, plan="L", dataset="synthetic-sts", **extra):
    return ExperimentConfig(
        dataset=DatasetBlock(name=dataset, synthetic_size=32),
        embedding=EmbeddingBlock(name="toy", kind="toy-hash", dim=4),
        model=ModelBlock(kind="BLM", layer_plan=plan),
        budget=BudgetBlock(**TINY_BUDGET),
        out=str(root),
        **extra,
    )


@pytest.mark.parametrize("source, target", [
    ("mrpc", "synthetic-mrpc"),
    ("sick-r", "sts-b"),
    ("synthetic-sts", "mrpc"),
])
def test_transfer_refusals(source, target):
    with pytest.raises(ConfigError):
        check_transfer(source, target)


def test_transfer_allowed_pairs():
    check_transfer("mrpc", "sick-r")
    check_transfer("sick-r", "sts-b", refuse_overlapping=False)


def test_baseline_needs_lstm_plan(tmp_path):
    with pytest.raises(ConfigError):
        cmd_tune_baseline(tiny_config(tmp_path, plan="E"))


def test_search_needs_baseline_or_overrides(tmp_path):
    with pytest.raises(ConfigError):
        baseline_child(tiny_config(tmp_path))
    child = baseline_child(tiny_config(tmp_path, child_overrides=TINY_CHILD))
    assert child.hidden_dim == 4 and child.batch_size == 8


def test_random_baseline_needs_rnd_plan(tmp_path):
    with pytest.raises(ConfigError):
        cmd_random_baseline(tiny_config(tmp_path, plan="L"), k=2)


def test_provenance_written_before_compute(tmp_path):
    ctx = prepare_run(tiny_config(tmp_path), "tune-baseline", "L")
    run = json.loads((ctx.run_dir / RUN_FILE).read_text())
    assert run["command"] == "tune-baseline" and run["optimized_for"] == "synthetic-sts"
    assert json.loads((ctx.run_dir / CONFIG_FILE).read_text())["budget"]["trials"] == 2
    assert ctx.run_dir.name == "synthetic-sts_toy_blm_l"
    assert ctx.training.max_epochs == 2


def test_end_to_end_pipeline(tmp_path):
    baseline = cmd_tune_baseline(tiny_config(tmp_path))
    assert baseline["trials"] == 2 and baseline["task"] == "regression"
    baseline_dir = tmp_path / "synthetic-sts_toy_blm_l"
    assert (baseline_dir / "predictions_test.tsv").exists()
    assert len((baseline_dir / STUDY_FILE).read_text().splitlines()) == 4

    derived_path = cmd_search(tiny_config(tmp_path, plan="E", child_overrides={"hidden_dim": 4}))
    derived = read_architecture_file(derived_path)
    assert len(derived) == 2

    tuned = cmd_tune_derived(tiny_config(tmp_path, plan="E"), derived_path)
    assert tuned["params"]["architecture"] in {line.strip() for line in
                                                (tmp_path / "synthetic-sts_toy_blm_e" / CANDIDATES_FILE).read_text().splitlines()}

    cmd_random_baseline(tiny_config(tmp_path, plan="E"), k=2)
    transfer = cmd_transfer(tiny_config(tmp_path, plan="E", dataset="synthetic-mrpc"), derived_path, "synthetic-sick")
    assert transfer["task"] == "classification"

    frame = cmd_report(find_run_dirs(tmp_path), tmp_path / "report")
    assert list(frame["plan"]) == ["E", "E", "L", "RND"]
    assert set(frame["status"]) == {"done"}
    assert frame.iloc[0]["dataset"] == "synthetic-mrpc"
    assert (tmp_path / "report" / "report.tsv").exists()
    assert "synthetic-sts" in (tmp_path / "report" / "report.txt").read_text()

    again = cmd_tune_baseline(tiny_config(tmp_path))
    assert again == json.loads((baseline_dir / BEST_FILE).read_text())


def _fake_run(root, name, dataset, model, plan, best=None, optimized_for=None):
    run_dir = root / name
    run_dir.mkdir(parents=True)
    (run_dir / RUN_FILE).write_text(json.dumps({
        "command": "tune-derived", "dataset": dataset, "embedding": "toy", "model": model, "plan": plan,
        "optimized_for": optimized_for or dataset,
    }))
    if best is not None:
        metrics = {"primary": best, "undefined": False}
        (run_dir / BEST_FILE).write_text(json.dumps({
            "trial_id": 0, "trials": 1, "tie": False, "params": {}, "task": "regression",
            "dev": metrics, "test": metrics,
        }))
    return run_dir


def test_report_sorting_and_pending_rows(tmp_path):
    dirs = [
        _fake_run(tmp_path, "c", "sts-b", "ESIM", "L / L", best=0.7),
        _fake_run(tmp_path, "a", "sick-r", "BLM", "L", best=0.8),
        _fake_run(tmp_path, "b", "sick-r", "BLM", "E"),
    ]
    search = _fake_run(tmp_path, "s", "sick-r", "BLM", "E")
    (search / RUN_FILE).write_text(json.dumps({"command": "search"}))

    frame = cmd_report(dirs + [search])
    assert list(frame["dataset"]) == ["sick-r", "sick-r", "sts-b"]
    assert list(frame["plan"]) == ["E", "L", "L / L"]
    assert list(frame["status"]) == ["pending", "done", "done"]
    assert pd.isna(frame.iloc[0]["dev"])
    assert "pending" in format_report(frame)
    assert format_report(frame.iloc[0:0]) == "(no runs)"


def test_report_flags_best_plan_per_configuration(tmp_path):
    dirs = [
        _fake_run(tmp_path, "l", "sick-r", "BLM", "L", best=0.80),
        _fake_run(tmp_path, "e", "sick-r", "BLM", "E", best=0.83),
        _fake_run(tmp_path, "t", "sick-r", "BLM", "E", best=0.85, optimized_for="sts-b"),
        _fake_run(tmp_path, "r", "sick-r", "BLM", "RND", best=0.79),
        _fake_run(tmp_path, "p", "sick-r", "ESIM", "E / L"),
        _fake_run(tmp_path, "el", "sts-b", "ESIM", "E / L", best=0.75),
        _fake_run(tmp_path, "ll", "sts-b", "ESIM", "L / L", best=0.75),
    ]
    frame = cmd_report(dirs)
    best = frame[frame["best"]]
    assert list(zip(best["dataset"], best["plan"], best["optimized_for"])) == [
        ("sick-r", "E", "sts-b"), ("sts-b", "E / L", "sts-b"), ("sts-b", "L / L", "sts-b"),
    ]
    assert not frame[frame["status"] == "pending"]["best"].any()

    text = format_report(frame)
    assert "best sick-r / toy / BLM: E (from sts-b) (dev 0.8500)" in text
    assert "best sts-b / toy / ESIM: tie between E / L, L / L (dev 0.7500)" in text
    assert "sick-r / toy / ESIM" not in text


def test_report_counts_trials_from_study_log(tmp_path):
    run_dir = _fake_run(tmp_path, "a", "sick-r", "BLM", "L", best=0.8)
    log = StudyLog(run_dir / STUDY_FILE)
    log.append(Trial(0, {"x": 1}, status=DONE, objective=0.8, seconds=1800.0))
    log.append(Trial(1, {"x": 2}, status=FAILED, seconds=1800.0, reason="diverged"))
    row = cmd_report([run_dir]).iloc[0]
    assert row["trials_done"] == 1 and row["trials_failed"] == 1
    assert row["compute_hours"] == pytest.approx(1.0)


def test_export_arch_table(tmp_path):
    out = tmp_path / "table.txt"
    text = cmd_export_arch_table(REFERENCE_ARCHS, out)
    assert out.read_text().strip() == text.strip()
    assert len(text.splitlines()) == 27


def test_cli_export_and_errors(tmp_path, capsys):
    assert run_experiments.main(["export-arch-table", str(REFERENCE_ARCHS)]) == 0
    assert "Identity" in capsys.readouterr().out
    assert run_experiments.main(["--config", str(tmp_path / "missing.yaml"), "tune-baseline"]) == 2


def test_cli_flags_override_config(tmp_path):
    args = run_experiments.build_parser().parse_args(
        ["--config", "data/example_config.yaml", "--trials", "3", "--seed", "9", "--out", str(tmp_path),
         "--mode", "random", "tune-baseline"])
    config = run_experiments.load_config(args)
    assert config.budget.trials == 3 and config.budget.mode == "random"
    assert config.seed == 9 and config.runs_root() == tmp_path
    assert config.dataset.name == "synthetic-sts"
