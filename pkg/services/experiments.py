# -*- coding: utf-8 -*-
# services/experiments.py
"""
Experiment commands: baseline tuning, ENAS search, derived / random /
transfer architecture tuning, and report assembly over run directories.

Every command works in one run directory per (dataset, embedding, model,
layer plan). The config snapshot and run.json are written before any
compute, and rerunning a command against the same directory resumes it.
"""
import json
import logging
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import ConfigError, ExperimentConfig, TrainingDefaults
from models.cell import (
    CellArchitecture,
    format_architecture_table,
    parse,
    read_architecture_file,
    sample_unique,
    serialize,
    write_architecture_file,
)
from models.sentpair import ENAS, LSTM, RANDOM, layer_plan_kinds, save_model
from services.hpt import DONE, FAILED, StudyLog, Trial, best_trial_with_tie, build_space, run_study, study_frame
from services.nas_engine import (
    DERIVED_FILE,
    SearchConfig,
    TrialSpec,
    apply_search_memory_cap,
    build_model_spec,
    dump_predictions,
    layers_for_plan,
    run_search,
    train_fixed,
)
from utils import run_dir_for
from utils.data_io import DatasetSplits, dataset_family, load_splits
from utils.embeddings import EmbeddingProvider, build_provider
from utils.validation import validate_candidates, validate_layer_plan

logger = logging.getLogger(__name__)

CODE_VERSION = "0.3.0"
RUN_FILE = "run.json"
CONFIG_FILE = "config.json"
STUDY_FILE = "study.jsonl"
BEST_FILE = "best.json"
CANDIDATES_FILE = "candidates.txt"
# Datasets built from other datasets' sentences; transfers touching them are refused
OVERLAPPING_FAMILIES = {"sts-b"}

REPORT_COLUMNS = ["dataset", "embedding", "model", "plan", "optimized_for", "status", "metric",
                  "dev", "test", "trials_done", "trials_failed", "compute_hours", "best_trial", "tie", "undefined", "best"]


@dataclass
class RunContext:
    config: ExperimentConfig
    run_dir: Path
    splits: DatasetSplits
    provider: EmbeddingProvider
    budget: Dict[str, int]
    training: TrainingDefaults


def _json_dump(path: Path, payload: Dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _json_load(path: Path) -> Optional[Dict[str, Any]]:
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def prepare_run(
    config: ExperimentConfig,
    command: str,
    plan: str,
    derived: bool = False,
    optimized_for: Optional[str] = None,
    variant: Optional[str] = None,
) -> RunContext:
    """
    Resolve the run directory, write its provenance before any compute and
    load data plus embeddings.
    """
    run_dir = run_dir_for(config.runs_root(), config.dataset.name, config.embedding.name,
                          config.model.kind, plan, variant)
    if not (run_dir / RUN_FILE).exists():
        _json_dump(run_dir / CONFIG_FILE, config.snapshot())
        _json_dump(run_dir / RUN_FILE, {
            "command": command,
            "dataset": config.dataset.name,
            "embedding": config.embedding.name,
            "model": config.model.kind,
            "plan": plan,
            "optimized_for": optimized_for or config.dataset.name,
            "seed": config.seed,
            "code_version": CODE_VERSION,
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        })
    else:
        logger.info("resuming run in %s", run_dir)

    budget = config.budget.resolved(derived=derived)
    return RunContext(
        config=config,
        run_dir=run_dir,
        splits=load_splits(config.dataset, config.seed),
        provider=build_provider(config.embedding, config.seed),
        budget=budget,
        training=TrainingDefaults.from_budget(budget),
    )


def _checked_plan(plan: str, model_kind: str) -> Tuple[str, ...]:
    ok, msg = validate_layer_plan(plan, model_kind)
    if not ok:
        raise ConfigError(msg)
    return layer_plan_kinds(plan)


def _plan_text(kinds: Sequence[str]) -> str:
    return " / ".join(kinds)


def make_objective(ctx: RunContext, kinds: Sequence[str]):
    """Study objective: train one configuration, report its best dev metric."""
    model = ctx.config.model

    def objective(params: Dict[str, Any], trial_id: int) -> Dict[str, Any]:
        trial = TrialSpec.from_params(params)
        arch = parse(trial.architecture) if trial.architecture else None
        result = train_fixed(model.kind, layers_for_plan(kinds, arch), trial, ctx.splits, ctx.provider,
                             max_epochs=ctx.training.max_epochs, patience=ctx.training.patience,
                             highway=model.highway, compiled=model.compiled)
        logger.info("trial %d: dev %.4f at epoch %d", trial_id, result.dev.primary, result.best_epoch)
        return {"objective": result.dev.primary, "undefined": result.dev.undefined,
                "best_epoch": result.best_epoch, "epochs": result.epochs_run}

    return objective


def _finalize_best(ctx: RunContext, trials: List[Trial], kinds: Sequence[str]) -> Dict[str, Any]:
    """Retrain the best dev trial, evaluate it on test once and dump predictions."""
    best, tie = best_trial_with_tie(trials)
    summary_path = ctx.run_dir / BEST_FILE
    previous = _json_load(summary_path)
    if previous and previous.get("trial_id") == best.id and previous.get("trials") == len(trials):
        logger.info("best trial %d already evaluated", best.id)
        return previous

    model = ctx.config.model
    trial = TrialSpec.from_params(best.params)
    arch = parse(trial.architecture) if trial.architecture else None
    result = train_fixed(model.kind, layers_for_plan(kinds, arch), trial, ctx.splits, ctx.provider,
                         max_epochs=ctx.training.max_epochs, patience=ctx.training.patience,
                         evaluate_test=True, highway=model.highway, compiled=model.compiled)
    dump_predictions(result, ctx.splits, ctx.provider, ctx.run_dir)
    save_model(ctx.run_dir / "best_model", result.model, {"trial_id": best.id})

    summary = {
        "trial_id": best.id,
        "trials": len(trials),
        "tie": tie,
        "params": best.params,
        "task": ctx.splits.task,
        "dev": result.dev.as_dict(),
        "test": result.test.as_dict(),
    }
    _json_dump(summary_path, summary)
    if tie:
        logger.warning("dev metric tie; kept earliest trial %d", best.id)
    logger.info("best trial %d: dev %.4f, test %.4f", best.id, result.dev.primary, result.test.primary)
    return summary


def run_tuning(ctx: RunContext, kinds: Sequence[str], architectures: Optional[Sequence[CellArchitecture]] = None) -> Dict[str, Any]:
    """One study over the tuning space (plus an architecture choice) and its best trial."""
    config = ctx.config
    double_cell = config.model.kind == "ESIM" and sum(k != LSTM for k in kinds) == 2
    space = build_space(
        ctx.splits.task,
        config.embedding.dims_family,
        [serialize(a) for a in architectures] if architectures else None,
        memory_cap=config.memory_cap,
        double_cell=double_cell,
    )
    trials = run_study(
        space,
        make_objective(ctx, kinds),
        n_trials=ctx.budget["trials"],
        concurrency=ctx.budget["concurrency"],
        mode=config.budget.mode,
        seed=config.seed,
        log_path=ctx.run_dir / STUDY_FILE,
    )
    failed = sum(t.status == FAILED for t in trials)
    if failed:
        logger.warning("%d of %d trials failed", failed, len(trials))
    return _finalize_best(ctx, trials, kinds)


# ---------------------------------------------------------------- commands

def cmd_tune_baseline(config: ExperimentConfig) -> Dict[str, Any]:
    kinds = _checked_plan(config.model.layer_plan, config.model.kind)
    if any(k != LSTM for k in kinds):
        raise ConfigError(f"baseline tuning needs an LSTM-only plan, got '{config.model.layer_plan}'")
    ctx = prepare_run(config, "tune-baseline", _plan_text(kinds))
    return run_tuning(ctx, kinds)


def baseline_child(config: ExperimentConfig) -> TrialSpec:
    """
    Child hyperparameters for a search: the best LSTM baseline's trial with
    `child_overrides` on top.

    Raises:
        ConfigError: no finished baseline and no overrides
    """
    lstm_plan = _plan_text([LSTM] * (1 if config.model.kind == "BLM" else 2))
    baseline_dir = run_dir_for(config.runs_root(), config.dataset.name, config.embedding.name,
                               config.model.kind, lstm_plan)
    best = _json_load(baseline_dir / BEST_FILE)
    overrides = dict(config.child_overrides or {})
    if best is None and not overrides:
        raise ConfigError(f"no finished baseline study in {baseline_dir}; run tune-baseline or set child_overrides")
    params = dict(best["params"]) if best else {}
    params.update(overrides)
    params.pop("architecture", None)
    return TrialSpec.from_params(params)


def cmd_search(config: ExperimentConfig) -> Path:
    """ENAS search with every recurrent layer replaced by a cell; returns the derived file."""
    child = baseline_child(config)
    if config.memory_cap:
        child = apply_search_memory_cap(child, config.embedding.dims_family)
    kinds = (ENAS,) if config.model.kind == "BLM" else (ENAS, ENAS)
    ctx = prepare_run(config, "search", _plan_text(kinds), variant="search")

    budget = ctx.budget
    search = SearchConfig(
        max_epochs=budget["search_epochs"],
        patience=budget["search_patience"],
        controller_steps_per_epoch=config.budget.controller_steps_per_epoch,
        samples_per_step=config.budget.samples_per_step,
        derive_count=config.budget.derive_count,
        child=child,
        seed=config.seed,
    )
    spec = build_model_spec(config.model.kind, layers_for_plan(kinds, None), child, ctx.provider,
                            ctx.splits.task, config.model.highway, config.model.compiled)
    started = time.perf_counter()
    state, derived = run_search(search, ctx.splits, ctx.provider, spec, ctx.run_dir)
    logger.info("search finished after %d epochs (%.1fs), best mean reward %.4f, %d architectures",
                state.epoch, time.perf_counter() - started, state.best_reward, len(derived))
    return ctx.run_dir / DERIVED_FILE


def _read_candidates(path: Union[str, Path]) -> List[CellArchitecture]:
    archs = read_architecture_file(path)
    ok, msg = validate_candidates(archs)
    if not ok:
        raise ConfigError(f"{path}: {msg}")
    return archs


def cmd_tune_derived(config: ExperimentConfig, arch_file: Union[str, Path], layer_plan: Optional[str] = None) -> Dict[str, Any]:
    """Tune with the derived architectures as a categorical; each plan is its own study."""
    plan = layer_plan or config.model.layer_plan
    kinds = _checked_plan(plan, config.model.kind)
    if ENAS not in kinds or RANDOM in kinds:
        raise ConfigError(f"derived tuning needs E layers (and no RND), got '{plan}'")
    archs = _read_candidates(arch_file)
    ctx = prepare_run(config, "tune-derived", _plan_text(kinds), derived=True)
    write_architecture_file(ctx.run_dir / CANDIDATES_FILE, archs, header=f"candidates from {arch_file}")
    return run_tuning(ctx, kinds, archs)


def cmd_random_baseline(config: ExperimentConfig, k: int = 10, layer_plan: Optional[str] = None) -> Dict[str, Any]:
    """
    Sample `k` distinct uniform genotypes (seeded by the config seed, so the
    same set is reused across datasets) and tune them exactly like derived
    candidates.
    """
    plan = layer_plan or config.model.layer_plan.replace(ENAS, RANDOM)
    kinds = _checked_plan(plan, config.model.kind)
    if RANDOM not in kinds or ENAS in kinds:
        raise ConfigError(f"random baseline needs RND layers (and no E), got '{plan}'")
    archs = sample_unique(np.random.default_rng(config.seed), k)
    if len(archs) < k:
        logger.warning("only %d unique random architectures (wanted %d)", len(archs), k)
    ctx = prepare_run(config, "random-baseline", _plan_text(kinds), derived=True)
    write_architecture_file(ctx.run_dir / CANDIDATES_FILE, archs, header=f"{len(archs)} uniform samples, seed {config.seed}")
    return run_tuning(ctx, kinds, archs)


def check_transfer(source: str, target: str, refuse_overlapping: bool = True) -> None:
    """
    Raises:
        ConfigError: same-dataset transfer, or a transfer touching a dataset
            built from the others when `refuse_overlapping`
    """
    src, dst = dataset_family(source), dataset_family(target)
    if src == dst:
        raise ConfigError(f"transfer from '{source}' to '{target}' stays within one dataset")
    if refuse_overlapping and (src in OVERLAPPING_FAMILIES or dst in OVERLAPPING_FAMILIES):
        raise ConfigError(f"transfer between '{source}' and '{target}' involves overlapping data")


def cmd_transfer(config: ExperimentConfig, source_arch_file: Union[str, Path], source_dataset: str,
                 layer_plan: Optional[str] = None) -> Dict[str, Any]:
    """Tune on this config's dataset with another dataset's derived candidates."""
    try:
        check_transfer(source_dataset, config.dataset.name, config.refuse_overlapping_transfer)
    except ConfigError:
        logger.warning("refused transfer %s -> %s", source_dataset, config.dataset.name)
        raise
    plan = layer_plan or config.model.layer_plan
    kinds = _checked_plan(plan, config.model.kind)
    if ENAS not in kinds:
        raise ConfigError(f"transfer tuning needs E layers, got '{plan}'")
    archs = _read_candidates(source_arch_file)
    ctx = prepare_run(config, "transfer", _plan_text(kinds), derived=True,
                      optimized_for=source_dataset, variant=f"from-{source_dataset}")
    write_architecture_file(ctx.run_dir / CANDIDATES_FILE, archs, header=f"transferred from {source_dataset}")
    return run_tuning(ctx, kinds, archs)


def cmd_export_arch_table(arch_file: Union[str, Path], out: Optional[Union[str, Path]] = None) -> str:
    archs = read_architecture_file(arch_file)
    text = format_architecture_table(archs)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    return text


# ------------------------------------------------------------------ report

def report_row(run_dir: Union[str, Path]) -> Optional[Dict[str, Any]]:
    """One report row from a run directory's files; None for non-tuning runs."""
    run_dir = Path(run_dir)
    run = _json_load(run_dir / RUN_FILE)
    if run is None:
        logger.warning("%s has no %s; skipped", run_dir, RUN_FILE)
        return None
    if run.get("command") == "search":
        return None

    trials = study_frame(sorted(StudyLog(run_dir / STUDY_FILE).load().values(), key=lambda t: t.id))
    best = _json_load(run_dir / BEST_FILE)
    seconds = float(trials["seconds"].astype(float).sum())
    row = {
        "dataset": run["dataset"],
        "embedding": run["embedding"],
        "model": run["model"],
        "plan": run["plan"],
        "optimized_for": run.get("optimized_for", run["dataset"]),
        "status": "done" if best else "pending",
        "metric": None,
        "dev": None,
        "test": None,
        "trials_done": int((trials["status"] == DONE).sum()),
        "trials_failed": int((trials["status"] == FAILED).sum()),
        "compute_hours": round(seconds / 3600.0, 4),
        "best_trial": None,
        "tie": False,
        "undefined": False,
        "best": False,
    }
    if best:
        row.update({
            "metric": "accuracy" if best["task"] == "classification" else "pearson",
            "dev": best["dev"]["primary"],
            "test": best["test"]["primary"],
            "best_trial": best["trial_id"],
            "tie": bool(best["tie"]),
            "undefined": bool(best["dev"]["undefined"] or best["test"]["undefined"]),
        })
    return row


def mark_best(frame: pd.DataFrame) -> pd.DataFrame:
    """
    Flag the finished rows with the highest dev score per (dataset,
    embedding, model), across every layer plan. Accuracy and Pearson are
    both higher-is-better; every row sharing the top score is flagged.
    """
    frame = frame.copy()
    if frame.empty:
        frame["best"] = pd.Series(dtype=bool)
        return frame
    dev = pd.to_numeric(frame["dev"], errors="coerce")
    top = dev.groupby([frame["dataset"], frame["embedding"], frame["model"]]).transform("max")
    frame["best"] = (dev.notna() & (dev == top)).astype(bool)
    return frame


def cmd_report(run_dirs: Sequence[Union[str, Path]], out: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """
    Dev and test metrics per (dataset, embedding, model, plan), stable-sorted
    by dataset, model and plan, with the best plan per configuration flagged.
    With `out`, writes report.tsv and report.txt.
    """
    rows = [row for row in (report_row(d) for d in run_dirs) if row is not None]
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    frame = frame.sort_values(["dataset", "model", "plan"], kind="mergesort").reset_index(drop=True)
    frame = mark_best(frame)
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / "report.tsv", sep="\t", index=False)
        (out / "report.txt").write_text(format_report(frame) + "\n", encoding="utf-8")
    return frame


def best_summary(frame: pd.DataFrame) -> List[str]:
    """One line per configuration naming its best plan, or every plan in a tie."""
    lines = []
    winners = frame[frame["best"].astype(bool)]
    for (dataset, embedding, model), group in winners.groupby(["dataset", "embedding", "model"], sort=True):
        plans = [plan if source == dataset else f"{plan} (from {source})"
                 for plan, source in zip(group["plan"], group["optimized_for"])]
        prefix = "tie between " if len(plans) > 1 else ""
        lines.append(f"best {dataset} / {embedding} / {model}: {prefix}{', '.join(plans)} "
                     f"(dev {float(group['dev'].iloc[0]):.4f})")
    return lines


def format_report(frame: pd.DataFrame) -> str:
    """Human table: one row per configuration with dev and test columns."""
    if frame.empty:
        return "(no runs)"
    table = pd.DataFrame({
        "Dataset": frame["dataset"],
        "Embedding": frame["embedding"],
        "Model": frame["model"],
        "RNN": frame["plan"],
        "Optimized for": frame["optimized_for"],
        "Dev": frame["dev"].map(lambda v: "pending" if pd.isna(v) else f"{v:.4f}"),
        "Test": frame["test"].map(lambda v: "pending" if pd.isna(v) else f"{v:.4f}"),
        "Trials": frame["trials_done"],
        "Compute h": frame["compute_hours"].map(lambda v: f"{v:.3f}"),
        "Tie": frame["tie"].map(lambda v: "*" if v else ""),
        "Best": frame["best"].map(lambda v: "<" if v else ""),
    })
    return "\n".join([table.to_string(index=False), ""] + best_summary(frame))


def find_run_dirs(root: Union[str, Path]) -> List[Path]:
    root = Path(root)
    return sorted(p.parent for p in root.glob(f"*/{RUN_FILE}"))
