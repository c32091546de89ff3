# -*- coding: utf-8 -*-
# services/hpt.py
"""
Trial-based hyperparameter studies with a TPE-style sampler or pure random
search, dispatched over a thread pool and logged as JSON lines.
"""
import json
import logging
import math
import threading
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from scipy.stats import truncnorm

from config import HIDDEN_DIMS
from utils import data_file

logger = logging.getLogger(__name__)

SPACE_FILE = "hpt_space.yaml"

PENDING, RUNNING, DONE, FAILED = "pending", "running", "done", "failed"


@dataclass(frozen=True)
class ParamSpec:
    """One tunable: `choice` over values, or `uniform` / `loguniform` on [low, high]."""
    name: str
    kind: str
    values: Tuple[Any, ...] = ()
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self):
        if self.kind == "choice":
            if not self.values:
                raise ValueError(f"{self.name}: categorical parameter needs at least one value")
        elif self.kind in ("uniform", "loguniform"):
            if not self.low < self.high:
                raise ValueError(f"{self.name}: need low < high, got [{self.low}, {self.high}]")
            if self.kind == "loguniform" and self.low <= 0:
                raise ValueError(f"{self.name}: log-scale bounds must be positive")
        else:
            raise ValueError(f"{self.name}: unknown parameter type '{self.kind}'")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "choice"

    def to_internal(self, value: float) -> float:
        return math.log(value) if self.kind == "loguniform" else float(value)

    def from_internal(self, value: float) -> float:
        out = math.exp(value) if self.kind == "loguniform" else float(value)
        return min(max(out, self.low), self.high)

    @property
    def internal_bounds(self) -> Tuple[float, float]:
        return self.to_internal(self.low), self.to_internal(self.high)

    def contains(self, value: Any) -> bool:
        if self.is_categorical:
            return value in self.values
        return self.low <= value <= self.high

    def sample_prior(self, rng: np.random.Generator) -> Any:
        if self.is_categorical:
            return self.values[int(rng.integers(len(self.values)))]
        lo, hi = self.internal_bounds
        return self.from_internal(rng.uniform(lo, hi))


@dataclass(frozen=True)
class SearchSpace:
    params: Tuple[ParamSpec, ...]

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")

    @property
    def names(self) -> List[str]:
        return [p.name for p in self.params]

    def get(self, name: str) -> Optional[ParamSpec]:
        return next((p for p in self.params if p.name == name), None)

    def contains(self, assignment: Mapping[str, Any]) -> bool:
        return set(assignment) == set(self.names) and all(p.contains(assignment[p.name]) for p in self.params)

    def sample_prior(self, rng: np.random.Generator) -> Dict[str, Any]:
        return {p.name: p.sample_prior(rng) for p in self.params}


def _param_from_raw(name: str, raw: Mapping[str, Any]) -> ParamSpec:
    kind = raw.get("type")
    if kind == "choice":
        return ParamSpec(name, "choice", values=tuple(raw["values"]))
    return ParamSpec(name, kind, low=float(raw["low"]), high=float(raw["high"]))


def load_space_file(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    with open(path or data_file(SPACE_FILE), "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def build_space(
    task: str,
    dims_family: str = "toy",
    architectures: Optional[Sequence[str]] = None,
    memory_cap: bool = False,
    double_cell: bool = False,
    space_file: Optional[Union[str, Path]] = None,
) -> SearchSpace:
    """
    Child tuning space for one study.

    Args:
        task: classification or regression (selects the loss choices)
        dims_family: key into HIDDEN_DIMS
        architectures: serialized genotypes for the architecture categorical;
            None for LSTM-only studies
        memory_cap: keep only the smallest hidden dims, and restrict batch
            sizes when `double_cell` (ESIM with cells in both layers)
    """
    raw = load_space_file(space_file)
    cap = raw.pop("memory_cap", {}) or {}
    params: List[ParamSpec] = []
    for name, entry in raw.items():
        if name == "loss":
            entry = entry[task]
        spec = _param_from_raw(name, entry)
        if name == "batch_size" and memory_cap and double_cell:
            allowed = tuple(v for v in spec.values if v in cap.get("double_cell_batch_sizes", spec.values))
            spec = ParamSpec(name, "choice", values=allowed)
        params.append(spec)

    dims = list(HIDDEN_DIMS[dims_family])
    if memory_cap:
        dims = sorted(dims)[: int(cap.get("hidden_dims_keep", 3))]
    params.append(ParamSpec("hidden_dim", "choice", values=tuple(dims)))
    if architectures:
        params.append(ParamSpec("architecture", "choice", values=tuple(architectures)))
    return SearchSpace(tuple(params))


# ------------------------------------------------------------------ trials

@dataclass
class Trial:
    id: int
    params: Dict[str, Any]
    status: str = PENDING
    objective: Optional[float] = None
    seconds: float = 0.0
    reason: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.status == DONE and (self.objective is None or not math.isfinite(self.objective)):
            raise ValueError(f"trial {self.id}: done trials need a finite objective")

    def record(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TpeState:
    """Completed trials plus the sampler constants."""
    gamma: float = 0.25
    startup: int = 20
    candidates: int = 24
    trials: List[Trial] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.startup < 1:
            raise ValueError(f"startup must be >= 1, got {self.startup}")
        if self.candidates < 1:
            raise ValueError(f"candidates must be >= 1, got {self.candidates}")

    def finished(self) -> List[Trial]:
        return [t for t in self.trials if t.status in (DONE, FAILED)]


class _Parzen:
    """Truncated-Gaussian mixture in internal (possibly log) coordinates, with
    one extra wide component at the centre of the range as a prior."""

    def __init__(self, points: Sequence[float], low: float, high: float):
        self.low, self.high = low, high
        span = high - low
        centers = [0.5 * (low + high)] + list(points)
        order = np.argsort(centers)
        ordered = np.asarray(centers)[order]
        padded = np.concatenate([[low], ordered, [high]])
        left = ordered - padded[:-2]
        right = padded[2:] - ordered
        widths = np.maximum(left, right)
        min_width = span / min(100.0, 1.0 + len(centers))
        widths = np.clip(widths, min_width, span)
        sigmas = np.empty_like(widths)
        sigmas[order] = widths
        sigmas[0] = span
        self.mus = np.asarray(centers, dtype=np.float64)
        self.sigmas = sigmas
        self.a = (low - self.mus) / self.sigmas
        self.b = (high - self.mus) / self.sigmas

    def sample(self, rng: np.random.Generator) -> float:
        k = int(rng.integers(len(self.mus)))
        value = truncnorm.rvs(self.a[k], self.b[k], loc=self.mus[k], scale=self.sigmas[k], random_state=rng)
        return float(np.clip(value, self.low, self.high))

    def log_pdf(self, x: float) -> float:
        dens = truncnorm.pdf(x, self.a, self.b, loc=self.mus, scale=self.sigmas)
        return float(np.log(np.mean(dens) + 1e-300))


class _Categorical:
    def __init__(self, values: Sequence[Any], observed: Sequence[Any]):
        self.values = list(values)
        counts = np.ones(len(self.values))
        for v in observed:
            if v in self.values:
                counts[self.values.index(v)] += 1.0
        self.probs = counts / counts.sum()

    def sample(self, rng: np.random.Generator) -> Any:
        return self.values[int(rng.choice(len(self.values), p=self.probs))]

    def log_pdf(self, value: Any) -> float:
        return float(np.log(self.probs[self.values.index(value)]))


def _split_good_bad(trials: Sequence[Trial], gamma: float) -> Tuple[List[Trial], List[Trial]]:
    # failed trials rank below every finished one
    ranked = sorted(trials, key=lambda t: (-(t.objective if t.status == DONE else -math.inf), t.id))
    n_good = max(1, int(math.ceil(gamma * len(ranked))))
    return ranked[:n_good], ranked[n_good:]


def suggest(state: TpeState, space: SearchSpace, rng: np.random.Generator) -> Dict[str, Any]:
    """
    Next assignment: prior draws during startup, afterwards the best of
    `candidates` draws from the good-trial density by summed log density ratio.
    """
    finished = state.finished()
    if len(finished) < state.startup:
        return space.sample_prior(rng)

    good, bad = _split_good_bad(finished, state.gamma)
    estimators = {}
    for p in space.params:
        good_vals = [t.params[p.name] for t in good if p.name in t.params]
        bad_vals = [t.params[p.name] for t in bad if p.name in t.params]
        if p.is_categorical:
            estimators[p.name] = (_Categorical(p.values, good_vals), _Categorical(p.values, bad_vals))
        else:
            lo, hi = p.internal_bounds
            estimators[p.name] = (
                _Parzen([p.to_internal(v) for v in good_vals], lo, hi),
                _Parzen([p.to_internal(v) for v in bad_vals], lo, hi),
            )

    best, best_score = None, -math.inf
    for _ in range(state.candidates):
        candidate: Dict[str, Any] = {}
        score = 0.0
        for p in space.params:
            l_est, g_est = estimators[p.name]
            drawn = l_est.sample(rng)
            score += l_est.log_pdf(drawn) - g_est.log_pdf(drawn)
            candidate[p.name] = drawn if p.is_categorical else p.from_internal(drawn)
        if score > best_score:
            best, best_score = candidate, score
    return best


def trial_rng(seed: int, trial_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(trial_id)])


# ----------------------------------------------------------------- studies

class StudyLog:
    """Append-only JSON lines; the last record per trial id wins on reload."""

    def __init__(self, path: Optional[Union[str, Path]]):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()

    def append(self, trial: Trial) -> None:
        if self.path is None:
            return
        line = json.dumps(trial.record(), sort_keys=True, default=float)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")

    def load(self) -> Dict[int, Trial]:
        if self.path is None or not self.path.exists():
            return {}
        trials: Dict[int, Trial] = {}
        with open(self.path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("%s:%d: skipping unreadable record", self.path, line_no)
                    continue
                trials[int(raw["id"])] = Trial(**raw)
        return trials


ObjectiveFn = Callable[[Dict[str, Any], int], Union[float, Mapping[str, Any]]]


def _unpack(result: Union[float, Mapping[str, Any]]) -> Tuple[float, Dict[str, Any]]:
    if isinstance(result, Mapping):
        extra = dict(result)
        return float(extra.pop("objective")), extra
    return float(result), {}


def _run_one(objective_fn: ObjectiveFn, trial: Trial) -> Trial:
    started = time.perf_counter()
    try:
        value, extra = _unpack(objective_fn(dict(trial.params), trial.id))
        if not math.isfinite(value):
            raise FloatingPointError(f"objective returned {value}")
        trial.objective, trial.extra, trial.status = value, extra, DONE
    except Exception as e:
        trial.status, trial.reason, trial.objective = FAILED, f"{type(e).__name__}: {e}", None
        logger.warning("trial %d failed: %s", trial.id, trial.reason)
    trial.seconds = time.perf_counter() - started
    return trial


def run_study(
    space: SearchSpace,
    objective_fn: ObjectiveFn,
    n_trials: int,
    concurrency: int = 1,
    mode: str = "tpe",
    seed: int = 0,
    log_path: Optional[Union[str, Path]] = None,
    tpe: Optional[TpeState] = None,
) -> List[Trial]:
    """
    Run (or resume) a study until `n_trials` trials have finished.

    Up to `concurrency` objectives run at once; TPE suggestions see only the
    trials finished at suggestion time. Each trial draws from its own
    generator seeded by (seed, trial id), so random-mode assignments do not
    depend on concurrency. Crashing objectives are recorded as failed.
    """
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    if concurrency < 1:
        raise ValueError(f"concurrency must be >= 1, got {concurrency}")
    if mode not in ("tpe", "random"):
        raise ValueError(f"unknown study mode '{mode}'")

    log = StudyLog(log_path)
    state = tpe or TpeState()
    previous = log.load()
    finished = {i: t for i, t in previous.items() if t.status in (DONE, FAILED) and i < n_trials}
    state.trials = [finished[i] for i in sorted(finished)]
    requeue = sorted(i for i, t in previous.items() if t.status not in (DONE, FAILED) and i < n_trials)
    if previous:
        logger.info("resuming study: %d finished, %d to re-run", len(finished), len(requeue))

    def next_params(trial_id: int) -> Dict[str, Any]:
        if trial_id in previous and trial_id in requeue:
            return previous[trial_id].params
        rng = trial_rng(seed, trial_id)
        return space.sample_prior(rng) if mode == "random" else suggest(state, space, rng)

    todo = requeue + [i for i in range(n_trials) if i not in finished and i not in requeue]
    results: Dict[int, Trial] = dict(finished)
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        in_flight: Dict[Future, Trial] = {}
        queue = list(todo)
        while queue or in_flight:
            while queue and len(in_flight) < concurrency:
                trial_id = queue.pop(0)
                trial = Trial(id=trial_id, params=next_params(trial_id), status=RUNNING)
                log.append(trial)
                in_flight[pool.submit(_run_one, objective_fn, trial)] = trial
            done, _ = wait(list(in_flight), return_when=FIRST_COMPLETED)
            for future in sorted(done, key=lambda f: in_flight[f].id):
                trial = future.result()
                del in_flight[future]
                results[trial.id] = trial
                state.trials.append(trial)
                log.append(trial)
                if trial.status == DONE:
                    logger.info("trial %d done: objective %.4f (%.1fs)", trial.id, trial.objective, trial.seconds)

    trials = [results[i] for i in sorted(results)]
    n_done = sum(t.status == DONE for t in trials)
    logger.info("study finished: %d trials, %d done, %d failed", len(trials), n_done, len(trials) - n_done)
    return trials


def best_trial_with_tie(trials: Sequence[Trial], direction: str = "maximize") -> Tuple[Trial, bool]:
    """Best done trial (earliest id on ties) and whether a tie was broken."""
    if direction != "maximize":
        raise ValueError(f"unsupported direction '{direction}'")
    done = [t for t in trials if t.status == DONE]
    if not done:
        raise ValueError("no completed trials to choose from")
    top = max(t.objective for t in done)
    tied = sorted((t for t in done if t.objective == top), key=lambda t: t.id)
    return tied[0], len(tied) > 1


def best_trial(trials: Sequence[Trial], direction: str = "maximize") -> Trial:
    return best_trial_with_tie(trials, direction)[0]


STUDY_COLUMNS = ["id", "status", "objective", "seconds", "reason"]


def study_frame(trials: Sequence[Trial]) -> pd.DataFrame:
    """One row per trial, parameters flattened into `param.<name>` columns."""
    rows = []
    for t in trials:
        row = {"id": t.id, "status": t.status, "objective": t.objective, "seconds": t.seconds, "reason": t.reason}
        row.update({f"param.{k}": v for k, v in t.params.items()})
        rows.append(row)
    if not rows:
        return pd.DataFrame(columns=STUDY_COLUMNS)
    return pd.DataFrame(rows)
