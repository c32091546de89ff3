# utils/data_io.py
"""
Sentence-pair datasets: TSV loading, synthetic desk-scale tasks, dev splits
and minibatching.
"""
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

from config import DATASET_PRESETS, DatasetBlock
from utils.validation import validate_label

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """A dataset file or request cannot be honoured."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class Example:
    a: Tuple[str, ...]
    b: Tuple[str, ...]
    label: float
    pair_id: str = ""


@dataclass(frozen=True)
class SentencePairDataset:
    name: str
    task: str
    label_range: Tuple[float, float]
    token_cap: int
    examples: Tuple[Example, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.examples)

    def with_examples(self, examples: Sequence[Example]) -> "SentencePairDataset":
        return replace(self, examples=tuple(examples))

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.float64)


@dataclass(frozen=True)
class DatasetSplits:
    train: SentencePairDataset
    dev: SentencePairDataset
    test: SentencePairDataset

    @property
    def task(self) -> str:
        return self.train.task


def tokenize(text: str, cap: Optional[int] = None) -> Tuple[str, ...]:
    tokens = tuple(text.split())
    return tokens[:cap] if cap else tokens


def load_tsv(
    path: Union[str, Path],
    task: str,
    label_range: Tuple[float, float],
    token_cap: Optional[int] = None,
    header: bool = False,
    name: Optional[str] = None,
) -> SentencePairDataset:
    """
    Read `sentence1<TAB>sentence2<TAB>label` rows.

    Raises:
        DatasetError: malformed row or label outside `label_range`, with the
            offending line number
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    examples: List[Example] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter="\t", quoting=csv.QUOTE_NONE)
        for row in reader:
            line = reader.line_num
            if header and line == 1:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise DatasetError(f"{path}: expected 3 tab-separated columns, got {len(row)}", line)
            try:
                label = float(row[2])
            except ValueError:
                raise DatasetError(f"{path}: label '{row[2]}' is not a number", line)
            ok, message = validate_label(label, task, label_range)
            if not ok:
                raise DatasetError(f"{path}: {message}", line)
            a, b = tokenize(row[0], token_cap), tokenize(row[1], token_cap)
            if not a or not b:
                raise DatasetError(f"{path}: empty sentence", line)
            examples.append(Example(a, b, label, pair_id=str(line)))
    logger.info("loaded %d examples from %s", len(examples), path)
    return SentencePairDataset(
        name=name or path.stem,
        task=task,
        label_range=tuple(label_range),
        token_cap=token_cap or 0,
        examples=tuple(examples),
    )


def split(dataset: SentencePairDataset, dev_fraction: float, seed: int = 0) -> Tuple[SentencePairDataset, SentencePairDataset]:
    """Shuffled train/dev split, deterministic in `seed`."""
    if not 0.0 < dev_fraction < 1.0:
        raise DatasetError(f"dev fraction must be in (0, 1), got {dev_fraction}")
    if len(dataset) < 2:
        raise DatasetError(f"cannot split {len(dataset)} example(s)")
    train, dev = train_test_split(list(dataset.examples), test_size=dev_fraction, random_state=seed, shuffle=True)
    return dataset.with_examples(train), dataset.with_examples(dev)


# ------------------------------------------------------------ synthetic tasks

SYNTHETIC_VOCAB: Tuple[str, ...] = tuple(f"w{i:02d}" for i in range(48))


def jaccard_label(a: Sequence[str], b: Sequence[str], label_range: Tuple[float, float]) -> float:
    """Jaccard overlap of the token sets, mapped linearly onto `label_range`."""
    sa, sb = set(a), set(b)
    union = sa | sb
    overlap = len(sa & sb) / len(union) if union else 1.0
    lo, hi = label_range
    return lo + (hi - lo) * overlap


def _sentence(rng: np.random.Generator, low: int = 4, high: int = 9) -> List[str]:
    length = int(rng.integers(low, high))
    return [SYNTHETIC_VOCAB[i] for i in rng.choice(len(SYNTHETIC_VOCAB), size=length, replace=False)]


def make_synthetic(
    task_kind: str,
    n: int,
    seed: int,
    label_range: Optional[Tuple[float, float]] = None,
    name: Optional[str] = None,
) -> SentencePairDataset:
    """
    Generate a reproducible sentence-pair task.

    classification: label 1 pairs are permutations of the same tokens, label 0
    pairs additionally swap one token for an unseen one; classes are balanced.
    regression: sentence b keeps a random subset of a's tokens plus fresh
    ones, labelled by scaled Jaccard overlap.
    """
    if n < 8:
        raise DatasetError(f"synthetic datasets need n >= 8, got {n}")
    if task_kind not in ("classification", "regression"):
        raise DatasetError(f"unknown task kind '{task_kind}'")
    rng = np.random.default_rng(seed)
    label_range = tuple(label_range or ((0.0, 1.0) if task_kind == "classification" else (0.0, 5.0)))
    examples: List[Example] = []

    if task_kind == "classification":
        labels = rng.permutation(np.arange(n) % 2)
        for i, label in enumerate(labels):
            a = _sentence(rng)
            b = [str(w) for w in rng.permutation(a)]
            if label == 0:
                unused = [w for w in SYNTHETIC_VOCAB if w not in a]
                b[int(rng.integers(len(b)))] = unused[int(rng.integers(len(unused)))]
            examples.append(Example(tuple(a), tuple(b), float(label), pair_id=str(i)))
    else:
        for i in range(n):
            a = _sentence(rng)
            keep = int(rng.integers(0, len(a) + 1))
            kept = list(rng.choice(a, size=keep, replace=False)) if keep else []
            unused = [w for w in SYNTHETIC_VOCAB if w not in a]
            extra = int(rng.integers(0 if kept else 1, 4))
            fresh = list(rng.choice(unused, size=extra, replace=False)) if extra else []
            b = [str(w) for w in rng.permutation(kept + fresh)]
            examples.append(Example(tuple(a), tuple(b), jaccard_label(a, b, label_range), pair_id=str(i)))

    return SentencePairDataset(
        name=name or f"synthetic-{task_kind}",
        task=task_kind,
        label_range=label_range,
        token_cap=0,
        examples=tuple(examples),
    )


def load_splits(block: DatasetBlock, seed: int = 0) -> DatasetSplits:
    """Resolve a dataset config block into train/dev/test; `seed` drives the train/dev split."""
    preset = block.preset
    cap = block.token_cap or preset.token_cap
    if block.is_synthetic:
        full = make_synthetic(preset.task, block.synthetic_size, block.synthetic_seed, preset.label_range, block.name)
        test_size = max(8, block.synthetic_size // 4)
        test = make_synthetic(preset.task, test_size, block.synthetic_seed + 1, preset.label_range, block.name)
        train, dev = split(full, block.dev_fraction, seed=seed)
        return DatasetSplits(train, dev, test)

    train = load_tsv(block.train, preset.task, preset.label_range, cap, block.header, block.name)
    test = load_tsv(block.test, preset.task, preset.label_range, cap, block.header, block.name)
    if block.dev:
        dev = load_tsv(block.dev, preset.task, preset.label_range, cap, block.header, block.name)
    else:
        train, dev = split(train, block.dev_fraction, seed=seed)
    return DatasetSplits(train, dev, test)


def iterate_minibatches(
    examples: Sequence[Example],
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
) -> Iterator[List[Example]]:
    """Every example exactly once; shuffled when an rng is given."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = rng.permutation(len(examples)) if rng is not None else np.arange(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


SYNTHETIC_ANALOGUES = {"synthetic-mrpc": "mrpc", "synthetic-sts": "sts-b", "synthetic-sick": "sick-r"}


def dataset_family(name: str) -> str:
    """Real dataset a name stands for; synthetic analogues map to their original."""
    key = name.lower()
    if key not in DATASET_PRESETS:
        raise DatasetError(f"unknown dataset '{name}'")
    return SYNTHETIC_ANALOGUES.get(key, key)
