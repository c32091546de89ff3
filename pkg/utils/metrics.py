# utils/metrics.py
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import pearsonr
from sklearn.metrics import accuracy_score, f1_score

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricReport:
    """
    Scores for one prediction set.

    `primary` is what selection and rewards use: accuracy for classification,
    Pearson for regression (0.0 when the correlation is undefined).
    """
    task: str
    primary: float
    accuracy: Optional[float] = None
    f1: Optional[float] = None
    pearson: Optional[float] = None
    undefined: bool = False

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "primary": self.primary,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "pearson": self.pearson,
            "undefined": self.undefined,
        }


def pearson(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """
    Pearson correlation, or None when either side has zero variance.

    Raises:
        ValueError: lengths differ or fewer than 2 points
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"pearson needs equal lengths, got {x.shape[0]} and {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("pearson needs at least 2 points")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return None
    return float(pearsonr(x, y)[0])


def classification_report(predicted: Sequence[int], gold: Sequence[int]) -> MetricReport:
    predicted = np.asarray(predicted).astype(np.int64)
    gold = np.asarray(gold).astype(np.int64)
    acc = float(accuracy_score(gold, predicted))
    f1 = float(f1_score(gold, predicted, zero_division=0))
    return MetricReport(task="classification", primary=acc, accuracy=acc, f1=f1)


def regression_report(predicted: Sequence[float], gold: Sequence[float]) -> MetricReport:
    r = pearson(predicted, gold)
    if r is None:
        logger.warning("Pearson undefined (constant predictions or labels); scoring as 0")
        return MetricReport(task="regression", primary=0.0, pearson=None, undefined=True)
    return MetricReport(task="regression", primary=r, pearson=r)


def score(task: str, predicted: Sequence[float], gold: Sequence[float]) -> MetricReport:
    if task == "classification":
        return classification_report(predicted, gold)
    if task == "regression":
        return regression_report(predicted, gold)
    raise ValueError(f"unknown task '{task}'")
