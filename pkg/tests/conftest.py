from pathlib import Path

import numpy as np
import pytest

from models.cell import read_architecture_file
from utils.data_io import DatasetSplits, make_synthetic, split
from utils.embeddings import ToyHashEmbedding

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
REFERENCE_ARCHS = DATA_DIR / "reference_architectures.txt"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def reference_archs():
    return read_architecture_file(REFERENCE_ARCHS)


@pytest.fixture
def toy_provider():
    return ToyHashEmbedding(8, seed=0)


def small_splits(task: str, n: int = 48, seed: int = 0) -> DatasetSplits:
    full = make_synthetic(task, n, seed)
    train, dev = split(full, 0.25, seed=0)
    test = make_synthetic(task, 16, seed + 1)
    return DatasetSplits(train, dev, test)


@pytest.fixture
def regression_splits():
    return small_splits("regression")


@pytest.fixture
def classification_splits():
    return small_splits("classification")


@pytest.fixture
def runs_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("ENAS_RUNS_DIR", str(root))
    return root
