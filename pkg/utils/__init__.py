# utils/__init__.py
import logging
import re
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)


def get_data_dir() -> Path:
    """
    Locate the bundled data directory.

    Returns:
        Path: `data/` under the working directory when present, otherwise the
        one shipped next to the package
    """
    data_directory = Path("data")
    if not data_directory.exists():
        # Fall back to the checkout layout
        data_directory = Path(__file__).parent.parent / "data"
    return data_directory


def data_file(name: str) -> Path:
    path = get_data_dir() / name
    if not path.exists():
        raise FileNotFoundError(f"bundled data file not found: {path}")
    return path


def slug(text: str) -> str:
    """Filesystem-safe form of a dataset, embedding or plan name."""
    cleaned = re.sub(r"[^A-Za-z0-9]+", "-", text.strip()).strip("-").lower()
    return cleaned or "unnamed"


def run_dir_for(root: Path, dataset: str, embedding: str, model: str, plan: str,
                variant: Optional[str] = None) -> Path:
    """One directory per (dataset, embedding, model, layer plan) experiment."""
    parts = [slug(dataset), slug(embedding), slug(model), slug(plan.replace("/", ""))]
    if variant:
        parts.append(slug(variant))
    path = Path(root) / "_".join(parts)
    path.mkdir(parents=True, exist_ok=True)
    logger.debug("run directory %s", path)
    return path
