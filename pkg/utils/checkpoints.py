# utils/checkpoints.py
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_SLASH = "::"


def _paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    base = Path(path)
    if base.suffix in (".npz", ".json"):
        base = base.with_suffix("")
    return base.with_suffix(".npz"), base.with_suffix(".json")


def save_checkpoint(path: Union[str, Path], arrays: Mapping[str, np.ndarray], meta: Dict[str, Any] = None) -> Path:
    """
    Write named arrays to `<path>.npz` and metadata to `<path>.json`.

    Both files are written to temporaries first and moved into place, so a
    crash never leaves a half-written container behind.

    Returns:
        Path: the .npz file
    """
    npz_path, json_path = _paths(path)
    npz_path.parent.mkdir(parents=True, exist_ok=True)
    encoded = {name.replace("/", _SLASH): np.asarray(value) for name, value in arrays.items()}

    tmp_npz = npz_path.with_name(npz_path.name + ".tmp")
    with open(tmp_npz, "wb") as f:
        np.savez(f, **encoded)
    os.replace(tmp_npz, npz_path)

    sidecar = {"format_version": FORMAT_VERSION, "arrays": len(encoded)}
    sidecar.update(meta or {})
    tmp_json = json_path.with_name(json_path.name + ".tmp")
    tmp_json.write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp_json, json_path)
    logger.debug("saved %d arrays to %s", len(encoded), npz_path)
    return npz_path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    npz_path, json_path = _paths(path)
    if not npz_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {npz_path}")
    meta: Dict[str, Any] = {}
    if json_path.exists():
        meta = json.loads(json_path.read_text(encoding="utf-8"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"{json_path}: unsupported format_version {version!r}")
    with np.load(npz_path, allow_pickle=False) as data:
        arrays = {name.replace(_SLASH, "/"): data[name].copy() for name in data.files}
    return arrays, meta


def checkpoint_exists(path: Union[str, Path]) -> bool:
    return _paths(path)[0].exists()
