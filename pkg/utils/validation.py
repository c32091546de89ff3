from typing import Optional, Sequence, Tuple

LAYER_KINDS = ("L", "E", "RND")


def validate_label(label: float, task: str, label_range: Tuple[float, float]) -> tuple[bool, Optional[str]]:
    """Validate one gold label against its dataset"""
    lo, hi = label_range
    if not lo <= label <= hi:
        return False, f"label {label} outside [{lo:g}, {hi:g}]"

    if task == "classification" and label not in (0.0, 1.0):
        return False, f"classification label must be 0 or 1, got {label}"

    return True, None


def validate_layer_plan(plan: str, model_kind: str) -> tuple[bool, Optional[str]]:
    """Validate `E / L` style layer plans: one layer for BLM, two for ESIM"""
    if not plan:
        return False, "Layer plan is required"

    layers = [part.strip().upper() for part in plan.split("/")]
    unknown = [kind for kind in layers if kind not in LAYER_KINDS]
    if unknown:
        return False, f"unknown layer kind(s) {unknown} (expected L, E or RND)"

    expected = 1 if model_kind == "BLM" else 2
    if len(layers) != expected:
        return False, f"{model_kind} needs {expected} layer(s), plan '{plan}' has {len(layers)}"

    return True, None


def validate_candidates(archs: Sequence) -> tuple[bool, Optional[str]]:
    """An architecture candidate list must be non-empty and duplicate-free"""
    if not archs:
        return False, "architecture file has no records"

    if len(set(archs)) != len(archs):
        return False, "architecture file contains duplicate genotypes"

    return True, None
