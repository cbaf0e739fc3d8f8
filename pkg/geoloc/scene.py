"""
Per-video scene supervision: soft-scene labels and the majority-vote variant.
"""

from typing import Optional, Sequence

import numpy as np

from geoloc.errors import DimensionError, EmptyVideoError, InputError, LabelIndexError

DEFAULT_NUM_SCENES = 16
SCENE_MODES = ("soft", "majority")


def _frame_ids(frame_scene_ids: Sequence[int], num_scenes: Optional[int] = None) -> np.ndarray:
    ids = np.asarray(frame_scene_ids)
    if ids.size == 0:
        raise EmptyVideoError("video has no frame scene ids")
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise InputError("frame scene ids must be a flat list of integers")
    if ids.min() < 0 or (num_scenes is not None and ids.max() >= num_scenes):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise LabelIndexError(f"scene id {bad} out of range [0, {num_scenes})")
    return ids


def soft_scene_label(frame_scene_ids: Sequence[int], num_scenes: int = DEFAULT_NUM_SCENES) -> np.ndarray:
    """Fraction of frames assigned to each scene class."""
    ids = _frame_ids(frame_scene_ids, num_scenes)
    return np.bincount(ids, minlength=num_scenes).astype(np.float64) / ids.size


def majority_scene_label(frame_scene_ids: Sequence[int]) -> int:
    """Most frequent scene id; ties go to the lowest id."""
    ids = _frame_ids(frame_scene_ids)
    return int(np.argmax(np.bincount(ids)))


def one_hot_scene_label(class_id: int, num_scenes: int = DEFAULT_NUM_SCENES) -> np.ndarray:
    if not 0 <= class_id < num_scenes:
        raise LabelIndexError(f"scene id {class_id} out of range [0, {num_scenes})")
    label = np.zeros(num_scenes)
    label[class_id] = 1.0
    return label


def validate_soft_label(label: np.ndarray, num_scenes: int, tol: float = 1e-9) -> np.ndarray:
    label = np.asarray(label, dtype=np.float64)
    if label.shape != (num_scenes,):
        raise DimensionError(f"soft scene label has shape {label.shape}, expected ({num_scenes},)")
    if np.any(label < 0) or abs(label.sum() - 1.0) > tol:
        raise InputError("soft scene label must be non-negative and sum to 1")
    return label


def scene_target(record, mode: str, num_scenes: int = DEFAULT_NUM_SCENES) -> np.ndarray:
    """
    Scene supervision vector for one record under ``mode``.

    Records carry either ``frame_scenes`` or a precomputed ``soft_scene``. In
    majority mode a soft-only record uses its argmax.
    """
    if mode not in SCENE_MODES:
        raise InputError(f"unknown scene mode {mode!r}, expected one of {SCENE_MODES}")
    if record.frame_scenes is not None:
        if mode == "soft":
            return soft_scene_label(record.frame_scenes, num_scenes)
        _frame_ids(record.frame_scenes, num_scenes)
        return one_hot_scene_label(majority_scene_label(record.frame_scenes), num_scenes)
    soft = validate_soft_label(record.soft_scene, num_scenes)
    if mode == "soft":
        return soft
    return one_hot_scene_label(int(np.argmax(soft)), num_scenes)
