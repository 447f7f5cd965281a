"""Exponential-moving-average maintenance of the teacher's named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHA = 0.998


@dataclass
class EmaState:
    """Teacher parameters tracked as an EMA of student parameters.

    Single-writer: ema_update mutates the tensors in place, so a detector
    wrapping `teacher_params` by reference observes every update.
    """

    alpha: float
    teacher_params: dict[str, np.ndarray]
    step_count: int = 0


def ema_init(source_params: dict[str, np.ndarray], alpha: float = DEFAULT_ALPHA) -> EmaState:
    """Start an EMA state from a deep copy of the source model's parameters."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    teacher = {}
    for name, value in source_params.items():
        arr = np.array(value, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"source parameter {name!r} contains non-finite values")
        teacher[name] = arr
    return EmaState(alpha=float(alpha), teacher_params=teacher, step_count=0)


def ema_update(state: EmaState, student_params: dict[str, np.ndarray]) -> EmaState:
    """In-place update t <- alpha * t + (1 - alpha) * s for every named tensor."""
    teacher = state.teacher_params
    offenders = sorted(set(teacher) ^ set(student_params))
    if offenders:
        raise ValueError(f"teacher/student parameter names differ: {offenders}")
    shape_offenders = [
        f"{name}: {teacher[name].shape} vs {np.shape(student_params[name])}"
        for name in teacher
        if teacher[name].shape != np.shape(student_params[name])
    ]
    if shape_offenders:
        raise ValueError("teacher/student parameter shapes differ: " + "; ".join(shape_offenders))
    a = state.alpha
    for name, tensor in teacher.items():
        tensor *= a
        tensor += (1.0 - a) * np.asarray(student_params[name], dtype=np.float64)
    state.step_count += 1
    return state
