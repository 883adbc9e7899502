"""EMA teacher and the expert-ensemble self-distillation loss.

The teacher mirrors one MoE layer and is updated as
``p <- beta * p + (1 - beta) * p_student`` after every training step. At loss
time the teacher runs in dense full-capacity mode (all experts, full softmax
weights) while the student runs sparse top-k; the squared gap between the two
layer outputs is the distillation loss. The teacher prediction is a constant
under differentiation: no gradient ever flows into teacher parameters or
through the teacher branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllMasked, ShapeMismatch
from .linalg import Array, as_matrix
from .moe import MoeLayer, dense_ensemble_forward


@dataclass
class EmaTeacher:
    """Exponential-moving-average mirror of one MoE layer."""

    mirror: MoeLayer
    beta: float
    step_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def make_teacher(student: MoeLayer, beta: float) -> EmaTeacher:
    """Teacher initialized as a copy of the student at upcycle time."""
    return EmaTeacher(mirror=student.copy(), beta=beta, step_count=0)


def _pairs(teacher: MoeLayer, student: MoeLayer):
    if teacher.n_experts != student.n_experts:
        raise ShapeMismatch("teacher and student expert counts differ")
    yield teacher.router, student.router
    for te, se in zip(teacher.experts, student.experts):
        yield te.w1, se.w1
        yield te.b1, se.b1
        yield te.w2, se.w2
        yield te.b2, se.b2


def ema_update(teacher: EmaTeacher, student: MoeLayer) -> EmaTeacher:
    """In-place EMA step over every mirrored tensor, including the router.

    ``beta = 1`` leaves the teacher bitwise unchanged; ``beta = 0`` copies the
    student. Returns the mutated teacher.
    """
    beta = teacher.beta
    for t_param, s_param in _pairs(teacher.mirror, student):
        if t_param.shape != s_param.shape:
            raise ShapeMismatch(
                f"teacher tensor {t_param.shape} != student tensor {s_param.shape}"
            )
        if beta == 1.0:
            continue
        if beta == 0.0:
            t_param[...] = s_param
        else:
            t_param *= beta
            t_param += (1.0 - beta) * s_param
    teacher.step_count += 1
    return teacher


def teacher_forward(teacher: EmaTeacher, x) -> Array:
    """Dense all-expert ensemble output of the teacher mirror."""
    return dense_ensemble_forward(teacher.mirror, x)


def eesd_loss(student_y, teacher_y, mask=None) -> float:
    """Mean squared token gap between teacher and student layer outputs.

    ``mask`` marks valid tokens; masked tokens are excluded from both the sum
    and the denominator. The teacher output is treated as a constant in
    differentiation (stop-gradient); this function only computes the value.
    """
    s = as_matrix(student_y, "student_y")
    t = as_matrix(teacher_y, "teacher_y")
    if s.shape != t.shape:
        raise ShapeMismatch(f"student {s.shape} vs teacher {t.shape}")
    n_tokens = s.shape[1]
    if mask is None:
        valid = np.ones(n_tokens, dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool).reshape(-1)
        if valid.size != n_tokens:
            raise ShapeMismatch(f"mask length {valid.size} != {n_tokens} tokens")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise AllMasked("every token is masked")
    diff = (t - s)[:, valid]
    return float(np.sum(diff * diff) / n_valid)
