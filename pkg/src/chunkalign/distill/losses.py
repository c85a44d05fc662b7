"""Alignment losses between stacked student rows and teacher rows.

Plain functions return ``(value, grad_wrt_student)``; the ``*_op`` variants
put the same computation on the tape.
"""

from __future__ import annotations

import numpy as np

from .. import numkernel as nk
from ..errors import DimensionError
from ..numkernel import Tensor2D


def cosine_loss(student: np.ndarray, teacher: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over rows of ``1 - s·t``; both sides are expected to be unit rows."""
    if student.shape != teacher.shape:
        raise DimensionError(f"cosine_loss shape mismatch: student {student.shape} vs teacher {teacher.shape}")
    value = float(student.shape[0] - np.einsum("ij,ij->", student, teacher))
    return value, -teacher


def similarity_loss(student: np.ndarray, teacher: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference between the Gram matrices ``S Sᵀ`` and ``T Tᵀ``."""
    if student.shape[0] != teacher.shape[0]:
        raise DimensionError(
            f"similarity_loss row mismatch: student {student.shape} vs teacher {teacher.shape}"
        )
    n = student.shape[0]
    diff = student @ student.T - teacher @ teacher.T
    value = float((diff * diff).sum() / (n * n))
    return value, (4.0 / (n * n)) * diff @ student


def cosine_loss_op(student: Tensor2D, teacher: np.ndarray) -> Tensor2D:
    value, grad = cosine_loss(student.data, teacher)
    return nk.record_op("cosine_loss", np.array([[value]]), (student,), lambda g: (g[0, 0] * grad,))


def similarity_loss_op(student: Tensor2D, teacher: np.ndarray) -> Tensor2D:
    value, grad = similarity_loss(student.data, teacher)
    return nk.record_op("similarity_loss", np.array([[value]]), (student,), lambda g: (g[0, 0] * grad,))


def total_loss_op(
    student: Tensor2D,
    teacher_cos: np.ndarray,
    teacher_sim: np.ndarray,
    weights: tuple[float, float] = (1.0, 1.0),
) -> tuple[Tensor2D, float, float]:
    """Weighted sum of both losses over the same stacked rows.

    ``teacher_cos`` must match the student width; ``teacher_sim`` may not.
    Returns the tape node plus the two unweighted loss values.
    """
    w_cos, w_sim = weights
    cos = cosine_loss_op(student, teacher_cos)
    sim = similarity_loss_op(student, teacher_sim)
    total = nk.add(nk.scale(cos, w_cos), nk.scale(sim, w_sim))
    return total, cos.item(), sim.item()
