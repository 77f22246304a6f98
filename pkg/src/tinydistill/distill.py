"""Losses and gradient surgery for in-situ distillation.

Losses operate on N×C logit tensors. Gradient-set functions operate on
``{name: ndarray}`` dictionaries; where the student's array is smaller
than the teacher's it is the leading sub-block of the teacher tensor.
"""

from __future__ import annotations

import math
from typing import Dict, Iterable, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .supernet import ConfigError, GradientSet, student_slice

# Default normalized threshold: the ImageNet setting 3.75 nats at C = 1000,
# rescaled to a fraction of the maximum entropy ln C.
NORMALIZED_THRESHOLD = 3.75 / math.log(1000)


class DataError(ValueError):
    """Raised for invalid labels or data rows."""


class UncertaintyPolicy(BaseModel):
    """Entropy gate choosing between the KL and cross-entropy student losses."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    threshold: float = Field(NORMALIZED_THRESHOLD, gt=0)
    mode: Literal["absolute", "normalized"] = "normalized"
    label_smoothing: float = Field(0.1, ge=0, lt=1)

    def effective_threshold(self, num_classes: int) -> float:
        if self.mode == "normalized":
            return self.threshold * math.log(num_classes)
        return self.threshold


def _logits(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_logits(logits: Tensor, name: str = "logits") -> None:
    if logits.ndim != 2:
        raise ShapeError(f"{name} must be N×C, got {logits.shape}")


def softmax(logits) -> Tensor:
    logits = _logits(logits)
    _check_logits(logits)
    return ad.exp(ad.log_softmax(logits))


def entropy(logits) -> Tensor:
    """Per-sample entropy (nats) of the softmax distribution."""
    logits = _logits(logits)
    _check_logits(logits)
    logp = ad.log_softmax(logits)
    return ad.scale(ad.sum(ad.mul(ad.exp(logp), logp), axis=1), -1.0)


def _smoothed_targets(labels: np.ndarray, num_classes: int, eps: float) -> np.ndarray:
    labels = np.asarray(labels)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {labels[i]} at sample {i} outside [0, {num_classes})")
    q = np.full((labels.shape[0], num_classes), eps / num_classes)
    q[np.arange(labels.shape[0]), labels] += 1.0 - eps
    return q


def cross_entropy_per_sample(logits, labels, eps: float = 0.0) -> Tensor:
    logits = _logits(logits)
    _check_logits(logits)
    if len(labels) != logits.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {logits.shape[0]} logit rows")
    q = _smoothed_targets(labels, logits.shape[1], eps)
    return ad.scale(ad.sum(ad.mul(Tensor(q), ad.log_softmax(logits)), axis=1), -1.0)


def cross_entropy_smoothed(logits, labels, eps: float = 0.1) -> Tensor:
    """Batch-mean cross entropy against ``(1-eps)*onehot + eps/C`` targets."""
    return ad.mean(cross_entropy_per_sample(logits, labels, eps))


def kl_per_sample(student_logits, teacher_logits, detach_teacher: bool = True,
                  temperature: float = 1.0) -> Tensor:
    student_logits = _logits(student_logits)
    teacher_logits = _logits(teacher_logits)
    _check_logits(student_logits, "student_logits")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"kl_divergence: student {student_logits.shape} vs teacher {teacher_logits.shape}"
        )
    if temperature != 1.0:
        student_logits = ad.scale(student_logits, 1.0 / temperature)
        teacher_logits = ad.scale(teacher_logits, 1.0 / temperature)
    logp_s = ad.log_softmax(student_logits)
    if detach_teacher or not teacher_logits.requires_grad:
        logp_t_data = ad.log_softmax(teacher_logits.detach()).data
        logp_t = Tensor(logp_t_data)
        p_t = Tensor(np.exp(logp_t_data))
    else:
        logp_t = ad.log_softmax(teacher_logits)
        p_t = ad.exp(logp_t)
    return ad.sum(ad.mul(p_t, ad.add(logp_t, ad.scale(logp_s, -1.0))), axis=1)


def kl_divergence(student_logits, teacher_logits, detach_teacher: bool = True,
                  temperature: float = 1.0) -> Tensor:
    """Batch mean of KL(p_teacher || p_student)."""
    return ad.mean(kl_per_sample(student_logits, teacher_logits, detach_teacher, temperature))


def select_by_threshold(
    student_logits,
    teacher_logits,
    labels,
    threshold: float,
    label_smoothing: float = 0.1,
    detach_teacher: bool = True,
    temperature: float = 1.0,
) -> Tuple[Tensor, np.ndarray]:
    """Per-sample choice between distillation and ground-truth loss.

    Samples whose student entropy is at least ``threshold`` (nats) are
    distilled with KL; the rest use label-smoothed cross entropy. Returns
    the batch-mean loss and a boolean mask that is True where KL was used.
    """
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    student_logits = _logits(student_logits)
    _check_logits(student_logits, "student_logits")
    mask = entropy(student_logits.data).data >= threshold
    kl = kl_per_sample(student_logits, teacher_logits, detach_teacher, temperature)
    ce = cross_entropy_per_sample(student_logits, labels, label_smoothing)
    w = mask.astype(np.float64)
    per_sample = ad.add(ad.mul(kl, Tensor(w)), ad.mul(ce, Tensor(1.0 - w)))
    return ad.mean(per_sample), mask


def select_student_loss(
    student_logits,
    teacher_logits,
    labels,
    policy: UncertaintyPolicy,
    detach_teacher: bool = True,
    temperature: float = 1.0,
) -> Tuple[Tensor, np.ndarray]:
    """:func:`select_by_threshold` at the policy's effective threshold for this class count."""
    student_logits = _logits(student_logits)
    _check_logits(student_logits, "student_logits")
    return select_by_threshold(student_logits, teacher_logits, labels,
                               policy.effective_threshold(student_logits.shape[1]),
                               policy.label_smoothing, detach_teacher, temperature)


def external_distill_loss(model_logits, frozen_teacher_logits, temperature: float = 1.0) -> Tensor:
    """KL from a frozen external teacher's logits to the model's."""
    model_logits = _logits(model_logits)
    frozen = np.asarray(
        frozen_teacher_logits.data if isinstance(frozen_teacher_logits, Tensor) else frozen_teacher_logits,
        dtype=np.float64,
    )
    if frozen.ndim != 2 or frozen.shape[1] != model_logits.shape[1]:
        raise ConfigError(
            f"external teacher provides {frozen.shape[-1]} classes, model has {model_logits.shape[1]}"
        )
    return kl_divergence(model_logits, Tensor(frozen), detach_teacher=True, temperature=temperature)


# gradient surgery --------------------------------------------------------------


def _shared_region(name: str, t_full: np.ndarray, s: np.ndarray) -> Tuple[slice, ...]:
    if t_full.ndim != s.ndim or any(a > b for a, b in zip(s.shape, t_full.shape)):
        raise ShapeError(f"{name}: student gradient {s.shape} is not a sub-block of teacher {t_full.shape}")
    return student_slice(s.shape)


def _common_keys(g_tea: GradientSet, g_stu: GradientSet, keys: Optional[Iterable[str]]) -> list:
    names = [k for k in g_stu if k in g_tea]
    if keys is not None:
        wanted = set(keys)
        names = [k for k in names if k in wanted]
    return names


def project_gradients(g_tea: GradientSet, g_stu: GradientSet) -> GradientSet:
    """Remove from each teacher gradient the component that opposes the student's.

    Per tensor, on the student's slice: when ``t . s < 0`` the teacher part
    is replaced by ``t - (t . s / |s|^2) s``. Teacher-only coordinates and
    non-conflicting tensors are returned unchanged.
    """
    out = dict(g_tea)
    for name in _common_keys(g_tea, g_stu, None):
        t_full, s = g_tea[name], g_stu[name]
        region = _shared_region(name, t_full, s)
        t = t_full[region]
        dot = float(np.dot(t.ravel(), s.ravel()))
        if dot >= 0.0:
            continue
        ss = float(np.dot(s.ravel(), s.ravel()))
        if ss == 0.0:
            continue
        projected = t_full.copy()
        projected[region] = t - (dot / ss) * s
        out[name] = projected
    return out


def combine_gradients(g_stu: GradientSet, g_tea_projected: GradientSet) -> GradientSet:
    """Sum student and (projected) teacher gradients over the teacher's coordinates."""
    out = {}
    for name, t in g_tea_projected.items():
        if name in g_stu:
            s = g_stu[name]
            g = t.copy()
            g[_shared_region(name, t, s)] += s
            out[name] = g
        else:
            out[name] = t
    for name, s in g_stu.items():
        if name not in out:
            out[name] = s
    return out


def cosine_similarities(
    g_tea: GradientSet, g_stu: GradientSet, keys: Optional[Iterable[str]] = None
) -> Dict[str, Optional[float]]:
    """Cosine between teacher and student gradients on each shared slice.

    ``None`` marks tensors where either gradient is exactly zero.
    """
    result = {}
    for name in _common_keys(g_tea, g_stu, keys):
        t_full, s = g_tea[name], g_stu[name]
        t = t_full[_shared_region(name, t_full, s)].ravel()
        s = s.ravel()
        nt, ns = float(np.linalg.norm(t)), float(np.linalg.norm(s))
        result[name] = None if nt == 0.0 or ns == 0.0 else float(np.dot(t, s)) / (nt * ns)
    return result


def conflict_ratio(
    g_tea: GradientSet, g_stu: GradientSet, keys: Optional[Iterable[str]] = None
) -> float:
    """Fraction of shared tensors whose teacher/student cosine is negative."""
    cosines = cosine_similarities(g_tea, g_stu, keys)
    if not cosines:
        raise ValueError("teacher and student gradient sets share no tensors")
    defined = [c for c in cosines.values() if c is not None]
    if not defined:
        return 0.0
    return sum(1 for c in defined if c < 0) / len(defined)
