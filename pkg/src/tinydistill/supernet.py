"""Weight-sharing teacher built by widening every hidden layer of a student.

The teacher owns all conv/dense storage. The student's parameters are
numpy views onto the leading channel block of each teacher tensor, so a
write through either side is visible to the other. Batch-norm layers are
not shared: teacher and student each keep their own affine parameters and
running statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .autodiff import Tensor
from .nn import (
    BatchNormState,
    LayerSpec,
    Network,
    NetworkSpec,
    forward_layers,
    init_batchnorm,
    init_parameters,
    parameter_shapes,
)

GradientSet = Dict[str, np.ndarray]

TEACHER_BN = "teacher:"
STUDENT_BN = "student:"


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


class StateError(RuntimeError):
    """Raised when an operation is attempted in the wrong order."""


class SupernetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    expansion_rate: int = Field(3, ge=1)
    student_spec: NetworkSpec


def expand(student_spec: NetworkSpec, k: int) -> NetworkSpec:
    """Multiply every hidden width by ``k``.

    The network input channels and the classifier's output width are left
    untouched.
    """
    if k < 1:
        raise ConfigError(f"expansion rate must be >= 1, got {k}")
    student_spec.validate_chain()
    last_dense = max(i for i, l in enumerate(student_spec.layers) if l.kind == "Dense")
    layers = []
    first_weighted = True
    for i, layer in enumerate(student_spec.layers):
        if layer.kind in ("Conv2d", "Dense"):
            cin = layer.in_channels if first_weighted else layer.in_channels * k
            cout = layer.out_channels if i == last_dense else layer.out_channels * k
            layer = layer.model_copy(update={"in_channels": cin, "out_channels": cout})
            first_weighted = False
        elif layer.kind == "BatchNorm2d":
            layer = layer.model_copy(
                update={"in_channels": layer.in_channels * k, "out_channels": layer.out_channels * k}
            )
        layers.append(LayerSpec(**layer.model_dump()))
    return NetworkSpec(layers=layers)


def student_slice(student_shape: Tuple[int, ...]) -> Tuple[slice, ...]:
    """Leading-index region of a teacher tensor owned by the student."""
    return tuple(slice(0, n) for n in student_shape)


@dataclass
class SharedParameterStore:
    student_spec: NetworkSpec
    teacher_spec: NetworkSpec
    expansion_rate: int
    seed: int
    shared: Dict[str, Tensor]
    student_view: Dict[str, Tensor]
    teacher_bn: Dict[int, BatchNormState]
    student_bn: Dict[int, BatchNormState]
    _captured: Dict[str, Optional[GradientSet]] = field(
        default_factory=lambda: {"teacher": None, "student": None}, repr=False
    )

    # parameters ---------------------------------------------------------

    def teacher_parameters(self) -> Dict[str, Tensor]:
        named = dict(self.shared)
        for i, state in self.teacher_bn.items():
            named[f"{TEACHER_BN}{i}.gamma"] = state.gamma
            named[f"{TEACHER_BN}{i}.beta"] = state.beta
        return named

    def student_bn_parameters(self) -> Dict[str, Tensor]:
        named = {}
        for i, state in self.student_bn.items():
            named[f"{STUDENT_BN}{i}.gamma"] = state.gamma
            named[f"{STUDENT_BN}{i}.beta"] = state.beta
        return named

    def all_parameters(self) -> Dict[str, Tensor]:
        """Every independently stored trainable tensor (views excluded)."""
        named = self.teacher_parameters()
        named.update(self.student_bn_parameters())
        return named

    def zero_grad(self) -> None:
        for t in self.all_parameters().values():
            t.grad = None
        for t in self.student_view.values():
            t.grad = None

    # forward ------------------------------------------------------------

    def forward_teacher(self, x: Tensor, train: bool = False) -> Tensor:
        return forward_layers(self.teacher_spec, self.shared, self.teacher_bn, x, train)

    def forward_student(self, x: Tensor, train: bool = False) -> Tensor:
        return forward_layers(self.student_spec, self.student_view, self.student_bn, x, train)

    def student_network(self) -> Network:
        """The student as a :class:`Network` that aliases this store."""
        return Network(self.student_spec, self.student_view, self.student_bn)

    def teacher_network(self) -> Network:
        return Network(self.teacher_spec, self.shared, self.teacher_bn)

    def exclusive_mask(self, name: str) -> np.ndarray:
        """Boolean mask of teacher-only coordinates of a shared tensor."""
        mask = np.ones(self.shared[name].shape, dtype=bool)
        mask[student_slice(self.student_view[name].shape)] = False
        return mask

    # gradient capture ---------------------------------------------------

    def capture(self, side: str) -> GradientSet:
        """Snapshot the gradients left by the last backward pass for ``side``.

        The teacher set covers full teacher tensors plus teacher batch-norm
        params. The student set covers the student's slice of every shared
        tensor plus student batch-norm params; if the student loss also
        reached the teacher tensors (teacher logits not detached), those
        contributions are folded in and the shared entries become full-size.
        """
        if side == "teacher":
            grads = {
                name: _grad_or_zeros(t) for name, t in self.teacher_parameters().items()
            }
        elif side == "student":
            grads = {}
            for name, view in self.student_view.items():
                g = _grad_or_zeros(view)
                through_teacher = self.shared[name].grad
                if through_teacher is not None:
                    full = through_teacher.copy()
                    full[student_slice(g.shape)] += g
                    g = full
                grads[name] = g
            for name, t in self.student_bn_parameters().items():
                grads[name] = _grad_or_zeros(t)
            for i, state in self.teacher_bn.items():
                for pname, t in (("gamma", state.gamma), ("beta", state.beta)):
                    if t.grad is not None:
                        grads[f"{TEACHER_BN}{i}.{pname}"] = t.grad.copy()
        else:
            raise ValueError(f"unknown side {side!r}")
        self._captured[side] = grads
        return grads

    def reset_capture(self) -> None:
        self._captured = {"teacher": None, "student": None}


def _grad_or_zeros(t: Tensor) -> np.ndarray:
    return np.zeros_like(t.data) if t.grad is None else t.grad.copy()


def gradient_sets(store: SharedParameterStore) -> Tuple[GradientSet, GradientSet]:
    """Return the ``(teacher, student)`` gradient sets captured this step."""
    g_tea = store._captured.get("teacher")
    g_stu = store._captured.get("student")
    if g_tea is None or g_stu is None:
        missing = [s for s, g in (("teacher", g_tea), ("student", g_stu)) if g is None]
        raise StateError(f"no captured gradients for: {', '.join(missing)}")
    return g_tea, g_stu


def _make_views(shared: Dict[str, Tensor], student_spec: NetworkSpec) -> Dict[str, Tensor]:
    views = {}
    for name, shape in parameter_shapes(student_spec).items():
        teacher = shared[name]
        if len(shape) != teacher.ndim or any(s > t for s, t in zip(shape, teacher.shape)):
            raise ConfigError(f"student tensor {name} {shape} does not fit teacher {teacher.shape}")
        views[name] = Tensor(teacher.data[student_slice(shape)], requires_grad=True)
    return views


def assemble_store(
    student_spec: NetworkSpec,
    k: int,
    seed: int,
    shared: Dict[str, Tensor],
    teacher_bn: Dict[int, BatchNormState],
    student_bn: Dict[int, BatchNormState],
) -> SharedParameterStore:
    return SharedParameterStore(
        student_spec=student_spec,
        teacher_spec=expand(student_spec, k),
        expansion_rate=k,
        seed=seed,
        shared=shared,
        student_view=_make_views(shared, student_spec),
        teacher_bn=teacher_bn,
        student_bn=student_bn,
    )


def build_shared(
    config: SupernetConfig, seed: int, bn_momentum: float = 0.1, bn_eps: float = 1e-5
) -> SharedParameterStore:
    """Initialize the teacher and carve the student view out of it."""
    student_spec = config.student_spec
    student_spec.validate_chain()
    teacher_spec = expand(student_spec, config.expansion_rate)
    shared = init_parameters(teacher_spec, seed)
    return assemble_store(
        student_spec,
        config.expansion_rate,
        seed,
        shared,
        init_batchnorm(teacher_spec, bn_momentum, bn_eps),
        init_batchnorm(student_spec, bn_momentum, bn_eps),
    )


def export_student(store: SharedParameterStore) -> Network:
    """Standalone copy of the student: sliced weights plus student batch norm."""
    params = {name: Tensor(v.data.copy(), requires_grad=True) for name, v in store.student_view.items()}
    bn = {
        i: BatchNormState(
            gamma=Tensor(s.gamma.data.copy(), requires_grad=True),
            beta=Tensor(s.beta.data.copy(), requires_grad=True),
            running_mean=s.running_mean.copy(),
            running_var=s.running_var.copy(),
            momentum=s.momentum,
            eps=s.eps,
        )
        for i, s in store.student_bn.items()
    }
    return Network(store.student_spec, params, bn)
