"""Training loops: in-situ distillation, plain baseline and external-teacher KD.

One in-situ step runs two separate backward passes on the same batch:

1. teacher forward + label-smoothed cross entropy, backward, capture;
2. student forward + student loss (teacher logits detached), backward, capture;
3. optional projection of conflicting teacher gradients;
4. sum of student and teacher gradients, global-norm clip, SGD update.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .checkpoint import save_network, save_store
from .data import Dataset, augment, batches, epoch_rng
from .distill import (
    UncertaintyPolicy,
    combine_gradients,
    conflict_ratio,
    cross_entropy_smoothed,
    external_distill_loss,
    kl_divergence,
    project_gradients,
    select_student_loss,
)
from .nn import Network, NetworkSpec, build_network, reference_cnn
from .supernet import (
    ConfigError,
    GradientSet,
    SharedParameterStore,
    SupernetConfig,
    build_shared,
    export_student,
    gradient_sets,
)

logger = logging.getLogger(__name__)

METRIC_KEYS = (
    "epoch", "lr", "loss_teacher", "loss_student", "acc_student_eval",
    "acc_teacher_eval", "conflict_ratio", "kl_fraction", "seconds",
)


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


class ExternalKDConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    logits_path: str
    # "add": extra KL term on the student; "replace": external logits become
    # the student's distillation target instead of the in-situ teacher.
    student_target: Literal["add", "replace"] = "add"
    weight: float = Field(1.0, ge=0)


class TrainConfig(BaseModel):
    """Hyperparameters. Defaults are the desk-scale recipe."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(60, ge=0)
    batch_size: int = Field(128, ge=1)
    base_lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    warmup_epochs: int = Field(3, ge=0)
    clip_norm: Optional[float] = Field(1.0, gt=0)
    label_smoothing: float = Field(0.1, ge=0, lt=1)
    expansion_rate: int = Field(3, ge=1)
    uncertainty: Optional[UncertaintyPolicy] = None
    student_objective: Literal["kl", "ce", "none"] = "kl"
    surgery_enabled: bool = True
    external_kd: Optional[ExternalKDConfig] = None
    seed: int = 0
    augment: bool = True
    detach_teacher: bool = True
    student_weight: float = Field(1.0, ge=0)
    temperature: float = Field(1.0, gt=0)
    bn_momentum: float = Field(0.1, gt=0, lt=1)
    bn_eps: float = Field(1e-5, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.uncertainty is not None and self.student_objective != "kl":
            raise ValueError("uncertainty gating requires student_objective='kl'")
        if self.uncertainty is not None and self.external_kd is not None:
            raise ValueError("uncertainty gating is not used together with external KD")
        return self

    @classmethod
    def desk_recipe(cls, uncertainty: bool = True, **overrides) -> "TrainConfig":
        """CPU-sized defaults; uncertainty gating doubles the epoch budget."""
        values = dict(epochs=120 if uncertainty else 60,
                      uncertainty=UncertaintyPolicy() if uncertainty else None)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def large_scale_recipe(cls, uncertainty: bool = True, **overrides) -> "TrainConfig":
        """The ImageNet-scale recipe (180 epochs, doubled with uncertainty gating)."""
        values = dict(
            epochs=360 if uncertainty else 180,
            batch_size=1024,
            base_lr=0.4,
            momentum=0.9,
            warmup_epochs=5,
            clip_norm=1.0,
            label_smoothing=0.1,
            expansion_rate=3,
            uncertainty=UncertaintyPolicy(threshold=3.75, mode="absolute") if uncertainty else None,
            surgery_enabled=True,
        )
        values.update(overrides)
        return cls(**values)


# schedule / optimizer ----------------------------------------------------------------


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    if not 0 <= warmup_steps < total_steps:
        raise ConfigError(f"warmup_steps {warmup_steps} must be in [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(g: GradientSet) -> float:
    total = 0.0
    for v in g.values():
        total += float(np.sum(v * v))
    return math.sqrt(total)


def clip(g: GradientSet, max_norm: Optional[float]) -> GradientSet:
    """Rescale all tensors together so the global L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return g
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(g)
    if norm <= max_norm:
        return g
    factor = max_norm / norm
    return {k: v * factor for k, v in g.items()}


@dataclass
class OptimizerState:
    buffers: Dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: Dict[str, Tensor]) -> "OptimizerState":
        return cls({name: np.zeros_like(t.data) for name, t in params.items()})


def sgd_step(params: Dict[str, Tensor], g: GradientSet, state: OptimizerState,
             lr: float, momentum: float) -> None:
    """Heavy-ball SGD: ``buf = momentum*buf + g``; ``param -= lr*buf`` (in place)."""
    unknown = set(g) - set(params)
    if unknown:
        raise ShapeError(f"gradients for unknown parameters: {sorted(unknown)}")
    for name, p in params.items():
        buf = state.buffers[name]
        grad = g.get(name)
        if grad is not None and grad.shape != p.shape:
            raise ShapeError(f"{name}: gradient {grad.shape} vs parameter {p.shape}")
        buf *= momentum
        if grad is not None:
            buf += grad
        p.data -= lr * buf


# one step ------------------------------------------------------------------------


@dataclass
class StepMetrics:
    loss_teacher: float
    loss_student: Optional[float]
    acc_teacher: float
    acc_student: float
    conflict_ratio: float
    kl_fraction: float
    surgery_fired: bool = False


def _finite(t: Tensor, what: str, step: int) -> None:
    if not np.isfinite(t.data).all():
        raise NumericError(f"step {step}: {what} is not finite")


def _finite_grads(g: GradientSet, step: int) -> None:
    for name, v in g.items():
        if not np.isfinite(v).all():
            raise NumericError(f"step {step}: gradient of {name} is not finite")


def student_loss(student_logits: Tensor, teacher_logits: Tensor, labels: np.ndarray,
                 config: TrainConfig, external: Optional[np.ndarray] = None
                 ) -> Tuple[Optional[Tensor], float]:
    """The student objective and the fraction of samples distilled with KL."""
    if config.student_objective == "none":
        return None, 0.0
    if config.student_objective == "ce":
        return cross_entropy_smoothed(student_logits, labels, config.label_smoothing), 0.0
    target = teacher_logits if not config.detach_teacher else teacher_logits.detach()
    ext = config.external_kd
    if ext is not None and ext.student_target == "replace":
        target = Tensor(external)
    if config.uncertainty is not None:
        loss, mask = select_student_loss(student_logits, target, labels, config.uncertainty,
                                         detach_teacher=config.detach_teacher,
                                         temperature=config.temperature)
        frac = float(mask.mean())
    else:
        loss = kl_divergence(student_logits, target, detach_teacher=config.detach_teacher,
                             temperature=config.temperature)
        frac = 1.0
    if ext is not None and ext.student_target == "add":
        loss = ad.add(loss, ad.scale(external_distill_loss(student_logits, external, config.temperature),
                                     ext.weight))
    return loss, frac


def apply_gradients(
    params: Dict[str, Tensor],
    g_tea: GradientSet,
    g_stu: GradientSet,
    config: TrainConfig,
    optimizer: OptimizerState,
    lr: float,
    shared_keys=None,
) -> Tuple[float, bool]:
    """Surgery, combination, clipping and the SGD update for captured gradients.

    Returns the conflict ratio over ``shared_keys`` (all common keys when
    None) and whether any teacher gradient was projected.
    """
    ratio = conflict_ratio(g_tea, g_stu, keys=shared_keys)
    g_tea_final = project_gradients(g_tea, g_stu) if config.surgery_enabled else g_tea
    fired = any(g_tea_final[k] is not g_tea[k] for k in g_tea)
    g = clip(combine_gradients(g_stu, g_tea_final), config.clip_norm)
    sgd_step(params, g, optimizer, lr, config.momentum)
    return ratio, fired


# overflow is reported through the non-finite checks, not numpy warnings
@np.errstate(over="ignore", invalid="ignore")
def train_step(
    store: SharedParameterStore,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    optimizer: OptimizerState,
    lr: float,
    external: Optional[np.ndarray] = None,
    step: int = 0,
) -> StepMetrics:
    """One in-situ distillation update of every parameter in ``store``."""
    x = Tensor(images)
    store.reset_capture()
    try:
        store.zero_grad()
        t_logits = store.forward_teacher(x, train=True)
        loss_t = cross_entropy_smoothed(t_logits, labels, config.label_smoothing)
        if config.external_kd is not None:
            loss_t = ad.add(loss_t, ad.scale(external_distill_loss(t_logits, external, config.temperature),
                                             config.external_kd.weight))
        _finite(loss_t, "teacher loss", step)
        ad.backward(loss_t)
        store.capture("teacher")

        store.zero_grad()
        s_logits = store.forward_student(x, train=True)
        loss_s, kl_frac = student_loss(s_logits, t_logits, labels, config, external)
        if loss_s is not None:
            if config.student_weight != 1.0:
                loss_s = ad.scale(loss_s, config.student_weight)
            _finite(loss_s, "student loss", step)
            ad.backward(loss_s)
        store.capture("student")
    except FloatingPointError as exc:
        raise NumericError(f"step {step}: {exc}") from exc
    store.zero_grad()

    g_tea, g_stu = gradient_sets(store)
    _finite_grads(g_tea, step)
    _finite_grads(g_stu, step)
    ratio, fired = apply_gradients(store.all_parameters(), g_tea, g_stu, config, optimizer, lr,
                                   shared_keys=store.shared)

    return StepMetrics(
        loss_teacher=loss_t.item(),
        loss_student=None if loss_s is None else loss_s.item(),
        acc_teacher=float(np.mean(ad.max_index(t_logits, axis=1) == labels)),
        acc_student=float(np.mean(ad.max_index(s_logits, axis=1) == labels)),
        conflict_ratio=ratio,
        kl_fraction=kl_frac,
        surgery_fired=fired,
    )


def measure_gradients(
    store: SharedParameterStore,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
) -> Tuple[GradientSet, GradientSet]:
    """Teacher and student gradient sets for one batch, without touching parameters."""
    x = Tensor(images)
    store.reset_capture()
    store.zero_grad()
    t_logits = store.forward_teacher(x, train=True)
    ad.backward(cross_entropy_smoothed(t_logits, labels, config.label_smoothing))
    store.capture("teacher")
    store.zero_grad()
    loss_s, _ = student_loss(store.forward_student(x, train=True), t_logits, labels, config)
    if loss_s is not None:
        ad.backward(loss_s)
    store.capture("student")
    store.zero_grad()
    g_tea, g_stu = gradient_sets(store)
    store.reset_capture()
    return g_tea, g_stu


# evaluation ------------------------------------------------------------------------


def evaluate(model, dataset: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy with eval-mode batch norm; ties go to the lowest class index.

    ``model`` is a :class:`Network` or any callable ``(Tensor, train=False) -> logits``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    forward = model.forward if isinstance(model, Network) else model
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x = Tensor(dataset.images[start : start + batch_size])
        pred = ad.max_index(forward(x, train=False), axis=1)
        correct += int(np.sum(pred == dataset.labels[start : start + batch_size]))
    return correct / len(dataset)


def accuracy_from_logits(logits, labels) -> float:
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(ad.max_index(logits, axis=1) == np.asarray(labels)))


# run metrics ------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_teacher: Optional[float]
    loss_student: Optional[float]
    acc_student_eval: Optional[float]
    acc_teacher_eval: Optional[float]
    conflict_ratio: Optional[float]
    kl_fraction: Optional[float]
    seconds: float
    acc_student_train: Optional[float] = None
    acc_teacher_train: Optional[float] = None

    def as_json(self) -> str:
        row = asdict(self)
        return json.dumps({k: row[k] for k in METRIC_KEYS})


@dataclass
class RunMetrics:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord, jsonl_path: Optional[Path] = None) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(record)
        if jsonl_path is not None:
            with open(jsonl_path, "a") as fh:
                fh.write(record.as_json() + "\n")

    @property
    def last(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


# loops -------------------------------------------------------------------------------


def _external_rows(external: Optional[np.ndarray], train_set: Dataset) -> Optional[np.ndarray]:
    if external is None:
        return None
    external = np.asarray(external, dtype=np.float64)
    if external.shape != (len(train_set), train_set.class_count):
        raise ConfigError(
            f"external logits {external.shape} do not match dataset "
            f"({len(train_set)}, {train_set.class_count})"
        )
    return external


def _schedule(config: TrainConfig, n: int) -> Tuple[int, int, int]:
    per_epoch = math.ceil(n / config.batch_size)
    return per_epoch, per_epoch * config.epochs, per_epoch * config.warmup_epochs


def _epoch_batches(config: TrainConfig, train_set: Dataset, epoch: int):
    aug_rng = epoch_rng(config.seed, epoch, stream=1)
    for idx in batches(train_set, config.batch_size, config.seed, epoch):
        images = train_set.images[idx]
        if config.augment:
            images = augment(images, aug_rng)
        yield idx, images, train_set.labels[idx]


def train(
    config: TrainConfig,
    train_set: Dataset,
    eval_set: Optional[Dataset] = None,
    spec: Optional[NetworkSpec] = None,
    out_dir: Optional[Path] = None,
    external_logits: Optional[np.ndarray] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[SharedParameterStore, RunMetrics]:
    """Jointly train the widened teacher and its embedded student.

    With ``out_dir`` set, ``metrics.jsonl`` is appended each epoch,
    ``last.ckpt`` is rewritten atomically each epoch, and ``final.ckpt`` plus
    ``student_export.ckpt`` are written at the end.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if config.external_kd is not None and external_logits is None:
        raise ConfigError("external_kd is configured but no external logits were supplied")
    external_logits = _external_rows(external_logits, train_set)
    spec = spec or reference_cnn(train_set.images.shape[1], train_set.class_count)
    if spec.num_classes != train_set.class_count:
        raise ConfigError(f"spec has {spec.num_classes} classes, dataset has {train_set.class_count}")
    store = build_shared(SupernetConfig(expansion_rate=config.expansion_rate, student_spec=spec),
                         config.seed, config.bn_momentum, config.bn_eps)
    optimizer = OptimizerState.for_params(store.all_parameters())
    eval_set = eval_set if eval_set is not None else train_set
    metrics = RunMetrics()
    jsonl = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jsonl = out_dir / "metrics.jsonl"
        jsonl.write_text("")

    per_epoch, total, warmup = _schedule(config, len(train_set))
    step = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        rows: List[StepMetrics] = []
        lr = 0.0
        for idx, images, labels in _epoch_batches(config, train_set, epoch):
            lr = lr_at(step, total, warmup, config.base_lr)
            ext = None if external_logits is None else external_logits[idx]
            rows.append(train_step(store, images, labels, config, optimizer, lr, ext, step))
            step += 1
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            loss_teacher=_mean(r.loss_teacher for r in rows),
            loss_student=_mean(r.loss_student for r in rows),
            acc_student_eval=evaluate(store.student_network(), eval_set),
            acc_teacher_eval=evaluate(store.teacher_network(), eval_set),
            conflict_ratio=_mean(r.conflict_ratio for r in rows),
            kl_fraction=_mean(r.kl_fraction for r in rows),
            seconds=time.perf_counter() - started,
            acc_student_train=_mean(r.acc_student for r in rows),
            acc_teacher_train=_mean(r.acc_teacher for r in rows),
        )
        metrics.append(record, jsonl)
        logger.debug("epoch %d student %.4f teacher %.4f conflict %.3f", epoch,
                     record.acc_student_eval, record.acc_teacher_eval, record.conflict_ratio)
        if on_epoch is not None:
            on_epoch(record)
        if out_dir is not None:
            save_store(store, out_dir / "last.ckpt")

    if out_dir is not None:
        save_store(store, out_dir / "final.ckpt")
        save_network(export_student(store), out_dir / "student_export.ckpt")
    return store, metrics


@np.errstate(over="ignore", invalid="ignore")
def _train_standalone(
    config: TrainConfig,
    train_set: Dataset,
    eval_set: Optional[Dataset],
    spec: Optional[NetworkSpec],
    out_dir: Optional[Path],
    loss_fn: Callable[[Tensor, np.ndarray, np.ndarray], Tensor],
) -> Tuple[Network, RunMetrics]:
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    spec = spec or reference_cnn(train_set.images.shape[1], train_set.class_count)
    net = build_network(spec, config.seed, config.bn_momentum, config.bn_eps)
    params = net.named_parameters()
    optimizer = OptimizerState.for_params(params)
    eval_set = eval_set if eval_set is not None else train_set
    metrics = RunMetrics()
    jsonl = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jsonl = out_dir / "metrics.jsonl"
        jsonl.write_text("")

    per_epoch, total, warmup = _schedule(config, len(train_set))
    step = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        losses, accs = [], []
        lr = 0.0
        for idx, images, labels in _epoch_batches(config, train_set, epoch):
            lr = lr_at(step, total, warmup, config.base_lr)
            net.zero_grad()
            try:
                logits = net.forward(Tensor(images), train=True)
                loss = loss_fn(logits, labels, idx)
                _finite(loss, "loss", step)
                ad.backward(loss)
            except FloatingPointError as exc:
                raise NumericError(f"step {step}: {exc}") from exc
            g = {name: (np.zeros_like(t.data) if t.grad is None else t.grad) for name, t in params.items()}
            _finite_grads(g, step)
            sgd_step(params, clip(g, config.clip_norm), optimizer, lr, config.momentum)
            net.zero_grad()
            losses.append(loss.item())
            accs.append(accuracy_from_logits(logits, labels))
            step += 1
        record = EpochRecord(
            epoch=epoch, lr=lr, loss_teacher=None, loss_student=_mean(losses),
            acc_student_eval=evaluate(net, eval_set), acc_teacher_eval=None,
            conflict_ratio=None, kl_fraction=None,
            seconds=time.perf_counter() - started, acc_student_train=_mean(accs),
        )
        metrics.append(record, jsonl)
        if out_dir is not None:
            save_network(net, out_dir / "last.ckpt")
    if out_dir is not None:
        save_network(net, out_dir / "final.ckpt")
        save_network(net, out_dir / "student_export.ckpt")
    return net, metrics


def train_baseline(config: TrainConfig, train_set: Dataset, eval_set: Optional[Dataset] = None,
                   spec: Optional[NetworkSpec] = None, out_dir: Optional[Path] = None
                   ) -> Tuple[Network, RunMetrics]:
    """The target network alone, trained with label-smoothed cross entropy."""
    return _train_standalone(
        config, train_set, eval_set, spec, out_dir,
        lambda logits, labels, idx: cross_entropy_smoothed(logits, labels, config.label_smoothing),
    )


def train_standard_kd(config: TrainConfig, train_set: Dataset, frozen_teacher_logits: np.ndarray,
                      eval_set: Optional[Dataset] = None, spec: Optional[NetworkSpec] = None,
                      out_dir: Optional[Path] = None, weight: float = 1.0
                      ) -> Tuple[Network, RunMetrics]:
    """Cross entropy plus KL towards a frozen external teacher's logits."""
    frozen = _external_rows(frozen_teacher_logits, train_set)

    def loss_fn(logits, labels, idx):
        ce = cross_entropy_smoothed(logits, labels, config.label_smoothing)
        kd = external_distill_loss(logits, frozen[idx], config.temperature)
        return ad.add(ce, ad.scale(kd, weight))

    return _train_standalone(config, train_set, eval_set, spec, out_dir, loss_fn)
