"""Model variants assembled from the basic blocks.

STS is the single-task network with the deeper trunk. NMTS/UMTS/KDMTS share a
multi-task trunk with one classifier head per task; KDMTS adds per-task linear
transforms and frozen teachers for feature distillation. KDMTS_RA and WIMUSE
additionally carry per-task residual adaptors whose compensation feature is
concatenated with the common feature along the time axis before each head.
Linear transforms, uncertainty state, and teachers are training-time-only and
excluded from inference parameter/multiply-add accounting.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .blocks import (
    BASE_CHANNELS,
    MTS_STRIDES,
    STS_STRIDES,
    Classifier,
    DeepEncoder,
    ResidualAdaptor,
    ShallowEncoder,
    init_parameters,
)
from .data import TaskSpec

VARIANTS = ("STS", "NMTS", "UMTS", "KDMTS", "KDMTS_RA", "WIMUSE")
ADAPTOR_KINDS = ("KDMTS_RA", "WIMUSE")
FEATURE_KD_KINDS = ("KDMTS", "KDMTS_RA", "WIMUSE")


@dataclass
class ForwardOutput:
    """Per-task logits plus the features the heads consumed.

    ``comp_features`` is empty for variants without adaptors; teacher outputs
    are present only when teachers were attached and requested.
    """

    logits: dict[str, torch.Tensor]
    common_feature: torch.Tensor
    comp_features: dict[str, torch.Tensor] = field(default_factory=dict)
    teacher_features: dict[str, torch.Tensor] = field(default_factory=dict)
    teacher_logits: dict[str, torch.Tensor] = field(default_factory=dict)


class ModelVariant(nn.Module):
    """One assembled network; ``kind`` selects trunk depth, heads, and attachments.

    Evaluation-mode forwards are pure functions of (parameters, input) and safe
    to run concurrently; parameter mutation belongs to a single training loop.
    Teachers are frozen at attachment and never updated.
    """

    def __init__(self, kind: str, geometry: tuple[int, int, int], tasks: Sequence[TaskSpec]):
        super().__init__()
        if kind not in VARIANTS:
            raise ValueError(f"unknown variant kind {kind!r}; expected one of {VARIANTS}")
        tasks = tuple(tasks)
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate task names: {names}")
        if kind == "STS" and len(tasks) != 1:
            raise ValueError(f"STS takes exactly one task, got {len(tasks)}")
        if kind != "STS" and len(tasks) < 2:
            raise ValueError(f"{kind} needs at least two tasks, got {len(tasks)}")
        L, S, P = geometry
        if L < 1 or S < 1 or P < 4 or P % 4 != 0:
            raise ValueError(f"invalid geometry (L={L}, S={S}, P={P}); P must be a multiple of 4")

        self.kind = kind
        self.geometry = (L, S, P)
        self.tasks = tasks
        self.build_seed: int | None = None
        self.extension_task: str | None = None

        self.shallow = ShallowEncoder(L, S)
        self.deep = DeepEncoder(L, STS_STRIDES if kind == "STS" else MTS_STRIDES)
        self.classifiers = nn.ModuleDict({t.name: Classifier(L, t.num_classes) for t in tasks})
        self.adaptors = nn.ModuleDict(
            {t.name: ResidualAdaptor(L) for t in tasks} if kind in ADAPTOR_KINDS else {}
        )
        # training-only: per-task channel-mixing transform for feature distillation
        ch = BASE_CHANNELS * L
        self.lt = nn.ModuleDict(
            {t.name: nn.Conv1d(ch, ch, 1, bias=False) for t in tasks}
            if kind in FEATURE_KD_KINDS else {}
        )
        # training-only: per-task log-variance for uncertainty weighting
        self.log_vars = nn.ParameterDict(
            {t.name: nn.Parameter(torch.zeros(())) for t in tasks} if kind == "UMTS" else {}
        )
        self._teachers: dict[str, "ModelVariant"] = {}

    # -- structure ----------------------------------------------------------

    @property
    def task_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tasks)

    @property
    def has_adaptors(self) -> bool:
        return len(self.adaptors) > 0

    @property
    def uses_feature_kd(self) -> bool:
        return self.kind in FEATURE_KD_KINDS

    @property
    def uses_logits_kd(self) -> bool:
        return self.kind == "WIMUSE"

    @property
    def teachers(self) -> dict[str, "ModelVariant"]:
        return dict(self._teachers)

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"model has no task {name!r}")

    def inference_parameters(self):
        """Parameters of the labeling path only (no LT, no uncertainty state)."""
        for module in (self.shallow, self.deep, self.classifiers, self.adaptors):
            yield from module.parameters()

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def parameter_digest(self) -> str:
        """SHA-256 over all parameters and buffers (running statistics included)."""
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def attach_teachers(self, teachers: Mapping[str, "ModelVariant"]) -> None:
        """Attach one frozen single-task teacher per task name."""
        for name, teacher in teachers.items():
            if teacher.kind != "STS":
                raise ValueError(f"teacher for {name!r} must be an STS model, got {teacher.kind}")
            if teacher.geometry != self.geometry:
                raise ValueError(
                    f"teacher geometry {teacher.geometry} != student geometry {self.geometry}"
                )
            if teacher.task_names != (name,):
                raise ValueError(
                    f"teacher trained for {teacher.task_names} cannot serve task {name!r}"
                )
            teacher = teacher.eval()
            for p in teacher.parameters():
                p.requires_grad_(False)
            self._teachers[name] = teacher

    # -- forward ------------------------------------------------------------

    def _as_channels(self, x: torch.Tensor) -> torch.Tensor:
        L, S, P = self.geometry
        if x.dim() == 4:
            if x.shape[1:] != (L, S, P):
                raise ValueError(f"input shape {tuple(x.shape[1:])} != model geometry {(L, S, P)}")
            return x.reshape(x.shape[0], L * S, P)
        if x.dim() == 3:
            if x.shape[1:] != (L * S, P):
                raise ValueError(
                    f"input shape {tuple(x.shape[1:])} != flattened geometry {(L * S, P)}"
                )
            return x
        raise ValueError(f"expected a 3-D or 4-D batch, got {x.dim()}-D")

    def forward(self, x: torch.Tensor, include_teachers: bool | None = None) -> ForwardOutput:
        x = self._as_channels(x)
        low = self.shallow(x)
        common = self.deep(low)

        comp: dict[str, torch.Tensor] = {}
        logits: dict[str, torch.Tensor] = {}
        for t in self.tasks:
            if self.has_adaptors:
                comp[t.name] = self.adaptors[t.name](low)
                head_in = torch.cat([comp[t.name], common], dim=-1)
            else:
                head_in = common
            logits[t.name] = self.classifiers[t.name](head_in)

        if include_teachers is None:
            include_teachers = self.training and self.uses_feature_kd
        teacher_features: dict[str, torch.Tensor] = {}
        teacher_logits: dict[str, torch.Tensor] = {}
        if include_teachers:
            if self.training and self.uses_feature_kd:
                required = ((self.extension_task,) if self.extension_task is not None
                            else self.task_names)
                missing = [n for n in required if n not in self._teachers]
                if missing:
                    raise RuntimeError(f"training-mode forward requires teachers for {missing}")
            with torch.no_grad():
                for name, teacher in self._teachers.items():
                    out = teacher(x, include_teachers=False)
                    teacher_features[name] = out.common_feature
                    teacher_logits[name] = out.logits[name]

        return ForwardOutput(
            logits=logits,
            common_feature=common,
            comp_features=comp,
            teacher_features=teacher_features,
            teacher_logits=teacher_logits,
        )

    # -- accounting ---------------------------------------------------------

    def multiadds_per_sample(self, length: int | None = None) -> int:
        """Analytic multiply-adds for labeling one sample (training-only parts excluded)."""
        length = self.geometry[2] if length is None else length
        total, low_len = self.shallow.multiadds(length)
        deep_macs, common_len = self.deep.multiadds(low_len)
        total += deep_macs
        for t in self.tasks:
            head_len = common_len
            if self.has_adaptors:
                ra_macs, ra_len = self.adaptors[t.name].multiadds(low_len)
                total += ra_macs
                head_len = ra_len + common_len
            total += self.classifiers[t.name].multiadds(head_len)
        return total

    def set_extension_train_mode(self) -> "ModelVariant":
        """Training mode for the added task's modules only; the frozen base
        stays in eval so its normalization statistics cannot drift."""
        if self.extension_task is None:
            raise RuntimeError("model has no extension task")
        self.train()
        name = self.extension_task
        self.shallow.eval()
        self.deep.eval()
        for container in (self.adaptors, self.classifiers, self.lt):
            for key in list(container.keys()):
                if key != name:
                    container[key].eval()
        return self


def build_model(kind: str, geometry: tuple[int, int, int], tasks: Sequence[TaskSpec],
                seed: int) -> ModelVariant:
    """Assemble a variant with deterministic initialization under ``seed``."""
    model = ModelVariant(kind, geometry, tasks)
    generator = torch.Generator().manual_seed(seed)
    init_parameters(model, generator)
    model.build_seed = seed
    return model


def sts_forward(model: ModelVariant, x: torch.Tensor) -> ForwardOutput:
    if model.kind != "STS":
        raise ValueError(f"sts_forward expects an STS model, got {model.kind}")
    return model(x)


def mts_forward(model: ModelVariant, x: torch.Tensor) -> ForwardOutput:
    if model.kind not in ("NMTS", "UMTS", "KDMTS"):
        raise ValueError(f"mts_forward expects NMTS/UMTS/KDMTS, got {model.kind}")
    return model(x)


def wimuse_forward(model: ModelVariant, x: torch.Tensor,
                   include_teachers: bool | None = None) -> ForwardOutput:
    if model.kind not in ADAPTOR_KINDS:
        raise ValueError(f"wimuse_forward expects KDMTS_RA/WIMUSE, got {model.kind}")
    return model(x, include_teachers=include_teachers)


def predict(output) -> dict[str, np.ndarray]:
    """Predicted class per task: argmax of the logits, ties broken by lowest index."""
    logits = output.logits if isinstance(output, ForwardOutput) else output
    preds = {}
    for name, z in logits.items():
        arr = z.detach().cpu().numpy() if isinstance(z, torch.Tensor) else np.asarray(z)
        preds[name] = np.argmax(arr, axis=-1).astype(np.int64)
    return preds


def extend_with_task(model: ModelVariant, new_task: TaskSpec, teacher: ModelVariant,
                     seed: int) -> ModelVariant:
    """Add a task to a trained multi-branch model.

    Returns a copy where the pre-existing parameters are frozen and exactly the
    added adaptor, classifier, and linear transform are trainable. The new
    task's teacher is attached alongside any already present.
    """
    if model.kind != "WIMUSE":
        raise ValueError(f"task extension is defined for WIMUSE models, got {model.kind}")
    if new_task.name in model.task_names:
        raise ValueError(f"task {new_task.name!r} already present")
    if teacher.geometry != model.geometry:
        raise ValueError(f"teacher geometry {teacher.geometry} != model geometry {model.geometry}")

    old_teachers = model._teachers
    model._teachers = {}
    extended = copy.deepcopy(model)
    model._teachers = old_teachers

    for p in extended.parameters():
        p.requires_grad_(False)

    L = extended.geometry[0]
    extended.tasks = extended.tasks + (new_task,)
    extended.adaptors[new_task.name] = ResidualAdaptor(L)
    extended.classifiers[new_task.name] = Classifier(L, new_task.num_classes)
    extended.lt[new_task.name] = nn.Conv1d(BASE_CHANNELS * L, BASE_CHANNELS * L, 1, bias=False)
    generator = torch.Generator().manual_seed(seed)
    for name in (new_task.name,):
        init_parameters(extended.adaptors[name], generator)
        init_parameters(extended.classifiers[name], generator)
        init_parameters(extended.lt[name], generator)
    extended.extension_task = new_task.name

    extended._teachers = dict(old_teachers)
    extended.attach_teachers({new_task.name: teacher})
    return extended
