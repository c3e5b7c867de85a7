"""Scalar objectives: softmax/cross-entropy, weighted multi-task sums,
uncertainty weighting, feature distillation, soft-logits distillation, and the
combined multi-branch training loss.

All functions are pure and differentiate through torch autograd; gradient
correctness is checked against central finite differences in the test suite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

EPS = 1e-12
KD_POOL_LEN = 10

# Default direction keeps the written form of the soft-logits loss: the student
# distribution weights the log-probabilities of the teacher. "teacher_weights"
# is the conventional soft-target form, available for comparison.
KD_DIRECTIONS = ("student_weights", "teacher_weights")


@dataclass(frozen=True)
class HyperParams:
    """Loss hyperparameters: per-task weights, feature-distillation weight,
    distillation temperature."""

    omega: Mapping[str, float]
    lam: float = 1.0
    tau: float = 1.0
    logits_kd_direction: str = "student_weights"

    def __post_init__(self):
        object.__setattr__(self, "omega", dict(self.omega))
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if any(w < 0 for w in self.omega.values()):
            raise ValueError(f"task weights must be >= 0, got {self.omega}")
        if self.omega and not any(w > 0 for w in self.omega.values()):
            raise ValueError("at least one task weight must be > 0")
        if self.logits_kd_direction not in KD_DIRECTIONS:
            raise ValueError(f"logits_kd_direction must be one of {KD_DIRECTIONS}")

    @staticmethod
    def uniform(task_names, lam: float = 1.0, tau: float = 1.0, **kwargs) -> "HyperParams":
        return HyperParams({name: 1.0 for name in task_names}, lam=lam, tau=tau, **kwargs)


def softmax(z: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Numerically stable softmax (max-subtracted)."""
    z = z - z.max(dim=dim, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def cross_entropy(p: torch.Tensor, y) -> torch.Tensor:
    """-log p_y for a probability vector (or batch of them); y is the true class."""
    y = torch.as_tensor(y, dtype=torch.long, device=p.device)
    p_y = p.gather(-1, y.reshape(*p.shape[:-1], 1)).squeeze(-1)
    return -torch.log(p_y.clamp_min(EPS))


def cross_entropy_from_logits(z: torch.Tensor, y) -> torch.Tensor:
    return cross_entropy(softmax(z), y)


def multitask_ce(losses: Mapping[str, torch.Tensor], omega: Mapping[str, float]) -> torch.Tensor:
    """Weighted linear combination sum_t omega_t * l_t."""
    total = None
    for name, loss in losses.items():
        if name not in omega:
            raise KeyError(f"missing task weight for {name!r}")
        term = omega[name] * loss
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no per-task losses given")
    return total


def uncertainty_weighted(losses: Mapping[str, torch.Tensor],
                         log_vars: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Homoscedastic uncertainty weighting: sum_t exp(-s_t) * l_t + s_t."""
    total = None
    for name, loss in losses.items():
        if name not in log_vars:
            raise KeyError(f"missing log-variance for task {name!r}")
        s = log_vars[name]
        term = torch.exp(-s) * loss + s
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no per-task losses given")
    return total


def _unit(v: torch.Tensor) -> torch.Tensor:
    """Row-wise L2 normalization; an all-zero row maps to the zero vector."""
    norm = v.norm(dim=-1, keepdim=True)
    zero = norm.squeeze(-1) == 0
    if bool(zero.any()):
        warnings.warn("feature_kd_loss: zero-norm feature mapped to the zero vector")
        norm = norm.clamp_min(1.0 * EPS)
        return torch.where(zero.unsqueeze(-1), torch.zeros_like(v), v / norm)
    return v / norm


def feature_kd_loss(student_feature: torch.Tensor, teacher_feature: torch.Tensor,
                    lt: torch.nn.Module | None = None) -> torch.Tensor:
    """Distance between the transformed common feature and a teacher feature.

    Both features [B, C, T] are average-pooled along time to a common length,
    the student side passes through the per-task channel-mixing transform, and
    the loss is the Euclidean distance between the flattened, L2-normalized
    vectors. The result lies in [0, 2] per sample.
    """
    if student_feature.dim() != 3 or teacher_feature.dim() != 3:
        raise ValueError("features must be batched [B, C, T]")
    if student_feature.shape[1] != teacher_feature.shape[1]:
        raise ValueError(
            f"channel mismatch: student {student_feature.shape[1]} vs "
            f"teacher {teacher_feature.shape[1]}"
        )
    s = F.adaptive_avg_pool1d(student_feature, KD_POOL_LEN)
    t = F.adaptive_avg_pool1d(teacher_feature, KD_POOL_LEN)
    if lt is not None:
        s = lt(s)
    s = _unit(s.flatten(1))
    t = _unit(t.flatten(1))
    return (s - t).norm(dim=-1)


def logits_kd_loss(z_student: torch.Tensor, z_teacher: torch.Tensor, tau: float,
                   direction: str = "student_weights") -> torch.Tensor:
    """Temperature-softened distillation loss between student and teacher logits.

    With the default direction the student's softened distribution weights the
    log of the teacher's; "teacher_weights" swaps the roles (the classic
    soft-target form).
    """
    if z_student.shape != z_teacher.shape:
        raise ValueError(f"logit shapes differ: {tuple(z_student.shape)} vs {tuple(z_teacher.shape)}")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if direction not in KD_DIRECTIONS:
        raise ValueError(f"direction must be one of {KD_DIRECTIONS}")
    p_student = softmax(z_student / tau)
    p_teacher = softmax(z_teacher / tau)
    if direction == "student_weights":
        return -(p_student * torch.log(p_teacher.clamp_min(EPS))).sum(dim=-1)
    return -(p_teacher * torch.log(p_student.clamp_min(EPS))).sum(dim=-1)


def wimuse_total_loss(output, labels: Mapping[str, torch.Tensor], hyper: HyperParams,
                      lt: Mapping[str, torch.nn.Module],
                      include_logits_kd: bool = True):
    """Combined objective sum_t (omega_t * CE + lam * kd1 + kd2), mean over the batch.

    Returns (total, parts) where parts holds the weighted component sums
    {"ce", "kd1", "kd2"} and total is exactly their sum.
    """
    task_names = list(output.logits.keys())
    for name in task_names:
        if name not in output.teacher_features or name not in output.teacher_logits:
            raise ValueError(f"missing teacher outputs for task {name!r}")
        if name not in labels:
            raise KeyError(f"missing labels for task {name!r}")
        if name not in lt:
            raise KeyError(f"missing linear transform for task {name!r}")
        if name not in hyper.omega:
            raise KeyError(f"missing task weight for {name!r}")

    ce_sum = kd1_sum = kd2_sum = None
    for name in task_names:
        z = output.logits[name]
        ce = hyper.omega[name] * cross_entropy(softmax(z), labels[name]).mean()
        kd1 = hyper.lam * feature_kd_loss(
            output.common_feature, output.teacher_features[name], lt[name]
        ).mean()
        ce_sum = ce if ce_sum is None else ce_sum + ce
        kd1_sum = kd1 if kd1_sum is None else kd1_sum + kd1
        if include_logits_kd:
            kd2 = logits_kd_loss(z, output.teacher_logits[name], hyper.tau,
                                 hyper.logits_kd_direction).mean()
            kd2_sum = kd2 if kd2_sum is None else kd2_sum + kd2
    if kd2_sum is None:
        kd2_sum = torch.zeros((), dtype=ce_sum.dtype, device=ce_sum.device)

    parts = {"ce": ce_sum, "kd1": kd1_sum, "kd2": kd2_sum}
    total = parts["ce"] + parts["kd1"] + parts["kd2"]
    return total, parts
