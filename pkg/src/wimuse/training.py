"""Two-phase training: single-task teachers first, then the multi-task student
with frozen teachers, plus the task-extension routine.

Adam with a piecewise-constant schedule (halved at the configured epochs, none
after the last one). Orchestration is bit-reproducible under a fixed seed:
splits, initialization, and batch order derive from the seed alone;
floating-point reduction order inside kernels is the only exemption.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import CsiDataset, TaskSpec
from .losses import (
    HyperParams,
    cross_entropy,
    feature_kd_loss,
    logits_kd_loss,
    multitask_ce,
    softmax,
    uncertainty_weighted,
)
from .models import FEATURE_KD_KINDS, ModelVariant, build_model


@dataclass
class TrainConfig:
    """Optimizer, schedule, and loss settings for one training run."""

    hyper: HyperParams | None = None
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 500
    lr_decay_factor: float = 0.5
    lr_decay_epochs: tuple[int, ...] = (100, 200, 300)
    seed: int = 0
    checkpoint_dir: str | Path | None = None
    device: str = "cpu"
    eval_batch_size: int = 256
    early_stop_train_acc: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ValueError(f"decay epochs must be strictly increasing: {self.lr_decay_epochs}")
        if any(e >= self.epochs for e in self.lr_decay_epochs):
            raise ValueError(
                f"decay epochs {self.lr_decay_epochs} must lie below epochs={self.epochs}"
            )

    def replace(self, **kwargs) -> "TrainConfig":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(kwargs)
        return TrainConfig(**fields)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate of the piecewise-constant schedule at a given epoch."""
    if not (0 <= epoch < cfg.epochs):
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    halvings = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.lr * (cfg.lr_decay_factor ** halvings)


@dataclass
class EpochRow:
    epoch: int
    lr: float
    loss_components: dict[str, dict[str, float]]
    train_acc: dict[str, float]
    test_acc: dict[str, float]

    def log_line(self) -> str:
        parts = [f"epoch={self.epoch}", f"lr={self.lr:.8g}"]
        for task, comps in self.loss_components.items():
            for name, value in comps.items():
                parts.append(f"{task}.{name}={value:.6g}")
        for task, acc in self.train_acc.items():
            parts.append(f"{task}.acc_train={acc:.6g}")
        for task, acc in self.test_acc.items():
            parts.append(f"{task}.acc_test={acc:.6g}")
        return " ".join(parts)


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    wall_clock_s: float = 0.0
    checkpoint_path: str | None = None
    best_checkpoint_path: str | None = None
    metrics_path: str | None = None
    best_epoch: int = -1
    best_test_acc: dict[str, float] = field(default_factory=dict)
    final_test_acc: dict[str, float] = field(default_factory=dict)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch's shuffled minibatch index lists."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _tensors(ds: CsiDataset, task_names: Sequence[str], device: str):
    amp = ds.amplitude_stack()
    X = torch.from_numpy(amp.reshape(amp.shape[0], -1, amp.shape[-1])).to(device)
    y = {t: torch.from_numpy(ds.labels_array(t)).to(device) for t in task_names}
    return X, y


def _accuracy(model: ModelVariant, X: torch.Tensor, y: Mapping[str, torch.Tensor],
              batch_size: int) -> dict[str, float]:
    was_training = model.training
    model.eval()
    correct = {t: 0 for t in y}
    with torch.no_grad():
        for i in range(0, X.shape[0], batch_size):
            out = model(X[i:i + batch_size], include_teachers=False)
            for t in y:
                pred = out.logits[t].argmax(dim=-1)
                correct[t] += int((pred == y[t][i:i + batch_size]).sum())
    if was_training:
        model.train()
    return {t: correct[t] / X.shape[0] for t in y}


def _fit(model: ModelVariant, train_set: CsiDataset, test_set: CsiDataset, cfg: TrainConfig,
         step_loss, tag: str, set_train_mode=None) -> TrainReport:
    """Shared minibatch loop; ``step_loss(out, yb) -> (loss, {task: {comp: float}})``."""
    device = cfg.device
    model.to(device)
    task_names = list(model.task_names)
    Xtr, ytr = _tensors(train_set, task_names, device)
    Xte, yte = _tensors(test_set, task_names, device)

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    metrics_path = None
    metrics_file = None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = ckpt_dir / f"{tag}_metrics.log"
        metrics_file = open(metrics_path, "a", encoding="utf-8")

    report = TrainReport(metrics_path=str(metrics_path) if metrics_path else None)
    best_mean = -1.0
    best_state = None
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            (set_train_mode or model.train)()

            comp_sums: dict[str, dict[str, float]] = {}
            n_batches = 0
            correct = {t: 0 for t in task_names}
            for idx in batch_indices(len(train_set), cfg.batch_size, rng):
                xb = Xtr[idx]
                yb = {t: ytr[t][idx] for t in task_names}
                optimizer.zero_grad()
                out = model(xb)
                loss, comps = step_loss(out, yb)
                loss.backward()
                optimizer.step()
                n_batches += 1
                for task, c in comps.items():
                    sums = comp_sums.setdefault(task, {})
                    for name, value in c.items():
                        sums[name] = sums.get(name, 0.0) + value
                for t in task_names:
                    pred = out.logits[t].detach().argmax(dim=-1)
                    correct[t] += int((pred == yb[t]).sum())

            train_acc = {t: correct[t] / len(train_set) for t in task_names}
            test_acc = _accuracy(model, Xte, yte, cfg.eval_batch_size)
            row = EpochRow(
                epoch=epoch,
                lr=lr,
                loss_components={
                    task: {k: v / n_batches for k, v in comps.items()}
                    for task, comps in comp_sums.items()
                },
                train_acc=train_acc,
                test_acc=test_acc,
            )
            report.rows.append(row)
            if metrics_file is not None:
                metrics_file.write(row.log_line() + "\n")
                metrics_file.flush()

            mean_acc = float(np.mean(list(test_acc.values())))
            if mean_acc > best_mean:
                best_mean = mean_acc
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                report.best_epoch = epoch
                report.best_test_acc = dict(test_acc)

            if cfg.early_stop_train_acc is not None and all(
                a >= cfg.early_stop_train_acc for a in train_acc.values()
            ):
                break
    finally:
        if metrics_file is not None:
            metrics_file.close()

    report.wall_clock_s = time.perf_counter() - t0
    report.final_test_acc = dict(report.rows[-1].test_acc) if report.rows else {}

    if ckpt_dir is not None:
        report.checkpoint_path = str(save_checkpoint(model, ckpt_dir / f"{tag}_final.ckpt",
                                                     hyper=cfg.hyper))
        if best_state is not None:
            attached = model._teachers
            model._teachers = {}
            best_model = copy.deepcopy(model)
            model._teachers = attached
            best_model.load_state_dict(best_state)
            report.best_checkpoint_path = str(
                save_checkpoint(best_model, ckpt_dir / f"{tag}_best.ckpt", hyper=cfg.hyper)
            )
    model.eval()
    return report


def _resolve_tasks(ds: CsiDataset, tasks) -> tuple[TaskSpec, ...]:
    if tasks is None:
        return ds.meta.tasks
    resolved = []
    for t in tasks:
        resolved.append(t if isinstance(t, TaskSpec) else ds.meta.task(t))
    return tuple(resolved)


def _resolve_hyper(cfg: TrainConfig, task_names: Sequence[str]) -> HyperParams:
    if cfg.hyper is None:
        return HyperParams.uniform(task_names)
    missing = [t for t in task_names if t not in cfg.hyper.omega]
    if missing:
        raise KeyError(f"hyperparameters missing task weights for {missing}")
    return cfg.hyper


def train_sts(task, train_set: CsiDataset, test_set: CsiDataset,
              cfg: TrainConfig) -> tuple[ModelVariant, TrainReport]:
    """Phase 1: train one single-task model by cross-entropy."""
    name = task.name if isinstance(task, TaskSpec) else task
    spec = train_set.meta.task(name)
    geometry = train_set.meta.shape
    model = build_model("STS", geometry, (spec,), cfg.seed)
    hyper = _resolve_hyper(cfg, (name,))
    w = hyper.omega[name]

    def step_loss(out, yb):
        ce = cross_entropy(softmax(out.logits[name]), yb[name]).mean()
        loss = w * ce
        return loss, {name: {"ce": float(ce.detach())}}

    report = _fit(model, train_set, test_set, cfg, step_loss, tag=f"sts_{name}")
    return model, report


def train_mts(kind: str, train_set: CsiDataset, test_set: CsiDataset,
              teachers: Mapping[str, ModelVariant] | None, cfg: TrainConfig,
              tasks=None) -> tuple[ModelVariant, TrainReport]:
    """Phase 2: train a multi-task student; teachers are required for the
    distillation variants and must be absent otherwise."""
    if kind not in ("NMTS", "UMTS", "KDMTS", "KDMTS_RA", "WIMUSE"):
        raise ValueError(f"unknown multi-task kind {kind!r}")
    specs = _resolve_tasks(train_set, tasks)
    names = [t.name for t in specs]
    geometry = train_set.meta.shape
    hyper = _resolve_hyper(cfg, names)

    model = build_model(kind, geometry, specs, cfg.seed)
    if kind in FEATURE_KD_KINDS:
        teachers = teachers or {}
        missing = [n for n in names if n not in teachers]
        if missing:
            raise ValueError(f"{kind} requires a trained teacher per task; missing {missing}")
        model.attach_teachers({n: teachers[n] for n in names})
    elif teachers:
        raise ValueError(f"{kind} does not take teachers")

    if kind == "NMTS":
        def step_loss(out, yb):
            ces = {n: cross_entropy(softmax(out.logits[n]), yb[n]).mean() for n in names}
            loss = multitask_ce(ces, hyper.omega)
            return loss, {n: {"ce": float(ces[n].detach())} for n in names}
    elif kind == "UMTS":
        def step_loss(out, yb):
            ces = {n: cross_entropy(softmax(out.logits[n]), yb[n]).mean() for n in names}
            loss = uncertainty_weighted(ces, model.log_vars)
            comps = {n: {"ce": float(ces[n].detach()),
                         "log_var": float(model.log_vars[n].detach())} for n in names}
            return loss, comps
    else:
        include_kd2 = kind == "WIMUSE"

        def step_loss(out, yb):
            loss = None
            comps = {}
            for n in names:
                ce = hyper.omega[n] * cross_entropy(softmax(out.logits[n]), yb[n]).mean()
                kd1 = hyper.lam * feature_kd_loss(
                    out.common_feature, out.teacher_features[n], model.lt[n]
                ).mean()
                task_loss = ce + kd1
                comps[n] = {"ce": float(ce.detach()), "kd1": float(kd1.detach())}
                if include_kd2:
                    kd2 = logits_kd_loss(out.logits[n], out.teacher_logits[n], hyper.tau,
                                         hyper.logits_kd_direction).mean()
                    task_loss = task_loss + kd2
                    comps[n]["kd2"] = float(kd2.detach())
                loss = task_loss if loss is None else loss + task_loss
            return loss, comps

    report = _fit(model, train_set, test_set, cfg, step_loss, tag=f"mts_{kind.lower()}")
    return model, report


def train_extension(model: ModelVariant, teacher: ModelVariant | None,
                    train_set: CsiDataset, test_set: CsiDataset,
                    cfg: TrainConfig) -> tuple[ModelVariant, TrainReport]:
    """Train only the parts added by extend_with_task against the new teacher."""
    name = model.extension_task
    if name is None:
        raise ValueError("model has no extension; call extend_with_task first")
    if teacher is not None:
        model.attach_teachers({name: teacher})
    if name not in model._teachers:
        raise ValueError(f"no teacher attached for extension task {name!r}")

    allowed = {id(p) for m in (model.adaptors[name], model.classifiers[name], model.lt[name])
               for p in m.parameters()}
    stray = [n for n, p in model.named_parameters() if p.requires_grad and id(p) not in allowed]
    if stray:
        raise ValueError(f"base parameters are unfrozen: {stray[:3]}")

    hyper = _resolve_hyper(cfg, (name,))

    def step_loss(out, yb):
        ce = hyper.omega[name] * cross_entropy(softmax(out.logits[name]), yb[name]).mean()
        kd1 = hyper.lam * feature_kd_loss(
            out.common_feature, out.teacher_features[name], model.lt[name]
        ).mean()
        kd2 = logits_kd_loss(out.logits[name], out.teacher_logits[name], hyper.tau,
                             hyper.logits_kd_direction).mean()
        loss = ce + kd1 + kd2
        return loss, {name: {"ce": float(ce.detach()), "kd1": float(kd1.detach()),
                             "kd2": float(kd2.detach())}}

    report = _fit(model, train_set, test_set, cfg, step_loss,
                  tag=f"ext_{name}", set_train_mode=model.set_extension_train_mode)
    return model, report
