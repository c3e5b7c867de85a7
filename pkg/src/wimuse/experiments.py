"""Ablation and training-set-ratio sweep drivers.

Both retrain the configured variants under identical splits and seeds and
return tabular results; nothing here is gated, the tables are for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import stats

from .data import CsiDataset, split_dataset
from .evaluation import evaluate
from .models import FEATURE_KD_KINDS, ModelVariant
from .training import TrainConfig, train_mts


@dataclass
class AblationConfig:
    """Which variants/seeds to retrain on which dataset."""

    dataset: CsiDataset
    variants: tuple[str, ...] = ("KDMTS", "KDMTS_RA", "WIMUSE")
    seeds: tuple[int, ...] = (0, 1, 2)
    tasks: tuple[str, ...] | None = None
    train_ratio: float = 0.8
    split_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise ValueError("at least one seed is required")


@dataclass
class SweepConfig:
    """Training-set-ratio sweep: re-split, retrain, evaluate per ratio."""

    dataset: CsiDataset
    ratios: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    variants: tuple[str, ...] = ("NMTS", "KDMTS", "WIMUSE")
    seeds: tuple[int, ...] = (0,)
    tasks: tuple[str, ...] | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise ValueError("at least one seed is required")
        if any(not (0.0 < r < 1.0) for r in self.ratios):
            raise ValueError(f"ratios must lie in (0, 1), got {self.ratios}")


@dataclass
class ExperimentResult:
    """Rows of {variant, seed, ratio?, accuracy-per-task} plus identities."""

    rows: list[dict] = field(default_factory=list)
    dataset_digest: str = ""
    task_names: tuple[str, ...] = ()

    def aggregate(self, key: str = "variant") -> list[dict]:
        """Mean and std of each task accuracy grouped by ``key`` (and ratio if present)."""
        groups: dict[tuple, list[dict]] = {}
        for row in self.rows:
            group_key = (row[key], row.get("ratio"))
            groups.setdefault(group_key, []).append(row)
        out = []
        for (value, ratio), rows in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1] or 0)):
            agg = {key: value}
            if ratio is not None:
                agg["ratio"] = ratio
            agg["n"] = len(rows)
            for task in self.task_names:
                accs = [r["accuracy"][task] for r in rows]
                agg[f"{task}_mean"] = float(np.mean(accs))
                agg[f"{task}_std"] = float(np.std(accs))
            out.append(agg)
        return out

    def spearman(self) -> dict[str, dict[str, float]]:
        """Rank correlation of accuracy against ratio per variant and task."""
        out: dict[str, dict[str, float]] = {}
        variants = sorted({r["variant"] for r in self.rows})
        for variant in variants:
            rows = [r for r in self.rows if r["variant"] == variant and "ratio" in r]
            if not rows:
                continue
            out[variant] = {}
            ratios = [r["ratio"] for r in rows]
            for task in self.task_names:
                accs = [r["accuracy"][task] for r in rows]
                if len(set(ratios)) < 2 or len(set(accs)) < 2:
                    rho = float("nan")
                else:
                    rho = float(stats.spearmanr(ratios, accs).statistic)
                out[variant][task] = rho
        return out


def _check_teachers(variants, teachers, task_names):
    kd_variants = [v for v in variants if v in FEATURE_KD_KINDS]
    if kd_variants:
        teachers = teachers or {}
        missing = [t for t in task_names if t not in teachers]
        if missing:
            raise ValueError(
                f"variants {kd_variants} need teacher checkpoints for tasks {missing}"
            )
    return teachers


def run_ablation(cfg: AblationConfig,
                 teachers: Mapping[str, ModelVariant] | None = None) -> ExperimentResult:
    """Train and evaluate every (variant, seed) pair on one fixed split."""
    task_names = cfg.tasks or cfg.dataset.meta.task_names
    teachers = _check_teachers(cfg.variants, teachers, task_names)
    train_set, test_set = split_dataset(cfg.dataset, cfg.train_ratio, cfg.split_seed)

    result = ExperimentResult(dataset_digest=cfg.dataset.content_digest(),
                              task_names=tuple(task_names))
    for seed in cfg.seeds:
        for variant in cfg.variants:
            run_cfg = cfg.train.replace(seed=seed)
            model, _ = train_mts(
                variant, train_set, test_set,
                teachers if variant in FEATURE_KD_KINDS else None,
                run_cfg, tasks=task_names,
            )
            report = evaluate(model, test_set)
            result.rows.append({
                "variant": variant,
                "seed": seed,
                "accuracy": dict(report.accuracy),
                "model_digest": report.model_digest,
            })
    return result


def run_ratio_sweep(cfg: SweepConfig,
                    teachers: Mapping[str, ModelVariant] | None = None) -> ExperimentResult:
    """Accuracy-vs-training-ratio curves; splits are disjoint at every ratio."""
    task_names = cfg.tasks or cfg.dataset.meta.task_names
    teachers = _check_teachers(cfg.variants, teachers, task_names)

    result = ExperimentResult(dataset_digest=cfg.dataset.content_digest(),
                              task_names=tuple(task_names))
    for ratio in cfg.ratios:
        for seed in cfg.seeds:
            train_set, test_set = split_dataset(cfg.dataset, ratio, seed)
            overlap = set(train_set.sample_ids) & set(test_set.sample_ids)
            if overlap:
                raise RuntimeError(f"split leaked {len(overlap)} samples at ratio {ratio}")
            for task in task_names:
                counts = np.bincount(train_set.labels_array(task),
                                     minlength=cfg.dataset.meta.task(task).num_classes)
                if counts.min() < 1:
                    raise ValueError(
                        f"ratio {ratio} leaves task {task!r} class {int(counts.argmin())} "
                        "without training samples"
                    )
            for variant in cfg.variants:
                run_cfg = cfg.train.replace(seed=seed)
                model, _ = train_mts(
                    variant, train_set, test_set,
                    teachers if variant in FEATURE_KD_KINDS else None,
                    run_cfg, tasks=task_names,
                )
                report = evaluate(model, test_set)
                result.rows.append({
                    "variant": variant,
                    "seed": seed,
                    "ratio": ratio,
                    "accuracy": dict(report.accuracy),
                    "model_digest": report.model_digest,
                })
    return result
