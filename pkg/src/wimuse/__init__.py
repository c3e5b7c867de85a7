"""Multi-task WiFi-CSI sensing: distilled multi-task models with task-specific
residual adaptors, their single/multi-task baselines, a physics-based synthetic
CSI generator, and the training/evaluation/profiling harness around them."""

from .data import (
    CsiDataset,
    CsiSample,
    DatasetMeta,
    TaskSpec,
    amplitude_of,
    import_aril,
    import_npz,
    load_dataset,
    resample_time,
    split_dataset,
    write_dataset,
)
from .synth import PathParams, SynthConfig, synth_cir, synth_dataset
from .blocks import count_multiadds, count_parameters
from .models import (
    ForwardOutput,
    ModelVariant,
    VARIANTS,
    build_model,
    extend_with_task,
    mts_forward,
    predict,
    sts_forward,
    wimuse_forward,
)
from .losses import (
    HyperParams,
    cross_entropy,
    feature_kd_loss,
    logits_kd_loss,
    multitask_ce,
    softmax,
    uncertainty_weighted,
    wimuse_total_loss,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainReport, lr_at, train_extension, train_mts, train_sts
from .evaluation import ComplexityReport, EvalReport, evaluate, profile
from .experiments import AblationConfig, SweepConfig, run_ablation, run_ratio_sweep
from .reporting import accuracy_row, emit_report

__version__ = "0.1.0"

__all__ = [
    "AblationConfig", "ComplexityReport", "CsiDataset", "CsiSample", "DatasetMeta",
    "EvalReport", "ForwardOutput", "HyperParams", "ModelVariant", "PathParams",
    "SweepConfig", "SynthConfig", "TaskSpec", "TrainConfig", "TrainReport", "VARIANTS",
    "accuracy_row", "amplitude_of", "build_model", "count_multiadds", "count_parameters",
    "cross_entropy", "emit_report", "evaluate", "extend_with_task", "feature_kd_loss",
    "import_aril", "import_npz", "load_checkpoint", "load_dataset", "logits_kd_loss",
    "lr_at", "mts_forward", "multitask_ce", "predict", "profile", "resample_time",
    "run_ablation", "run_ratio_sweep", "save_checkpoint", "softmax", "split_dataset",
    "sts_forward", "synth_cir", "synth_dataset", "train_extension", "train_mts",
    "train_sts", "uncertainty_weighted", "wimuse_forward", "wimuse_total_loss",
    "write_dataset",
]
