"""Model evaluation (per-task accuracy and confusion matrices) and complexity
profiling (analytic parameter/multiply-add counts plus measured memory and
latency for one labeling pass).

Measured memory and latency depend on the host and are reported with an
environment stamp, never gated.
"""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import psutil
import torch

from .blocks import count_multiadds, count_parameters
from .data import CsiDataset
from .models import ModelVariant


@dataclass
class EvalReport:
    """Accuracy per task with the confusion matrices behind it."""

    accuracy: dict[str, float]
    confusion: dict[str, np.ndarray]
    num_samples: int
    model_kind: str
    model_digest: str
    dataset_digest: str

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values())))


@dataclass
class ComplexityReport:
    """Inference cost of one labeling pass at a stated input shape and batch."""

    parameters: int
    multiadds: int
    input_shape: tuple[int, ...]
    batch: int
    peak_memory_bytes: int
    latency_ms_median: float
    latency_ms_runs: list[float] = field(default_factory=list)
    environment: dict = field(default_factory=dict)


def evaluate(model: ModelVariant, test_set: CsiDataset, batch_size: int = 256) -> EvalReport:
    """Evaluation-mode accuracy and confusion matrix for every model task."""
    for t in model.tasks:
        ds_task = test_set.meta.task(t.name)  # raises KeyError on mismatch
        if ds_task.num_classes != t.num_classes:
            raise ValueError(
                f"task {t.name!r}: model has {t.num_classes} classes, "
                f"dataset has {ds_task.num_classes}"
            )
    if test_set.meta.shape != model.geometry:
        raise ValueError(
            f"dataset geometry {test_set.meta.shape} != model geometry {model.geometry}"
        )

    amp = test_set.amplitude_stack()
    X = torch.from_numpy(amp.reshape(amp.shape[0], -1, amp.shape[-1]))
    labels = {t.name: test_set.labels_array(t.name) for t in model.tasks}
    confusion = {t.name: np.zeros((t.num_classes, t.num_classes), dtype=np.int64)
                 for t in model.tasks}

    model.eval()
    with torch.no_grad():
        for i in range(0, X.shape[0], batch_size):
            out = model(X[i:i + batch_size], include_teachers=False)
            for name, cm in confusion.items():
                pred = np.argmax(out.logits[name].numpy(), axis=-1)
                true = labels[name][i:i + batch_size]
                np.add.at(cm, (true, pred), 1)

    accuracy = {name: float(np.trace(cm)) / len(test_set) for name, cm in confusion.items()}
    return EvalReport(
        accuracy=accuracy,
        confusion=confusion,
        num_samples=len(test_set),
        model_kind=model.kind,
        model_digest=model.parameter_digest(),
        dataset_digest=test_set.content_digest(),
    )


def _environment_stamp() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "cpu_count": psutil.cpu_count(logical=True),
        "torch_threads": torch.get_num_threads(),
    }


def profile(model: ModelVariant, input_shape, batch: int = 16, runs: int = 20) -> ComplexityReport:
    """Analytic parameter/multiply-add counts plus measured memory and latency.

    Latency is the median over ``runs`` (>= 20) forward passes; memory is the
    resident-set growth while holding the batch and its outputs.
    """
    runs = max(runs, 20)
    shape = tuple(int(d) for d in input_shape)
    params = count_parameters(model)
    multiadds = count_multiadds(model, shape, batch)

    L, S, P = model.geometry
    x = torch.zeros((batch, L * S, P), dtype=torch.float32)
    model.eval()
    proc = psutil.Process()

    with torch.no_grad():
        model(x, include_teachers=False)  # warm-up
        rss_before = proc.memory_info().rss
        out = model(x, include_teachers=False)
        rss_after = proc.memory_info().rss
        del out
        times = []
        for _ in range(runs):
            t0 = time.perf_counter()
            model(x, include_teachers=False)
            times.append((time.perf_counter() - t0) * 1e3)

    return ComplexityReport(
        parameters=params,
        multiadds=multiadds,
        input_shape=shape,
        batch=batch,
        peak_memory_bytes=max(rss_after - rss_before, 0),
        latency_ms_median=float(statistics.median(times)),
        latency_ms_runs=times,
        environment=_environment_stamp(),
    )
