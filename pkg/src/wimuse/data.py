"""CSI dataset model: sample/dataset types, canonical on-disk format, splits, importers.

Amplitude-only CSI recordings of shape links x subcarriers x time, each carrying
one class label per task. The canonical directory layout is a ``manifest.json``
plus one little-endian binary blob per sample (magic ``CSIA``).
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1
SAMPLE_MAGIC = b"CSIA"
SAMPLE_VERSION = 1

TASK_GESTURE = "GR"
TASK_LOCATION = "IL"
TASK_USER = "UI"

# Widar3.0 samples vary from 1300 to 2200 packets; this is the fixed length we
# resample them to (same trace length as CSIDA).
DEFAULT_WIDAR_LENGTH = 1800


class DatasetFormatError(ValueError):
    """Manifest or sample blob does not follow the canonical format."""


class GeometryMismatchError(ValueError):
    """Declared geometry disagrees with a payload or another component."""


@dataclass(frozen=True)
class TaskSpec:
    """One classification task: its name and class vocabulary."""

    name: str
    num_classes: int
    class_names: tuple[str, ...]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"task {self.name!r}: num_classes must be >= 2, got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise ValueError(
                f"task {self.name!r}: expected {self.num_classes} class names, got {len(self.class_names)}"
            )
        if len(set(self.class_names)) != self.num_classes:
            raise ValueError(f"task {self.name!r}: class names must be distinct")
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @staticmethod
    def with_generic_names(name: str, num_classes: int, prefix: str | None = None) -> "TaskSpec":
        prefix = prefix if prefix is not None else name.lower()
        return TaskSpec(name, num_classes, tuple(f"{prefix}_{i}" for i in range(num_classes)))


@dataclass(frozen=True)
class DatasetMeta:
    """Dataset geometry and task declarations shared by all samples."""

    tasks: tuple[TaskSpec, ...]
    L: int
    S: int
    P: int
    sampling_rate_hz: float | None = None
    duration_s: float | None = None
    source: str = "SYNTH"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        for dim, name in ((self.L, "L"), (self.S, "S"), (self.P, "P")):
            if dim < 1:
                raise ValueError(f"{name} must be >= 1, got {dim}")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate task names: {names}")
        if self.sampling_rate_hz is not None and self.duration_s is not None:
            expected = round(self.sampling_rate_hz * self.duration_s)
            if expected != self.P:
                raise ValueError(
                    f"P={self.P} inconsistent with sampling_rate*duration={expected}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.L, self.S, self.P)

    @property
    def task_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tasks)

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}; available: {list(self.task_names)}")

    def with_tasks(self, names: Sequence[str]) -> "DatasetMeta":
        return DatasetMeta(
            tasks=tuple(self.task(n) for n in names),
            L=self.L, S=self.S, P=self.P,
            sampling_rate_hz=self.sampling_rate_hz,
            duration_s=self.duration_s,
            source=self.source,
        )


@dataclass
class CsiSample:
    """One amplitude recording [L, S, P] with one class label per task."""

    sample_id: str
    amplitude: np.ndarray
    labels: dict[str, int] = field(default_factory=dict)

    def validate(self, meta: DatasetMeta) -> None:
        amp = self.amplitude
        if amp.ndim != 3 or amp.shape != meta.shape:
            raise GeometryMismatchError(
                f"sample {self.sample_id!r}: amplitude shape {amp.shape} != meta {meta.shape}"
            )
        if not np.isfinite(amp).all():
            idx = tuple(int(i) for i in np.argwhere(~np.isfinite(amp))[0])
            raise ValueError(f"sample {self.sample_id!r}: non-finite amplitude at index {idx}")
        if (amp < 0).any():
            idx = tuple(int(i) for i in np.argwhere(amp < 0)[0])
            raise ValueError(f"sample {self.sample_id!r}: negative amplitude at index {idx}")
        for task in meta.tasks:
            if task.name not in self.labels:
                raise ValueError(f"sample {self.sample_id!r}: missing label for task {task.name!r}")
            y = self.labels[task.name]
            if not (0 <= y < task.num_classes):
                raise ValueError(
                    f"sample {self.sample_id!r}: label {y} out of range for task "
                    f"{task.name!r} with {task.num_classes} classes"
                )


class CsiDataset:
    """Immutable collection of CSI samples sharing one geometry."""

    def __init__(self, meta: DatasetMeta, samples: Iterable[CsiSample], validate: bool = True):
        self.meta = meta
        self.samples = list(samples)
        if validate:
            seen = set()
            for s in self.samples:
                if s.sample_id in seen:
                    raise ValueError(f"duplicate sample_id {s.sample_id!r}")
                seen.add(s.sample_id)
                s.validate(meta)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> CsiSample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def labels_array(self, task: str) -> np.ndarray:
        self.meta.task(task)
        return np.array([s.labels[task] for s in self.samples], dtype=np.int64)

    def amplitude_stack(self) -> np.ndarray:
        """All amplitudes as one array [N, L, S, P] (float32)."""
        return np.stack([s.amplitude for s in self.samples]).astype(np.float32, copy=False)

    def subset(self, indices: Sequence[int]) -> "CsiDataset":
        return CsiDataset(self.meta, [self.samples[i] for i in indices], validate=False)

    def content_digest(self) -> str:
        """SHA-256 over geometry, labels, and amplitude bytes; stable across processes."""
        h = hashlib.sha256()
        h.update(repr(self.meta).encode())
        for s in self.samples:
            h.update(s.sample_id.encode())
            h.update(json.dumps(s.labels, sort_keys=True).encode())
            h.update(np.ascontiguousarray(s.amplitude, dtype=np.float32).tobytes())
        return h.hexdigest()


def amplitude_of(H: np.ndarray) -> np.ndarray:
    """Elementwise modulus of a complex CSI array; the phase is discarded."""
    H = np.asarray(H)
    finite = np.isfinite(H.real) & np.isfinite(H.imag) if np.iscomplexobj(H) else np.isfinite(H)
    if not finite.all():
        idx = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise ValueError(f"non-finite CSI entry at index {idx}")
    return np.abs(H)


def resample_time(sample: CsiSample, target_P: int) -> CsiSample:
    """Linearly interpolate the time axis onto target_P uniformly spaced points."""
    if target_P < 2:
        raise ValueError(f"target_P must be >= 2, got {target_P}")
    amp = sample.amplitude
    P = amp.shape[-1]
    x_new = np.linspace(0.0, P - 1, target_P)
    x_old = np.arange(P, dtype=np.float64)
    out = np.empty(amp.shape[:-1] + (target_P,), dtype=amp.dtype)
    for l in range(amp.shape[0]):
        for s in range(amp.shape[1]):
            out[l, s] = np.interp(x_new, x_old, amp[l, s].astype(np.float64))
    return CsiSample(sample.sample_id, out, dict(sample.labels))


def _strata(ds: CsiDataset) -> dict[tuple, list[int]]:
    """Partition sample indices by joint label tuple, falling back to the first
    task and then to a single stratum when any stratum has fewer than 2 samples."""
    task_names = ds.meta.task_names

    def group(key_tasks):
        groups: dict[tuple, list[int]] = {}
        for i, s in enumerate(ds.samples):
            key = tuple(s.labels[t] for t in key_tasks)
            groups.setdefault(key, []).append(i)
        return groups

    groups = group(task_names)
    if min(len(v) for v in groups.values()) < 2 and len(task_names) > 1:
        groups = group(task_names[:1])
    if min(len(v) for v in groups.values()) < 2:
        groups = {(): list(range(len(ds)))}
    return groups


def split_dataset(ds: CsiDataset, train_ratio: float, seed: int) -> tuple[CsiDataset, CsiDataset]:
    """Stratified train/test split; train gets round(train_ratio * N) samples."""
    if not (0.0 < train_ratio < 1.0):
        raise ValueError(f"train_ratio must be in (0, 1), got {train_ratio}")
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")

    n_train = round(train_ratio * len(ds))
    rng = np.random.default_rng(seed)
    groups = _strata(ds)

    # per-stratum quota via largest-remainder so quotas sum exactly to n_train
    keys = sorted(groups.keys())
    exact = [train_ratio * len(groups[k]) for k in keys]
    quota = [int(np.floor(e)) for e in exact]
    short = n_train - sum(quota)
    if short != 0:
        order = sorted(range(len(keys)), key=lambda i: (exact[i] - quota[i], keys[i]), reverse=short > 0)
        for i in order[: abs(short)]:
            quota[i] += 1 if short > 0 else -1

    train_idx: list[int] = []
    test_idx: list[int] = []
    for k, q in zip(keys, quota):
        members = list(groups[k])
        rng.shuffle(members)
        q = max(0, min(q, len(members)))
        train_idx.extend(members[:q])
        test_idx.extend(members[q:])
    train_idx.sort()
    test_idx.sort()
    return ds.subset(train_idx), ds.subset(test_idx)


# ---------------------------------------------------------------------------
# canonical on-disk format


def _sample_filename(sample_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", sample_id)
    return f"samples/{safe}.csia"


def _write_sample_blob(path: Path, amplitude: np.ndarray) -> None:
    L, S, P = amplitude.shape
    header = SAMPLE_MAGIC + struct.pack("<BIII", SAMPLE_VERSION, L, S, P)
    payload = np.ascontiguousarray(amplitude, dtype="<f4").tobytes()
    path.write_bytes(header + payload)


def _read_sample_blob(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 17 or raw[:4] != SAMPLE_MAGIC:
        raise DatasetFormatError(f"{path}: not a CSIA sample blob")
    version, L, S, P = struct.unpack("<BIII", raw[4:17])
    if version != SAMPLE_VERSION:
        raise DatasetFormatError(f"{path}: unknown sample format version {version}")
    expected = 17 + 4 * L * S * P
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: payload size {len(raw)} != expected {expected}")
    values = np.frombuffer(raw[17:], dtype="<f4").reshape(L, S, P)
    return values.astype(np.float32)


def write_dataset(ds: CsiDataset, root_path) -> Path:
    """Write the canonical directory form: manifest.json + one blob per sample."""
    root = Path(root_path)
    (root / "samples").mkdir(parents=True, exist_ok=True)

    entries = []
    for s in ds.samples:
        rel = _sample_filename(s.sample_id)
        _write_sample_blob(root / rel, s.amplitude)
        entries.append({"id": s.sample_id, "file": rel, "labels": {k: int(v) for k, v in s.labels.items()}})

    manifest = {
        "format_version": FORMAT_VERSION,
        "tasks": [
            {"name": t.name, "num_classes": t.num_classes, "class_names": list(t.class_names)}
            for t in ds.meta.tasks
        ],
        "L": ds.meta.L,
        "S": ds.meta.S,
        "P": ds.meta.P,
        "sampling_rate_hz": ds.meta.sampling_rate_hz,
        "duration_s": ds.meta.duration_s,
        "source": ds.meta.source,
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return root


def load_dataset(root_path) -> CsiDataset:
    """Load a dataset directory produced by write_dataset (or an importer)."""
    root = Path(root_path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetFormatError(f"{root}: missing manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{manifest_path}: malformed manifest: {e}") from e

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{manifest_path}: unknown format version {version!r}")
    for key in ("tasks", "L", "S", "P", "source", "samples"):
        if key not in manifest:
            raise DatasetFormatError(f"{manifest_path}: missing field {key!r}")

    tasks = tuple(
        TaskSpec(t["name"], int(t["num_classes"]), tuple(t["class_names"])) for t in manifest["tasks"]
    )
    meta = DatasetMeta(
        tasks=tasks,
        L=int(manifest["L"]),
        S=int(manifest["S"]),
        P=int(manifest["P"]),
        sampling_rate_hz=manifest.get("sampling_rate_hz"),
        duration_s=manifest.get("duration_s"),
        source=str(manifest["source"]),
    )

    samples = []
    for entry in manifest["samples"]:
        amp = _read_sample_blob(root / entry["file"])
        if amp.shape != meta.shape:
            raise GeometryMismatchError(
                f"sample {entry['id']!r}: payload shape {amp.shape} != manifest geometry {meta.shape}"
            )
        samples.append(CsiSample(entry["id"], amp, {k: int(v) for k, v in entry["labels"].items()}))
    return CsiDataset(meta, samples)


# ---------------------------------------------------------------------------
# importers for documented public-dataset layouts


ARIL_GESTURES = ("up", "down", "left", "right", "circle", "cross")


def _coerce_labels(raw: np.ndarray, what: str) -> np.ndarray:
    labels = np.asarray(raw).reshape(-1).astype(np.int64)
    if labels.size and labels.min() == 1:
        labels = labels - 1  # tolerate 1-based label files
    if labels.size and labels.min() < 0:
        raise ValueError(f"{what}: negative label after normalization")
    return labels


def import_aril(src) -> CsiDataset:
    """Import the ARIL .mat layout (amplitude 52x192, activity + location labels).

    ``src`` is either a directory holding ``train_data_split_amp.mat`` and
    ``test_data_split_amp.mat``, or a single ``.mat`` file. Expected keys per
    file: ``<prefix>data_amp`` [N, 52, 192], ``<prefix>activity_label`` [N],
    ``<prefix>location_label`` [N] with prefix ``train_``/``test_`` or empty.
    """
    from scipy.io import loadmat

    src = Path(src)
    if src.is_dir():
        parts = []
        for name in ("train_data_split_amp.mat", "test_data_split_amp.mat"):
            p = src / name
            if not p.is_file():
                raise FileNotFoundError(f"ARIL import: missing {p}")
            parts.append(p)
    else:
        parts = [src]

    amps, gestures, locations, tags = [], [], [], []
    for p in parts:
        mat = loadmat(str(p))
        prefix = ""
        for cand in ("train_", "test_", ""):
            if f"{cand}data_amp" in mat:
                prefix = cand
                break
        else:
            raise DatasetFormatError(f"{p}: no *_data_amp key found")
        data = np.asarray(mat[f"{prefix}data_amp"], dtype=np.float32)
        if data.ndim != 3 or data.shape[1:] != (52, 192):
            raise GeometryMismatchError(f"{p}: expected [N, 52, 192] amplitudes, got {data.shape}")
        amps.append(data)
        gestures.append(_coerce_labels(mat[f"{prefix}activity_label"], f"{p}: activity_label"))
        locations.append(_coerce_labels(mat[f"{prefix}location_label"], f"{p}: location_label"))
        tags.extend([prefix.rstrip("_") or "all"] * data.shape[0])

    amp = np.concatenate(amps)
    gr = np.concatenate(gestures)
    il = np.concatenate(locations)
    # documented vocabulary sizes: 6 gestures, 16 locations (grown if a file
    # carries more)
    n_gr = max(int(gr.max()) + 1, 6)
    n_il = max(int(il.max()) + 1, 16)
    gr_names = ARIL_GESTURES if n_gr == len(ARIL_GESTURES) else tuple(f"gesture_{i}" for i in range(n_gr))
    meta = DatasetMeta(
        tasks=(
            TaskSpec(TASK_GESTURE, n_gr, gr_names),
            TaskSpec.with_generic_names(TASK_LOCATION, n_il, "location"),
        ),
        L=1, S=52, P=192, source="ARIL",
    )
    samples = [
        CsiSample(
            f"{tags[i]}_{i:05d}",
            np.clip(amp[i], 0.0, None)[np.newaxis, :, :],
            {TASK_GESTURE: int(gr[i]), TASK_LOCATION: int(il[i])},
        )
        for i in range(amp.shape[0])
    ]
    return CsiDataset(meta, samples)


def import_npz(src, source: str = "IMPORT") -> CsiDataset:
    """Import the generic .npz layout.

    Required keys: ``amplitude`` [N, L, S, P] plus one ``label_<task>`` [N] per
    task. Optional: ``class_names_<task>``, scalar ``sampling_rate_hz`` /
    ``duration_s``. Pre-export Widar3.0/CSIDA traces to this layout (receiver
    #1 only for Widar3.0; resample variable-length traces on import).
    """
    with np.load(Path(src), allow_pickle=False) as z:
        if "amplitude" not in z:
            raise DatasetFormatError(f"{src}: missing 'amplitude' array")
        amp = np.asarray(z["amplitude"], dtype=np.float32)
        if amp.ndim != 4:
            raise GeometryMismatchError(f"{src}: amplitude must be [N, L, S, P], got {amp.shape}")
        label_keys = sorted(k for k in z.keys() if k.startswith("label_"))
        if not label_keys:
            raise DatasetFormatError(f"{src}: no label_<task> arrays")
        tasks = []
        labels = {}
        for key in label_keys:
            task = key[len("label_"):]
            y = _coerce_labels(z[key], f"{src}: {key}")
            if y.shape[0] != amp.shape[0]:
                raise ValueError(f"{src}: {key} has {y.shape[0]} entries for {amp.shape[0]} samples")
            n_classes = int(y.max()) + 1
            names_key = f"class_names_{task}"
            if names_key in z:
                names = tuple(str(c) for c in z[names_key])
                tasks.append(TaskSpec(task, len(names), names))
            else:
                tasks.append(TaskSpec.with_generic_names(task, max(n_classes, 2)))
            labels[task] = y
        rate = float(z["sampling_rate_hz"]) if "sampling_rate_hz" in z else None
        duration = float(z["duration_s"]) if "duration_s" in z else None

    N, L, S, P = amp.shape
    meta = DatasetMeta(tuple(tasks), L=L, S=S, P=P,
                       sampling_rate_hz=rate, duration_s=duration, source=source)
    samples = [
        CsiSample(f"{source.lower()}_{i:06d}", np.clip(amp[i], 0.0, None),
                  {t: int(labels[t][i]) for t in labels})
        for i in range(N)
    ]
    return CsiDataset(meta, samples)


def resample_dataset(ds: CsiDataset, target_P: int) -> CsiDataset:
    """Resample every sample's time axis to a fixed length."""
    meta = DatasetMeta(
        tasks=ds.meta.tasks, L=ds.meta.L, S=ds.meta.S, P=target_P,
        sampling_rate_hz=None, duration_s=None, source=ds.meta.source,
    )
    return CsiDataset(meta, [resample_time(s, target_P) for s in ds.samples], validate=False)
