"""Versioned model checkpoint archive.

A checkpoint is a zip file holding ``manifest.json`` (variant kind, geometry,
task specs, depth profile, build seed, optional hyperparameters, parameter
digest) plus one ``.npy`` per named parameter/buffer. Round-trips are bit
exact and verified against the stored digest on load. Teachers are separate
models with their own checkpoints and are not embedded.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .data import TaskSpec
from .models import ModelVariant

CHECKPOINT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed timestamp so identical models give identical bytes


class CheckpointError(ValueError):
    """Archive is malformed, corrupted, or incompatible."""


def save_checkpoint(model: ModelVariant, path, hyper=None, extra: dict | None = None) -> Path:
    """Write the model's full state (parameters and buffers) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    state = model.state_dict()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "geometry": list(model.geometry),
        "tasks": [
            {"name": t.name, "num_classes": t.num_classes, "class_names": list(t.class_names)}
            for t in model.tasks
        ],
        "depth_profile": list(model.deep.strides),
        "seed": model.build_seed,
        "extension_task": model.extension_task,
        "hyper": asdict(hyper) if hyper is not None and not isinstance(hyper, dict) else hyper,
        "arrays": sorted(state.keys()),
        "digest": model.parameter_digest(),
        "extra": extra or {},
    }

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _ZIP_EPOCH),
                    json.dumps(manifest, indent=2))
        for name in manifest["arrays"]:
            buf = io.BytesIO()
            np.save(buf, state[name].detach().cpu().numpy())
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", _ZIP_EPOCH), buf.getvalue())
    return path


def load_checkpoint(path, expected_geometry: tuple[int, int, int] | None = None) -> ModelVariant:
    """Reconstruct a model from an archive; verifies the parameter digest."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {
                name: np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")))
                for name in manifest["arrays"]
            }
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint: {e}") from e

    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {manifest.get('format_version')!r}"
        )

    geometry = tuple(manifest["geometry"])
    if expected_geometry is not None and geometry != tuple(expected_geometry):
        raise CheckpointError(
            f"{path}: checkpoint geometry {geometry} != expected {tuple(expected_geometry)}"
        )

    tasks = tuple(
        TaskSpec(t["name"], int(t["num_classes"]), tuple(t["class_names"]))
        for t in manifest["tasks"]
    )
    model = ModelVariant(manifest["kind"], geometry, tasks)
    state = {name: torch.from_numpy(np.array(arr)) for name, arr in arrays.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: state does not fit the declared architecture: {e}") from e

    model.build_seed = manifest.get("seed")
    model.extension_task = manifest.get("extension_task")
    if model.extension_task is not None:
        for p in model.parameters():
            p.requires_grad_(False)
        for container in (model.adaptors, model.classifiers, model.lt):
            for p in container[model.extension_task].parameters():
                p.requires_grad_(True)

    digest = model.parameter_digest()
    if digest != manifest["digest"]:
        raise CheckpointError(f"{path}: parameter digest mismatch (corrupt archive?)")
    return model


def read_manifest(path) -> dict:
    with zipfile.ZipFile(Path(path)) as zf:
        return json.loads(zf.read("manifest.json"))
