"""On-disk formats.

Binary arrays (little-endian regardless of host):

* feature file ``FSEQ``: magic, u16 version, u32 T, u32 D, T*D float32 row-major
* probability stack ``PSTK``: magic, u16 version, u32 K, u32 T, u32 C, K*T*C float32

Annotations, label sequences and reports are JSON. Checkpoints are ``.npz``
archives with one array per parameter plus a JSON manifest.
"""
from __future__ import annotations

import json
import struct
import subprocess
import zipfile
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .core import AnnotationSet, FeatureSequence, LabelSequence, ProbabilityStack
from .models import from_manifest, manifest

FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    code = "format_error"


class MalformedHeaderError(FormatError):
    code = "malformed_header"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


class TruncatedPayloadError(FormatError):
    code = "truncated_payload"


class NonFiniteFeatureError(FormatError):
    code = "nan_in_features"


class AnnotationValidationError(FormatError):
    code = "invalid_annotation"

    def __init__(self, path, problems):
        self.problems = list(problems)
        super().__init__(f"{path}: " + "; ".join(self.problems))


def _read_binary(path, magic: bytes, ndims: int) -> np.ndarray:
    data = Path(path).read_bytes()
    head = struct.Struct("<4sH" + "I" * ndims)
    if len(data) < head.size or data[:4] != magic:
        raise MalformedHeaderError(f"{path}: expected {magic.decode()} header")
    _, version, *shape = head.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    expected = int(np.prod(shape)) * _F32.itemsize
    payload = data[head.size :]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: truncated payload ({len(payload)} of {expected} bytes)"
        )
    if len(payload) > expected:
        raise MalformedHeaderError(f"{path}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=_F32).reshape(shape).astype(np.float32)


def _write_binary(path, magic: bytes, arr: np.ndarray) -> None:
    head = struct.pack("<4sH" + "I" * arr.ndim, magic, FORMAT_VERSION, *arr.shape)
    Path(path).write_bytes(head + np.ascontiguousarray(arr, dtype=_F32).tobytes())


def write_features(path, seq: FeatureSequence) -> None:
    _write_binary(path, b"FSEQ", seq.frames)


def read_features(path, sequence_id: Optional[str] = None) -> FeatureSequence:
    """Read an FSEQ file, or a CSV with one frame per row.

    The binary format carries no id, so ``sequence_id`` defaults to the
    file stem.
    """
    path = Path(path)
    sid = sequence_id or path.name.split(".")[0]
    if path.suffix.lower() == ".csv":
        try:
            frames = np.loadtxt(path, delimiter=",", dtype=np.float32, ndmin=2)
        except ValueError as exc:
            raise MalformedHeaderError(f"{path}: unreadable CSV ({exc})") from None
    else:
        frames = _read_binary(path, b"FSEQ", 2)
    if frames.shape[0] < 1 or frames.shape[1] < 1:
        raise MalformedHeaderError(f"{path}: empty feature matrix")
    if not np.all(np.isfinite(frames)):
        raise NonFiniteFeatureError(f"{path}: NaN or infinite feature values")
    return FeatureSequence(sid, frames)


def write_stack(path, stack: ProbabilityStack) -> None:
    _write_binary(path, b"PSTK", stack.probs)


def read_stack(path) -> ProbabilityStack:
    return ProbabilityStack(_read_binary(path, b"PSTK", 3))


def _read_json(path, kind: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise MalformedHeaderError(f"{path}: expected a JSON object")
    fmt = doc.get("format", kind)
    if fmt != kind:
        raise MalformedHeaderError(f"{path}: format {fmt!r}, expected {kind!r}")
    version = doc.get("version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    return doc


def _write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def annotation_to_dict(ann: AnnotationSet) -> dict:
    doc = {
        "format": "annotation",
        "version": FORMAT_VERSION,
        "sequence_id": ann.sequence_id,
        "num_frames": ann.num_frames,
        "num_classes": ann.num_classes,
        "timestamps": [{"frame": t, "class": c} for t, c in ann.timestamps],
    }
    if ann.full_labels is not None:
        doc["full_labels"] = ann.full_labels.labels.tolist()
    return doc


def write_annotation(path, ann: AnnotationSet) -> None:
    _write_json(path, annotation_to_dict(ann))


def read_annotation(path) -> AnnotationSet:
    doc = _read_json(path, "annotation")
    try:
        full = doc.get("full_labels")
        ann = AnnotationSet(
            sequence_id=str(doc["sequence_id"]),
            num_frames=int(doc["num_frames"]),
            num_classes=int(doc["num_classes"]),
            timestamps=tuple((int(s["frame"]), int(s["class"])) for s in doc["timestamps"]),
            full_labels=None if full is None else LabelSequence(full, str(doc["sequence_id"])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"{path}: missing or bad field ({exc})") from None
    problems = ann.violations()
    if problems:
        raise AnnotationValidationError(path, problems)
    return ann


def write_labels(path, labels: LabelSequence) -> None:
    _write_json(
        path,
        {
            "format": "labels",
            "version": FORMAT_VERSION,
            "sequence_id": labels.sequence_id,
            "labels": labels.labels.tolist(),
        },
    )


def read_labels(path) -> LabelSequence:
    doc = _read_json(path, "labels")
    try:
        labels = np.asarray(doc["labels"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"{path}: missing or bad field ({exc})") from None
    if labels.ndim != 1 or (labels.size and labels.min() < 0):
        raise MalformedHeaderError(f"{path}: labels must be a flat list of ints >= 0")
    return LabelSequence(labels, str(doc.get("sequence_id", "")))


def revision() -> str:
    """Source revision of the installed package, or ``"unknown"``."""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_report(path, results: Mapping, config: Mapping, seed: Optional[int]) -> dict:
    doc = {
        "format": "report",
        "version": FORMAT_VERSION,
        "results": results,
        "config": dict(config),
        "provenance": {"seed": seed, "revision": revision()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, default=_jsonable) + "\n", encoding="utf-8")
    return doc


def read_report(path) -> dict:
    return _read_json(path, "report")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_checkpoint(path, models: Mapping[str, torch.nn.Module]) -> None:
    """Save named models into one ``.npz`` archive.

    Arrays are keyed ``<name>/<parameter>``; ``__manifest__`` holds the JSON
    description of every model (kind, sizes, causal flag, dropout rate).
    """
    arrays = {}
    info = {"version": FORMAT_VERSION, "models": {}}
    for name, model in models.items():
        info["models"][name] = manifest(model)
        for key, value in model.state_dict().items():
            arrays[f"{name}/{key}"] = value.detach().cpu().numpy()
    arrays["__manifest__"] = np.frombuffer(json.dumps(info).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path) -> dict[str, torch.nn.Module]:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise TruncatedPayloadError(f"{path}: unreadable checkpoint ({exc})") from None
    try:
        return _load_models(path, archive)
    except (zipfile.BadZipFile, EOFError, OSError) as exc:
        raise TruncatedPayloadError(f"{path}: unreadable checkpoint ({exc})") from None
    finally:
        archive.close()


def _load_models(path, archive) -> dict[str, torch.nn.Module]:
    if "__manifest__" not in archive.files:
        raise MalformedHeaderError(f"{path}: checkpoint has no manifest")
    info = json.loads(archive["__manifest__"].tobytes().decode())
    if info.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {info.get('version')}")
    models = {}
    for name, spec in info["models"].items():
        model = from_manifest(spec)
        prefix = f"{name}/"
        state = {
            k[len(prefix) :]: torch.from_numpy(archive[k].copy())
            for k in archive.files
            if k.startswith(prefix)
        }
        model.load_state_dict(state)
        model.eval()
        models[name] = model
    return models
