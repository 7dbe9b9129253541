"""Checkpoint directories: ``manifest.json`` + ``weights.bin`` (little-endian float32)."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .encoders import DualEncoder, ModelConfig, build_model

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
VOCAB = "vocab.json"


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    pass


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_mismatches(expected: dict, found: dict) -> list[str]:
    a, b = _flatten(expected), _flatten(found)
    return sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))


def save_checkpoint(model: DualEncoder, path: str | Path, extra: Optional[dict] = None,
                    rng_state: Optional[dict] = None) -> dict:
    """Write ``model`` to directory ``path`` and return the manifest."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors, offset = [], 0
    with open(out / WEIGHTS, "wb") as fh:
        for name, t in model.state_dict().items():
            arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
            data = np.ascontiguousarray(arr).tobytes()
            fh.write(data)
            tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset,
                            "nbytes": len(data)})
            offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "configs": model.cfg.to_dict(),
        "tensors": tensors,
        "total_bytes": offset,
        "sha256": file_sha256(out / WEIGHTS),
    }
    if extra:
        manifest["extra"] = extra
    if rng_state is not None:
        manifest["rng_state"] = rng_state
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(path: str | Path) -> dict:
    p = Path(path) / MANIFEST
    if not p.exists():
        raise CheckpointError(f"no {MANIFEST} in {path}")
    manifest = json.loads(p.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {manifest.get('format_version')} (expected {FORMAT_VERSION})")
    return manifest


def load_checkpoint(path: str | Path, expected: Optional[ModelConfig] = None) -> tuple[dict, dict]:
    """Return ``(state_dict, manifest)``; tensors are reproduced bit-exactly.

    Raises on version mismatch, config mismatch against ``expected`` (listing
    the differing fields), truncated or corrupted blobs.
    """
    root = Path(path)
    manifest = read_manifest(root)
    if expected is not None:
        bad = config_mismatches(expected.to_dict(), manifest["configs"])
        if bad:
            raise CheckpointError("checkpoint config mismatch in fields: " + ", ".join(bad))
    blob = (root / WEIGHTS).read_bytes()
    total = sum(t["nbytes"] for t in manifest["tensors"])
    if len(blob) != total or manifest.get("total_bytes", total) != total:
        raise IntegrityError(f"{WEIGHTS} holds {len(blob)} bytes, manifest expects {total}")
    if "sha256" in manifest and hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise IntegrityError(f"{WEIGHTS} content hash does not match manifest")
    state = {}
    for t in manifest["tensors"]:
        if t["dtype"] != "float32":
            raise CheckpointError(f"tensor {t['name']} has unsupported dtype {t['dtype']}")
        count = int(np.prod(t["shape"], dtype=np.int64))
        if count * 4 != t["nbytes"]:
            raise IntegrityError(f"tensor {t['name']} byte size does not match its shape")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
    return state, manifest


def load_model(path: str | Path) -> DualEncoder:
    """Rebuild a model from a checkpoint; unknown tensors are ignored with a warning."""
    state, manifest = load_checkpoint(path)
    model = build_model(ModelConfig.from_dict(manifest["configs"]))
    expected = model.state_dict()
    unknown = sorted(set(state) - set(expected))
    if unknown:
        warnings.warn(f"ignoring unknown checkpoint tensors: {', '.join(unknown)}", stacklevel=2)
    missing = sorted(set(expected) - set(state))
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing)}")
    for name, ref in expected.items():
        if tuple(state[name].shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {list(state[name].shape)}, "
                                  f"model {list(ref.shape)}")
    model.load_state_dict({k: state[k] for k in expected})
    return model


def resolve_checkpoint_dir(path: str | Path) -> Path:
    """Accept either a checkpoint directory or a run directory containing ``checkpoint/``."""
    p = Path(path)
    if (p / MANIFEST).exists():
        return p
    if (p / "checkpoint" / MANIFEST).exists():
        return p / "checkpoint"
    raise CheckpointError(f"no checkpoint found at {p}")
