"""Checkpoint serialization.

Layout: 4 magic bytes "FMW1", an 8-byte little-endian manifest length, a
JSON manifest (format version, model config, named tensor table with
shapes and payload offsets, training-state summary, payload checksum),
then the payload: little-endian float64 tensor data in manifest order.

The manifest is serialized with sorted keys and fixed separators and
tensors are ordered by name, so save -> load -> save is byte-identical.
Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict
from typing import Any

import numpy as np

from .backbone import ModelConfig
from .tensor import Tensor

MAGIC = b"FMW1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Corrupt, truncated, or mismatched checkpoint file."""


def params_checksum(params: dict[str, Tensor]) -> str:
    """Order-independent content hash of a named parameter dict."""
    h = hashlib.sha256()
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        h.update(name.encode())
        h.update(str(data.shape).encode())
        h.update(data.tobytes())
    return h.hexdigest()


def _manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path: str, params: dict[str, Tensor],
                    model_config: ModelConfig | dict | None = None,
                    training_state: dict[str, Any] | None = None) -> None:
    names = sorted(params)
    payload_parts = []
    table = []
    offset = 0
    for name in names:
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = data.tobytes()
        table.append({"name": name, "shape": list(data.shape),
                      "offset": offset, "nbytes": len(raw)})
        payload_parts.append(raw)
        offset += len(raw)
    payload = b"".join(payload_parts)
    if isinstance(model_config, ModelConfig):
        model_config = asdict(model_config)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model_config,
        "tensors": table,
        "training_state": training_state or {},
        "checksum": "sha256:" + hashlib.sha256(payload).hexdigest(),
    }
    blob = _manifest_bytes(manifest)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(len(blob).to_bytes(8, "little"))
            f.write(blob)
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str, requires_grad: bool = False
                    ) -> tuple[dict[str, Tensor], dict]:
    """Read a checkpoint; refuses to load when the checksum fails."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    header_len = int.from_bytes(blob[4:12], "little")
    try:
        manifest = json.loads(blob[12:12 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest.get('format_version')}")
    payload = blob[12 + header_len:]
    expect = manifest.get("checksum", "")
    got = "sha256:" + hashlib.sha256(payload).hexdigest()
    if expect != got:
        raise CheckpointError(f"{path}: checksum mismatch (refusing to load)")
    params: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype="<f8").reshape(entry["shape"])
        expected = int(np.prod(entry["shape"])) * 8
        if n != expected:
            raise CheckpointError(
                f"{path}: tensor {entry['name']} payload size {n} != shape size {expected}")
        params[entry["name"]] = Tensor(arr.copy(), requires_grad=requires_grad)
    return params, manifest


def model_config_from_manifest(manifest: dict) -> ModelConfig:
    cfg = manifest.get("model_config")
    if not cfg:
        raise CheckpointError("checkpoint carries no model config")
    return ModelConfig(**cfg)


def split_by_prefix(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Sub-dict of params under ``prefix.``, with the prefix stripped."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}
