"""Versioned binary checkpoints.

Layout: 8-byte magic, u32 schema version, u32 header length, JSON header
(config echo, blob manifest, step counter, rng bookkeeping), then the blobs
as little-endian float32 in manifest order. Serialization is deterministic,
so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from karma.errors import KarmaError
from karma.model import KarmaModel, ModelConfig

MAGIC = b"KARMACKP"
SCHEMA_VERSION = 1


class CheckpointError(KarmaError):
    """Bad magic/version, truncated file, or shape mismatch against config."""


@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    optimizer_step: int
    step: int
    rng_state: dict
    train_config: dict = field(default_factory=dict)

    def param_hash(self) -> str:
        """SHA-256 over parameter and optimizer blobs (header excluded)."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        for name in sorted(self.optimizer):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.optimizer[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def build_model(self) -> KarmaModel:
        from karma.diffcore import Tensor, get_default_dtype
        cfg = ModelConfig(**self.model_config)
        expected = KarmaModel.param_shapes(cfg)
        tensors = {}
        dtype = get_default_dtype()
        for name, shape in expected.items():
            if name not in self.params:
                raise CheckpointError(f"missing parameter blob '{name}'")
            arr = self.params[name]
            if tuple(arr.shape) != tuple(shape):
                raise CheckpointError(
                    f"parameter '{name}' shape {arr.shape} != config shape {shape}")
            tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
        return KarmaModel(cfg, params=tensors)


def save_checkpoint(path, model: KarmaModel, *, optimizer=None, step: int = 0,
                    rng_state: dict | None = None, train_config: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = {n: p.data for n, p in model.params.items()}
    opt_blobs = optimizer.state_arrays() if optimizer is not None else {}
    opt_step = optimizer.state.step_count if optimizer is not None else 0

    manifest = []
    blob_bytes = []
    for group, blobs in (("p", params), ("o", opt_blobs)):
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name], dtype="<f4")
            manifest.append({"group": group, "name": name, "shape": list(arr.shape)})
            blob_bytes.append(arr.tobytes())
    header = {
        "model_config": model.config_echo(),
        "train_config": train_config or {},
        "step": int(step),
        "optimizer_step": int(opt_step),
        "rng_state": rng_state or {},
        "blobs": manifest,
    }
    header_json = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", SCHEMA_VERSION, len(header_json)))
        f.write(header_json)
        for b in blob_bytes:
            f.write(b)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {version} != {SCHEMA_VERSION}")
    off = len(MAGIC) + 8
    try:
        header = json.loads(raw[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted header: {e}") from e
    off += hlen
    params: dict[str, np.ndarray] = {}
    optimizer: dict[str, np.ndarray] = {}
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated blob '{entry['name']}'")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += nbytes
        (params if entry["group"] == "p" else optimizer)[entry["name"]] = arr
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after blobs")
    return Checkpoint(model_config=header["model_config"], params=params,
                      optimizer=optimizer, optimizer_step=header["optimizer_step"],
                      step=header["step"], rng_state=header["rng_state"],
                      train_config=header["train_config"])
