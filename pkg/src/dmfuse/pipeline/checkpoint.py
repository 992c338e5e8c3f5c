"""Versioned, byte-stable weight files.

Layout: ``MAGIC | u32 version | u32 header length | JSON header | tensor payload``.
The header carries the architecture digest so a file can never be loaded into
a differently shaped model, and the payload digest so corruption is caught.
Tensors are written raw (little-endian) in sorted name order, so identical
weights always give identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch
from torch import nn

from ..config import FusionConfig, fusion_digest, portable, reconstructor_digest, to_text

MAGIC = b"DMFUSECK"
VERSION = 1
KINDS = ("reconstructor", "fusion")

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


class CheckpointError(ValueError):
    """Unreadable, corrupted or mismatched checkpoint."""


@dataclass(frozen=True)
class CheckpointInfo:
    kind: str
    arch_digest: str
    recon_digest: str
    config_text: str
    payload_sha256: str


def expected_digest(kind: str, config: FusionConfig) -> str:
    if kind == "reconstructor":
        return reconstructor_digest(config)
    if kind == "fusion":
        return fusion_digest(config)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def save_checkpoint(path: Union[str, Path], model: nn.Module, kind: str, config: FusionConfig) -> str:
    """Write ``model``'s state and return the file's sha256."""
    arch = expected_digest(kind, config)
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "kind": kind,
        "arch_digest": arch,
        "recon_digest": reconstructor_digest(config),
        "config": to_text(portable(config)),
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    data = MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _read(path: Union[str, Path]):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    n = len(MAGIC)
    if len(data) < n + 8 or data[:n] != MAGIC:
        raise CheckpointError(f"{path} is not a dmfuse checkpoint")
    version, head_len = struct.unpack("<II", data[n:n + 8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[n + 8:n + 8 + head_len])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = data[n + 8 + head_len:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload digest mismatch (file corrupted)")
    return header, payload


def read_info(path: Union[str, Path]) -> CheckpointInfo:
    header, _ = _read(path)
    return CheckpointInfo(header["kind"], header["arch_digest"], header["recon_digest"],
                          header["config"], header["payload_sha256"])


def load_checkpoint(path: Union[str, Path], model: nn.Module, kind: str, config: FusionConfig) -> nn.Module:
    """Fill ``model`` from ``path`` after checking kind and architecture digest against ``config``."""
    header, payload = _read(path)
    if header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    want = expected_digest(kind, config)
    if header["arch_digest"] != want:
        raise CheckpointError(f"{path}: architecture digest {header['arch_digest']} does not match "
                              f"config digest {want}")
    target = model.state_dict()
    names = [e["name"] for e in header["tensors"]]
    if sorted(target) != names:
        raise CheckpointError(f"{path}: tensor names do not match the model")
    state = {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        ref = target[e["name"]]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{path}: shape mismatch for {e['name']}")
        state[e["name"]] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(state)
    return model
