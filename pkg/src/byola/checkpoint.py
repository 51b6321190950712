"""Binary tensor container for checkpoints and feature matrices.

File layout (all multi-byte integers little-endian):

    bytes 0-3    magic "BYLA"
    bytes 4-7    uint32 format version (currently 1)
    bytes 8-15   uint64 header length N
    bytes 16-..  UTF-8 JSON header of N bytes
    remainder    concatenated raw little-endian float32 tensor data,
                 in header manifest order

The header carries the tensor manifest (name, shape, byte offset into the
data section), normalization statistics, the originating run config and
its fingerprint, a method tag ("byol" or "cola"), and free-form extras.
Every load validates tensor bounds; strict loads refuse fingerprint
mismatches.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import config_fingerprint
from .dsp import NormStats

MAGIC = b"BYLA"
VERSION = 1
_HEADER_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(RuntimeError):
    """Raised for malformed, truncated, or mismatched container files."""


@dataclass
class Container:
    tensors: dict[str, np.ndarray]
    norm_stats: NormStats | None
    method: str
    config: dict | None
    fingerprint: str
    extra: dict = field(default_factory=dict)


def save_container(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    *,
    norm_stats: NormStats | None,
    method: str,
    config: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Write named float32 tensors plus metadata to a container file."""
    manifest = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "tensors": manifest,
        "norm_stats": (
            {"mu": norm_stats.mu, "sigma": norm_stats.sigma} if norm_stats else None
        ),
        "method": method,
        "config": config,
        "fingerprint": config_fingerprint(config) if config is not None else "",
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_PREFIX.pack(MAGIC, VERSION, len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_container(
    path: str | Path,
    strict: bool = True,
    expected_fingerprint: str | None = None,
) -> Container:
    """Read and validate a container file.

    strict=True refuses internal fingerprint inconsistencies and mismatches
    against expected_fingerprint; strict=False downgrades both to warnings.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER_PREFIX.size:
        raise CheckpointError(f"bounds violation: file {path} shorter than header prefix")
    magic, version, header_len = _HEADER_PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} in {path} (expected {MAGIC!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version} in {path}")
    header_end = _HEADER_PREFIX.size + header_len
    if header_end > len(raw):
        raise CheckpointError(f"bounds violation: header extends past end of {path}")
    try:
        header = json.loads(raw[_HEADER_PREFIX.size : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header in {path}: {exc}") from exc

    data = raw[header_end:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        name = entry["name"]
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name '{name}' in {path}")
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if offset < 0 or offset + nbytes > len(data):
            raise CheckpointError(
                f"bounds violation: tensor '{name}' spans [{offset}, {offset + nbytes})"
                f" but data section has {len(data)} bytes in {path}"
            )
        tensors[name] = (
            np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset)
            .reshape(shape)
            .copy()
        )

    ns = header.get("norm_stats")
    norm_stats = NormStats(mu=ns["mu"], sigma=ns["sigma"]) if ns else None
    fingerprint = header.get("fingerprint", "")
    cfg = header.get("config")

    def _complain(msg: str) -> None:
        if strict:
            raise CheckpointError(msg)
        warnings.warn(msg, stacklevel=3)

    if cfg is not None and fingerprint and config_fingerprint(cfg) != fingerprint:
        _complain(f"fingerprint mismatch: header fingerprint does not match config in {path}")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        _complain(
            f"fingerprint mismatch: {path} was produced by a different config "
            f"({fingerprint[:12]}... != {expected_fingerprint[:12]}...)"
        )

    return Container(
        tensors=tensors,
        norm_stats=norm_stats,
        method=header.get("method", ""),
        config=cfg,
        fingerprint=fingerprint,
        extra=header.get("extra", {}),
    )


def load_module_state(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    """Restore a torch module from prefixed container tensors.

    Dtypes follow the module's own state (integer buffers round-trip
    through float32 exactly at the magnitudes involved).
    """
    template = module.state_dict()
    state = {}
    for key, ref in template.items():
        name = prefix + key
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor '{name}'")
        state[key] = torch.from_numpy(tensors[name].copy()).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)
