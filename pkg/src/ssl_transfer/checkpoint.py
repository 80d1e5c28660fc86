"""Checkpoint container.

Layout::

    b"SSLXCKPT"                 8-byte magic
    header length               uint64, little-endian
    header                      UTF-8 JSON (sorted keys)
    payload                     concatenated little-endian float32 arrays

The header holds ``format_version``, the metadata document (config, fingerprint,
epoch, step, metrics) and an ``arrays`` table of ``name -> {shape, offset, nbytes}``
plus the payload length and SHA-256, so truncation and corruption are detected on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import fingerprint

MAGIC = b"SSLXCKPT"
FORMAT_VERSION = (1, 0)
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """Parameters by canonical name, optimizer momentum by parameter name, and metadata.

    ``config`` is the JSON document describing everything that produced the weights;
    ``fingerprint`` is derived from it.
    """

    params: dict[str, np.ndarray]
    config: dict
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    format_version: tuple[int, int] = FORMAT_VERSION

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    @property
    def head_kind(self) -> str:
        return self.config["head"]["kind"]


def _arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    items += [(f"optim/{k}", v) for k, v in sorted(ckpt.optimizer_state.items())]
    return items


def to_bytes(ckpt: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in _arrays(ckpt):
        data = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPE).tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format_version": list(ckpt.format_version),
        "metadata": {
            "config": ckpt.config,
            "fingerprint": ckpt.fingerprint,
            "epoch": ckpt.epoch,
            "optimizer_step": ckpt.optimizer_step,
            "metrics": ckpt.metrics,
        },
        "arrays": table,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (head_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    if start + head_len > len(blob):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None

    version = tuple(header.get("format_version", ()))
    if len(version) != 2 or version[0] != FORMAT_VERSION[0]:
        raise CheckpointVersionError(
            f"checkpoint format {'.'.join(map(str, version))} unsupported (reader handles {FORMAT_VERSION[0]}.x)"
        )

    payload = blob[start + head_len :]
    if len(payload) != header["payload_nbytes"]:
        raise CheckpointError(
            f"checkpoint payload is {len(payload)} bytes, header declares {header['payload_nbytes']} (truncated?)"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch")

    meta = header["metadata"]
    if fingerprint(meta["config"]) != meta["fingerprint"]:
        raise CheckpointError("config fingerprint does not match the stored configuration")

    params, optim = {}, {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPE).reshape(entry["shape"]).copy()
        kind, _, name = entry["name"].partition("/")
        (params if kind == "param" else optim)[name] = arr
    return Checkpoint(params, meta["config"], optim, meta["optimizer_step"], meta["epoch"], meta["metrics"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
