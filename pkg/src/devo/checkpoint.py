"""Binary checkpoint format.

Layout (little-endian)::

    b"DEVO" | u16 format version | u32 header length | JSON header
    | u64 parameter count | float64 parameters | sha256 of all preceding bytes
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .classifier import Arch, ModelCheckpoint

MAGIC = b"DEVO"
FORMAT_VERSION = 1
DIGEST_LEN = 32


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


def to_bytes(model: ModelCheckpoint) -> bytes:
    header = json.dumps(model.header(), sort_keys=True, separators=(",", ":")).encode()
    params = np.ascontiguousarray(model.parameters, dtype="<f8")
    body = b"".join([
        MAGIC,
        struct.pack("<HI", FORMAT_VERSION, len(header)),
        header,
        struct.pack("<Q", params.shape[0]),
        params.tobytes(),
    ])
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> ModelCheckpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if len(data) < 10:
        raise CheckpointTruncatedError("truncated checkpoint preamble")
    version, header_len = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format version {version}")
    pos = 10 + header_len
    if len(data) < pos + 8:
        raise CheckpointTruncatedError("truncated checkpoint header")
    (n_params,) = struct.unpack_from("<Q", data, pos)
    end = pos + 8 + 8 * n_params
    if len(data) < end + DIGEST_LEN:
        raise CheckpointTruncatedError(f"expected {end + DIGEST_LEN} bytes, got {len(data)}")
    if len(data) > end + DIGEST_LEN:
        raise CheckpointFormatError("trailing bytes after digest")
    if hashlib.sha256(data[:end]).digest() != data[end:]:
        raise CheckpointIntegrityError("checkpoint digest mismatch")
    header = json.loads(data[10:pos])
    params = np.frombuffer(data, dtype="<f8", count=n_params, offset=pos + 8).astype(np.float64)
    return ModelCheckpoint(
        version_id=header["version_id"],
        lineage_level=header["lineage_level"],
        parent_version=header["parent_version"],
        num_classes=header["num_classes"],
        arch=Arch(**header["arch"]),
        parameters=params,
        label_dict=header["label_dict"],
        created_ts=header["created_ts"],
        train_provenance=header["train_provenance"],
    )


def save_checkpoint(model: ModelCheckpoint, path) -> str:
    """Write atomically; returns the hex content digest."""
    data = to_bytes(model)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return data[-DIGEST_LEN:].hex()


def load_checkpoint(path) -> ModelCheckpoint:
    return from_bytes(Path(path).read_bytes())
