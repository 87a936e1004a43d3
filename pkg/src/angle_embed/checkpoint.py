"""Binary checkpoint format.

Layout: the 16-byte magic ``ANGLEEMB\\0CKPT\\0v1``, a little-endian uint64
header length, a UTF-8 JSON header (configs, step counter and a tensor
manifest of names, shapes and byte offsets), then every tensor as raw
little-endian float64 in manifest order. The header is serialised with
sorted keys so identical checkpoints produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, ModelParams

MAGIC = b"ANGLEEMB\x00CKPT\x00v1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint, or its header is corrupt."""


class CheckpointVersionError(CheckpointError):
    """Written by a newer, unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the data its header promises."""


@dataclass
class Checkpoint:
    encoder: EncoderConfig
    train: dict
    params: ModelParams
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0
    version: int = FORMAT_VERSION

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"params/{k}", v) for k, v in self.params.items()]
        out += [(f"adam_m/{k}", v) for k, v in self.adam_m.items()]
        out += [(f"adam_v/{k}", v) for k, v in self.adam_v.items()]
        return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "version": ckpt.version,
        "encoder": ckpt.encoder.to_dict(),
        "train": ckpt.train,
        "step": ckpt.step,
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + b"".join(blobs)


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC):
        if MAGIC.startswith(raw):
            raise CheckpointTruncatedError("file ends inside the magic bytes")
        raise CheckpointFormatError("not a checkpoint: magic bytes mismatch")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint: magic bytes mismatch")
    pos = len(MAGIC)
    if len(raw) < pos + _LEN.size:
        raise CheckpointTruncatedError("file ends before the header length")
    (head_len,) = _LEN.unpack_from(raw, pos)
    pos += _LEN.size
    if len(raw) < pos + head_len:
        raise CheckpointTruncatedError(f"header needs {head_len} bytes, {len(raw) - pos} remain")
    try:
        header = json.loads(raw[pos : pos + head_len].decode("utf-8"))
        version = int(header["version"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"corrupt checkpoint header: {e}") from e
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is newer than supported {FORMAT_VERSION}"
        )
    if version < 1:
        raise CheckpointFormatError(f"invalid format version {version}")
    data = raw[pos + head_len :]
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "adam_m": {}, "adam_v": {}}
    try:
        encoder = EncoderConfig(**header["encoder"])
        for entry in header["tensors"]:
            start, nbytes = int(entry["offset"]), int(entry["nbytes"])
            if start + nbytes > len(data):
                raise CheckpointTruncatedError(f"tensor {entry['name']} extends past end of file")
            arr = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=start)
            group, name = entry["name"].split("/", 1)
            groups[group][name] = arr.astype(np.float64).reshape(entry["shape"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"corrupt checkpoint manifest: {e}") from e
    return Checkpoint(
        encoder=encoder,
        train=header["train"],
        params=ModelParams(groups["params"]),
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        step=int(header["step"]),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
