"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic        8 bytes  b"CONVAEck"
    version      u32
    header_len   u32
    header       header_len bytes of UTF-8 JSON (sorted keys, compact):
                 architecture descriptor, fingerprint, stage, trainable
                 mask, tensor count and training metadata
    tensors      repeated: name_len u16, name, dtype code u8 (4 | 8),
                 ndim u8, ndim x u32 extents, raw little-endian values

Writing is canonical, so save -> load -> save reproduces the file byte for
byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError, FingerprintMismatchError, TruncatedCheckpointError, VersionMismatchError
from .model import ArchitectureSpec, AutoencoderParams, Layer
from .tensor import Tensor

MAGIC = b"CONVAEck"
FORMAT_VERSION = 1
_DTYPES = {8: np.dtype("<f8"), 4: np.dtype("<f4")}


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(params: AutoencoderParams, metadata: Optional[dict] = None) -> bytes:
    tensors = params.tensors()
    header = {
        "architecture": params.arch.descriptor(),
        "fingerprint": params.fingerprint,
        "stage": params.stage,
        "trainable": {name: bool(params.trainable.get(name, True)) for name in params.names},
        "n_tensors": len(tensors),
        "metadata": metadata or {},
    }
    hb = _dumps(header)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hb)), hb]
    for name, t in tensors.items():
        arr = t.numpy()
        code = arr.dtype.itemsize
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def save_checkpoint(params: AutoencoderParams, path, metadata: Optional[dict] = None) -> None:
    Path(path).write_bytes(to_bytes(params, metadata))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> tuple[AutoencoderParams, dict]:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    arch = ArchitectureSpec.from_descriptor(header["architecture"])
    if arch.fingerprint() != header["fingerprint"]:
        raise FingerprintMismatchError(
            f"stored fingerprint {header['fingerprint'][:12]} does not match architecture {arch.fingerprint()[:12]}"
        )
    arrays = {}
    for _ in range(header["n_tensors"]):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        arrays[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    stage = header["stage"]
    try:
        layers = tuple(
            Layer(name, Tensor(arrays[f"{name}.w"]), Tensor(arrays[f"{name}.b"]))
            for name in arch.layer_names(stage)
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks tensor {exc.args[0]}") from None
    params = AutoencoderParams(arch, stage, layers, dict(header["trainable"]))
    params.validate()
    return params, header["metadata"]


def load_checkpoint(path, with_metadata: bool = False):
    """Load parameters (and optionally the metadata dict) from ``path``."""
    params, meta = from_bytes(Path(path).read_bytes())
    return (params, meta) if with_metadata else params
