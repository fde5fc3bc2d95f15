"""Versioned binary container for weights and checkpoints.

File layout (all integers little-endian):

    bytes 0..15   magic ``SPASTCONTAINER01``
    u32           format version
    u32           metadata length
    ...           canonical JSON metadata (sorted keys, utf-8)
    u64           blob length
    ...           raw tensor blob (tensors concatenated in manifest order)
    32 bytes      SHA-256 over everything above

The metadata holds a type tag (e.g. ``spast.checkpoint``), a tensor
manifest (name/dtype/shape/offset) and a free-form ``extra`` dict. Writing
is canonical, so save -> load -> save reproduces the file byte for byte.
"""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np
import torch

from .errors import ChecksumError, ContainerError, VersionMismatchError

MAGIC = b"SPASTCONTAINER01"
VERSION = 1

_NP_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "uint8": np.uint8,
}


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().contiguous().numpy()
    if arr.dtype.name not in _NP_DTYPES:
        raise ContainerError(f"unsupported tensor dtype {arr.dtype.name}")
    return arr


def save_container(path, type_tag: str, tensors: dict, extra: dict | None = None) -> None:
    """Write tensors plus metadata atomically to ``path``."""
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    meta = {"type": type_tag, "tensors": manifest, "extra": extra or {}}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    body = (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<I", len(meta_bytes))
        + meta_bytes
        + struct.pack("<Q", len(blob))
        + blob
    )
    digest = hashlib.sha256(body).digest()

    # atomic replace so a crash never leaves a truncated file behind
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".spast-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body + digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path, expected_type: str | None = None):
    """Read a container; returns ``(type_tag, tensors, extra)``.

    Raises ChecksumError on any truncation or corruption, so a partial
    file never yields partial state.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not a spast container (bad magic)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {VERSION}")
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + meta_len + 8 + 32:
        raise ChecksumError(f"{path}: truncated container")
    meta_bytes = data[pos : pos + meta_len]
    pos += meta_len
    (blob_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) != pos + blob_len + 32:
        raise ChecksumError(f"{path}: truncated or padded container")
    blob = data[pos : pos + blob_len]
    stored = data[pos + blob_len :]
    if hashlib.sha256(data[: pos + blob_len]).digest() != stored:
        raise ChecksumError(f"{path}: checksum mismatch")

    meta = json.loads(meta_bytes.decode("utf-8"))
    if expected_type is not None and meta["type"] != expected_type:
        raise ContainerError(f"{path}: container type {meta['type']!r}, expected {expected_type!r}")

    tensors = {}
    for entry in meta["tensors"]:
        dt = _NP_DTYPES[entry["dtype"]]
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    return meta["type"], tensors, meta["extra"]


def module_fingerprint(module: torch.nn.Module) -> str:
    """SHA-256 over a module's parameters and buffers (sorted by name)."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode("utf-8"))
        h.update(_to_numpy(state[name]).tobytes())
    return h.hexdigest()
