"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SPDN" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    | u32 n_tensors | n_tensors x tensor record | u32 crc32

    tensor record: u16 name_len | name | u8 dtype code | u8 ndim
                   | ndim x u32 dims | raw little-endian payload

The CRC covers every byte between the version field and the CRC itself.
Tensor names are prefixed ``param/``, ``buffer/``, ``adam_m/`` or
``adam_v/``. Writing the same state twice yields identical bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SPDN"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class CheckpointData:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}


def _encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        code = DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def encode(data: CheckpointData) -> bytes:
    return _encode(data.meta, data.tensors)


def decode(blob: bytes) -> CheckpointData:
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 16:
        raise CheckpointError("truncated checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {VERSION}")
    body = blob[4:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC-32 mismatch: checkpoint is corrupt")
    pos = 4
    (meta_len,) = struct.unpack_from("<I", body, pos)
    pos += 4
    meta = json.loads(body[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode()
        pos += name_len
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dtype = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(body, dtype, count=nbytes // dtype.itemsize,
                                      offset=pos).reshape(dims).copy()
        pos += nbytes
    return CheckpointData(meta, tensors)


def model_tensors(model, dtype=None) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        out["param/" + name] = p.value if dtype is None else p.value.astype(dtype)
    for name, b in model.named_buffers():
        out["buffer/" + name] = b if dtype is None else b.astype(dtype)
    return out


def dump_checkpoint(f, model, optimizer=None, meta: dict | None = None, dtype=None) -> None:
    """Serialise ``model`` (and optionally Adam moments) to a binary file object."""
    meta = dict(meta or {})
    meta.setdefault("model_config", model.config.to_dict())
    tensors = model_tensors(model, dtype)
    if optimizer is not None:
        meta["optimizer"] = optimizer.state_meta()
        for name, m, v in optimizer.moments():
            tensors["adam_m/" + name] = m
            tensors["adam_v/" + name] = v
    f.write(_encode(meta, tensors))


def save_checkpoint(path, model, optimizer=None, meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        dump_checkpoint(f, model, optimizer, meta)


def read_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as f:
        return decode(f.read())


def load_state(model, data: CheckpointData) -> None:
    """Copy parameters and buffers from ``data`` into ``model`` (names must match)."""
    params = data.group("param")
    buffers = data.group("buffer")
    names = [n for n, _ in model.named_parameters()]
    if sorted(names) != sorted(params):
        missing = sorted(set(names) ^ set(params))
        raise CheckpointError(f"parameter table mismatch: {missing[:5]}")
    for name, p in model.named_parameters():
        if params[name].shape != p.value.shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != {p.value.shape}")
        p.value = params[name].copy()
        p.grad = np.zeros_like(p.value)
    for mod_name, module in _buffer_owners(model):
        for bname in module._buffer_names:
            key = f"{mod_name}{bname}"
            if key not in buffers:
                raise CheckpointError(f"missing buffer {key}")
            object.__setattr__(module, bname, buffers[key].copy())


def _buffer_owners(model, prefix=""):
    yield prefix, model
    for name, child in model._children.items():
        yield from _buffer_owners(child, f"{prefix}{name}.")


def load_checkpoint(path):
    """Rebuild the model (and raw checkpoint data) stored at ``path``."""
    from speednet.model import SpeedNetConfig, build

    data = read_checkpoint(path)
    config = SpeedNetConfig.from_dict(data.meta["model_config"])
    model = build(config)
    load_state(model, data)
    return model, data
