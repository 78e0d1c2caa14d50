"""Binary containers: feature dumps (``LDFD``) and checkpoints (``LDCK``).

Both are little-endian throughout.

Feature dump::

    b"LDFD" | u32 version | u32 layer_count
    per layer: u32 layer_index | u32 rows | u32 cols | rows*cols f32
    N i32 labels (N = rows of every layer; the rest of the file)

Checkpoint::

    b"LDCK" | u32 version | u32 config_len | config text (UTF-8)
    u32 tensor_count
    per tensor: u32 name_len | name (UTF-8) | u32 ndim | ndim*u32 shape | f64 data
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from latent_denoising.analysis import FeatureDump

DUMP_MAGIC = b"LDFD"
DUMP_VERSION = 1
CKPT_MAGIC = b"LDCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("unexpected end of file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def remaining(self) -> int:
        return len(self.data) - self.pos


def encode_feature_dump(dump: FeatureDump) -> bytes:
    parts = [DUMP_MAGIC, struct.pack("<II", DUMP_VERSION, len(dump.layers))]
    for index, feats in dump.layers:
        feats = np.asarray(feats)
        if feats.ndim != 2:
            raise FormatError(f"layer {index} is not a matrix")
        parts.append(struct.pack("<III", index, *feats.shape))
        parts.append(np.ascontiguousarray(feats, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(dump.labels, dtype="<i4").tobytes())
    return b"".join(parts)


def decode_feature_dump(data: bytes) -> FeatureDump:
    r = _Reader(data)
    if r.take(4) != DUMP_MAGIC:
        raise FormatError("not a feature dump (bad magic)")
    version = r.u32()
    if version != DUMP_VERSION:
        raise FormatError(f"unsupported feature dump version {version}")
    layers = []
    for _ in range(r.u32()):
        index, rows, cols = r.u32(), r.u32(), r.u32()
        values = np.frombuffer(r.take(4 * rows * cols), dtype="<f4").reshape(rows, cols)
        layers.append((index, values.astype(np.float32)))
    if r.remaining() % 4:
        raise FormatError("trailing bytes do not form whole labels")
    labels = np.frombuffer(r.take(r.remaining()), dtype="<i4").astype(np.int32)
    return FeatureDump(layers, labels)


def write_feature_dump(path, dump: FeatureDump) -> bytes:
    data = encode_feature_dump(dump)
    Path(path).write_bytes(data)
    return data


def read_feature_dump(path) -> FeatureDump:
    dump = decode_feature_dump(Path(path).read_bytes())
    dump.metadata = str(path)
    return dump


def encode_checkpoint(tensors: dict[str, np.ndarray], config_text: str) -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], str]:
    r = _Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config_text = r.take(r.u32()).decode("utf-8")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.remaining():
        raise FormatError("trailing bytes after last tensor")
    return tensors, config_text


def write_checkpoint(path, tensors: dict[str, np.ndarray], config_text: str) -> bytes:
    data = encode_checkpoint(tensors, config_text)
    Path(path).write_bytes(data)
    return data


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    return decode_checkpoint(Path(path).read_bytes())
