"""Binary checkpoints for ParamTrees and SampleSets, plus JSON sidecars.

Layout (all integers little-endian)::

    b"PXS1" | u32 version | u32 count |
    count x (u32 name_len | name utf-8 | u32 rank | rank x u64 dim | f64 payload) |
    u32 crc32 of everything before it

A SampleSet is stored as tensors named ``"s<index>/<name>"``; the sidecar
``<path>.json`` records which kind was saved, per-sample metadata and any
run metadata passed by the caller.
"""
import json
import os
import struct
import zlib

import numpy as np

from .errors import CorruptionError, FormatError, NumericError, VersionError
from .samplers import SampleSet

MAGIC = b"PXS1"
VERSION = 1
_SAMPLE_PREFIX = "s"


def encode(tensors):
    """Serialize an ordered mapping of name -> array to checkpoint bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        if np.isnan(arr).any():
            raise NumericError(f"tensor {name!r} contains NaN")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw) - 4:
            raise FormatError(f"declared size runs past end of file ({n} bytes)", offset=self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(raw):
    """Parse checkpoint bytes into a dict of arrays, validating CRC and sizes."""
    if len(raw) < 16:
        raise FormatError("file too short for a checkpoint", offset=len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", offset=0)
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptionError("CRC mismatch", offset=len(raw) - 4)
    version, count = struct.unpack_from("<II", raw, 4)
    if version > VERSION:
        raise VersionError(f"format version {version} is newer than supported {VERSION}", offset=4)
    reader = _Reader(raw)
    reader.pos = 12
    out = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(8 * size)
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if reader.pos != len(raw) - 4:
        raise FormatError("trailing bytes after last tensor", offset=reader.pos)
    return out


def _sample_tensors(sample_set):
    tensors = {}
    for m, tree in enumerate(sample_set.samples):
        for name, value in tree.items():
            tensors[f"{_SAMPLE_PREFIX}{m}/{name}"] = value
    return tensors


def _split_samples(tensors):
    samples = {}
    for key, value in tensors.items():
        head, _, name = key.partition("/")
        if not name or not head.startswith(_SAMPLE_PREFIX) or not head[1:].isdigit():
            raise FormatError(f"tensor {key!r} is not a sample entry")
        samples.setdefault(int(head[1:]), {})[name] = value
    return [samples[m] for m in sorted(samples)]


def sidecar_path(path):
    return str(path) + ".json"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def save(obj, path, metadata=None):
    """Write a ParamTree (dict) or SampleSet to ``path`` and its sidecar JSON."""
    if isinstance(obj, SampleSet):
        kind, tensors, meta = "samples", _sample_tensors(obj), list(obj.meta)
    elif isinstance(obj, dict):
        kind, tensors, meta = "tree", obj, None
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")
    raw = encode(tensors)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(raw)
    os.replace(tmp, path)
    side = {"kind": kind, "metadata": metadata or {}}
    if meta is not None:
        side["meta"] = meta
        side["num_samples"] = len(obj)
    write_json(sidecar_path(path), side)


def read_sidecar(path):
    side = sidecar_path(path)
    if not os.path.exists(side):
        return None
    with open(side, encoding="utf-8") as f:
        return json.load(f)


def load(path):
    """Inverse of :func:`save`; returns a dict or a SampleSet."""
    with open(path, "rb") as f:
        tensors = decode(f.read())
    side = read_sidecar(path)
    kind = side["kind"] if side else None
    if kind is None:
        looks_sampled = tensors and all("/" in k for k in tensors)
        kind = "samples" if looks_sampled else "tree"
    if kind == "tree":
        return tensors
    samples = _split_samples(tensors)
    meta = (side or {}).get("meta") or [{} for _ in samples]
    n = (side or {}).get("num_samples", len(samples))
    while len(samples) < n:
        samples.append({})
    return SampleSet(samples, meta)


def load_metadata(path):
    side = read_sidecar(path)
    return (side or {}).get("metadata", {})
