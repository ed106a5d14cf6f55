"""On-disk formats: dataset cache, parameter checkpoints and mask dumps.

All numeric payloads are little-endian float64 (ids are little-endian int64).
Every file starts with an 8-byte magic and a uint32 format version.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .data import DatasetSpec, VideoBatch, generate
from .errors import FormatError

DATA_MAGIC = b"SVMXDATA"
CKPT_MAGIC = b"SVMXCKPT"
MASK_MAGIC = b"SVMXMASK"
FORMAT_VERSION = 1

_F64 = np.dtype("<f8")
_I64 = np.dtype("<i8")
KIND_CODES = {"spatial": 0, "temporal": 1, "average": 2, "mixup": 3, "cutmix": 4}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what}: wanted {n} bytes, {len(self.buf) - self.pos} left",
                              self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(shape)

    def header(self, magic: bytes) -> int:
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"bad magic {got!r} for {self.what}, expected {magic!r}", 0)
        (version,) = self.unpack("<I")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported {self.what} version {version}", len(magic))
        return version

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes in {self.what}", self.pos)


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


# -- dataset cache ---------------------------------------------------------

def _spec_header(spec: DatasetSpec) -> bytes:
    meta = {"format_version": FORMAT_VERSION, "spec": dataclasses.asdict(spec)}
    return json.dumps(meta, sort_keys=True).encode()


def save_dataset(path, spec: DatasetSpec, train: VideoBatch, val: VideoBatch):
    head = _spec_header(spec)
    with open(path, "wb") as f:
        f.write(DATA_MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head)
        for split in (train, val):
            f.write(struct.pack("<I", len(split)))
            f.write(split.frames.astype(_F64).tobytes())
            f.write(split.labels.astype(_F64).tobytes())
            f.write(split.ids.astype(_I64).tobytes())


def read_dataset_header(path) -> dict:
    r = _Reader(_read_bytes(path), "dataset cache")
    r.header(DATA_MAGIC)
    (n,) = r.unpack("<I")
    return json.loads(r.take(n).decode())


def load_dataset(path, spec: DatasetSpec) -> Optional[Tuple[VideoBatch, VideoBatch]]:
    """Read a cache written for ``spec``; ``None`` if the header describes another spec."""
    r = _Reader(_read_bytes(path), "dataset cache")
    r.header(DATA_MAGIC)
    (n,) = r.unpack("<I")
    if r.take(n) != _spec_header(spec):
        return None
    shape = (spec.frames, spec.height, spec.width, spec.channels)
    splits = []
    for _ in range(2):
        (b,) = r.unpack("<I")
        frames = r.array(_F64, (b,) + shape)
        labels = r.array(_F64, (b, spec.num_classes))
        ids = r.array(_I64, (b,))
        splits.append(VideoBatch(frames, labels, ids))
    r.done()
    return splits[0], splits[1]


def load_or_generate(path, spec: DatasetSpec) -> Tuple[VideoBatch, VideoBatch]:
    """Use the cache at ``path`` when its header matches, otherwise regenerate and rewrite it."""
    path = Path(path)
    if path.exists():
        try:
            cached = load_dataset(path, spec)
        except FormatError:
            cached = None
        if cached is not None:
            return cached
    train, val = generate(spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(path, spec, train, val)
    return train, val


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, params: Dict[str, np.ndarray]):
    parts = [CKPT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value, dtype=np.float64)
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_F64).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    r = _Reader(_read_bytes(path), "checkpoint")
    r.header(CKPT_MAGIC)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        out[name] = r.array(_F64, tuple(shape))
    r.done()
    return out


# -- mask dumps ------------------------------------------------------------

@dataclasses.dataclass
class MaskDump:
    weights: np.ndarray  # B x T x H x W
    lambdas: np.ndarray  # B
    kind: str
    step: int = 0


def save_mask_dump(path, weights: np.ndarray, lambdas, kind: str, step: int = 0):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 4:
        raise FormatError(f"mask weights must be B x T x H x W, got shape {w.shape}")
    lam = np.broadcast_to(np.asarray(lambdas, dtype=np.float64), (w.shape[0],))
    head = MASK_MAGIC + struct.pack("<I4IBq", FORMAT_VERSION, *w.shape, KIND_CODES[kind], step)
    Path(path).write_bytes(head + lam.astype(_F64).tobytes() + w.astype(_F64).tobytes())


def load_mask_dump(path) -> MaskDump:
    r = _Reader(_read_bytes(path), "mask dump")
    r.header(MASK_MAGIC)
    B, T, H, W = r.unpack("<4I")
    at = r.pos
    (code,) = r.unpack("<B")
    if code not in KIND_NAMES:
        raise FormatError(f"unknown mask kind code {code}", at)
    (step,) = r.unpack("<q")
    lam = r.array(_F64, (B,))
    weights = r.array(_F64, (B, T, H, W))
    r.done()
    return MaskDump(weights, lam, KIND_NAMES[code], step)
