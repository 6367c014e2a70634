"""Versioned binary checkpoints.

Layout (little-endian): magic ``UGSC``, u16 version, u32-prefixed architecture
text, u32 epoch, model tensors, u64 optimizer step, Adam first and second
moments, u32-prefixed RNG state JSON. A tensor section is a u32 count followed
by (u16 name length, name, u8 ndim, u32 dims..., f64 data) records.
"""
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from network import ArchitectureSpec, build_model
from utils import DataFormatError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'UGSC'
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct('<4sH')


@dataclass
class Checkpoint:
    spec: ArchitectureSpec
    epoch: int
    state: dict
    optimizer_step: int = 0
    optimizer_m: dict = field(default_factory=dict)
    optimizer_v: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _pack_text(text):
    raw = text.encode('utf-8')
    return struct.pack('<I', len(raw)) + raw


def _pack_tensors(tensors):
    parts = [struct.pack('<I', len(tensors))]
    for name, value in tensors.items():
        raw_name = name.encode('utf-8')
        value = np.asarray(value, dtype=np.float64)
        parts.append(struct.pack('<H', len(raw_name)) + raw_name)
        parts.append(struct.pack(f'<B{value.ndim}I', value.ndim, *value.shape))
        parts.append(value.astype('<f8').tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, blob, source):
        self.blob = blob
        self.source = source
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.blob):
            raise DataFormatError(f"{self.source}: truncated checkpoint at byte {self.offset}")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self):
        (length,) = self.unpack('<I')
        return self.take(length).decode('utf-8')

    def tensors(self):
        (count,) = self.unpack('<I')
        out = {}
        for _ in range(count):
            (name_len,) = self.unpack('<H')
            name = self.take(name_len).decode('utf-8')
            (ndim,) = self.unpack('<B')
            shape = self.unpack(f'<{ndim}I')
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(8 * size), dtype='<f8').astype(np.float64).reshape(shape)
        return out


def encode_checkpoint(ckpt):
    return b''.join([
        _HEADER.pack(CHECKPOINT_MAGIC, ckpt.version),
        _pack_text(ckpt.spec.to_text()),
        struct.pack('<I', ckpt.epoch),
        _pack_tensors(ckpt.state),
        struct.pack('<Q', ckpt.optimizer_step),
        _pack_tensors(ckpt.optimizer_m),
        _pack_tensors(ckpt.optimizer_v),
        _pack_text(json.dumps(ckpt.rng_state, sort_keys=True)),
    ])


def decode_checkpoint(blob, source='<bytes>'):
    reader = _Reader(blob, source)
    magic, version = reader.unpack(_HEADER.format)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{source}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        spec = ArchitectureSpec.from_text(reader.text())
    except ValueError as exc:
        raise DataFormatError(f"{source}: {exc}") from exc
    (epoch,) = reader.unpack('<I')
    state = reader.tensors()
    (step,) = reader.unpack('<Q')
    m, v = reader.tensors(), reader.tensors()
    rng_state = json.loads(reader.text())
    if reader.offset != len(blob):
        raise DataFormatError(f"{source}: {len(blob) - reader.offset} trailing bytes after checkpoint")
    return Checkpoint(spec, epoch, state, step, m, v, rng_state, version)


def save_checkpoint(path, model, optimizer_state=None, epoch=0, rng_state=None):
    ckpt = Checkpoint(
        spec=model.spec,
        epoch=epoch,
        state=model.state_dict(),
        optimizer_step=optimizer_state.step if optimizer_state else 0,
        optimizer_m=dict(optimizer_state.m) if optimizer_state else {},
        optimizer_v=dict(optimizer_state.v) if optimizer_state else {},
        rng_state=rng_state or {},
    )
    with open(path, 'wb') as handle:
        handle.write(encode_checkpoint(ckpt))
    logger.debug("Wrote checkpoint %s (epoch %d)", path, epoch)
    return ckpt


def load_checkpoint(path):
    with open(path, 'rb') as handle:
        blob = handle.read()
    return decode_checkpoint(blob, path)


def restore_model(ckpt, rng=None):
    """Rebuild the network described by a checkpoint and load its tensors."""
    model = build_model(ckpt.spec, rng)
    model.load_state_dict(ckpt.state)
    return model
