"""
Checkpoint container for EquiQuant
Little-endian tensor table with per-tensor quantization metadata, written durably
"""

import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from quantizers.base import PER_CHANNEL, PER_TENSOR, QuantParams


logger = logging.getLogger('EquiQuant.Checkpoint')

MAGIC = b'EQNT'
VERSION = 1

DTYPE_TAGS = {'f32': 0, 'i8': 1, 'i4': 2, 'i32': 3}
TAG_DTYPES = {tag: name for name, tag in DTYPE_TAGS.items()}
NUMPY_DTYPES = {'f32': np.float32, 'i8': np.int8, 'i4': np.int8, 'i32': np.int32}
GRANULARITY_TAGS = {PER_TENSOR: 0, PER_CHANNEL: 1}

_write_lock = threading.Lock()


class CheckpointError(ValueError):
    """Raised when a checkpoint is corrupt, truncated or unsupported"""


@dataclass
class TensorEntry:
    """One named tensor; i4 values are held unpacked as int8"""
    name: str
    array: np.ndarray
    dtype: str = 'f32'
    quant: Optional[QuantParams] = None

    def __post_init__(self):
        if self.dtype not in DTYPE_TAGS:
            raise CheckpointError(f"Unknown dtype '{self.dtype}' for {self.name}")
        self.array = np.ascontiguousarray(self.array, dtype=NUMPY_DTYPES[self.dtype])
        if self.dtype == 'i4' and (self.array.min(initial=0) < -8 or self.array.max(initial=0) > 7):
            raise CheckpointError(f"{self.name}: values outside the 4-bit range")

    @property
    def data_nbytes(self) -> int:
        if self.dtype == 'i4':
            return (self.array.size + 1) // 2
        return self.array.nbytes

    @property
    def scale_nbytes(self) -> int:
        """Bytes of per-channel scale metadata"""
        if self.quant is not None and self.quant.granularity == PER_CHANNEL:
            return 4 * np.asarray(self.quant.scale).size
        return 0


@dataclass
class Checkpoint:
    """Ordered tensor table plus a configuration echo"""
    tensors: Dict[str, TensorEntry] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)

    def add(self, name: str, array, dtype: str = 'f32', quant: Optional[QuantParams] = None):
        self.tensors[name] = TensorEntry(name, np.asarray(array), dtype, quant)

    def get(self, name: str) -> TensorEntry:
        try:
            return self.tensors[name]
        except KeyError:
            raise CheckpointError(f"Checkpoint has no tensor '{name}'")

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)


def pack_int4(values: np.ndarray) -> bytes:
    """Two's-complement nibbles, two per byte, low nibble first"""
    flat = np.asarray(values, dtype=np.int8).reshape(-1)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, np.int8)])
    nibbles = flat.astype(np.uint8) & 0x0F
    return (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(raw: bytes, count: int) -> np.ndarray:
    packed = np.frombuffer(raw, dtype=np.uint8)
    nibbles = np.empty(packed.size * 2, dtype=np.uint8)
    nibbles[0::2] = packed & 0x0F
    nibbles[1::2] = packed >> 4
    values = nibbles[:count].astype(np.int8)
    values[values > 7] -= 16
    return values


def _encode_quant(quant: Optional[QuantParams]) -> bytes:
    if quant is None:
        return struct.pack('<B', 0)
    per_channel = quant.granularity == PER_CHANNEL
    scale = 0.0 if per_channel else float(quant.scale)
    out = struct.pack('<BBBfiB', 1, quant.bits, int(quant.signed), scale, quant.zero_point,
                      GRANULARITY_TAGS[quant.granularity])
    if per_channel:
        scales = np.asarray(quant.scale, dtype='<f4').reshape(-1)
        out += struct.pack('<I', scales.size) + scales.tobytes()
    return out


def encode(ckpt: Checkpoint) -> bytes:
    """Serialize a checkpoint to bytes"""
    parts = [MAGIC, struct.pack('<II', VERSION, len(ckpt.tensors))]
    for entry in ckpt.tensors.values():
        name = entry.name.encode('utf-8')
        parts.append(struct.pack('<I', len(name)) + name)
        parts.append(struct.pack('<BB', DTYPE_TAGS[entry.dtype], entry.array.ndim))
        parts.append(struct.pack(f'<{entry.array.ndim}I', *entry.array.shape))
        if entry.dtype == 'i4':
            parts.append(pack_int4(entry.array))
        else:
            parts.append(entry.array.astype(entry.array.dtype.newbyteorder('<')).tobytes())
        parts.append(_encode_quant(entry.quant))
    config = json.dumps(ckpt.config, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts.append(struct.pack('<I', len(config)) + config)
    return b''.join(parts)


class _Reader:
    """Bounds-checked cursor over checkpoint bytes"""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.raw):
            raise CheckpointError(f"Truncated checkpoint at byte {self.offset} (needed {n} more)")
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_quant(reader: _Reader, name: str) -> Optional[QuantParams]:
    (present,) = reader.unpack('<B')
    if present == 0:
        return None
    if present != 1:
        raise CheckpointError(f"{name}: bad quant-params flag {present}")
    bits, signed, scale, zero_point, granularity = reader.unpack('<BBfiB')
    if granularity == 1:
        (count,) = reader.unpack('<I')
        scale = np.frombuffer(reader.take(4 * count), dtype='<f4').astype(np.float32)
    elif granularity != 0:
        raise CheckpointError(f"{name}: unknown granularity tag {granularity}")
    try:
        return QuantParams(bits=bits, signed=bool(signed), scale=scale, zero_point=zero_point,
                           granularity=PER_CHANNEL if granularity == 1 else PER_TENSOR)
    except ValueError as e:
        raise CheckpointError(f"{name}: invalid quant params ({e})")


def decode(raw: bytes) -> Checkpoint:
    """Parse checkpoint bytes; corrupt or truncated input is rejected"""
    reader = _Reader(raw)
    if reader.take(4) != MAGIC:
        raise CheckpointError("Bad magic: not an EQNT checkpoint")
    version, count = reader.unpack('<II')
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")

    ckpt = Checkpoint()
    for _ in range(count):
        (name_len,) = reader.unpack('<I')
        try:
            name = reader.take(name_len).decode('utf-8')
        except UnicodeDecodeError:
            raise CheckpointError("Tensor name is not valid UTF-8")
        tag, rank = reader.unpack('<BB')
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dtype = TAG_DTYPES[tag]
        shape = reader.unpack(f'<{rank}I')
        size = int(np.prod(shape, dtype=np.int64))
        if dtype == 'i4':
            array = unpack_int4(reader.take((size + 1) // 2), size).reshape(shape)
        else:
            item = np.dtype(NUMPY_DTYPES[dtype]).newbyteorder('<')
            array = np.frombuffer(reader.take(size * item.itemsize), dtype=item).reshape(shape)
        ckpt.tensors[name] = TensorEntry(name, array, dtype, _decode_quant(reader, name))

    (config_len,) = reader.unpack('<I')
    try:
        ckpt.config = json.loads(reader.take(config_len).decode('utf-8'))
    except ValueError as e:
        raise CheckpointError(f"Config echo is not valid JSON: {e}")
    if reader.offset != len(raw):
        raise CheckpointError(f"{len(raw) - reader.offset} trailing bytes after checkpoint")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str) -> Path:
    """Write atomically: temp file, fsync, rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(ckpt)
    tmp = path.with_name(path.name + '.tmp')
    with _write_lock:
        with open(tmp, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())  # Force write to disk
        tmp.replace(path)
    logger.info(f"Wrote checkpoint {path} ({len(ckpt.tensors)} tensors, {len(data)} bytes)")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    ckpt = decode(raw)
    logger.debug(f"Loaded checkpoint {path} with {len(ckpt.tensors)} tensors")
    return ckpt
