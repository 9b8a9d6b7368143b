'''
Named-tensor container shared by checkpoints ("AADA") and datasets ("AADD").

Layout, all little-endian:
    magic 4 bytes | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 x rank | payload f64 x prod(dims)
'''
import struct

import numpy as np

from .errors import FormatError
from .files import write_atomic

CHECKPOINT_MAGIC = b'AADA'
DATASET_MAGIC = b'AADD'
VERSION = 1

_HEADER = struct.Struct('<4sII')
_NAME_LENGTH = struct.Struct('<H')
_RANK = struct.Struct('<B')
_FLOAT = np.dtype('<f8')


def encode(tensors: dict, magic: bytes) -> bytes:
    '''Serializes tensors in lexicographic name order'''
    chunks = [_HEADER.pack(magic, VERSION, len(tensors))]
    for name in sorted(tensors):
        tensor = np.asarray(tensors[name], dtype=_FLOAT)
        encoded_name = name.encode('utf-8')
        chunks.append(_NAME_LENGTH.pack(len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(_RANK.pack(tensor.ndim))
        chunks.append(struct.pack(f'<{tensor.ndim}I', *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor).tobytes())
    return b''.join(chunks)


class _Reader:
    def __init__(self, data: bytes, source):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f'{self.source}: truncated while reading {what}.')
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.take(fmt.size, what))


def decode(data: bytes, magic: bytes, source='<bytes>') -> dict:
    '''Parses a whole container; any defect raises FormatError and nothing is returned'''
    reader = _Reader(data, source)
    found_magic, version, count = reader.unpack(_HEADER, 'header')
    if found_magic != magic:
        raise FormatError(f'{source}: bad magic {found_magic!r}, expected {magic!r}.')
    if version != VERSION:
        raise FormatError(f'{source}: unsupported container version {version}.')
    tensors = {}
    for _ in range(count):
        (name_length,) = reader.unpack(_NAME_LENGTH, 'tensor name length')
        try:
            name = reader.take(name_length, 'tensor name').decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError(f'{source}: tensor name is not valid UTF-8.')
        (rank,) = reader.unpack(_RANK, f'rank of "{name}"')
        shape = struct.unpack(f'<{rank}I', reader.take(4 * rank, f'dimensions of "{name}"'))
        size = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(size * _FLOAT.itemsize, f'payload of "{name}"')
        if name in tensors:
            raise FormatError(f'{source}: duplicate tensor "{name}".')
        tensors[name] = np.frombuffer(payload, dtype=_FLOAT).astype(np.float64).reshape(shape)
    if reader.offset != len(data):
        raise FormatError(f'{source}: {len(data) - reader.offset} trailing bytes after the last tensor.')
    return tensors


def write(path, tensors: dict, magic: bytes):
    write_atomic(path, encode(tensors, magic))

def read(path, magic: bytes) -> dict:
    with open(path, 'rb') as file:
        data = file.read()
    return decode(data, magic, source=path)


def text_to_tensor(text: str) -> np.ndarray:
    '''Stores a short string (hashes, ids) as one float per UTF-8 byte'''
    return np.frombuffer(text.encode('utf-8'), dtype=np.uint8).astype(np.float64)

def tensor_to_text(tensor) -> str:
    return bytes(np.asarray(tensor).astype(np.uint8).tolist()).decode('utf-8')
