"""Checkpoint files: an ordered manifest of named float64 tensors.

Layout (little-endian): magic ``CRNW``, u16 version, u32 tensor count, then
for each tensor a u16 name length, the UTF-8 name, a u8 rank, ``rank`` u32
dimensions and the f64 data in row-major order. Scalars (hyperparameters,
stage markers) are rank-0 tensors.
"""

from collections import OrderedDict
import logging
import math
import struct

import numpy

from casrnn.data import ByteReader, FormatError, store_bytes


logger = logging.getLogger(__name__)


MAGIC = b"CRNW"
VERSION = 1


def encode(tensors):
    """Serializes an ordered ``{name: array}`` mapping to bytes."""
    chunks = [struct.pack("<4sHI", MAGIC, VERSION, len(tensors))]
    for name, value in tensors.items():
        value = numpy.asarray(value, dtype=numpy.float64)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xffff or value.ndim > 0xff:
            raise ValueError("tensor {!r} cannot be stored".format(name))
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack("<{}I".format(value.ndim), *value.shape))
        chunks.append(numpy.ascontiguousarray(value).astype("<f8").tobytes())
    return b"".join(chunks)


def decode(data):
    r = ByteReader(data)
    r.magic(MAGIC)
    version, = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError("unsupported checkpoint version {}".format(version),
                          4)
    count, = r.unpack("<I", "tensor count")
    tensors = OrderedDict()
    for _ in range(count):
        length, = r.unpack("<H", "name length")
        start = r.offset
        try:
            name = r.take(length, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", start) from None
        if name in tensors:
            raise FormatError("duplicate tensor {!r}".format(name), start)
        rank, = r.unpack("<B", "rank")
        dims = r.unpack("<{}I".format(rank), "dimensions")
        size = math.prod(dims)
        tensors[name] = r.array("<f8", size, name).reshape(dims)
    r.finish()
    return tensors


def store_file(filename, tensors):
    store_bytes(filename, encode(tensors))
    logger.debug("stored %d tensors in %s", len(tensors), filename)


def load_file(filename):
    with open(filename, "rb") as f:
        return decode(f.read())
