"""Shared plumbing: seeded named random streams and bit packing."""

import zlib

import numpy as np

__all__ = ["stream_rng", "pack_indices", "unpack_indices"]


def stream_rng(seed, name):
    """Independent generator for (seed, stream-name).

    All randomness flows from one user seed; named streams keep data,
    initialization, and control trials independently reproducible."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def pack_indices(indices, bits):
    """Pack integer indices into a big-endian bitstream, padded with
    zero bits to the next byte boundary."""
    acc = 0
    nbits = 0
    out = bytearray()
    for v in indices:
        v = int(v)
        if v < 0 or v >= (1 << bits):
            raise ValueError(f"index {v} does not fit in {bits} bits")
        acc = (acc << bits) | v
        nbits += bits
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return bytes(out)


def unpack_indices(data, bits, count):
    """Inverse of pack_indices."""
    out = np.empty(count, dtype=np.int64)
    acc = 0
    nbits = 0
    pos = 0
    for i in range(count):
        while nbits < bits:
            acc = (acc << 8) | data[pos]
            pos += 1
            nbits += 8
        nbits -= bits
        out[i] = (acc >> nbits) & ((1 << bits) - 1)
        acc &= (1 << nbits) - 1
    return out
