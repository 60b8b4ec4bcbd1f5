"""Binary archive for adversarial batches.

Layout (all little-endian)::

    b"AESADV1\\0"            8-byte magic
    u32 header length
    header                   canonical JSON: shape, provenance, originals hash
    f32 images               N*C*H*W
    f32 originals            N*C*H*W
    i64 labels               N
    f64 per-image loss       N

Rewriting a read archive reproduces it byte for byte.
"""

import hashlib
import json
import struct

import numpy as np

from .attacks import AdvBatch

MAGIC = b"AESADV1\0"


class ArchiveError(ValueError):
    pass


def originals_hash(originals):
    return hashlib.sha256(np.ascontiguousarray(originals, dtype="<f4").tobytes()).hexdigest()


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def encode_advbatch(adv):
    shape = list(adv.images.shape)
    header = {"shape": shape, "provenance": adv.provenance,
              "originals_sha256": originals_hash(adv.originals)}
    head = _canonical(header).encode()
    return b"".join([
        MAGIC, struct.pack("<I", len(head)), head,
        np.ascontiguousarray(adv.images, dtype="<f4").tobytes(),
        np.ascontiguousarray(adv.originals, dtype="<f4").tobytes(),
        np.ascontiguousarray(adv.labels, dtype="<i8").tobytes(),
        np.ascontiguousarray(adv.loss, dtype="<f8").tobytes(),
    ])


def decode_advbatch(raw, name="<bytes>"):
    if raw[:len(MAGIC)] != MAGIC:
        raise ArchiveError(f"{name}: bad magic")
    off = len(MAGIC)
    if len(raw) < off + 4:
        raise ArchiveError(f"{name}: truncated header at byte offset {len(raw)}")
    (n_head,) = struct.unpack("<I", raw[off:off + 4])
    off += 4
    try:
        header = json.loads(raw[off:off + n_head].decode())
        shape = tuple(int(s) for s in header["shape"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise ArchiveError(f"{name}: unreadable header ({exc})") from None
    if len(shape) != 4:
        raise ArchiveError(f"{name}: expected a 4-d shape, got {shape}")
    off += n_head
    n = shape[0]
    pixels = int(np.prod(shape))
    expected = off + 8 * pixels + 16 * n
    if len(raw) != expected:
        raise ArchiveError(f"{name}: payload is {len(raw)} bytes, shape {shape} needs {expected}")

    def take(dtype, count):
        nonlocal off
        out = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
        off += count * np.dtype(dtype).itemsize
        return out

    images = take("<f4", pixels).reshape(shape).astype(np.float32)
    originals = take("<f4", pixels).reshape(shape).astype(np.float32)
    labels = take("<i8", n).astype(np.int64)
    loss = take("<f8", n).astype(np.float64)
    if originals_hash(originals) != header.get("originals_sha256"):
        raise ArchiveError(f"{name}: originals hash mismatch")
    return AdvBatch(images, originals, labels, loss, header.get("provenance", {}))


def write_advbatch(path, adv):
    with open(path, "wb") as fh:
        fh.write(encode_advbatch(adv))


def read_advbatch(path):
    with open(path, "rb") as fh:
        return decode_advbatch(fh.read(), str(path))
