"""Little-endian binary checkpoint container.

Layout (all little-endian):
    bytes 0..7    magic tag (8 ASCII bytes, identifies the payload kind)
    bytes 8..11   u32 format version (currently 1)
    bytes 12..15  u32 number of dimension entries that follow
    then          i64 dimension entries
    then          raw float64 payload, row-major

The same container carries MAXSAT clause weights, classifier parameters,
proofreader parameters and permutation estimates; only the magic tag and
the meaning of the dimension entries differ.
"""

import struct

import numpy as np

from .errors import ParseError

VERSION = 1

MAGIC_WEIGHTS = b"GSMIXSAT"      # dims: n_clauses, n_cells, n_classes, n_aux, rank
MAGIC_CLASSIFIER = b"GSCLSMLP"   # dims: layer sizes in order
MAGIC_PROOFREADER = b"GSPROOFR"  # dims: n_cells*n_classes
MAGIC_PERMUTATION = b"GSPERMAT"  # dims: K, converged flag; payload P_hat then hard


def write_container(path, magic, dims, payload):
    if len(magic) != 8:
        raise ValueError("magic tag must be exactly 8 bytes")
    payload = np.ascontiguousarray(payload, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", VERSION, len(dims)))
        f.write(struct.pack(f"<{len(dims)}q", *[int(d) for d in dims]))
        f.write(payload.astype("<f8").tobytes())


def read_container(path, expected_magic):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise ParseError(f"{path}: truncated container header (offset {len(blob)})")
    magic = blob[:8]
    if magic != expected_magic:
        raise ParseError(f"{path}: magic {magic!r} does not match {expected_magic!r}")
    version, ndims = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported container version {version}")
    offset = 16
    if len(blob) < offset + 8 * ndims:
        raise ParseError(f"{path}: truncated dims block (offset {len(blob)})")
    dims = list(struct.unpack_from(f"<{ndims}q", blob, offset))
    offset += 8 * ndims
    if (len(blob) - offset) % 8 != 0:
        raise ParseError(f"{path}: payload is not a whole number of float64 (offset {offset})")
    payload = np.frombuffer(blob[offset:], dtype="<f8").astype(np.float64)
    return dims, payload
