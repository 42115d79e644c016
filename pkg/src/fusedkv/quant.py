"""Per-group asymmetric int4 codec with nibble packing and compressed-domain dots.

Quantization, per group of ``g`` consecutive elements::

    s = (max - min) / 15
    z = -min / s
    n = clamp(round(x / s + z), 0, 15)        # one nibble per element
    x_hat = (n - z) * s

Constant groups (``max == min``) would divide by zero, so they take a
sentinel path: ``s = 0``, all nibbles 0, and the zero-point field holds the
constant itself; decode returns it exactly.

Roundtrip error per element is ``s/2`` plus float32 representation noise
of about 1.5 ulp of the element magnitude (the affine form loses precision
when the group's min is enormous relative to its scale).  For unit-scale
data (activations, normalized embeddings) that noise term sits far below
1e-6, which is the slack the package's error-bound checks use.

Packed layout (normative, stable across platforms)::

    word    32-bit unsigned, 8 nibbles, little-nibble-first:
            nibble j occupies bits [4*j, 4*j + 4)
    element e of a vector -> word e // 8, nibble e % 8
    words   row-major per vector; vectors shorter than a multiple of the
            group size are zero-padded at encode and truncated at decode

File blob (``save_packed`` / ``load_packed``), 16-byte header then arrays::

    magic   "PQT1"  4 bytes
    version u16     currently 1
    group   u16     elements per quant group
    dim     u32     unpadded elements per vector
    count   u32     number of vectors
    words   u32[count * words_per_vector]    little-endian
    scales  f32[count * groups_per_vector]   little-endian
    zeros   f32[count * groups_per_vector]   little-endian

Scale/zero parameters are accounted at 16 bits each for compression-ratio
purposes but stored as float32 here; ``compression_ratio`` does the
bit-level bookkeeping.

Two dot-product paths are provided against a packed row.  The scalar path
extracts nibbles one at a time.  The vectorized path treats each 32-bit
word as two 16-bit halves and multiplies the *masked* half directly:
``q[j]/16**j * (half & mask[j])`` equals ``q[j] * nibble_j`` exactly in
binary floating point (the 16**j factor cancels in the exponent), so the
two paths produce bit-identical per-half partial sums.  Both fold the
affine correction per group: ``s * sum(q*n) - s*z * sum(q)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from fusedkv.errors import (
    BoundsError,
    ConfigError,
    DimensionError,
    NumericError,
)

__all__ = [
    "Int4GroupParams",
    "PackedQuantTensor",
    "int4_encode",
    "int4_encode_matrix",
    "int4_decode",
    "int4_decode_all",
    "int4_dot_scalar",
    "int4_dot_vectorized",
    "halfword_partials",
    "pack_nibbles",
    "unpack_nibbles",
    "compression_ratio",
    "save_packed",
    "load_packed",
    "write_packed",
    "read_packed",
]

_MAGIC = b"PQT1"
_VERSION = 1


@dataclass(frozen=True)
class Int4GroupParams:
    """Grouping parameters: ``group_size`` elements share one (scale, zero).

    ``param_bits`` is the per-parameter storage width used in compression
    accounting (16 = half precision), not the in-memory representation.
    """

    group_size: int = 32
    param_bits: int = 16

    def __post_init__(self) -> None:
        if self.group_size < 2 or self.group_size % 2 != 0:
            raise ConfigError(f"group_size must be even and >= 2, got {self.group_size}")
        if self.param_bits < 1:
            raise ConfigError(f"param_bits must be >= 1, got {self.param_bits}")


@dataclass
class PackedQuantTensor:
    """A sequence of int4-quantized vectors with per-group affine params.

    Arrays are marked read-only after construction; treat instances as
    immutable values.
    """

    packed_words: np.ndarray  # (num_vectors, words_per_vector) uint32
    scales: np.ndarray  # (num_vectors, groups_per_vector) float32
    zeros: np.ndarray  # (num_vectors, groups_per_vector) float32
    num_vectors: int
    dim: int
    params: Int4GroupParams

    def __post_init__(self) -> None:
        g = self.params.group_size
        if self.dim < 1:
            raise DimensionError(f"dim must be >= 1, got {self.dim}")
        groups = -(-self.dim // g)
        words = -(-(groups * g) // 8)
        expect = {
            "packed_words": ((self.num_vectors, words), np.uint32),
            "scales": ((self.num_vectors, groups), np.float32),
            "zeros": ((self.num_vectors, groups), np.float32),
        }
        for name, (shape, dtype) in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape or arr.dtype != dtype:
                raise DimensionError(
                    f"{name}: expected shape {shape} dtype {dtype}, "
                    f"got {arr.shape} {arr.dtype}"
                )

    @property
    def groups_per_vector(self) -> int:
        return self.scales.shape[1]

    @property
    def dim_padded(self) -> int:
        return self.groups_per_vector * self.params.group_size

    @property
    def words_per_vector(self) -> int:
        return self.packed_words.shape[1]

    def __repr__(self) -> str:
        return (
            f"PackedQuantTensor(num_vectors={self.num_vectors}, dim={self.dim}, "
            f"group_size={self.params.group_size}, "
            f"packed_bytes={self.packed_words.nbytes})"
        )


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# Nibble packing
# ---------------------------------------------------------------------------


def pack_nibbles(nibbles: np.ndarray) -> np.ndarray:
    """Pack nibble values (flat, length a multiple of 8) into uint32 words."""
    nib = np.ascontiguousarray(nibbles, dtype=np.uint32)
    if nib.ndim != 1 or nib.shape[0] % 8 != 0:
        raise DimensionError("pack_nibbles needs a flat array with length a multiple of 8")
    if nib.size and nib.max() > 15:
        raise NumericError("nibble values must be in [0, 15]")
    grouped = nib.reshape(-1, 8)
    words = np.zeros(grouped.shape[0], dtype=np.uint32)
    for j in range(8):
        words |= grouped[:, j] << np.uint32(4 * j)
    return words


def unpack_nibbles(words: np.ndarray, count: int) -> np.ndarray:
    """Inverse of ``pack_nibbles``: first ``count`` nibbles as uint8."""
    w = np.ascontiguousarray(words, dtype=np.uint32)
    if count > 8 * w.shape[0]:
        raise BoundsError(f"cannot unpack {count} nibbles from {w.shape[0]} words")
    out = np.empty((w.shape[0], 8), dtype=np.uint8)
    for j in range(8):
        out[:, j] = (w >> np.uint32(4 * j)) & np.uint32(0xF)
    return out.reshape(-1)[:count]


# ---------------------------------------------------------------------------
# Encode / decode
# ---------------------------------------------------------------------------


def int4_encode_matrix(x: np.ndarray, params: Int4GroupParams | None = None) -> PackedQuantTensor:
    """Quantize each row of ``x`` independently.

    Rows are zero-padded up to a multiple of the group size; padding is
    encoded like any other element and dropped again at decode.
    """
    params = params or Int4GroupParams()
    g = params.group_size
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"expected (num_vectors, dim) input, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("cannot quantize non-finite values")
    n, dim = x.shape
    groups = -(-dim // g)
    dp = groups * g

    xp = np.zeros((n, dp), dtype=np.float64)
    xp[:, :dim] = x
    grp = xp.reshape(n, groups, g)

    mn = grp.min(axis=2)
    mx = grp.max(axis=2)
    scales = ((mx - mn) / 15.0).astype(np.float32)
    const = scales == np.float32(0.0)  # includes underflowed micro-ranges

    safe_s = np.where(const, np.float32(1.0), scales).astype(np.float64)
    z64 = np.where(const, mn, -mn / safe_s)
    zeros = z64.astype(np.float32)
    if not np.all(np.isfinite(zeros)):
        raise NumericError("group zero-point exceeds float32 range (min/scale too large)")

    # Round against the values decode will actually use (the float32 params).
    q = np.rint(grp / safe_s[:, :, None] + zeros.astype(np.float64)[:, :, None])
    q = np.clip(q, 0.0, 15.0)
    q = np.where(const[:, :, None], 0.0, q).astype(np.uint32).reshape(n, dp)

    words_per_vec = -(-dp // 8)
    padded = np.zeros((n, words_per_vec * 8), dtype=np.uint32)
    padded[:, :dp] = q
    words = np.zeros((n, words_per_vec), dtype=np.uint32)
    for j in range(8):
        words |= padded[:, j::8] << np.uint32(4 * j)

    return PackedQuantTensor(
        packed_words=_freeze(words),
        scales=_freeze(scales),
        zeros=_freeze(zeros),
        num_vectors=n,
        dim=dim,
        params=params,
    )


def int4_encode(x: np.ndarray, params: Int4GroupParams | None = None) -> PackedQuantTensor:
    """Quantize a single vector (``num_vectors == 1`` tensor)."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1 or x.shape[0] < 1:
        raise DimensionError(f"expected a 1-D vector, got shape {x.shape}")
    return int4_encode_matrix(x.reshape(1, -1), params)


def _check_index(t: PackedQuantTensor, index: int) -> None:
    if not 0 <= index < t.num_vectors:
        raise BoundsError(f"vector index {index} out of range [0, {t.num_vectors})")


def _decode_rows(t: PackedQuantTensor, rows: np.ndarray) -> np.ndarray:
    g = t.params.group_size
    words = t.packed_words[rows]
    nib = np.empty((words.shape[0], t.words_per_vector * 8), dtype=np.float64)
    for j in range(8):
        nib[:, j::8] = ((words >> np.uint32(4 * j)) & np.uint32(0xF)).astype(np.float64)
    nib = nib[:, : t.dim_padded].reshape(words.shape[0], t.groups_per_vector, g)
    s = t.scales[rows].astype(np.float64)[:, :, None]
    z = t.zeros[rows].astype(np.float64)[:, :, None]
    out = np.where(s == 0.0, z, (nib - z) * s)
    return out.reshape(words.shape[0], t.dim_padded)[:, : t.dim].astype(np.float32)


def int4_decode(t: PackedQuantTensor, vector_index: int) -> np.ndarray:
    """Reconstruct one vector: ``(nibble - z) * s`` per group, sentinel-aware."""
    _check_index(t, vector_index)
    return _decode_rows(t, np.array([vector_index]))[0]


def int4_decode_all(t: PackedQuantTensor, probe=None, label: str = "decoded_matrix") -> np.ndarray:
    """Materialize the full (num_vectors, dim) float matrix.

    This is the buffer the fused kernels exist to avoid; when ``probe`` is
    given the allocation is reported so memory-shape tests can see it.
    """
    if probe is not None:
        with probe.transient(label, t.num_vectors * t.dim * 4):
            return _decode_rows(t, np.arange(t.num_vectors))
    return _decode_rows(t, np.arange(t.num_vectors))


# ---------------------------------------------------------------------------
# Compressed-domain dot products
# ---------------------------------------------------------------------------


@njit(cache=True)
def _dot_row_scalar(q, words, scales, zeros, row, g):
    # For 4-aligned groups, sub-accumulate per 16-bit half so the partial
    # structure matches the vectorized path; otherwise walk elements.
    groups = scales.shape[1]
    aligned = g % 4 == 0
    acc = np.float32(0.0)
    for t in range(groups):
        s = scales[row, t]
        qsum = np.float32(0.0)
        for e in range(t * g, (t + 1) * g):
            qsum += q[e]
        if s == np.float32(0.0):
            acc += zeros[row, t] * qsum
            continue
        gacc = np.float32(0.0)
        if aligned:
            for h in range(t * g // 4, (t + 1) * g // 4):
                word = words[row, h >> 1]
                half = np.uint32((word >> np.uint32(16 * (h & 1))) & np.uint32(0xFFFF))
                p = np.float32(0.0)
                for j in range(4):
                    nib = np.float32((half >> np.uint32(4 * j)) & np.uint32(0xF))
                    p += q[4 * h + j] * nib
                gacc += p
        else:
            for e in range(t * g, (t + 1) * g):
                word = words[row, e >> 3]
                nib = np.float32((word >> np.uint32(4 * (e & 7))) & np.uint32(0xF))
                gacc += q[e] * nib
        acc += s * gacc - (s * zeros[row, t]) * qsum
    return acc


@njit(cache=True)
def _dot_row_vectorized(q, words, scales, zeros, row, g):
    groups = scales.shape[1]
    acc = np.float32(0.0)
    for t in range(groups):
        s = scales[row, t]
        qsum = np.float32(0.0)
        for e in range(t * g, (t + 1) * g):
            qsum += q[e]
        if s == np.float32(0.0):
            acc += zeros[row, t] * qsum
            continue
        gacc = np.float32(0.0)
        for h in range(t * g // 4, (t + 1) * g // 4):
            word = words[row, h >> 1]
            half = np.uint32((word >> np.uint32(16 * (h & 1))) & np.uint32(0xFFFF))
            p = np.float32(0.0)
            p += q[4 * h + 0] * np.float32(half & np.uint32(0x000F))
            p += (q[4 * h + 1] / np.float32(16.0)) * np.float32(half & np.uint32(0x00F0))
            p += (q[4 * h + 2] / np.float32(256.0)) * np.float32(half & np.uint32(0x0F00))
            p += (q[4 * h + 3] / np.float32(4096.0)) * np.float32(half & np.uint32(0xF000))
            gacc += p
        acc += s * gacc - (s * zeros[row, t]) * qsum
    return acc


def _padded_query(q: np.ndarray, t: PackedQuantTensor) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.float32)
    if q.ndim != 1 or q.shape[0] != t.dim:
        raise DimensionError(f"query length {q.shape} does not match tensor dim {t.dim}")
    qp = np.zeros(t.words_per_vector * 8, dtype=np.float32)
    qp[: t.dim] = q
    return qp


def int4_dot_scalar(q: np.ndarray, t: PackedQuantTensor, vector_index: int) -> float:
    """dot(q, decode(row)) computed in the compressed domain, one nibble at a time."""
    _check_index(t, vector_index)
    qp = _padded_query(q, t)
    return float(_dot_row_scalar(qp, t.packed_words, t.scales, t.zeros, vector_index, t.params.group_size))


def int4_dot_vectorized(q: np.ndarray, t: PackedQuantTensor, vector_index: int) -> float:
    """Masked-halfword variant; bit-identical partials to the scalar path.

    Requires the group size to be a multiple of 4 so 16-bit halves never
    straddle a group boundary.
    """
    if t.params.group_size % 4 != 0:
        raise ConfigError("vectorized nibble dot requires group_size % 4 == 0")
    _check_index(t, vector_index)
    qp = _padded_query(q, t)
    return float(_dot_row_vectorized(qp, t.packed_words, t.scales, t.zeros, vector_index, t.params.group_size))


@njit(cache=True)
def _partials_scalar(q, words):
    out = np.empty(2 * words.shape[0], dtype=np.float32)
    for w in range(words.shape[0]):
        word = words[w]
        for h in range(2):
            half = np.uint32((word >> np.uint32(16 * h)) & np.uint32(0xFFFF))
            p = np.float32(0.0)
            for j in range(4):
                nib = np.float32((half >> np.uint32(4 * j)) & np.uint32(0xF))
                p += q[8 * w + 4 * h + j] * nib
            out[2 * w + h] = p
    return out


@njit(cache=True)
def _partials_vectorized(q, words):
    out = np.empty(2 * words.shape[0], dtype=np.float32)
    for w in range(words.shape[0]):
        word = words[w]
        for h in range(2):
            half = np.uint32((word >> np.uint32(16 * h)) & np.uint32(0xFFFF))
            base = 8 * w + 4 * h
            p = np.float32(0.0)
            p += q[base + 0] * np.float32(half & np.uint32(0x000F))
            p += (q[base + 1] / np.float32(16.0)) * np.float32(half & np.uint32(0x00F0))
            p += (q[base + 2] / np.float32(256.0)) * np.float32(half & np.uint32(0x0F00))
            p += (q[base + 3] / np.float32(4096.0)) * np.float32(half & np.uint32(0xF000))
            out[2 * w + h] = p
    return out


def halfword_partials(q: np.ndarray, words: np.ndarray, path: str) -> np.ndarray:
    """Per-16-bit-half partial dot sums, for equivalence testing.

    ``q`` holds 8 query values per word (one per nibble); the result has
    two float32 partials per word.  ``path`` selects ``"scalar"`` or
    ``"vectorized"``.
    """
    q = np.ascontiguousarray(q, dtype=np.float32)
    w = np.ascontiguousarray(words, dtype=np.uint32)
    if q.shape[0] != 8 * w.shape[0]:
        raise DimensionError("need exactly 8 query values per packed word")
    if path == "scalar":
        return _partials_scalar(q, w)
    if path == "vectorized":
        return _partials_vectorized(q, w)
    raise ConfigError(f"unknown partials path: {path!r}")


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def compression_ratio(bits_per_element: int, group_size: int, param_bits: int) -> float:
    """FP16 bits over quantized bits per group, params amortized.

    ``(16 * g) / (bits * g + 2 * param_bits)`` — e.g. 4-bit with g=32 and
    16-bit params gives exactly 3.2.
    """
    if bits_per_element < 1 or group_size < 1 or param_bits < 1:
        raise ConfigError("compression_ratio arguments must all be >= 1")
    return (16.0 * group_size) / (bits_per_element * group_size + 2.0 * param_bits)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def write_packed(fp, t: PackedQuantTensor) -> None:
    """Write the documented blob (16-byte header + arrays) to a binary file."""
    fp.write(struct.pack("<4sHHII", _MAGIC, _VERSION, t.params.group_size, t.dim, t.num_vectors))
    fp.write(np.ascontiguousarray(t.packed_words, dtype="<u4").tobytes())
    fp.write(np.ascontiguousarray(t.scales, dtype="<f4").tobytes())
    fp.write(np.ascontiguousarray(t.zeros, dtype="<f4").tobytes())


def read_packed(fp) -> PackedQuantTensor:
    """Read one blob written by ``write_packed``."""
    header = fp.read(16)
    if len(header) != 16:
        raise NumericError("truncated packed-tensor header")
    magic, version, g, dim, count = struct.unpack("<4sHHII", header)
    if magic != _MAGIC:
        raise NumericError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise NumericError(f"unsupported packed-tensor version {version}")
    params = Int4GroupParams(group_size=g)
    groups = -(-dim // g)
    words_per_vec = -(-(groups * g) // 8)

    def _read(dtype, n, shape):
        raw = fp.read(np.dtype(dtype).itemsize * n)
        if len(raw) != np.dtype(dtype).itemsize * n:
            raise NumericError("truncated packed-tensor payload")
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.lstrip("<"))

    words = _read("<u4", count * words_per_vec, (count, words_per_vec))
    scales = _read("<f4", count * groups, (count, groups))
    zeros = _read("<f4", count * groups, (count, groups))
    return PackedQuantTensor(
        packed_words=_freeze(np.ascontiguousarray(words, dtype=np.uint32)),
        scales=_freeze(np.ascontiguousarray(scales, dtype=np.float32)),
        zeros=_freeze(np.ascontiguousarray(zeros, dtype=np.float32)),
        num_vectors=count,
        dim=dim,
        params=params,
    )


def save_packed(path, t: PackedQuantTensor) -> None:
    with open(path, "wb") as fp:
        write_packed(fp, t)


def load_packed(path) -> PackedQuantTensor:
    with open(path, "rb") as fp:
        return read_packed(fp)
