"""Pairwise polar-coordinate quantizer for key/value vectors.

Coordinates are preconditioned by a seeded random rotation, then taken in
consecutive pairs ``(a, b) -> (r, theta)`` with ``r = hypot(a, b)`` kept in
full precision and ``theta = atan2(b, a)`` quantized uniformly over
``[-pi, pi)`` at ``angle_bits`` bits (codes map to bin centers, so the
angular error per pair is at most ``pi / 2**angle_bits``).

The rotation spreads energy across pairs and concentrates the angle
distribution; set ``identity_rotation=True`` to bypass it (useful for
exactness tests with on-grid angles).  4- and 5-bit codes are the
supported presets; other widths up to 20 bits are accepted for
convergence studies.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from fusedkv.errors import ConfigError, DimensionError
from fusedkv.tensor import as_matrix, as_vector

__all__ = [
    "PolarQuantTensor",
    "rotation_matrix",
    "polar_encode",
    "polar_decode",
    "polar_encode_matrix",
    "polar_decode_matrix",
]


@dataclass
class PolarQuantTensor:
    """Angle codes + per-pair radii for a batch of encoded vectors."""

    angle_codes: np.ndarray  # (num_vectors, dim // 2) uint16
    radii: np.ndarray  # (num_vectors, dim // 2) float32
    angle_bits: int
    precondition_seed: int
    identity_rotation: bool
    dim: int

    def __post_init__(self) -> None:
        pairs = self.dim // 2
        if self.angle_codes.shape != (self.num_vectors, pairs) or self.radii.shape != (
            self.num_vectors,
            pairs,
        ):
            raise DimensionError("angle_codes/radii shape mismatch")
        if self.angle_codes.size and int(self.angle_codes.max()) >= (1 << self.angle_bits):
            raise ConfigError("angle code out of range for angle_bits")

    @property
    def num_vectors(self) -> int:
        return self.angle_codes.shape[0]


@lru_cache(maxsize=16)
def rotation_matrix(seed: int, dim: int) -> np.ndarray:
    """Deterministic random rotation (orthogonal, det +1 columns signs fixed)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # make the factorization unique
    out = np.ascontiguousarray(q.astype(np.float32))
    out.flags.writeable = False
    return out


def _check_bits(angle_bits: int) -> None:
    if not 1 <= angle_bits <= 20:
        raise ConfigError(f"angle_bits must be in [1, 20], got {angle_bits}")


def polar_encode_matrix(
    x: np.ndarray,
    angle_bits: int,
    seed: int,
    identity_rotation: bool = False,
) -> PolarQuantTensor:
    """Encode each row of ``x`` (even dim required)."""
    _check_bits(angle_bits)
    x = as_matrix(x, "input")
    n, dim = x.shape
    if dim % 2 != 0:
        raise DimensionError(f"polar encoding needs an even dimension, got {dim}")
    y = x.astype(np.float64)
    if not identity_rotation:
        rot = rotation_matrix(seed, dim).astype(np.float64)
        y = y @ rot.T
    a = y[:, 0::2]
    b = y[:, 1::2]
    radii = np.hypot(a, b).astype(np.float32)
    theta = np.arctan2(b, a)  # in [-pi, pi]
    levels = 1 << angle_bits
    codes = np.floor((theta + np.pi) / (2.0 * np.pi) * levels).astype(np.int64)
    codes %= levels  # theta == +pi wraps to code 0
    return PolarQuantTensor(
        angle_codes=codes.astype(np.uint16),
        radii=radii,
        angle_bits=angle_bits,
        precondition_seed=seed,
        identity_rotation=identity_rotation,
        dim=dim,
    )


def polar_encode(
    x: np.ndarray,
    angle_bits: int,
    seed: int,
    identity_rotation: bool = False,
) -> PolarQuantTensor:
    """Encode a single vector."""
    xv = as_vector(x, "input")
    return polar_encode_matrix(xv.reshape(1, -1), angle_bits, seed, identity_rotation)


def decode_pairs(t: PolarQuantTensor) -> np.ndarray:
    """Reconstruct ``(r cos theta_hat, r sin theta_hat)`` pairs, pre-rotation."""
    levels = 1 << t.angle_bits
    theta_hat = -np.pi + (t.angle_codes.astype(np.float64) + 0.5) * (2.0 * np.pi / levels)
    r = t.radii.astype(np.float64)
    y = np.empty((t.num_vectors, t.dim), dtype=np.float64)
    y[:, 0::2] = r * np.cos(theta_hat)
    y[:, 1::2] = r * np.sin(theta_hat)
    return y


def polar_decode_matrix(t: PolarQuantTensor) -> np.ndarray:
    """Reconstruct all rows (inverse rotation applied last)."""
    y = decode_pairs(t)
    if not t.identity_rotation:
        rot = rotation_matrix(t.precondition_seed, t.dim).astype(np.float64)
        y = y @ rot
    return y.astype(np.float32)


def polar_decode(t: PolarQuantTensor) -> np.ndarray:
    """Reconstruct a single-vector tensor."""
    if t.num_vectors != 1:
        raise DimensionError("polar_decode expects a single-vector tensor; use polar_decode_matrix")
    return polar_decode_matrix(t)[0]
