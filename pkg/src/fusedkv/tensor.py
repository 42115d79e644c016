"""Dense float32 vectors/matrices, seeded randomness, and shared numerics.

Vectors and matrices are plain ``numpy`` arrays (``float32``, C order);
this module only adds validation helpers and the handful of primitives
the rest of the package builds on.

Reproducibility contracts:

* ``SeededRng`` wraps a fixed bit generator (PCG64), so the same seed
  yields the same stream on every platform.
* ``dot`` accumulates strictly left to right in float32.  This makes it
  bit-identical to a naive scalar loop, which lets oracle tests elsewhere
  compare against it exactly instead of within a tolerance.

Everything here is a pure function of its arguments (randomness included,
via the explicit seed), so concurrent use needs no synchronization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from fusedkv.errors import DegenerateInputError, DimensionError, NumericError

__all__ = [
    "SeededRng",
    "as_vector",
    "as_matrix",
    "gaussian_matrix",
    "gaussian_vector",
    "dot",
    "cosine_similarity",
]


@dataclass(frozen=True)
class SeededRng:
    """Deterministic random source: a 64-bit seed plus a pinned algorithm.

    ``algorithm`` is recorded so serialized experiment configs stay
    self-describing; only ``"pcg64"`` is supported.
    """

    seed: int
    algorithm: str = "pcg64"

    def __post_init__(self) -> None:
        if self.algorithm != "pcg64":
            raise NumericError(f"unsupported rng algorithm: {self.algorithm!r}")

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this seed's stream."""
        return np.random.Generator(np.random.PCG64(self.seed))

    def child(self, key: int) -> "SeededRng":
        """Derive an independent stream for sub-experiment ``key``."""
        mixed = np.random.SeedSequence([self.seed, key]).generate_state(1)[0]
        return SeededRng(int(mixed))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a finite, non-empty 1-D float32 array."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise DimensionError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains NaN or Inf")
    return arr


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float32 array with positive dimensions."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# Random construction
# ---------------------------------------------------------------------------


def gaussian_matrix(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    """(rows, cols) matrix of i.i.d. standard normals from the seeded stream."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"gaussian_matrix needs rows, cols >= 1, got ({rows}, {cols})")
    return rng.generator().standard_normal((rows, cols), dtype=np.float32)


def gaussian_vector(rng: SeededRng, n: int) -> np.ndarray:
    """Length-n vector of i.i.d. standard normals from the seeded stream."""
    if n < 1:
        raise DimensionError(f"gaussian_vector needs n >= 1, got {n}")
    return rng.generator().standard_normal(n, dtype=np.float32)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


@njit(cache=True)
def _dot_f32(a, b):
    acc = np.float32(0.0)
    for i in range(a.shape[0]):
        acc += a[i] * b[i]
    return acc


def dot(a, b) -> float:
    """Inner product with fixed left-to-right float32 accumulation.

    Bit-identical to ``acc += a[i] * b[i]`` over increasing ``i``; used as
    the exact reference for every compressed-domain dot in the package.
    """
    av = as_vector(a, "a")
    bv = as_vector(b, "b")
    if av.shape[0] != bv.shape[0]:
        raise DimensionError(f"dot length mismatch: {av.shape[0]} vs {bv.shape[0]}")
    return float(_dot_f32(av, bv))


def cosine_similarity(a, b) -> float:
    """cos(a, b) in [-1, 1]; raises on zero-norm inputs."""
    av = as_vector(a, "a")
    bv = as_vector(b, "b")
    if av.shape[0] != bv.shape[0]:
        raise DimensionError(f"cosine length mismatch: {av.shape[0]} vs {bv.shape[0]}")
    na = float(np.sqrt(_dot_f32(av, av)))
    nb = float(np.sqrt(_dot_f32(bv, bv)))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_similarity requires non-zero norms")
    c = float(_dot_f32(av, bv)) / (na * nb)
    return max(-1.0, min(1.0, c))
