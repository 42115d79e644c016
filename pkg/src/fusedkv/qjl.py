"""Sign-bit random-projection sketches for inner-product estimation.

Keys are projected through a seeded Gaussian matrix and only the signs of
the projections are stored (one bit each, exact zeros map to +1), together
with the key norm.  Queries stay in full precision: the score estimator is

    score(q, k)  ~=  ||k|| * sqrt(pi/2) / m * sum_i (S q)_i * sign((S k)_i)

which is unbiased for <q, k> in expectation over the Gaussian projection
(the sqrt(pi/2) factor is the standard one-bit correction
E[X sign(Y)] = sqrt(2/pi) * cov(X, Y) / std(Y) for jointly Gaussian X, Y).

Sign bits scale-invariant in the key; variance shrinks as the sketch width
``m`` grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fusedkv.errors import BoundsError, ConfigError, DimensionError
from fusedkv.tensor import SeededRng, as_matrix, as_vector, gaussian_matrix

__all__ = ["QjlSketch", "qjl_encode", "qjl_encode_matrix", "qjl_score", "qjl_scores"]


@dataclass
class QjlSketch:
    """Packed sign bits (+ norms) for a batch of keys under one projection."""

    sign_bits: np.ndarray  # (num_keys, ceil(m / 8)) uint8, bit i of key -> byte i//8 bit i%8
    key_norms: np.ndarray  # (num_keys,) float32
    m: int
    projection_seed: int
    dim: int

    @property
    def num_keys(self) -> int:
        return self.sign_bits.shape[0]

    def signs(self, key_index: int) -> np.ndarray:
        """Unpack one key's bits to a float32 {-1, +1} vector of length m."""
        if not 0 <= key_index < self.num_keys:
            raise BoundsError(f"key index {key_index} out of range [0, {self.num_keys})")
        bits = np.unpackbits(self.sign_bits[key_index], bitorder="little")[: self.m]
        return (bits.astype(np.float32) * 2.0 - 1.0).astype(np.float32)


def _projection(seed: int, m: int, dim: int) -> np.ndarray:
    return gaussian_matrix(SeededRng(seed), m, dim)


def qjl_encode_matrix(keys: np.ndarray, m: int, seed: int) -> QjlSketch:
    """Sketch each row of ``keys`` with a shared seeded projection."""
    if m < 1:
        raise ConfigError(f"sketch width m must be >= 1, got {m}")
    keys = as_matrix(keys, "keys")
    proj = _projection(seed, m, keys.shape[1])
    projected = keys @ proj.T  # (num_keys, m)
    bits = (projected >= 0.0).astype(np.uint8)  # sign(0) -> +1
    packed = np.packbits(bits, axis=1, bitorder="little")
    norms = np.linalg.norm(keys.astype(np.float64), axis=1).astype(np.float32)
    return QjlSketch(
        sign_bits=packed,
        key_norms=norms,
        m=m,
        projection_seed=seed,
        dim=keys.shape[1],
    )


def qjl_encode(k: np.ndarray, m: int, seed: int) -> QjlSketch:
    """Sketch a single key."""
    kv = as_vector(k, "key")
    return qjl_encode_matrix(kv.reshape(1, -1), m, seed)


def qjl_scores(q: np.ndarray, sk: QjlSketch) -> np.ndarray:
    """Estimated <q, k> for every sketched key."""
    q = as_vector(q, "query")
    if q.shape[0] != sk.dim:
        raise DimensionError(f"query length {q.shape[0]} does not match sketch dim {sk.dim}")
    proj = _projection(sk.projection_seed, sk.m, sk.dim)
    qp = proj @ q  # (m,)
    bits = np.unpackbits(sk.sign_bits, axis=1, bitorder="little")[:, : sk.m]
    signs = bits.astype(np.float64) * 2.0 - 1.0
    scale = sk.key_norms.astype(np.float64) * math.sqrt(math.pi / 2.0) / sk.m
    return (scale * (signs @ qp.astype(np.float64))).astype(np.float32)


def qjl_score(q: np.ndarray, sk: QjlSketch, key_index: int) -> float:
    """Estimated <q, k> for one key."""
    if not 0 <= key_index < sk.num_keys:
        raise BoundsError(f"key index {key_index} out of range [0, {sk.num_keys})")
    q = as_vector(q, "query")
    if q.shape[0] != sk.dim:
        raise DimensionError(f"query length {q.shape[0]} does not match sketch dim {sk.dim}")
    proj = _projection(sk.projection_seed, sk.m, sk.dim)
    qp = (proj @ q).astype(np.float64)
    est = float(qp @ sk.signs(key_index).astype(np.float64))
    return float(sk.key_norms[key_index]) * math.sqrt(math.pi / 2.0) / sk.m * est
