"""Append-only int4 KV cache per layer, with hybrid prefill/decode routing.

Each appended token row is quantized independently (group boundaries never
straddle tokens), so appending is local: the packed bytes of positions
``[0, n)`` are a prefix of those of ``[0, n + k)``.  Storage grows by
amortized doubling; published rows are never rewritten.

Routing policy for an incoming step with ``s_q`` query tokens against
``cached`` stored tokens:

* ``s_q > 1``            -> Prefill: full-precision attention for the new
                            block, then quantize-and-append it.
* ``s_q == 1, cached >= 32`` -> FusedDecode: fused kernel straight from the
                            packed cache (split-K once past one chunk).
* ``s_q == 1, cached < 32``  -> FallbackDecode: dequantize-then-attend; the
                            fused kernel's setup cost is not worth it on a
                            cold cache.

Snapshot file: 16-byte header (magic ``FKVS``, version, kv_heads, head_dim,
num_tokens) followed, per head, by the key blob then the value blob in the
packed-tensor format of :mod:`fusedkv.quant`.

Concurrency: single writer (the decode loop appends), any number of
readers.  Appends fill rows beyond ``num_tokens`` before publishing the
new count, and ``keys_packed``/``values_packed`` views are bounded by the
count they were taken at, so a reader never observes a partially written
row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from fusedkv.attention import (
    AttentionConfig,
    fused_int4_attention,
    reference_attention,
    splitk_attention,
)
from fusedkv.errors import ConfigError, DimensionError, EmptyCacheError, NumericError
from fusedkv.probe import AllocationProbe, default_probe
from fusedkv.quant import (
    Int4GroupParams,
    PackedQuantTensor,
    int4_decode_all,
    int4_encode_matrix,
    read_packed,
    write_packed,
)

__all__ = [
    "RoutePath",
    "RouteReason",
    "RoutingDecision",
    "WARMUP_THRESHOLD",
    "route",
    "LayerKvCache",
    "decode_step",
    "prefill",
    "save_snapshot",
    "load_snapshot",
]

_MAGIC = b"FKVS"
_VERSION = 1

WARMUP_THRESHOLD = 32


class RoutePath(Enum):
    PREFILL = "prefill"
    FUSED_DECODE = "fused_decode"
    FALLBACK_DECODE = "fallback_decode"


class RouteReason(Enum):
    MULTI_TOKEN = "multi_token"
    WARMUP = "warmup"
    READY = "ready"


@dataclass(frozen=True)
class RoutingDecision:
    path: RoutePath
    reason: RouteReason


def route(s_q: int, cached: int, warmup_threshold: int = WARMUP_THRESHOLD) -> RoutingDecision:
    """Pick the attention path for ``s_q`` query tokens over ``cached`` tokens."""
    if s_q > 1:
        return RoutingDecision(RoutePath.PREFILL, RouteReason.MULTI_TOKEN)
    if s_q == 1 and cached >= warmup_threshold:
        return RoutingDecision(RoutePath.FUSED_DECODE, RouteReason.READY)
    return RoutingDecision(RoutePath.FALLBACK_DECODE, RouteReason.WARMUP)


class LayerKvCache:
    """Growing quantized K/V store for one layer (``kv_heads`` heads)."""

    def __init__(
        self,
        kv_heads: int,
        head_dim: int,
        params: Int4GroupParams | None = None,
    ) -> None:
        if kv_heads < 1 or head_dim < 1:
            raise ConfigError(f"kv_heads and head_dim must be >= 1, got ({kv_heads}, {head_dim})")
        self.kv_heads = kv_heads
        self.head_dim = head_dim
        self.params = params or Int4GroupParams()
        g = self.params.group_size
        self._groups = -(-head_dim // g)
        self._words = -(-(self._groups * g) // 8)
        self._num_tokens = 0
        self._cap = 0
        self._kw = np.zeros((kv_heads, 0, self._words), dtype=np.uint32)
        self._vw = np.zeros_like(self._kw)
        self._ks = np.zeros((kv_heads, 0, self._groups), dtype=np.float32)
        self._kz = np.zeros_like(self._ks)
        self._vs = np.zeros_like(self._ks)
        self._vz = np.zeros_like(self._ks)

    @property
    def num_tokens(self) -> int:
        return self._num_tokens

    def _grow(self, needed: int) -> None:
        if needed <= self._cap:
            return
        new_cap = max(8, self._cap * 2, needed)

        def bigger(arr: np.ndarray) -> np.ndarray:
            out = np.zeros((self.kv_heads, new_cap, arr.shape[2]), dtype=arr.dtype)
            out[:, : self._num_tokens] = arr[:, : self._num_tokens]
            return out

        self._kw = bigger(self._kw)
        self._vw = bigger(self._vw)
        self._ks = bigger(self._ks)
        self._kz = bigger(self._kz)
        self._vs = bigger(self._vs)
        self._vz = bigger(self._vz)
        self._cap = new_cap

    def _normalize_rows(self, x: np.ndarray, name: str) -> np.ndarray:
        arr = np.ascontiguousarray(x, dtype=np.float32)
        if arr.ndim == 2:
            if self.kv_heads != 1:
                raise DimensionError(f"{name}: 2-D rows only valid for a single-head cache")
            arr = arr[:, None, :]
        if arr.ndim != 3 or arr.shape[1] != self.kv_heads or arr.shape[2] != self.head_dim:
            raise DimensionError(
                f"{name}: expected (tokens, {self.kv_heads}, {self.head_dim}), got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{name} contains NaN or Inf")
        return arr

    def append_tokens(self, k_new: np.ndarray, v_new: np.ndarray) -> int:
        """Quantize and append token rows; returns the new token count."""
        k = self._normalize_rows(k_new, "k_new")
        v = self._normalize_rows(v_new, "v_new")
        if k.shape[0] != v.shape[0]:
            raise DimensionError(f"k_new/v_new row counts differ: {k.shape[0]} vs {v.shape[0]}")
        count = k.shape[0]
        if count == 0:
            return self._num_tokens
        self._grow(self._num_tokens + count)
        lo, hi = self._num_tokens, self._num_tokens + count
        for h in range(self.kv_heads):
            tk = int4_encode_matrix(k[:, h, :], self.params)
            tv = int4_encode_matrix(v[:, h, :], self.params)
            self._kw[h, lo:hi] = tk.packed_words
            self._ks[h, lo:hi] = tk.scales
            self._kz[h, lo:hi] = tk.zeros
            self._vw[h, lo:hi] = tv.packed_words
            self._vs[h, lo:hi] = tv.scales
            self._vz[h, lo:hi] = tv.zeros
        self._num_tokens = hi
        return self._num_tokens

    def _view(self, words: np.ndarray, scales: np.ndarray, zeros: np.ndarray, head: int) -> PackedQuantTensor:
        n = self._num_tokens

        def ro(a: np.ndarray) -> np.ndarray:
            v = a[head, :n]
            v.flags.writeable = False
            return v

        return PackedQuantTensor(
            packed_words=ro(words),
            scales=ro(scales),
            zeros=ro(zeros),
            num_vectors=n,
            dim=self.head_dim,
            params=self.params,
        )

    def keys_packed(self, head: int = 0) -> PackedQuantTensor:
        """Zero-copy read-only view of this head's packed keys."""
        return self._view(self._kw, self._ks, self._kz, head)

    def values_packed(self, head: int = 0) -> PackedQuantTensor:
        """Zero-copy read-only view of this head's packed values."""
        return self._view(self._vw, self._vs, self._vz, head)

    def __repr__(self) -> str:
        return (
            f"LayerKvCache(kv_heads={self.kv_heads}, head_dim={self.head_dim}, "
            f"tokens={self._num_tokens}, capacity={self._cap})"
        )


# ---------------------------------------------------------------------------
# Decode / prefill drivers
# ---------------------------------------------------------------------------


def decode_step(
    cache: LayerKvCache,
    queries: np.ndarray,
    cfg: AttentionConfig,
    probe: AllocationProbe | None = None,
    force_path: str | None = None,
) -> np.ndarray:
    """One decode step for all query heads against the cache.

    ``queries`` is (query_heads, head_dim) with
    ``query_heads == cfg.gqa_factor * cache.kv_heads``.  ``force_path``
    overrides routing with ``"fused"``, ``"splitk"`` or ``"fallback"``
    (used by path-equivalence tests).
    """
    if cache.num_tokens < 1:
        raise EmptyCacheError("decode_step on an empty cache")
    q = np.ascontiguousarray(queries, dtype=np.float32)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != cache.head_dim:
        raise DimensionError(f"queries must be (heads, {cache.head_dim}), got {q.shape}")
    if q.shape[0] != cfg.gqa_factor * cache.kv_heads:
        raise ConfigError(
            f"{q.shape[0]} query heads != gqa_factor {cfg.gqa_factor} x {cache.kv_heads} kv heads"
        )
    probe = probe or default_probe()

    if force_path is None:
        decision = route(1, cache.num_tokens)
        if decision.path is RoutePath.FUSED_DECODE:
            path = "splitk" if cache.num_tokens > cfg.chunk_size else "fused"
        else:
            path = "fallback"
    elif force_path in ("fused", "splitk", "fallback"):
        path = force_path
    else:
        raise ConfigError(f"unknown force_path {force_path!r}")

    out = np.empty((q.shape[0], cache.head_dim), dtype=np.float32)
    if path == "fallback":
        for h in range(cache.kv_heads):
            kq = cache.keys_packed(h)
            vq = cache.values_packed(h)
            nbytes = kq.num_vectors * kq.dim * 4
            with probe.transient("decoded_keys", nbytes):
                keys = int4_decode_all(kq)
                with probe.transient("decoded_values", nbytes):
                    values = int4_decode_all(vq)
                    for qh in range(h * cfg.gqa_factor, (h + 1) * cfg.gqa_factor):
                        out[qh] = reference_attention(q[qh], keys, values, cfg)
        return out

    kernel = splitk_attention if path == "splitk" else fused_int4_attention
    for qh in range(q.shape[0]):
        h = qh // cfg.gqa_factor
        out[qh] = kernel(q[qh], cache.keys_packed(h), cache.values_packed(h), cfg, probe)
    return out


def prefill(
    cache: LayerKvCache,
    queries: np.ndarray,
    k_new: np.ndarray,
    v_new: np.ndarray,
    cfg: AttentionConfig,
    probe: AllocationProbe | None = None,
) -> np.ndarray:
    """Multi-token step: attend in full precision, then quantize-and-append.

    ``queries`` is (tokens, query_heads, head_dim); the new K/V block is
    used unquantized for this step's attention (previously cached tokens
    are dequantized), then appended to the cache.  No causal masking:
    every query row sees the whole block.
    """
    probe = probe or default_probe()
    qs = np.ascontiguousarray(queries, dtype=np.float32)
    if qs.ndim != 3 or qs.shape[2] != cache.head_dim:
        raise DimensionError(f"queries must be (tokens, heads, {cache.head_dim}), got {qs.shape}")
    if qs.shape[1] != cfg.gqa_factor * cache.kv_heads:
        raise ConfigError("query head count does not match gqa_factor x kv_heads")
    k = cache._normalize_rows(k_new, "k_new")
    v = cache._normalize_rows(v_new, "v_new")
    if k.shape[0] != qs.shape[0]:
        raise DimensionError("prefill needs one K/V row per query token")

    out = np.empty_like(qs)
    for h in range(cache.kv_heads):
        if cache.num_tokens > 0:
            kq = cache.keys_packed(h)
            old_k = int4_decode_all(kq, probe, "decoded_keys")
            old_v = int4_decode_all(cache.values_packed(h), probe, "decoded_values")
            keys = np.concatenate([old_k, k[:, h, :]])
            values = np.concatenate([old_v, v[:, h, :]])
        else:
            keys = k[:, h, :]
            values = v[:, h, :]
        for t in range(qs.shape[0]):
            for qh in range(h * cfg.gqa_factor, (h + 1) * cfg.gqa_factor):
                out[t, qh] = reference_attention(qs[t, qh], keys, values, cfg)
    cache.append_tokens(k, v)
    return out


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


def save_snapshot(cache: LayerKvCache, path) -> None:
    """Write header + per-head K/V packed blobs."""
    with open(path, "wb") as fp:
        fp.write(
            struct.pack(
                "<4sHHII", _MAGIC, _VERSION, cache.kv_heads, cache.head_dim, cache.num_tokens
            )
        )
        for h in range(cache.kv_heads):
            write_packed(fp, cache.keys_packed(h))
            write_packed(fp, cache.values_packed(h))


def load_snapshot(path) -> LayerKvCache:
    """Rebuild a cache from :func:`save_snapshot` output."""
    with open(path, "rb") as fp:
        header = fp.read(16)
        if len(header) != 16:
            raise NumericError("truncated cache snapshot header")
        magic, version, kv_heads, head_dim, num_tokens = struct.unpack("<4sHHII", header)
        if magic != _MAGIC:
            raise NumericError(f"bad snapshot magic {magic!r}")
        if version != _VERSION:
            raise NumericError(f"unsupported snapshot version {version}")
        blobs: list[tuple[PackedQuantTensor, PackedQuantTensor]] = []
        for _ in range(kv_heads):
            tk = read_packed(fp)
            tv = read_packed(fp)
            if tk.num_vectors != num_tokens or tk.dim != head_dim:
                raise NumericError("snapshot blob does not match header")
            blobs.append((tk, tv))
    params = blobs[0][0].params if blobs else None
    cache = LayerKvCache(kv_heads, head_dim, params)
    if num_tokens:
        cache._grow(num_tokens)
        for h, (tk, tv) in enumerate(blobs):
            cache._kw[h, :num_tokens] = tk.packed_words
            cache._ks[h, :num_tokens] = tk.scales
            cache._kz[h, :num_tokens] = tk.zeros
            cache._vw[h, :num_tokens] = tv.packed_words
            cache._vs[h, :num_tokens] = tv.scales
            cache._vz[h, :num_tokens] = tv.zeros
        cache._num_tokens = num_tokens
    return cache
