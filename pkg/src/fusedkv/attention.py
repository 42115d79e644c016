"""Attention kernels: two-pass reference, fused int4 decode kernel, split-K.

The fused kernel handles one query position (a decode step).  It pre-scales
the query by the attention scale, walks the packed KV sequence once, and
for each position computes the score through the compressed-domain
vectorized nibble dot, applies the online-softmax update

    m' = max(m, a_i)
    l  = l * exp(m - m') + exp(a_i - m')
    o  = o * exp(m - m') + exp(a_i - m') * v_hat_i
    m  = m'

and dequantizes the value row element-by-element inside the loop.  No
``seq_len x head_dim`` buffer ever exists; scratch is a few head-dim-sized
arrays, reported to the allocation probe.

Split-K runs the same loop over ``ceil(S / chunk_size)`` chunks, each
producing a normalized partial output with its chunk max and exp-sum, and
merges them with the softmax-correcting reduction

    o = sum_c l_c exp(m_c - m_g) o_c / sum_c l_c exp(m_c - m_g).

Empty chunks (e.g. fully outside a sliding window) carry
``(zeros, -inf, 0)`` and drop out of the reduction arithmetically.

All reference arithmetic is float32; the documented tolerances (1e-5 fused
vs. two-pass oracle, 1e-6 split-K vs. single pass) are sized for float32
accumulation over sequences up to 4096.

Concurrency: kernel inputs are immutable during a call, and partials over
distinct chunks touch disjoint state, so they may run on any number of
threads; ``splitk_reduce`` only needs a happens-before edge from every
partial.  The reduction itself iterates in chunk-index order, so the
output does not depend on which thread produced which partial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from fusedkv.errors import (
    BoundsError,
    ConfigError,
    DimensionError,
    EmptyCacheError,
    NumericError,
)
from fusedkv.probe import AllocationProbe, default_probe
from fusedkv.quant import PackedQuantTensor, int4_decode_all
from fusedkv.tensor import as_matrix, as_vector

__all__ = [
    "AttentionConfig",
    "AttentionState",
    "PartialResult",
    "online_softmax_update",
    "reference_attention",
    "fused_int4_attention",
    "baseline_int4_attention",
    "fused_partial",
    "splitk_reduce",
    "splitk_attention",
    "gqa_attention",
    "windowed_mask_positions",
]


@dataclass(frozen=True)
class AttentionConfig:
    """Kernel parameters for one head geometry.

    ``attn_scale`` defaults to ``1/sqrt(head_dim)`` when None.  ``window``
    limits each query to the most recent ``window`` positions.
    """

    head_dim: int
    attn_scale: float | None = None
    gqa_factor: int = 1
    window: int | None = None
    chunk_size: int = 512

    def __post_init__(self) -> None:
        if self.head_dim < 1:
            raise ConfigError(f"head_dim must be >= 1, got {self.head_dim}")
        if self.attn_scale is not None and not self.attn_scale > 0:
            raise ConfigError(f"attn_scale must be > 0, got {self.attn_scale}")
        if self.gqa_factor < 1:
            raise ConfigError(f"gqa_factor must be >= 1, got {self.gqa_factor}")
        if self.window is not None and self.window < 1:
            raise ConfigError(f"window must be >= 1 when set, got {self.window}")
        if self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be >= 1, got {self.chunk_size}")

    @property
    def scale(self) -> float:
        return self.attn_scale if self.attn_scale is not None else 1.0 / math.sqrt(self.head_dim)


@dataclass
class AttentionState:
    """Online-softmax accumulator (pure-Python mirror of the kernel state)."""

    running_max: float = -math.inf
    exp_sum: float = 0.0
    out_accum: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))


def online_softmax_update(state: AttentionState, score: float, value_row: np.ndarray) -> AttentionState:
    """One position of the single-pass update, in float32 steps.

    Slow; exists as an independent formulation of the kernel recurrence for
    oracle tests and documentation.
    """
    v = as_vector(value_row, "value_row")
    if state.out_accum.shape[0] == 0:
        state.out_accum = np.zeros(v.shape[0], dtype=np.float32)
    m_new = max(state.running_max, score)
    corr = np.float32(math.exp(state.running_max - m_new))
    w = np.float32(math.exp(score - m_new))
    state.exp_sum = float(np.float32(np.float32(state.exp_sum) * corr + w))
    state.out_accum = (state.out_accum * corr + w * v).astype(np.float32)
    state.running_max = m_new
    return state


def windowed_mask_positions(seq_len: int, window: int, query_pos: int) -> tuple[int, int]:
    """Half-open position range a query at ``query_pos`` may attend to."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    return max(0, query_pos + 1 - window), min(seq_len, query_pos + 1)


# ---------------------------------------------------------------------------
# Reference path
# ---------------------------------------------------------------------------


def reference_attention(q: np.ndarray, keys: np.ndarray, values: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
    """Two-pass softmax(scale * q K^T) V with explicit max subtraction.

    The oracle for every fused path: dense float32 inputs, scores scaled
    after the dot product, full softmax normalization.
    """
    qv = as_vector(q, "q")
    k = as_matrix(keys, "keys")
    v = as_matrix(values, "values")
    if k.shape != v.shape:
        raise DimensionError(f"keys/values shape mismatch: {k.shape} vs {v.shape}")
    if qv.shape[0] != k.shape[1] or qv.shape[0] != cfg.head_dim:
        raise DimensionError(
            f"query dim {qv.shape[0]} does not match keys dim {k.shape[1]} / config {cfg.head_dim}"
        )
    if cfg.window is not None:
        start, _ = windowed_mask_positions(k.shape[0], cfg.window, k.shape[0] - 1)
        k = k[start:]
        v = v[start:]
    scores = (k @ qv) * np.float32(cfg.scale)
    m = scores.max()
    w = np.exp(scores - m)
    return ((w @ v) / w.sum()).astype(np.float32)


# ---------------------------------------------------------------------------
# Fused kernel
# ---------------------------------------------------------------------------


@njit(cache=True)
def _fused_range(qpre, qgsum, kw, ks, kz, vw, vs, vz, dim_padded, g, start, end):
    """Single-pass online-softmax attention over positions [start, end).

    Returns the *unnormalized* accumulator with its running max and
    exp-sum.  Scores use the masked-halfword dot; value rows are
    dequantized one element at a time into the accumulator.
    """
    groups = ks.shape[1]
    o = np.zeros(dim_padded, dtype=np.float32)
    m = np.float32(-np.inf)
    l = np.float32(0.0)
    for i in range(start, end):
        a = np.float32(0.0)
        for t in range(groups):
            s = ks[i, t]
            if s == np.float32(0.0):
                a += kz[i, t] * qgsum[t]
                continue
            gacc = np.float32(0.0)
            for h in range(t * g // 4, (t + 1) * g // 4):
                word = kw[i, h >> 1]
                half = np.uint32((word >> np.uint32(16 * (h & 1))) & np.uint32(0xFFFF))
                p = np.float32(0.0)
                p += qpre[4 * h + 0] * np.float32(half & np.uint32(0x000F))
                p += qpre[4 * h + 1] * np.float32(half & np.uint32(0x00F0))
                p += qpre[4 * h + 2] * np.float32(half & np.uint32(0x0F00))
                p += qpre[4 * h + 3] * np.float32(half & np.uint32(0xF000))
                gacc += p
            a += s * gacc - (s * kz[i, t]) * qgsum[t]
        m_new = max(m, a)
        corr = np.float32(math.exp(m - m_new))
        w = np.float32(math.exp(a - m_new))
        l = l * corr + w
        for t in range(groups):
            s = vs[i, t]
            z = vz[i, t]
            for e in range(t * g, (t + 1) * g):
                word = vw[i, e >> 3]
                nib = np.float32((word >> np.uint32(4 * (e & 7))) & np.uint32(0xF))
                val = z if s == np.float32(0.0) else (nib - z) * s
                o[e] = o[e] * corr + w * val
        m = m_new
    return o, m, l


def _prepared_query(q: np.ndarray, kq: PackedQuantTensor, scale: float):
    """Pad + pre-scale the query; build masked-dot inputs.

    Returns ``(qpre, qgsum)``: the per-nibble pre-divided query (absorbing
    the 16**j shift of each nibble lane) and per-group query sums for the
    affine correction term.
    """
    q = np.ascontiguousarray(q, dtype=np.float32)
    if q.ndim != 1 or q.shape[0] != kq.dim:
        raise DimensionError(f"query shape {q.shape} does not match packed dim {kq.dim}")
    if not np.all(np.isfinite(q)):
        raise NumericError("query contains NaN or Inf")
    dp = kq.words_per_vector * 8
    qp = np.zeros(dp, dtype=np.float32)
    qp[: kq.dim] = q
    qp *= np.float32(scale)
    qpre = qp.copy()
    qpre[1::4] /= np.float32(16.0)
    qpre[2::4] /= np.float32(256.0)
    qpre[3::4] /= np.float32(4096.0)
    g = kq.params.group_size
    qgsum = np.empty(kq.groups_per_vector, dtype=np.float32)
    for t in range(kq.groups_per_vector):
        acc = np.float32(0.0)
        for e in range(t * g, (t + 1) * g):
            acc += qp[e]
        qgsum[t] = acc
    return qpre, qgsum


def _validate_packed_pair(kq: PackedQuantTensor, vq: PackedQuantTensor, cfg: AttentionConfig) -> None:
    if kq.num_vectors == 0:
        raise EmptyCacheError("attention over an empty KV sequence")
    if kq.num_vectors != vq.num_vectors or kq.dim != vq.dim:
        raise DimensionError("key/value tensors disagree in count or dim")
    if kq.dim != cfg.head_dim:
        raise DimensionError(f"packed dim {kq.dim} does not match config head_dim {cfg.head_dim}")
    if kq.params.group_size % 4 != 0 or vq.params.group_size != kq.params.group_size:
        raise ConfigError("fused kernel requires matching group sizes divisible by 4")


def _fused_scratch_bytes(kq: PackedQuantTensor) -> int:
    # qpre + padded q + group sums + output accumulator; independent of S
    dp = kq.words_per_vector * 8
    return (3 * dp + kq.groups_per_vector) * 4


def fused_int4_attention(
    q: np.ndarray,
    kq: PackedQuantTensor,
    vq: PackedQuantTensor,
    cfg: AttentionConfig,
    probe: AllocationProbe | None = None,
) -> np.ndarray:
    """Single-query attention computed directly on packed int4 KV."""
    _validate_packed_pair(kq, vq, cfg)
    probe = probe or default_probe()
    seq_len = kq.num_vectors
    start = 0
    if cfg.window is not None:
        start, _ = windowed_mask_positions(seq_len, cfg.window, seq_len - 1)
    with probe.transient("fused_scratch", _fused_scratch_bytes(kq)):
        qpre, qgsum = _prepared_query(q, kq, cfg.scale)
        o, _, l = _fused_range(
            qpre, qgsum,
            kq.packed_words, kq.scales, kq.zeros,
            vq.packed_words, vq.scales, vq.zeros,
            kq.words_per_vector * 8, kq.params.group_size, start, seq_len,
        )
        return (o / l)[: kq.dim]


def baseline_int4_attention(
    q: np.ndarray,
    kq: PackedQuantTensor,
    vq: PackedQuantTensor,
    cfg: AttentionConfig,
    probe: AllocationProbe | None = None,
) -> np.ndarray:
    """Dequantize-then-attend: materializes both S x d float buffers.

    The comparison path the fused kernel is measured against; reports its
    full-matrix allocations to the probe.
    """
    _validate_packed_pair(kq, vq, cfg)
    probe = probe or default_probe()
    nbytes = kq.num_vectors * kq.dim * 4
    with probe.transient("decoded_keys", nbytes):
        keys = int4_decode_all(kq)
        with probe.transient("decoded_values", nbytes):
            values = int4_decode_all(vq)
            return reference_attention(q, keys, values, cfg)


# ---------------------------------------------------------------------------
# Split-K
# ---------------------------------------------------------------------------


@dataclass
class PartialResult:
    """Per-chunk triple: normalized output, chunk max, chunk exp-sum.

    An empty chunk (nothing attended) is ``(zeros, -inf, 0)``.
    ``chunk_index`` fixes the reduction order so results are deterministic
    no matter how partials were produced.
    """

    out_normalized: np.ndarray
    chunk_max: float
    chunk_expsum: float
    chunk_index: int = 0

    @property
    def is_empty(self) -> bool:
        return self.chunk_expsum == 0.0


def fused_partial(
    q: np.ndarray,
    kq: PackedQuantTensor,
    vq: PackedQuantTensor,
    cfg: AttentionConfig,
    chunk_index: int,
    probe: AllocationProbe | None = None,
) -> PartialResult:
    """Fused kernel restricted to one chunk of the position range."""
    _validate_packed_pair(kq, vq, cfg)
    probe = probe or default_probe()
    seq_len = kq.num_vectors
    num_chunks = -(-seq_len // cfg.chunk_size)
    if not 0 <= chunk_index < num_chunks:
        raise BoundsError(f"chunk_index {chunk_index} out of range [0, {num_chunks})")
    start = chunk_index * cfg.chunk_size
    end = min(seq_len, start + cfg.chunk_size)
    if cfg.window is not None:
        win_start, _ = windowed_mask_positions(seq_len, cfg.window, seq_len - 1)
        start = max(start, win_start)
    if start >= end:
        return PartialResult(
            np.zeros(kq.dim, dtype=np.float32), -math.inf, 0.0, chunk_index
        )
    with probe.transient("fused_scratch", _fused_scratch_bytes(kq)):
        qpre, qgsum = _prepared_query(q, kq, cfg.scale)
        o, m, l = _fused_range(
            qpre, qgsum,
            kq.packed_words, kq.scales, kq.zeros,
            vq.packed_words, vq.scales, vq.zeros,
            kq.words_per_vector * 8, kq.params.group_size, start, end,
        )
    return PartialResult((o / l)[: kq.dim], float(m), float(l), chunk_index)


def splitk_reduce(partials: list[PartialResult]) -> np.ndarray:
    """Merge chunk partials via the softmax-correcting reduction.

    Processes partials in ``chunk_index`` order regardless of list order;
    empty partials contribute nothing.
    """
    if not partials:
        raise EmptyCacheError("splitk_reduce needs at least one partial")
    ordered = sorted(partials, key=lambda p: p.chunk_index)
    live = [p for p in ordered if not p.is_empty]
    if not live:
        raise EmptyCacheError("all partials are empty")
    if len(live) == 1:
        return live[0].out_normalized.copy()
    m_global = max(p.chunk_max for p in live)
    num = np.zeros_like(live[0].out_normalized, dtype=np.float32)
    den = np.float32(0.0)
    for p in live:
        w = np.float32(np.float32(p.chunk_expsum) * np.float32(math.exp(p.chunk_max - m_global)))
        num = num + w * p.out_normalized
        den = np.float32(den + w)
    return (num / den).astype(np.float32)


def splitk_attention(
    q: np.ndarray,
    kq: PackedQuantTensor,
    vq: PackedQuantTensor,
    cfg: AttentionConfig,
    probe: AllocationProbe | None = None,
) -> np.ndarray:
    """Chunked fused attention: all partials, then one reduction."""
    _validate_packed_pair(kq, vq, cfg)
    num_chunks = -(-kq.num_vectors // cfg.chunk_size)
    partials = [fused_partial(q, kq, vq, cfg, c, probe) for c in range(num_chunks)]
    return splitk_reduce(partials)


# ---------------------------------------------------------------------------
# Grouped-query mapping
# ---------------------------------------------------------------------------


def gqa_attention(
    queries: np.ndarray,
    kq_per_head: list[PackedQuantTensor],
    vq_per_head: list[PackedQuantTensor],
    cfg: AttentionConfig,
    probe: AllocationProbe | None = None,
) -> np.ndarray:
    """Per-query-head fused attention with kv_head = head // gqa_factor."""
    qm = as_matrix(queries, "queries")
    num_q_heads = qm.shape[0]
    num_kv_heads = len(kq_per_head)
    if len(vq_per_head) != num_kv_heads:
        raise ConfigError("key/value head lists differ in length")
    if num_kv_heads < 1 or num_q_heads != cfg.gqa_factor * num_kv_heads:
        raise ConfigError(
            f"{num_q_heads} query heads not divisible as gqa_factor {cfg.gqa_factor} "
            f"x {num_kv_heads} kv heads"
        )
    out = np.empty((num_q_heads, cfg.head_dim), dtype=np.float32)
    for h in range(num_q_heads):
        kv = h // cfg.gqa_factor
        out[h] = fused_int4_attention(qm[h], kq_per_head[kv], vq_per_head[kv], cfg, probe)
    return out
