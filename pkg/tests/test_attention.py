import numpy as np
import pytest

from fusedkv.attention import (
    AttentionConfig,
    AttentionState,
    baseline_int4_attention,
    fused_int4_attention,
    gqa_attention,
    online_softmax_update,
    reference_attention,
    windowed_mask_positions,
)
from fusedkv.errors import ConfigError, DimensionError, EmptyCacheError, NumericError
from fusedkv.probe import AllocationProbe
from fusedkv.quant import (
    Int4GroupParams,
    PackedQuantTensor,
    int4_decode,
    int4_decode_all,
    int4_dot_vectorized,
    int4_encode_matrix,
)
from fusedkv.tensor import SeededRng


def random_case(seed, seq_len, dim):
    gen = SeededRng(seed).generator()
    q = gen.standard_normal(dim, dtype=np.float32)
    keys = gen.standard_normal((seq_len, dim), dtype=np.float32)
    values = gen.standard_normal((seq_len, dim), dtype=np.float32)
    return q, keys, values


def encoded_case(seed, seq_len, dim, group_size=32):
    q, keys, values = random_case(seed, seq_len, dim)
    params = Int4GroupParams(group_size=group_size)
    return q, int4_encode_matrix(keys, params), int4_encode_matrix(values, params)


def empty_tensor(dim, group_size=32):
    params = Int4GroupParams(group_size=group_size)
    groups = -(-dim // group_size)
    words = -(-(groups * group_size) // 8)
    return PackedQuantTensor(
        packed_words=np.zeros((0, words), dtype=np.uint32),
        scales=np.zeros((0, groups), dtype=np.float32),
        zeros=np.zeros((0, groups), dtype=np.float32),
        num_vectors=0,
        dim=dim,
        params=params,
    )


class TestConfig:
    def test_default_scale(self):
        assert AttentionConfig(head_dim=64).scale == pytest.approx(0.125)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"head_dim": 0},
            {"head_dim": 8, "attn_scale": 0.0},
            {"head_dim": 8, "gqa_factor": 0},
            {"head_dim": 8, "window": 0},
            {"head_dim": 8, "chunk_size": 0},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            AttentionConfig(**kwargs)


class TestReference:
    def test_singleton_returns_value_row(self):
        q, keys, values = random_case(0, 1, 16)
        cfg = AttentionConfig(head_dim=16)
        assert np.array_equal(reference_attention(q, keys, values, cfg), values[0])

    def test_identical_keys_average_values(self):
        gen = SeededRng(1).generator()
        k = gen.standard_normal(16, dtype=np.float32)
        values = gen.standard_normal((2, 16), dtype=np.float32)
        out = reference_attention(
            gen.standard_normal(16, dtype=np.float32),
            np.stack([k, k]),
            values,
            AttentionConfig(head_dim=16),
        )
        assert np.allclose(out, values.mean(axis=0), atol=1e-6)

    def test_weights_sum_to_one(self):
        q, keys, _ = random_case(2, 64, 16)
        cfg = AttentionConfig(head_dim=16)
        scores = (keys @ q) * np.float32(cfg.scale)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        assert w.sum() == pytest.approx(1.0, abs=1e-6)
        # operational form: attending over all-ones values returns ones
        out = reference_attention(q, keys, np.ones_like(keys), cfg)
        assert np.allclose(out, 1.0, atol=1e-5)

    def test_shape_mismatch(self):
        q, keys, values = random_case(3, 4, 16)
        with pytest.raises(DimensionError):
            reference_attention(q, keys, values[:3], AttentionConfig(head_dim=16))


class TestFusedKernel:
    def test_singleton_decodes_value_row(self):
        q, kq, vq = encoded_case(4, 1, 64)
        out = fused_int4_attention(q, kq, vq, AttentionConfig(head_dim=64))
        assert np.allclose(out, int4_decode(vq, 0), atol=1e-6)

    @pytest.mark.parametrize("seq_len", [1, 31, 32, 33, 513])
    @pytest.mark.parametrize("dim", [64, 128])
    def test_matches_dequantized_oracle(self, seq_len, dim):
        q, kq, vq = encoded_case(seq_len * 97 + dim, seq_len, dim)
        cfg = AttentionConfig(head_dim=dim)
        fused = fused_int4_attention(q, kq, vq, cfg)
        oracle = reference_attention(q, int4_decode_all(kq), int4_decode_all(vq), cfg)
        assert np.abs(fused - oracle).max() <= 1e-5

    def test_normalization_over_ones_values(self):
        q, keys, _ = random_case(5, 200, 64)
        kq = int4_encode_matrix(keys)
        vq = int4_encode_matrix(np.ones((200, 64), dtype=np.float32))
        out = fused_int4_attention(q, kq, vq, AttentionConfig(head_dim=64))
        assert np.allclose(out, 1.0, atol=1e-5)

    def test_prescale_equals_score_scaling(self):
        # pre-scaling the query is the kernel's contract; the reference
        # scales scores after the dot instead
        q, keys, values = random_case(6, 50, 64)
        cfg = AttentionConfig(head_dim=64, attn_scale=0.37)
        via_query = reference_attention(
            q * np.float32(0.37), keys, values, AttentionConfig(head_dim=64, attn_scale=1.0)
        )
        via_scores = reference_attention(q, keys, values, cfg)
        assert np.abs(via_query - via_scores).max() <= 1e-5

    def test_score_path_matches_standalone_vectorized_dot(self):
        q, kq, vq = encoded_case(7, 8, 64)
        cfg = AttentionConfig(head_dim=64)
        scaled = (q * np.float32(cfg.scale)).astype(np.float32)
        scores = [int4_dot_vectorized(scaled, kq, i) for i in range(8)]
        state = AttentionState()
        for i, score in enumerate(scores):
            online_softmax_update(state, score, int4_decode(vq, i))
        mirror = state.out_accum / np.float32(state.exp_sum)
        fused = fused_int4_attention(q, kq, vq, cfg)
        assert np.abs(mirror - fused).max() <= 1e-6

    def test_dim_not_multiple_of_group(self):
        # head_dim 20 pads to one 32-element group; padding never leaks into output
        q, kq, vq = encoded_case(14, 90, 20)
        cfg = AttentionConfig(head_dim=20)
        fused = fused_int4_attention(q, kq, vq, cfg)
        oracle = reference_attention(q, int4_decode_all(kq), int4_decode_all(vq), cfg)
        assert fused.shape == (20,)
        assert np.abs(fused - oracle).max() <= 1e-5

    def test_empty_cache_rejected(self):
        with pytest.raises(EmptyCacheError):
            fused_int4_attention(
                np.ones(64, dtype=np.float32), empty_tensor(64), empty_tensor(64),
                AttentionConfig(head_dim=64),
            )

    def test_dim_mismatch_rejected(self):
        q, kq, vq = encoded_case(8, 4, 64)
        with pytest.raises(DimensionError):
            fused_int4_attention(q, kq, vq, AttentionConfig(head_dim=128))

    def test_non_finite_query_rejected(self):
        q, kq, vq = encoded_case(8, 4, 64)
        q[3] = np.nan
        with pytest.raises(NumericError):
            fused_int4_attention(q, kq, vq, AttentionConfig(head_dim=64))

    def test_unaligned_group_rejected(self):
        q, kq, vq = encoded_case(9, 4, 12, group_size=2)
        with pytest.raises(ConfigError):
            fused_int4_attention(q, kq, vq, AttentionConfig(head_dim=12))


class TestWindow:
    def test_window_larger_than_context(self):
        assert windowed_mask_positions(10, 1024, 9) == (0, 10)

    def test_window_arithmetic(self):
        assert windowed_mask_positions(2048, 1024, 2047) == (1024, 2048)

    def test_window_validated(self):
        with pytest.raises(ConfigError):
            windowed_mask_positions(10, 0, 9)

    def test_windowed_fused_matches_sliced_reference(self):
        q, kq, vq = encoded_case(10, 300, 64)
        cfg = AttentionConfig(head_dim=64, window=128)
        fused = fused_int4_attention(q, kq, vq, cfg)
        start, stop = windowed_mask_positions(300, 128, 299)
        oracle = reference_attention(
            q,
            int4_decode_all(kq)[start:stop],
            int4_decode_all(vq)[start:stop],
            AttentionConfig(head_dim=64),
        )
        assert np.abs(fused - oracle).max() <= 1e-5


class TestGqa:
    def _heads(self, seed, kv_heads, seq_len=40, dim=64):
        gen = SeededRng(seed).generator()
        kqs, vqs = [], []
        for _ in range(kv_heads):
            kqs.append(int4_encode_matrix(gen.standard_normal((seq_len, dim), dtype=np.float32)))
            vqs.append(int4_encode_matrix(gen.standard_normal((seq_len, dim), dtype=np.float32)))
        return kqs, vqs

    @pytest.mark.parametrize("factor", [1, 2, 8, 16, 32])
    def test_matches_replicated_kv_oracle(self, factor):
        kv_heads = 2 if factor <= 8 else 1
        kqs, vqs = self._heads(factor, kv_heads)
        gen = SeededRng(100 + factor).generator()
        queries = gen.standard_normal((factor * kv_heads, 64), dtype=np.float32)
        cfg = AttentionConfig(head_dim=64, gqa_factor=factor)
        grouped = gqa_attention(queries, kqs, vqs, cfg)
        # physically replicate each KV head gqa_factor times
        replicated_k = [kqs[h // factor] for h in range(factor * kv_heads)]
        replicated_v = [vqs[h // factor] for h in range(factor * kv_heads)]
        expected = np.stack(
            [
                fused_int4_attention(queries[h], replicated_k[h], replicated_v[h],
                                     AttentionConfig(head_dim=64))
                for h in range(factor * kv_heads)
            ]
        )
        assert np.array_equal(grouped, expected)

    def test_single_kv_head_shared(self):
        kqs, vqs = self._heads(3, 1)
        gen = SeededRng(103).generator()
        queries = gen.standard_normal((8, 64), dtype=np.float32)
        cfg = AttentionConfig(head_dim=64, gqa_factor=8)
        out = gqa_attention(queries, kqs, vqs, cfg)
        for h in range(8):
            expected = fused_int4_attention(queries[h], kqs[0], vqs[0], AttentionConfig(head_dim=64))
            assert np.array_equal(out[h], expected)

    def test_non_divisible_heads_rejected(self):
        kqs, vqs = self._heads(4, 2)
        queries = np.ones((5, 64), dtype=np.float32)
        with pytest.raises(ConfigError):
            gqa_attention(queries, kqs, vqs, AttentionConfig(head_dim=64, gqa_factor=2))


class TestGreedyAgreement:
    def test_projected_argmax_matches_oracle(self):
        gen = SeededRng(55).generator()
        matches = 0
        trials = 0
        for case in range(50):
            q, kq, vq = encoded_case(1000 + case, 48, 32)
            cfg = AttentionConfig(head_dim=32)
            fused = fused_int4_attention(q, kq, vq, cfg)
            oracle = reference_attention(q, int4_decode_all(kq), int4_decode_all(vq), cfg)
            for _ in range(20):
                proj = gen.standard_normal((64, 32), dtype=np.float32)
                trials += 1
                if np.argmax(proj @ fused) == np.argmax(proj @ oracle):
                    matches += 1
        assert trials == 1000
        assert matches >= 990


class TestAllocationShape:
    def test_fused_scratch_independent_of_length(self):
        peaks = []
        for seq_len in (64, 1024):
            q, kq, vq = encoded_case(11, seq_len, 64)
            probe = AllocationProbe()
            fused_int4_attention(q, kq, vq, AttentionConfig(head_dim=64), probe=probe)
            peaks.append(probe.peak_bytes)
            assert probe.largest_buffer() < seq_len * 64 * 4
        assert peaks[0] == peaks[1]

    def test_baseline_materializes_full_matrices(self):
        q, kq, vq = encoded_case(12, 256, 64)
        probe = AllocationProbe()
        baseline_int4_attention(q, kq, vq, AttentionConfig(head_dim=64), probe=probe)
        assert probe.peak_bytes >= 2 * 256 * 64 * 4
        labels = {r.label for r in probe.records}
        assert {"decoded_keys", "decoded_values"} <= labels

    def test_paths_agree(self):
        q, kq, vq = encoded_case(13, 256, 64)
        cfg = AttentionConfig(head_dim=64)
        fused = fused_int4_attention(q, kq, vq, cfg)
        base = baseline_int4_attention(q, kq, vq, cfg)
        assert np.abs(fused - base).max() <= 1e-5


class TestOnlineSoftmaxState:
    def test_matches_two_pass_softmax(self):
        gen = SeededRng(60).generator()
        scores = gen.standard_normal(50).astype(np.float32)
        values = gen.standard_normal((50, 8)).astype(np.float32)
        state = AttentionState()
        for s, v in zip(scores, values):
            online_softmax_update(state, float(s), v)
        single_pass = state.out_accum / np.float32(state.exp_sum)
        w = np.exp(scores - scores.max())
        two_pass = (w @ values) / w.sum()
        assert np.abs(single_pass - two_pass).max() <= 1e-6
        assert state.running_max == scores.max()
        assert state.exp_sum > 0
