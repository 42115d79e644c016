import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fusedkv.analysis import (
    FP16_SCHEME,
    GIB,
    INT4_SCHEME,
    LayerKind,
    ModelPreset,
    amplification_experiment,
    amplification_kls,
    attention_kl,
    builtin_preset_names,
    compound_correlation,
    key_value_asymmetry,
    kv_bytes,
    load_preset,
    max_context,
    memory_plan,
    qjl_score_correlation,
    quality_report,
    score_perturbation,
)
from fusedkv.errors import ConfigError, DimensionError, InfeasibleError
from fusedkv.quant import compression_ratio


@pytest.fixture(scope="module")
def llama():
    return load_preset("llama-3.1-70b")


@pytest.fixture(scope="module")
def gemma():
    return load_preset("gemma-4-31b")


class TestPresets:
    def test_bundled_names(self):
        assert builtin_preset_names() == ["gemma-4-31b", "llama-3.1-70b"]

    def test_llama_fields(self, llama):
        assert llama.layers == 80
        assert llama.attn_scale == pytest.approx(0.0884)
        assert llama.weight_bytes == pytest.approx(39.1 * GIB)
        (kind,) = llama.kinds
        assert (kind.kv_heads, kind.head_dim, kind.gqa_factor) == (8, 128, 8)
        assert kind.window is None

    def test_gemma_fields(self, gemma):
        assert gemma.layers == 60
        assert gemma.attn_scale == 1.0
        by_name = {k.name: k for k in gemma.kinds}
        assert by_name["sliding"].window == 1024
        assert by_name["sliding"].head_dim == 256
        assert by_name["global"].head_dim == 512

    def test_load_from_path(self, tmp_path):
        path = tmp_path / "tiny.preset"
        path.write_text(
            "name = tiny\nlayers = 2\nattn_scale = 1.0\nweight_gib = 0.5\n"
            "kind.all.layers = 2\nkind.all.kv_heads = 1\n"
            "kind.all.head_dim = 8\nkind.all.gqa_factor = 1\n"
        )
        preset = load_preset(path)
        assert preset.name == "tiny"
        assert preset.kinds[0].head_dim == 8

    def test_unknown_name_rejected(self):
        with pytest.raises(ConfigError):
            load_preset("nonexistent-model")

    @pytest.mark.parametrize(
        "text",
        [
            "layers = 2\n",  # missing keys
            "name = x\nlayers = 2\nattn_scale = 1\nweight_gib = 1\nbogus = 3\n"
            "kind.a.layers = 2\nkind.a.kv_heads = 1\nkind.a.head_dim = 8\nkind.a.gqa_factor = 1\n",
            "name = x\nname = y\n",
            "name = x\nlayers = 3\nattn_scale = 1\nweight_gib = 1\n"
            "kind.a.layers = 2\nkind.a.kv_heads = 1\nkind.a.head_dim = 8\nkind.a.gqa_factor = 1\n",
        ],
    )
    def test_malformed_files_rejected(self, tmp_path, text):
        path = tmp_path / "bad.preset"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_preset(path)


class TestKvBytes:
    def test_fp16_reference_point(self, llama):
        # 2 * 80 * 8 * 128K * 128 * 2 bytes == 40 GiB exactly
        assert kv_bytes(llama, 131072, 16) == 40.0 * GIB

    def test_int4_reference_point(self, llama):
        assert kv_bytes(llama, 131072, 4, 32, 16) == 12.5 * GIB

    def test_zero_tokens(self, llama):
        assert kv_bytes(llama, 0, 16) == 0.0

    def test_linearity(self):
        def preset(layers, kv_heads, head_dim):
            return ModelPreset(
                "p", layers, 1.0, 0.0,
                (LayerKind("k", layers, kv_heads, head_dim, 1),),
            )

        base = kv_bytes(preset(4, 2, 16), 1000, 16)
        assert kv_bytes(preset(8, 2, 16), 1000, 16) == 2 * base
        assert kv_bytes(preset(4, 4, 16), 1000, 16) == 2 * base
        assert kv_bytes(preset(4, 2, 32), 1000, 16) == 2 * base
        assert kv_bytes(preset(4, 2, 16), 2000, 16) == 2 * base

    def test_scheme_ratio_is_compression_ratio(self, llama):
        fp16 = kv_bytes(llama, 65536, 16)
        int4 = kv_bytes(llama, 65536, 4, 32, 16)
        assert fp16 / int4 == compression_ratio(4, 32, 16)

    def test_window_caps_sliding_layers(self, gemma):
        # beyond the window, sliding layers stop growing
        small = kv_bytes(gemma, 1024, 16)
        large = kv_bytes(gemma, 2048, 16)
        global_only = [k for k in gemma.kinds if k.window is None]
        expected_growth = sum(
            2 * k.layers * k.kv_heads * 1024 * k.head_dim * 2 for k in global_only
        )
        assert large - small == expected_growth

    def test_negative_tokens_rejected(self, llama):
        with pytest.raises(ConfigError):
            kv_bytes(llama, -1, 16)


class TestMemoryPlan:
    def test_reference_128k_int4(self, llama):
        plan = memory_plan(llama, 131072, INT4_SCHEME, 64 * GIB, 2 * GIB)
        assert plan.total_bytes / GIB == pytest.approx(53.6, abs=1e-9)
        assert plan.fits

    def test_reference_128k_fp16_does_not_fit(self, llama):
        plan = memory_plan(llama, 131072, FP16_SCHEME, 64 * GIB, 2 * GIB)
        assert plan.total_bytes / GIB == pytest.approx(81.1, abs=1e-9)
        assert not plan.fits

    def test_zero_budget_never_fits(self, gemma):
        for tokens in (0, 1024, 131072):
            assert not memory_plan(gemma, tokens, INT4_SCHEME, 0.0, 2 * GIB).fits

    def test_scheme_by_name(self, llama):
        assert memory_plan(llama, 1024, "int4", 64 * GIB).kv_bytes == kv_bytes(llama, 1024, 4, 32, 16)
        with pytest.raises(ConfigError):
            memory_plan(llama, 1024, "int3", 64 * GIB)


class TestMaxContext:
    def test_fp16_band(self, llama):
        tokens = max_context(llama, FP16_SCHEME, 64 * GIB, 2 * GIB, granularity=1024)
        assert 70 * 1024 <= tokens <= 76 * 1024

    def test_int4_band(self, llama):
        tokens = max_context(llama, INT4_SCHEME, 64 * GIB, 2 * GIB, granularity=1024)
        assert 230 * 1024 <= tokens <= 240 * 1024

    def test_single_token_boundary(self, llama):
        one_token = kv_bytes(llama, 1, 16)
        budget = llama.weight_bytes + 2 * GIB + one_token
        assert max_context(llama, FP16_SCHEME, budget, 2 * GIB) == 1

    def test_infeasible_budget(self, llama):
        with pytest.raises(InfeasibleError):
            max_context(llama, FP16_SCHEME, llama.weight_bytes, 2 * GIB)

    def test_granularity_rounds_down(self, llama):
        exact = max_context(llama, INT4_SCHEME, 64 * GIB, 2 * GIB)
        coarse = max_context(llama, INT4_SCHEME, 64 * GIB, 2 * GIB, granularity=1024)
        assert coarse <= exact < coarse + 1024


class TestScorePerturbation:
    def test_zero_angle(self):
        assert score_perturbation(1.0, 3.0, 4.0, 0.0) == 0.0

    def test_scale_ratio(self):
        fixed = dict(q_norm=2.0, k_norm=3.0, delta_theta=0.2)
        ratio = score_perturbation(1.0, **fixed) / score_perturbation(0.0884, **fixed)
        assert ratio == pytest.approx(11.312, abs=0.01)

    def test_pi_angle(self):
        assert score_perturbation(1.0, 1.0, 1.0, math.pi) == pytest.approx(2.0, abs=1e-12)

    def test_monotone_in_angle(self):
        angles = np.linspace(0, math.pi, 50)
        values = [score_perturbation(0.5, 1.0, 1.0, a) for a in angles]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_linear_in_scale(self):
        base = score_perturbation(0.3, 1.7, 2.1, 0.4)
        assert score_perturbation(0.6, 1.7, 2.1, 0.4) == pytest.approx(2 * base, rel=1e-12)

    def test_negative_norm_rejected(self):
        with pytest.raises(ConfigError):
            score_perturbation(1.0, -1.0, 1.0, 0.1)


class TestCompoundCorrelation:
    def test_zero_layers(self):
        assert compound_correlation(0.3, 0) == 1.0

    def test_reference_depths(self):
        # 0.85^32 ~= 0.0055 (rounds to 0.006); 0.85^80 ~= 2.3e-6 (~2e-6)
        at_32 = compound_correlation(0.85, 32)
        assert at_32 == pytest.approx(0.85**32, rel=1e-12)
        assert round(at_32, 3) == 0.006
        at_80 = compound_correlation(0.85, 80)
        assert 1.5e-6 < at_80 < 2.5e-6

    def test_strictly_decreasing(self):
        values = [compound_correlation(0.85, layers) for layers in range(0, 100, 7)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_domain_checked(self):
        with pytest.raises(ConfigError):
            compound_correlation(1.5, 10)
        with pytest.raises(ConfigError):
            compound_correlation(0.5, -1)


class TestAttentionKl:
    def test_identical_distributions(self):
        p = np.array([0.25, 0.25, 0.5])
        assert attention_kl(p, p) == 0.0

    def test_smoothed_zero_bin(self):
        assert attention_kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-9)

    def test_positive_for_distinct_distributions(self):
        assert attention_kl([0.6, 0.4], [0.4, 0.6]) > 0.0

    @given(st.integers(2, 30), st.integers(0, 1000))
    def test_nonnegative(self, n, seed):
        gen = np.random.default_rng(seed)
        p = gen.random(n) + 1e-3
        q = gen.random(n) + 1e-3
        p /= p.sum()
        q /= q.sum()
        assert attention_kl(p, q) >= 0.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            attention_kl([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_normalization_checked(self):
        with pytest.raises(ConfigError):
            attention_kl([0.7, 0.7], [0.5, 0.5])
        with pytest.raises(ConfigError):
            attention_kl([1.5, -0.5], [0.5, 0.5])


class TestAmplification:
    def test_equal_scales_unit_ratio(self):
        assert amplification_experiment(3, 0.5, 0.5, 4, trials=100) == 1.0

    def test_gemma_vs_llama_scales(self):
        ratio = amplification_experiment(5, 1.0, 0.0884, 4, trials=120)
        assert ratio > 10

    def test_high_bits_limit(self):
        kl_a, kl_b = amplification_kls(5, 1.0, 0.0884, angle_bits=12, trials=40)
        assert kl_a < 1e-5
        assert kl_b < 1e-5

    def test_trial_floor_enforced(self):
        with pytest.raises(ConfigError):
            amplification_experiment(3, 1.0, 0.5, 4, trials=99)


class TestQualityReport:
    def test_int4_cosine_high_at_both_scales(self):
        for alpha in (1.0, 0.0884):
            rep = quality_report("int4", alpha, seed=42, trials=20)
            assert rep.cosine_sim >= 0.99
            assert rep.kl_divergence >= 0.0

    def test_polar_bits_ordering(self):
        r4 = quality_report("polar4", 0.0884, seed=42, trials=20)
        r5 = quality_report("polar5", 0.0884, seed=42, trials=20)
        assert r5.cosine_sim > r4.cosine_sim
        assert r5.kl_divergence < r4.kl_divergence

    def test_qjl_reports_score_correlation(self):
        rep = quality_report("qjl", 0.0884, seed=42, trials=20)
        assert 0.0 < rep.cosine_sim < 1.0

    def test_unknown_codec(self):
        with pytest.raises(ConfigError):
            quality_report("int3", 1.0, seed=0)

    def test_qjl_correlation_grows_with_width(self):
        corrs = [qjl_score_correlation(42, m, dim=64, num_pairs=128) for m in (8, 32, 128)]
        assert corrs[0] < corrs[1] < corrs[2]


class TestKeyValueAsymmetry:
    def test_direction(self):
        k_err, v_err = key_value_asymmetry(seed=7, trials=120)
        assert v_err >= k_err
        assert k_err > 0
