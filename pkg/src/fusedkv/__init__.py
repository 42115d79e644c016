"""fusedkv: fused compressed-domain attention over an int4-quantized KV cache.

Decode-step attention that reads packed int4 keys/values directly —
nibble-masked dot products, online softmax, per-register value
dequantization — plus split-K chunking, an append-only quantized cache
with hybrid routing, alternative codecs (polar angles, sign sketches),
and the memory-planning / error-propagation analysis toolkit.
"""

from fusedkv.analysis import (
    FP16_SCHEME,
    GIB,
    INT4_SCHEME,
    KvScheme,
    LayerKind,
    MemoryPlan,
    ModelPreset,
    QualityReport,
    amplification_experiment,
    attention_kl,
    compound_correlation,
    kv_bytes,
    load_preset,
    max_context,
    memory_plan,
    quality_report,
    score_perturbation,
)
from fusedkv.attention import (
    AttentionConfig,
    AttentionState,
    PartialResult,
    baseline_int4_attention,
    fused_int4_attention,
    fused_partial,
    gqa_attention,
    reference_attention,
    splitk_attention,
    splitk_reduce,
    windowed_mask_positions,
)
from fusedkv.errors import (
    BoundsError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    EmptyCacheError,
    FusedKvError,
    InfeasibleError,
    NumericError,
)
from fusedkv.kvcache import (
    LayerKvCache,
    RoutePath,
    RouteReason,
    RoutingDecision,
    decode_step,
    load_snapshot,
    prefill,
    route,
    save_snapshot,
)
from fusedkv.polar import PolarQuantTensor, polar_decode, polar_encode
from fusedkv.probe import AllocationProbe, default_probe
from fusedkv.qjl import QjlSketch, qjl_encode, qjl_score
from fusedkv.quant import (
    Int4GroupParams,
    PackedQuantTensor,
    compression_ratio,
    int4_decode,
    int4_dot_scalar,
    int4_dot_vectorized,
    int4_encode,
    load_packed,
    save_packed,
)
from fusedkv.tensor import SeededRng, cosine_similarity, dot, gaussian_matrix

__version__ = "0.1.0"
