"""Quantitative models: KV memory planning, error propagation, quality metrics.

Memory planning counts ``2 * layers * kv_heads * tokens * head_dim`` cache
elements (keys and values) at the scheme's bit width, plus two per-group
parameters at ``param_bits`` each when the scheme is sub-16-bit.  Reported
sizes use GiB (2**30 bytes) throughout: that is the unit under which the
reference footprint figures (40 GB FP16 KV at 128K for an 80-layer,
8-KV-head, d=128 model; 12.5 GB at int4 g=32) come out exactly.

Error models:

* ``score_perturbation``: an angular error ``dtheta`` on a key perturbs the
  pre-softmax score by ``alpha * |q| * |k| * (1 - cos dtheta)`` — linear in
  the attention scale, which is why angle codecs degrade ~11x harder at
  ``alpha = 1.0`` than at ``1/sqrt(128) ~= 0.0884``.
* ``compound_correlation``: a per-layer score correlation ``rho`` compounds
  to ``rho ** layers`` across the stack; 0.85 per layer is marginal at 32
  layers (~0.006) and destroys the signal at 80 (~2e-6).
* ``amplification_experiment``: measures the KL-divergence ratio between
  two attention scales for angle-quantized keys on synthetic Gaussian
  data.

Preset files are flat ``key = value`` text (see ``presets/``), with layer
kinds expressed as dotted keys (``kind.<name>.<field>``); sliding-window
kinds cap their cached tokens at the window size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from fusedkv.errors import ConfigError, DimensionError, InfeasibleError
from fusedkv.polar import polar_decode_matrix, polar_encode_matrix
from fusedkv.qjl import qjl_encode_matrix, qjl_scores
from fusedkv.quant import Int4GroupParams, int4_decode_all, int4_encode_matrix
from fusedkv.tensor import SeededRng

__all__ = [
    "GIB",
    "LayerKind",
    "ModelPreset",
    "KvScheme",
    "FP16_SCHEME",
    "INT4_SCHEME",
    "resolve_scheme",
    "MemoryPlan",
    "QualityReport",
    "load_preset",
    "builtin_preset_names",
    "kv_bytes",
    "memory_plan",
    "max_context",
    "score_perturbation",
    "compound_correlation",
    "attention_kl",
    "amplification_experiment",
    "amplification_kls",
    "quality_report",
    "key_value_asymmetry",
    "qjl_score_correlation",
]

GIB = 2**30


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerKind:
    """A group of layers sharing one attention geometry."""

    name: str
    layers: int
    kv_heads: int
    head_dim: int
    gqa_factor: int
    window: int | None = None

    def __post_init__(self) -> None:
        if min(self.layers, self.kv_heads, self.head_dim, self.gqa_factor) < 1:
            raise ConfigError(f"layer kind {self.name!r} has a non-positive field")
        if self.window is not None and self.window < 1:
            raise ConfigError(f"layer kind {self.name!r} window must be >= 1")


@dataclass(frozen=True)
class ModelPreset:
    """Architecture parameters needed for planning and error analysis."""

    name: str
    layers: int
    attn_scale: float
    weight_bytes: float
    kinds: tuple[LayerKind, ...]

    def __post_init__(self) -> None:
        if self.layers < 1 or not self.attn_scale > 0 or self.weight_bytes < 0:
            raise ConfigError(f"preset {self.name!r} has invalid scalar fields")
        if not self.kinds:
            raise ConfigError(f"preset {self.name!r} needs at least one layer kind")
        if sum(k.layers for k in self.kinds) != self.layers:
            raise ConfigError(f"preset {self.name!r}: kind layer counts do not sum to layers")


def builtin_preset_names() -> list[str]:
    root = resources.files("fusedkv").joinpath("presets")
    return sorted(p.name.removesuffix(".preset") for p in root.iterdir() if p.name.endswith(".preset"))


def _parse_preset_text(text: str, origin: str) -> ModelPreset:
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in fields:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        fields[key] = value

    def need(key: str) -> str:
        if key not in fields:
            raise ConfigError(f"{origin}: missing required key {key!r}")
        return fields.pop(key)

    name = need("name")
    layers = int(need("layers"))
    attn_scale = float(need("attn_scale"))
    weight_bytes = float(need("weight_gib")) * GIB

    kind_fields: dict[str, dict[str, str]] = {}
    for key in list(fields):
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == "kind":
            kind_fields.setdefault(parts[1], {})[parts[2]] = fields.pop(key)
    if fields:
        raise ConfigError(f"{origin}: unknown keys {sorted(fields)}")
    if not kind_fields:
        raise ConfigError(f"{origin}: no layer kinds defined")

    kinds = []
    for kname, kf in kind_fields.items():
        window = kf.pop("window", None)
        try:
            kinds.append(
                LayerKind(
                    name=kname,
                    layers=int(kf.pop("layers")),
                    kv_heads=int(kf.pop("kv_heads")),
                    head_dim=int(kf.pop("head_dim")),
                    gqa_factor=int(kf.pop("gqa_factor")),
                    window=int(window) if window is not None else None,
                )
            )
        except KeyError as exc:
            raise ConfigError(f"{origin}: kind {kname!r} missing field {exc}") from exc
        if kf:
            raise ConfigError(f"{origin}: kind {kname!r} has unknown fields {sorted(kf)}")
    kinds.sort(key=lambda k: k.name)
    return ModelPreset(name, layers, attn_scale, weight_bytes, tuple(kinds))


def load_preset(path_or_name: str | Path) -> ModelPreset:
    """Load a preset from a file path or a bundled preset name."""
    path = Path(path_or_name)
    if path.suffix == ".preset" or path.exists():
        if not path.exists():
            raise ConfigError(f"preset file not found: {path}")
        return _parse_preset_text(path.read_text(), str(path))
    ref = resources.files("fusedkv").joinpath("presets", f"{path_or_name}.preset")
    if not ref.is_file():
        raise ConfigError(
            f"unknown preset {path_or_name!r}; bundled presets: {builtin_preset_names()}"
        )
    return _parse_preset_text(ref.read_text(), str(path_or_name))


# ---------------------------------------------------------------------------
# Memory planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KvScheme:
    """Cache element width plus group-parameter accounting."""

    name: str
    bits_per_element: int
    group_size: int = 32
    param_bits: int = 16


FP16_SCHEME = KvScheme("fp16", 16)
INT4_SCHEME = KvScheme("int4", 4, 32, 16)

_SCHEMES = {s.name: s for s in (FP16_SCHEME, INT4_SCHEME)}


def resolve_scheme(scheme: KvScheme | str) -> KvScheme:
    if isinstance(scheme, KvScheme):
        return scheme
    if scheme in _SCHEMES:
        return _SCHEMES[scheme]
    raise ConfigError(f"unknown KV scheme {scheme!r}; known: {sorted(_SCHEMES)}")


@dataclass(frozen=True)
class MemoryPlan:
    kv_bytes: float
    total_bytes: float
    fits: bool
    max_context: int


def kv_bytes(
    preset: ModelPreset,
    tokens: int,
    bits_per_element: int,
    group_size: int = 32,
    param_bits: int = 16,
) -> float:
    """Cache footprint in bytes for ``tokens`` of context.

    Keys and values both counted; group parameters (two per group at
    ``param_bits``) are added only for sub-16-bit elements.  Sliding-window
    layer kinds cap their stored tokens at the window size.
    """
    if tokens < 0:
        raise ConfigError(f"tokens must be >= 0, got {tokens}")
    bits = float(bits_per_element)
    if bits < 16:
        bits += 2.0 * param_bits / group_size
    total = 0.0
    for kind in preset.kinds:
        stored = min(tokens, kind.window) if kind.window is not None else tokens
        total += 2.0 * kind.layers * kind.kv_heads * stored * kind.head_dim * bits / 8.0
    return total


def memory_plan(
    preset: ModelPreset,
    tokens: int,
    scheme: KvScheme | str,
    budget_bytes: float,
    overhead_bytes: float = 2.0 * GIB,
) -> MemoryPlan:
    """Footprint at ``tokens`` context plus the max context for the budget.

    A budget of zero is legal and simply never fits.
    """
    if budget_bytes < 0:
        raise ConfigError("budget must be >= 0")
    s = resolve_scheme(scheme)
    kv = kv_bytes(preset, tokens, s.bits_per_element, s.group_size, s.param_bits)
    total = preset.weight_bytes + overhead_bytes + kv
    try:
        limit = max_context(preset, s, budget_bytes, overhead_bytes, granularity=1024)
    except InfeasibleError:
        limit = 0
    return MemoryPlan(kv, total, total <= budget_bytes, limit)


def max_context(
    preset: ModelPreset,
    scheme: KvScheme | str,
    budget_bytes: float,
    overhead_bytes: float = 2.0 * GIB,
    granularity: int = 1,
) -> int:
    """Largest token count (multiple of ``granularity``) that fits the budget.

    Binary search over the token axis; ``granularity=1024`` gives the
    planner's reporting resolution, the default answers exactly.
    """
    s = resolve_scheme(scheme)
    fixed = preset.weight_bytes + overhead_bytes
    if budget_bytes <= fixed:
        raise InfeasibleError(
            f"budget {budget_bytes:.3e} B cannot cover weights + overhead {fixed:.3e} B"
        )
    if granularity < 1:
        raise ConfigError("granularity must be >= 1")

    def fits(tokens: int) -> bool:
        kv = kv_bytes(preset, tokens, s.bits_per_element, s.group_size, s.param_bits)
        return fixed + kv <= budget_bytes

    hi = granularity
    while fits(hi):
        hi *= 2
    # invariant in granularity units: lo_u fits, hi_u does not
    lo_u, hi_u = 0, hi // granularity
    while hi_u - lo_u > 1:
        mid = (lo_u + hi_u) // 2
        if fits(mid * granularity):
            lo_u = mid
        else:
            hi_u = mid
    return lo_u * granularity


# ---------------------------------------------------------------------------
# Error models
# ---------------------------------------------------------------------------


def score_perturbation(alpha: float, q_norm: float, k_norm: float, delta_theta: float) -> float:
    """Pre-softmax score shift from an angular key error of ``delta_theta``."""
    if q_norm < 0 or k_norm < 0:
        raise ConfigError("norms must be >= 0")
    return alpha * q_norm * k_norm * (1.0 - math.cos(delta_theta))


def compound_correlation(rho: float, layers: int) -> float:
    """Score correlation surviving ``layers`` stacked attention layers."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must be in [0, 1], got {rho}")
    if layers < 0:
        raise ConfigError(f"layers must be >= 0, got {layers}")
    return rho**layers


def attention_kl(p_ref: np.ndarray, p_quant: np.ndarray, eps: float = 1e-12) -> float:
    """KL(p_ref || p_quant) with both distributions floored at ``eps``.

    Inputs must be same-length, non-negative, and sum to 1 within 1e-6;
    flooring + renormalization keeps zero bins from producing infinities.
    """
    p = np.asarray(p_ref, dtype=np.float64)
    q = np.asarray(p_quant, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionError(f"distributions must be same-length 1-D, got {p.shape} vs {q.shape}")
    for name, d in (("p_ref", p), ("p_quant", q)):
        if np.any(d < 0):
            raise ConfigError(f"{name} has negative mass")
        if abs(d.sum() - 1.0) > 1e-6:
            raise ConfigError(f"{name} sums to {d.sum()}, not 1")
    p = np.maximum(p, eps)
    q = np.maximum(q, eps)
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max()
    e = np.exp((x - m).astype(np.float64))
    return e / e.sum()


def amplification_kls(
    seed: int,
    alpha_a: float,
    alpha_b: float,
    angle_bits: int,
    trials: int,
    seq_len: int = 64,
    dim: int = 128,
) -> tuple[float, float]:
    """Mean attention-distribution KL at each scale, angle-quantized keys.

    Per trial: Gaussian keys and query; the reference distribution uses
    exact keys, the perturbed one uses the polar-roundtripped keys; both
    softmaxes share the scale under test.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    base = SeededRng(seed)
    kls_a: list[float] = []
    kls_b: list[float] = []
    for t in range(trials):
        gen = base.child(t).generator()
        keys = gen.standard_normal((seq_len, dim)).astype(np.float32)
        q = gen.standard_normal(dim).astype(np.float32)
        enc = polar_encode_matrix(keys, angle_bits, seed=seed + 1)
        keys_hat = polar_decode_matrix(enc)
        scores = keys.astype(np.float64) @ q.astype(np.float64)
        scores_hat = keys_hat.astype(np.float64) @ q.astype(np.float64)
        for alpha, sink in ((alpha_a, kls_a), (alpha_b, kls_b)):
            sink.append(attention_kl(_softmax(alpha * scores), _softmax(alpha * scores_hat)))
    return float(np.mean(kls_a)), float(np.mean(kls_b))


def amplification_experiment(
    seed: int,
    alpha_a: float,
    alpha_b: float,
    angle_bits: int,
    trials: int,
    seq_len: int = 64,
    dim: int = 128,
) -> float:
    """Ratio mean-KL(alpha_a) / mean-KL(alpha_b); requires trials >= 100."""
    if trials < 100:
        raise ConfigError(f"amplification_experiment needs trials >= 100, got {trials}")
    kl_a, kl_b = amplification_kls(seed, alpha_a, alpha_b, angle_bits, trials, seq_len, dim)
    return kl_a / kl_b


# ---------------------------------------------------------------------------
# Quality metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QualityReport:
    """Reference-vs-compressed comparison for one codec at one scale.

    For reconstructing codecs (int4, polar): ``cosine_sim`` is the mean
    K/V reconstruction cosine, ``kl_divergence`` the mean attention-
    distribution KL, ``mse``/``max_abs_error`` the attention-output errors.
    For the sign-sketch codec (no reconstruction): ``cosine_sim`` is the
    score correlation and ``mse``/``max_abs_error`` are score-space errors.
    """

    cosine_sim: float
    kl_divergence: float
    mse: float
    max_abs_error: float

    def __post_init__(self) -> None:
        if not -1.0 <= self.cosine_sim <= 1.0:
            raise ConfigError("cosine_sim out of [-1, 1]")
        if min(self.kl_divergence, self.mse, self.max_abs_error) < 0:
            raise ConfigError("kl/mse/max_abs must be >= 0")


def _mean_row_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    num = (a64 * b64).sum(axis=1)
    den = np.linalg.norm(a64, axis=1) * np.linalg.norm(b64, axis=1)
    return float(np.mean(num / den))


def quality_report(
    codec: str,
    alpha: float,
    seed: int,
    trials: int = 50,
    seq_len: int = 64,
    dim: int = 128,
    sketch_width: int = 64,
) -> QualityReport:
    """Synthetic-data quality metrics for ``codec`` at attention scale ``alpha``.

    ``codec`` is one of ``int4``, ``polar4``, ``polar5``, ``qjl``.
    """
    if codec not in ("int4", "polar4", "polar5", "qjl"):
        raise ConfigError(f"unknown codec {codec!r}")
    base = SeededRng(seed)
    cosines: list[float] = []
    kls: list[float] = []
    sq_errors: list[float] = []
    max_errs: list[float] = []
    score_pairs: list[np.ndarray] = []
    for t in range(trials):
        gen = base.child(t).generator()
        keys = gen.standard_normal((seq_len, dim)).astype(np.float32)
        values = gen.standard_normal((seq_len, dim)).astype(np.float32)
        q = gen.standard_normal(dim).astype(np.float32)
        scores = keys.astype(np.float64) @ q.astype(np.float64)

        if codec == "qjl":
            sk = qjl_encode_matrix(keys, sketch_width, seed=seed + 7 + t)
            est = qjl_scores(q, sk).astype(np.float64)
            score_pairs.append(np.stack([scores, est]))
            kls.append(attention_kl(_softmax(alpha * scores), _softmax(alpha * est)))
            sq_errors.append(float(np.mean((scores - est) ** 2)))
            max_errs.append(float(np.abs(scores - est).max()))
            continue

        if codec == "int4":
            keys_hat = int4_decode_all(int4_encode_matrix(keys))
            values_hat = int4_decode_all(int4_encode_matrix(values))
            cosines.append(0.5 * (_mean_row_cosine(keys, keys_hat) + _mean_row_cosine(values, values_hat)))
        else:
            bits = 4 if codec == "polar4" else 5
            keys_hat = polar_decode_matrix(polar_encode_matrix(keys, bits, seed=seed + 7))
            values_hat = values
            cosines.append(_mean_row_cosine(keys, keys_hat))
        scores_hat = keys_hat.astype(np.float64) @ q.astype(np.float64)
        p = _softmax(alpha * scores)
        p_hat = _softmax(alpha * scores_hat)
        kls.append(attention_kl(p, p_hat))
        out = p @ values.astype(np.float64)
        out_hat = p_hat @ values_hat.astype(np.float64)
        sq_errors.append(float(np.mean((out - out_hat) ** 2)))
        max_errs.append(float(np.abs(out - out_hat).max()))

    if codec == "qjl":
        stacked = np.concatenate(score_pairs, axis=1)
        corr = float(np.corrcoef(stacked[0], stacked[1])[0, 1])
        cos = corr
    else:
        cos = float(np.mean(cosines))
    return QualityReport(
        cosine_sim=cos,
        kl_divergence=float(np.mean(kls)),
        mse=float(np.mean(sq_errors)),
        max_abs_error=float(np.max(max_errs)),
    )


def qjl_score_correlation(
    seed: int,
    sketch_width: int,
    dim: int = 128,
    num_pairs: int = 256,
) -> float:
    """Measured correlation between sketch-estimated and true scores."""
    gen = SeededRng(seed).generator()
    qs = gen.standard_normal((num_pairs, dim)).astype(np.float32)
    ks = gen.standard_normal((num_pairs, dim)).astype(np.float32)
    trues = np.empty(num_pairs)
    ests = np.empty(num_pairs)
    for i in range(num_pairs):
        sk = qjl_encode_matrix(ks[i : i + 1], sketch_width, seed=seed + 1)
        trues[i] = float(qs[i].astype(np.float64) @ ks[i].astype(np.float64))
        ests[i] = float(qjl_scores(qs[i], sk)[0])
    return float(np.corrcoef(trues, ests)[0, 1])


def key_value_asymmetry(
    seed: int,
    trials: int = 100,
    seq_len: int = 64,
    dim: int = 128,
    params: Int4GroupParams | None = None,
) -> tuple[float, float]:
    """Mean output cosine error with only keys vs. only values quantized.

    Returns ``(key_quant_error, value_quant_error)``; value errors pass
    straight through to the output while key errors are filtered by the
    softmax, so the second is expected to dominate.
    """
    params = params or Int4GroupParams()
    base = SeededRng(seed)
    alpha = 1.0 / math.sqrt(dim)
    k_errs: list[float] = []
    v_errs: list[float] = []
    for t in range(trials):
        gen = base.child(t).generator()
        keys = gen.standard_normal((seq_len, dim)).astype(np.float32)
        values = gen.standard_normal((seq_len, dim)).astype(np.float32)
        q = gen.standard_normal(dim).astype(np.float32)
        keys_hat = int4_decode_all(int4_encode_matrix(keys, params))
        values_hat = int4_decode_all(int4_encode_matrix(values, params))

        def out(k: np.ndarray, v: np.ndarray) -> np.ndarray:
            p = _softmax(alpha * (k.astype(np.float64) @ q.astype(np.float64)))
            return p @ v.astype(np.float64)

        ref = out(keys, values)
        ok = out(keys_hat, values)
        ov = out(keys, values_hat)

        def cos_err(a: np.ndarray, b: np.ndarray) -> float:
            return 1.0 - float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

        k_errs.append(cos_err(ref, ok))
        v_errs.append(cos_err(ref, ov))
    return float(np.mean(k_errs)), float(np.mean(v_errs))
