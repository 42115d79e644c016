"""Command-line harness: correctness suites, benchmarks, planning, quality.

Subcommands::

    verify      run the oracle-equivalence and invariant suites (exit 1 on
                any failure; --fault-inject flips one packed nibble to
                prove the suite catches corruption)
    bench       time fused vs. dequantize-then-attend vs. split-K at each
                context length; report speedups, probe-recorded peak
                transient bytes, and cross-path output checksums
    memplan     per-context memory footprints and max context per scheme
    quality     per-codec synthetic-data quality reports at both attention
                scales, plus correlation-decay projections
    dump-cache  build a seeded synthetic cache and write a snapshot file
    load-cache  read a snapshot back, verify integrity, print a summary

All numeric output is deterministic given (seed, flags); pass
--no-timestamp (and --no-timing for bench) to make the emitted JSON
byte-identical across runs.  Exit codes: 0 success, 1 suite failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import statistics
import sys
import time
from datetime import datetime, timezone

import numpy as np

from fusedkv.analysis import (
    FP16_SCHEME,
    GIB,
    INT4_SCHEME,
    amplification_kls,
    compound_correlation,
    key_value_asymmetry,
    load_preset,
    max_context,
    memory_plan,
    qjl_score_correlation,
    quality_report,
)
from fusedkv.attention import (
    AttentionConfig,
    baseline_int4_attention,
    fused_int4_attention,
    fused_partial,
    gqa_attention,
    reference_attention,
    splitk_attention,
    splitk_reduce,
)
from fusedkv.errors import FusedKvError, InfeasibleError
from fusedkv.kvcache import (
    LayerKvCache,
    RoutePath,
    decode_step,
    load_snapshot,
    route,
    save_snapshot,
)
from fusedkv.probe import AllocationProbe
from fusedkv.quant import (
    PackedQuantTensor,
    compression_ratio,
    halfword_partials,
    int4_decode_all,
    int4_encode_matrix,
    unpack_nibbles,
    pack_nibbles,
)
from fusedkv.tensor import SeededRng

DEFAULT_SEED = 42


# ---------------------------------------------------------------------------
# Output plumbing
# ---------------------------------------------------------------------------


def _rounded_checksum(out: np.ndarray) -> str:
    """Hash outputs rounded to 1e-4 so tolerance-level noise cancels."""
    rounded = np.round(out.astype(np.float64), 4) + 0.0  # normalize -0.0
    return hashlib.sha256(rounded.tobytes()).hexdigest()[:16]


def _emit(payload: dict, args) -> None:
    if not args.no_timestamp:
        payload = {**payload, "generated_at": datetime.now(timezone.utc).isoformat()}
    if args.format == "json":
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    else:
        rows = payload.get("rows", [])
        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=sorted(rows[0].keys()))
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
        text = buf.getvalue()
    if args.out:
        with open(args.out, "w") as fp:
            fp.write(text)
    else:
        sys.stdout.write(text)


def _gaussian_kv(seed: int, seq_len: int, dim: int):
    gen = SeededRng(seed).generator()
    keys = gen.standard_normal((seq_len, dim)).astype(np.float32)
    values = gen.standard_normal((seq_len, dim)).astype(np.float32)
    q = gen.standard_normal(dim).astype(np.float32)
    return q, keys, values


def _flip_nibble(t: PackedQuantTensor) -> PackedQuantTensor:
    """Corrupt one stored nibble (high bit of nibble 0, word 0, row 0)."""
    words = t.packed_words.copy()
    words[0, 0] ^= np.uint32(0x8)
    words.flags.writeable = False
    return PackedQuantTensor(
        packed_words=words,
        scales=t.scales,
        zeros=t.zeros,
        num_vectors=t.num_vectors,
        dim=t.dim,
        params=t.params,
    )


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _run_verify_suites(seed: int, contexts: list[int], fault_inject: bool) -> list[dict]:
    rng = SeededRng(seed)
    rows: list[dict] = []

    def add(suite: str, measured: float, limit: float, ok: bool, note: str = "") -> None:
        rows.append(
            {
                "suite": suite,
                "passed": bool(ok),
                "measured": float(measured),
                "limit": float(limit),
                "note": note,
            }
        )

    # Quantizer roundtrip bound
    gen = rng.child(1).generator()
    x = gen.standard_normal((64, 128)).astype(np.float32)
    t = int4_encode_matrix(x)
    err = np.abs(x - int4_decode_all(t))
    bound = np.repeat(t.scales, t.params.group_size, axis=1)[:, : t.dim] / 2.0 + 1e-6
    worst = float((err - bound).max())
    add("int4_roundtrip_bound", worst, 0.0, worst <= 0.0)

    # Nibble packing bijection
    gen = rng.child(2).generator()
    nibbles = gen.integers(0, 16, size=4096).astype(np.uint32)
    round_trip = unpack_nibbles(pack_nibbles(nibbles), nibbles.size)
    add("nibble_pack_bijection", float(np.abs(round_trip.astype(int) - nibbles).max()), 0.0,
        np.array_equal(round_trip.astype(np.uint32), nibbles))

    # Vectorized vs scalar halfword partials (bit-identical)
    gen = rng.child(3).generator()
    words = gen.integers(0, 2**32, size=50_000, dtype=np.uint64).astype(np.uint32)
    qv = (gen.standard_normal(8 * words.size) * 2).astype(np.float32)
    ps = halfword_partials(qv, words, "scalar")
    pv = halfword_partials(qv, words, "vectorized")
    identical = np.array_equal(ps.view(np.uint32), pv.view(np.uint32))
    add("vectorized_vs_scalar_bits", 0.0 if identical else 1.0, 0.0, identical)

    # Compression accounting
    ratio = compression_ratio(4, 32, 16)
    add("compression_ratio", abs(ratio - 3.2), 0.0, ratio == 3.2, "4-bit, g=32, 16-bit params")

    # Fused vs dequantize-then-attend oracle
    worst = 0.0
    injected_caught = True
    for i, seq_len in enumerate(contexts):
        for dim in (64, 128):
            q, keys, values = _gaussian_kv(rng.child(100 + i).seed + dim, seq_len, dim)
            cfg = AttentionConfig(head_dim=dim)
            kq = int4_encode_matrix(keys)
            vq = int4_encode_matrix(values)
            oracle = reference_attention(q, int4_decode_all(kq), int4_decode_all(vq), cfg)
            kq_used = _flip_nibble(kq) if fault_inject else kq
            fused = fused_int4_attention(q, kq_used, vq, cfg)
            worst = max(worst, float(np.abs(fused - oracle).max()))
    if fault_inject:
        injected_caught = worst > 1e-5
        add("fused_vs_oracle", worst, 1e-5, worst <= 1e-5,
            "fault injected: expected to fail" if injected_caught else "fault NOT detected")
    else:
        add("fused_vs_oracle", worst, 1e-5, worst <= 1e-5)

    # Split-K vs single pass
    worst = 0.0
    for i, seq_len in enumerate(contexts):
        dim = 64
        q, keys, values = _gaussian_kv(rng.child(200 + i).seed, seq_len, dim)
        kq = int4_encode_matrix(keys)
        vq = int4_encode_matrix(values)
        for chunks in (1, 2, 4, 8, 17):
            cfg = AttentionConfig(head_dim=dim, chunk_size=-(-seq_len // chunks))
            single = fused_int4_attention(q, kq, vq, cfg)
            parts = [
                fused_partial(q, kq, vq, cfg, c)
                for c in range(-(-seq_len // cfg.chunk_size))
            ]
            merged = splitk_reduce(parts)
            worst = max(worst, float(np.abs(merged - single).max()))
    add("splitk_vs_single_pass", worst, 1e-6, worst <= 1e-6)

    # GQA mapping vs physically replicated KV heads
    gen = rng.child(4).generator()
    dim, factor, kv_heads = 64, 4, 2
    queries = gen.standard_normal((factor * kv_heads, dim)).astype(np.float32)
    kqs, vqs = [], []
    for _ in range(kv_heads):
        keys = gen.standard_normal((40, dim)).astype(np.float32)
        values = gen.standard_normal((40, dim)).astype(np.float32)
        kqs.append(int4_encode_matrix(keys))
        vqs.append(int4_encode_matrix(values))
    cfg = AttentionConfig(head_dim=dim, gqa_factor=factor)
    grouped = gqa_attention(queries, kqs, vqs, cfg)
    replicated = np.stack(
        [
            fused_int4_attention(queries[h], kqs[h // factor], vqs[h // factor],
                                 AttentionConfig(head_dim=dim))
            for h in range(factor * kv_heads)
        ]
    )
    diff = float(np.abs(grouped - replicated).max())
    add("gqa_replication", diff, 0.0, diff == 0.0)

    # Routing decision table
    table_ok = (
        route(64, 0).path is RoutePath.PREFILL
        and route(1, 128).path is RoutePath.FUSED_DECODE
        and route(1, 31).path is RoutePath.FALLBACK_DECODE
        and route(1, 32).path is RoutePath.FUSED_DECODE
    )
    add("routing_table", 0.0 if table_ok else 1.0, 0.0, table_ok)

    # Decode path equivalence on a shared cache
    gen = rng.child(5).generator()
    dim = 64
    cache = LayerKvCache(kv_heads=1, head_dim=dim)
    cache.append_tokens(
        gen.standard_normal((33, dim)).astype(np.float32),
        gen.standard_normal((33, dim)).astype(np.float32),
    )
    cfg = AttentionConfig(head_dim=dim)
    q = gen.standard_normal((1, dim)).astype(np.float32)
    outs = [decode_step(cache, q, cfg, force_path=p) for p in ("fused", "splitk", "fallback")]
    spread = float(max(np.abs(a - b).max() for a in outs for b in outs))
    add("decode_path_equivalence", spread, 1e-5, spread <= 1e-5)

    # Zero materialization
    q, keys, values = _gaussian_kv(rng.child(6).seed, 512, 64)
    kq = int4_encode_matrix(keys)
    vq = int4_encode_matrix(values)
    cfg = AttentionConfig(head_dim=64)
    fused_probe = AllocationProbe()
    fused_int4_attention(q, kq, vq, cfg, probe=fused_probe)
    base_probe = AllocationProbe()
    baseline_int4_attention(q, kq, vq, cfg, probe=base_probe)
    full_matrix = 512 * 64 * 4
    ok = fused_probe.largest_buffer() < full_matrix and base_probe.peak_bytes >= 2 * full_matrix
    add("zero_materialization", float(fused_probe.largest_buffer()), float(full_matrix), ok,
        f"baseline peak {base_probe.peak_bytes} B")

    return rows


def cmd_verify(args) -> int:
    contexts = args.contexts or [1, 33, 513]
    rows = _run_verify_suites(args.seed, contexts, args.fault_inject)
    ok = all(r["passed"] for r in rows)
    payload = {"command": "verify", "seed": args.seed, "rows": rows, "all_passed": ok}
    _emit(payload, args)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    contexts = args.contexts or [1024, 4096, 32768]
    dim = args.head_dim
    cfg = AttentionConfig(head_dim=dim, chunk_size=args.chunk_size)
    rows: list[dict] = []
    for seq_len in contexts:
        q, keys, values = _gaussian_kv(args.seed + seq_len, seq_len, dim)
        kq = int4_encode_matrix(keys)
        vq = int4_encode_matrix(values)
        paths = {
            "fused": lambda p=None: fused_int4_attention(q, kq, vq, cfg, probe=p),
            "baseline": lambda p=None: baseline_int4_attention(q, kq, vq, cfg, probe=p),
            "splitk": lambda p=None: splitk_attention(q, kq, vq, cfg, probe=p),
        }
        timings: dict[str, float] = {}
        for name, fn in paths.items():
            fn()  # warmup (and JIT on first call)
            reps = []
            for _ in range(args.reps):
                t0 = time.perf_counter()
                out = fn()
                reps.append(time.perf_counter() - t0)
            timings[name] = statistics.median(reps)
            probe = AllocationProbe()
            out = fn(probe)
            row = {
                "path": name,
                "context": seq_len,
                "peak_temp_bytes": probe.peak_bytes,
                "largest_buffer_bytes": probe.largest_buffer(),
                "checksum": _rounded_checksum(out),
            }
            if not args.no_timing:
                row["wall_time_s"] = timings[name]
            rows.append(row)
        if not args.no_timing:
            for name in ("baseline", "splitk"):
                rows.append(
                    {
                        "path": f"speedup_fused_vs_{name}",
                        "context": seq_len,
                        "peak_temp_bytes": 0,
                        "largest_buffer_bytes": 0,
                        "checksum": "",
                        "wall_time_s": timings[name] / timings["fused"],
                    }
                )
    payload = {"command": "bench", "seed": args.seed, "head_dim": dim, "rows": rows}
    _emit(payload, args)
    return 0


# ---------------------------------------------------------------------------
# memplan
# ---------------------------------------------------------------------------


def cmd_memplan(args) -> int:
    preset = load_preset(args.preset)
    budget = args.budget_gb * GIB
    overhead = args.overhead_gb * GIB
    contexts = args.contexts or [1024, 16384, 65536, 131072]
    rows = []
    for tokens in contexts:
        fp16 = memory_plan(preset, tokens, FP16_SCHEME, budget, overhead)
        int4 = memory_plan(preset, tokens, INT4_SCHEME, budget, overhead)
        rows.append(
            {
                "context": tokens,
                "fp16_kv_gib": fp16.kv_bytes / GIB,
                "int4_kv_gib": int4.kv_bytes / GIB,
                "fp16_total_gib": fp16.total_bytes / GIB,
                "int4_total_gib": int4.total_bytes / GIB,
                "fp16_fits": fp16.fits,
                "int4_fits": int4.fits,
            }
        )
    summary = {}
    for scheme in (FP16_SCHEME, INT4_SCHEME):
        try:
            summary[f"max_context_{scheme.name}"] = max_context(
                preset, scheme, budget, overhead, granularity=1024
            )
        except InfeasibleError:
            summary[f"max_context_{scheme.name}"] = 0
    payload = {
        "command": "memplan",
        "preset": preset.name,
        "budget_gib": args.budget_gb,
        "overhead_gib": args.overhead_gb,
        "weights_gib": preset.weight_bytes / GIB,
        "rows": rows,
        **summary,
    }
    _emit(payload, args)
    return 0


# ---------------------------------------------------------------------------
# quality
# ---------------------------------------------------------------------------


def cmd_quality(args) -> int:
    codecs = ["int4", "polar4", "polar5", "qjl"] if args.codec == "all" else [args.codec]
    alphas = [("gemma-style", 1.0), ("llama-style", 0.0884)]
    rows: list[dict] = []
    for codec in codecs:
        for label, alpha in alphas:
            rep = quality_report(codec, alpha, seed=args.seed, trials=args.trials)
            row = {
                "codec": codec,
                "scale_preset": label,
                "attn_scale": alpha,
                "cosine_sim": rep.cosine_sim,
                "kl_divergence": rep.kl_divergence,
                "mse": rep.mse,
                "max_abs_error": rep.max_abs_error,
            }
            rows.append(row)
        if codec == "qjl":
            rho = qjl_score_correlation(args.seed, sketch_width=64)
            for layers in (32, 60, 80):
                rows.append(
                    {
                        "codec": "qjl",
                        "scale_preset": f"correlation_after_{layers}_layers",
                        "attn_scale": 0.0,
                        "cosine_sim": rho,
                        "kl_divergence": 0.0,
                        "mse": 0.0,
                        "max_abs_error": compound_correlation(rho, layers),
                    }
                )
    extras = {}
    if "polar4" in codecs:
        kl_a, kl_b = amplification_kls(args.seed, 1.0, 0.0884, 4, trials=max(100, args.trials))
        extras["polar4_kl_ratio_scale_1.0_vs_0.0884"] = kl_a / kl_b
    k_err, v_err = key_value_asymmetry(args.seed, trials=max(200, args.trials))
    extras["kv_asymmetry_key_quant_err"] = k_err
    extras["kv_asymmetry_value_quant_err"] = v_err
    payload = {"command": "quality", "seed": args.seed, "rows": rows, **extras}
    _emit(payload, args)
    return 0


# ---------------------------------------------------------------------------
# dump-cache / load-cache
# ---------------------------------------------------------------------------


def cmd_dump_cache(args) -> int:
    """Build a seeded cache and snapshot it to ``--out``; summary to stdout."""
    snapshot_path = args.out
    gen = SeededRng(args.seed).generator()
    cache = LayerKvCache(kv_heads=args.kv_heads, head_dim=args.head_dim)
    # two appends to exercise growth + the append-only prefix property
    first = max(1, args.tokens // 2)
    for count in (first, args.tokens - first):
        if count == 0:
            continue
        keys = gen.standard_normal((count, args.kv_heads, args.head_dim)).astype(np.float32)
        values = gen.standard_normal((count, args.kv_heads, args.head_dim)).astype(np.float32)
        cache.append_tokens(keys, values)
    save_snapshot(cache, snapshot_path)
    payload = {
        "command": "dump-cache",
        "seed": args.seed,
        "path": snapshot_path,
        "kv_heads": cache.kv_heads,
        "head_dim": cache.head_dim,
        "tokens": cache.num_tokens,
        "rows": [],
    }
    args.out = None  # the snapshot owns --out; the summary goes to stdout
    _emit(payload, args)
    return 0


def cmd_load_cache(args) -> int:
    cache = load_snapshot(args.file)
    rows = []
    for h in range(cache.kv_heads):
        kq = cache.keys_packed(h)
        vq = cache.values_packed(h)
        first_row = int4_decode_all(kq)[:1] if cache.num_tokens else np.zeros((1, 1))
        if not np.all(np.isfinite(first_row)):
            raise FusedKvError("snapshot decodes to non-finite values")
        rows.append(
            {
                "head": h,
                "tokens": kq.num_vectors,
                "packed_key_bytes": int(kq.packed_words.nbytes),
                "packed_value_bytes": int(vq.packed_words.nbytes),
                "key_words_sha": hashlib.sha256(kq.packed_words.tobytes()).hexdigest()[:16],
            }
        )
    payload = {
        "command": "load-cache",
        "path": args.file,
        "kv_heads": cache.kv_heads,
        "head_dim": cache.head_dim,
        "tokens": cache.num_tokens,
        "rows": rows,
    }
    _emit(payload, args)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusedkv",
        description="Fused int4-KV attention: correctness suites, benchmarks, planning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--out", default=None, help="write output here instead of stdout")
        p.add_argument("--no-timestamp", action="store_true",
                       help="omit the timestamp for byte-identical reruns")

    p = sub.add_parser("verify", help="run oracle-equivalence and invariant suites")
    common(p)
    p.add_argument("--contexts", type=_int_list, default=None)
    p.add_argument("--fault-inject", action="store_true",
                   help="corrupt one packed nibble; the oracle suite must then fail")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="time fused vs baseline vs split-K")
    common(p)
    p.add_argument("--contexts", type=_int_list, default=None)
    p.add_argument("--head-dim", type=int, default=128)
    p.add_argument("--chunk-size", type=int, default=512)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--no-timing", action="store_true",
                   help="omit wall times (deterministic output)")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("memplan", help="KV memory footprints and max context")
    common(p)
    p.add_argument("--preset", default="llama-3.1-70b")
    p.add_argument("--contexts", type=_int_list, default=None)
    p.add_argument("--budget-gb", type=float, default=64.0)
    p.add_argument("--overhead-gb", type=float, default=2.0)
    p.set_defaults(fn=cmd_memplan)

    p = sub.add_parser("quality", help="per-codec quality reports")
    common(p)
    p.add_argument("--codec", choices=("int4", "polar4", "polar5", "qjl", "all"), default="all")
    p.add_argument("--trials", type=int, default=50)
    p.set_defaults(fn=cmd_quality)

    p = sub.add_parser("dump-cache", help="write a seeded synthetic cache snapshot")
    common(p)
    p.add_argument("--tokens", type=int, default=48)
    p.add_argument("--kv-heads", type=int, default=1)
    p.add_argument("--head-dim", type=int, default=64)
    p.set_defaults(fn=cmd_dump_cache)

    p = sub.add_parser("load-cache", help="read and check a cache snapshot")
    common(p)
    p.add_argument("file")
    p.set_defaults(fn=cmd_load_cache)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "dump-cache" and not args.out:
        parser.error("dump-cache requires --out PATH for the snapshot file")
    try:
        return args.fn(args)
    except FusedKvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
