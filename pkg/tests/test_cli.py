import json

import pytest

from fusedkv.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def run_json(capsys, *argv):
    code, out = run_cli(capsys, *argv, "--no-timestamp")
    return code, json.loads(out)


class TestVerify:
    def test_default_config_green(self, capsys):
        code, payload = run_json(capsys, "verify")
        assert code == 0
        assert payload["all_passed"]
        assert all(r["passed"] for r in payload["rows"])

    def test_fault_injection_detected(self, capsys):
        code, payload = run_json(capsys, "verify", "--fault-inject")
        assert code == 1
        failed = [r["suite"] for r in payload["rows"] if not r["passed"]]
        assert failed == ["fused_vs_oracle"]

    def test_single_token_edge_config(self, capsys):
        code, payload = run_json(capsys, "verify", "--contexts", "1")
        assert code == 0
        assert payload["all_passed"]

    def test_deterministic_output(self, capsys):
        _, first = run_cli(capsys, "verify", "--no-timestamp")
        _, second = run_cli(capsys, "verify", "--no-timestamp")
        assert first == second

    def test_timestamp_present_by_default(self, capsys):
        code, out = run_cli(capsys, "verify")
        assert code == 0
        assert "generated_at" in json.loads(out)


class TestBench:
    def test_checksums_match_across_paths(self, capsys):
        code, payload = run_json(
            capsys, "bench", "--contexts", "256,1024", "--head-dim", "64", "--reps", "2"
        )
        assert code == 0
        by_context = {}
        for row in payload["rows"]:
            if row["path"] in ("fused", "baseline", "splitk"):
                by_context.setdefault(row["context"], {})[row["path"]] = row
        for context, group in by_context.items():
            checksums = {r["checksum"] for r in group.values()}
            assert len(checksums) == 1, f"context {context}: {checksums}"
            assert group["baseline"]["peak_temp_bytes"] >= 2 * context * 64 * 4
        fused_peaks = {g["fused"]["peak_temp_bytes"] for g in by_context.values()}
        assert len(fused_peaks) == 1  # independent of context length

    def test_no_timing_output_is_deterministic(self, capsys):
        args = ("bench", "--contexts", "128", "--head-dim", "64", "--reps", "1",
                "--no-timing", "--no-timestamp")
        _, first = run_cli(capsys, *args)
        _, second = run_cli(capsys, *args)
        assert first == second


class TestMemplan:
    def test_reference_table_cells(self, capsys):
        code, payload = run_json(capsys, "memplan")
        assert code == 0
        expected = {
            1024: (0.3, 0.1, 41.2),
            16384: (5.0, 1.6, 42.7),
            65536: (20.0, 6.3, 47.4),
            131072: (40.0, 12.5, 53.6),
        }
        rows = {r["context"]: r for r in payload["rows"]}
        for context, (fp16_kv, int4_kv, total) in expected.items():
            row = rows[context]
            assert abs(row["fp16_kv_gib"] - fp16_kv) <= 0.1
            assert abs(row["int4_kv_gib"] - int4_kv) <= 0.1
            assert abs(row["int4_total_gib"] - total) <= 0.1
        assert 230 * 1024 <= payload["max_context_int4"] <= 240 * 1024
        assert 70 * 1024 <= payload["max_context_fp16"] <= 76 * 1024

    def test_generous_budget_fits_fp16(self, capsys):
        code, payload = run_json(capsys, "memplan", "--budget-gb", "128", "--contexts", "131072")
        assert code == 0
        assert payload["rows"][0]["fp16_fits"]

    def test_csv_matches_json(self, capsys, tmp_path):
        code, payload = run_json(capsys, "memplan", "--contexts", "1024,16384")
        assert code == 0
        csv_path = tmp_path / "plan.csv"
        code, _ = run_cli(capsys, "memplan", "--contexts", "1024,16384",
                          "--format", "csv", "--out", str(csv_path), "--no-timestamp")
        assert code == 0
        import csv as csv_mod

        with open(csv_path) as fp:
            csv_rows = list(csv_mod.DictReader(fp))
        assert len(csv_rows) == len(payload["rows"])
        for json_row, csv_row in zip(payload["rows"], csv_rows):
            for key, value in json_row.items():
                if isinstance(value, float):
                    assert float(csv_row[key]) == pytest.approx(value)
                elif isinstance(value, bool):
                    assert csv_row[key] == str(value)
                else:
                    assert type(value)(csv_row[key]) == value

    def test_unknown_preset_is_config_error(self, capsys):
        code = main(["memplan", "--preset", "not-a-model"])
        assert code == 2


class TestQuality:
    def test_single_codec(self, capsys):
        code, payload = run_json(capsys, "quality", "--codec", "int4", "--trials", "10")
        assert code == 0
        assert {r["scale_preset"] for r in payload["rows"]} == {"gemma-style", "llama-style"}
        for row in payload["rows"]:
            assert row["cosine_sim"] >= 0.99

    def test_full_report_includes_projections_and_ratio(self, capsys):
        code, payload = run_json(capsys, "quality", "--trials", "10")
        assert code == 0
        qjl_rows = [r for r in payload["rows"] if r["codec"] == "qjl"]
        assert any("correlation_after_80_layers" == r["scale_preset"] for r in qjl_rows)
        assert payload["polar4_kl_ratio_scale_1.0_vs_0.0884"] > 10
        assert payload["kv_asymmetry_value_quant_err"] >= payload["kv_asymmetry_key_quant_err"]


class TestCacheDumpLoad:
    def test_round_trip(self, capsys, tmp_path):
        path = tmp_path / "cache.fkvs"
        code, dumped = run_json(capsys, "dump-cache", "--out", str(path), "--tokens", "40")
        assert code == 0
        assert dumped["tokens"] == 40
        code, loaded = run_json(capsys, "load-cache", str(path))
        assert code == 0
        assert loaded["tokens"] == 40
        assert loaded["rows"][0]["packed_key_bytes"] > 0

    def test_dump_requires_out(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["dump-cache"])
        assert exc.value.code == 2

    def test_load_corrupted_file(self, capsys, tmp_path):
        path = tmp_path / "junk.fkvs"
        path.write_bytes(b"garbage!" + bytes(8))
        code = main(["load-cache", str(path)])
        assert code == 2

    def test_load_checksum_stable(self, capsys, tmp_path):
        path = tmp_path / "cache.fkvs"
        run_json(capsys, "dump-cache", "--out", str(path))
        _, first = run_json(capsys, "load-cache", str(path))
        _, second = run_json(capsys, "load-cache", str(path))
        assert first["rows"] == second["rows"]


class TestArgumentHandling:
    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["verify", "--frobnicate"])
        assert exc.value.code == 2

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["teleport"])
        assert exc.value.code == 2

    def test_bad_context_list_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--contexts", "12,abc"])
        assert exc.value.code == 2
