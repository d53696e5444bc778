"""Benchmark harness, CSV reports with companion figures, config parsing,
and the CLI entry points."""

import math

import pytest

from longctx.cli import load_config, main
from longctx.capacity import CapacityModel
from longctx.errors import ConfigError
from longctx.harness import (
    BENCH_FIELDS,
    BENCH_N_LAYERS,
    BenchSpec,
    bench_prefill,
    capacity_report,
    run_verify,
)
from longctx.report import (
    coefficient_of_variation,
    figure_path,
    read_csv,
    write_csv,
)


class TestReports:
    def test_csv_header_comes_first_and_roundtrips(self, tmp_path):
        path = tmp_path / "r.csv"
        rows = [{"a": 1, "b": "x"}, {"a": 2, "b": "y"}]
        write_csv(path, ["a", "b"], rows)
        first_line = path.read_text().splitlines()[0]
        assert first_line == "a,b"
        back = read_csv(path)
        assert back == [{"a": "1", "b": "x"}, {"a": "2", "b": "y"}]

    def test_figure_path_swaps_suffix(self):
        assert str(figure_path("out/bench.csv")).endswith("bench.png")

    def test_cv_definition(self):
        assert coefficient_of_variation([3.0]) == 0.0
        vals = [1.0, 2.0, 3.0]
        want = math.sqrt(2 / 3) / 2.0
        assert abs(coefficient_of_variation(vals) - want) <= 1e-12


class TestBench:
    def _spec(self, **overrides):
        base = dict(seq_len=64, head="full", world_size=2, reps=2,
                    vocab_size=128, seed=0)
        base.update(overrides)
        return BenchSpec(**base)

    def test_rows_are_well_formed(self):
        rows = bench_prefill(self._spec())
        assert len(rows) == 2
        for rep, row in enumerate(rows):
            assert row["rep"] == rep
            assert row["status"] == "ok"
            assert row["wall_time_s"] > 0
            assert row["peak_logit_rows"] == 64
            assert row["head_flops"] == 2 * 64 * 16 * 128
            assert row["frames_sent"] == BENCH_N_LAYERS * 2 * (2 - 1)
            assert set(row) == set(BENCH_FIELDS)

    def test_masked_head_uses_one_row(self):
        rows = bench_prefill(self._spec(head="masked"))
        assert rows[0]["peak_logit_rows"] == 1
        assert rows[0]["head_flops"] == 2 * 1 * 16 * 128

    def test_chunked_head_caps_rows_at_chunk(self):
        rows = bench_prefill(self._spec(head="chunked", chunk_len=16))
        assert rows[0]["peak_logit_rows"] == 16

    def test_frames_spec_sets_sequence_length(self):
        rows = bench_prefill(self._spec(seq_len=None, frames=1, world_size=1))
        assert rows[0]["seq_len"] == 256

    def test_budget_too_small_reports_oom(self):
        rows = bench_prefill(self._spec(memory_budget=100))
        assert len(rows) == 1
        assert rows[0]["status"] == "oom"
        assert math.isnan(rows[0]["wall_time_s"])
        assert rows[0]["peak_logit_rows"] == 64

    def test_budget_spares_the_masked_head(self):
        rows = bench_prefill(self._spec(head="masked", memory_budget=128 * 4))
        assert rows[0]["status"] == "ok"

    def test_seq_len_and_frames_are_exclusive(self):
        with pytest.raises(ConfigError):
            self._spec(frames=4).resolve_seq_len()
        with pytest.raises(ConfigError):
            self._spec(seq_len=None).resolve_seq_len()

    def test_out_writes_csv_and_figure(self, tmp_path):
        out = tmp_path / "bench.csv"
        bench_prefill(self._spec(out=str(out)))
        assert out.exists()
        parsed = read_csv(out)
        assert len(parsed) == 2 and parsed[0]["status"] == "ok"
        png = figure_path(out)
        assert png.exists() and png.stat().st_size > 0

    def test_oom_still_renders_a_figure(self, tmp_path):
        out = tmp_path / "bench.csv"
        bench_prefill(self._spec(memory_budget=100, out=str(out)))
        assert figure_path(out).exists()

    def test_tcp_transport_runs(self):
        rows = bench_prefill(self._spec(transport="tcp", reps=1))
        assert rows[0]["status"] == "ok"
        assert rows[0]["frames_sent"] == BENCH_N_LAYERS * 2


class TestCapacityReport:
    def test_rows_and_artifacts(self, tmp_path):
        out = tmp_path / "cap.csv"
        rows = capacity_report(CapacityModel(), [8, 16], out=str(out))
        assert [(r["strategy"], r["workers"]) for r in rows] == [
            ("full", 8), ("full", 16), ("masked", 8), ("masked", 16),
        ]
        by_key = {(r["strategy"], r["workers"]): r["max_context"] for r in rows}
        assert by_key[("masked", 8)] == 400_000
        assert by_key[("masked", 16)] == 800_000
        assert out.exists() and figure_path(out).exists()


class TestVerify:
    def test_all_checks_pass(self):
        results = run_verify()
        assert len(results) == 8
        for result in results:
            assert result.passed, f"{result.name}: {result.detail}"


class TestConfigFile:
    def test_parse_types_comments_and_blanks(self, tmp_path):
        path = tmp_path / "conf"
        path.write_text(
            "# defaults\n\nseq_len = 128\nhead=masked\nworkers=4  # ring size\n"
        )
        assert load_config(path) == {"seq_len": 128, "head": "masked", "workers": 4}

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "conf"
        path.write_text("wat=1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_equals_rejected(self, tmp_path):
        path = tmp_path / "conf"
        path.write_text("seq_len 128\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_flags_override_config(self, tmp_path, capsys):
        conf = tmp_path / "conf"
        conf.write_text("seq_len=32\nreps=1\nvocab_size=64\n")
        code = main(["bench-prefill", "--config", str(conf), "--head", "masked"])
        assert code == 0
        assert "peak logit rows 1" in capsys.readouterr().out


class TestCli:
    def test_verify_prints_pass_lines(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 8
        assert "8/8 checks passed" in out

    def test_tile_reports_grid_and_tokens(self, capsys):
        assert main(["tile", "--width", "896", "--height", "448"]) == 0
        out = capsys.readouterr().out
        assert "1x2" in out and "3 tiles" in out and "768 visual tokens" in out

    def test_pack_writes_output(self, tmp_path, capsys):
        out = tmp_path / "packs.txt"
        code = main(["pack", "--target-len", "32", "--mode", "reset",
                     "--out", str(out)])
        assert code == 0
        assert out.exists()
        assert "fill" in capsys.readouterr().out

    def test_capacity_prints_caps(self, capsys):
        assert main(["capacity", "--workers", "8"]) == 0
        out = capsys.readouterr().out
        assert "400,000" in out

    def test_bench_prefill_runs_small(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        code = main(["bench-prefill", "--seq-len", "64", "--reps", "1",
                     "--vocab", "64", "--out", str(out)])
        assert code == 0
        assert out.exists() and figure_path(out).exists()

    def test_engine_errors_exit_2(self, capsys):
        assert main(["tile", "--width", "0", "--height", "10"]) == 2
        assert "image extent" in capsys.readouterr().err

    def test_bad_subcommand_exits_nonzero(self):
        with pytest.raises(SystemExit):
            main(["nonsense"])
