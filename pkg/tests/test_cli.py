import json

from kvlab.cli import main
from kvlab.trace import generate_trace, ingest_trace, write_trace


def _write_request_list(path):
    rows = [
        {"id": "r0", "arrival_ms": 0.0, "tokens": [1], "hit_rate": 0.9},
        {"id": "r1", "arrival_ms": 1.0, "tokens": [1], "hit_rate": 0.1},
        {"id": "r2", "arrival_ms": 2.0, "tokens": [1], "hit_rate": 0.8},
        {"id": "r3", "arrival_ms": 3.0, "tokens": [1], "hit_rate": 0.2},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")


SMALL_MODEL_FLAGS = ["--num-layers", "2", "--num-heads", "2", "--d-model", "16",
                     "--vocab-size", "256", "--window-size", "4"]


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["conjure"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_required_flag(self):
        assert main(["simulate"]) == 1

    def test_missing_file_is_io_error(self, tmp_path):
        assert main(["match", str(tmp_path / "none.txt"),
                     str(tmp_path / "none2.txt")]) == 2

    def test_success(self, capsys, tmp_path):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        a.write_text("5 6 7 8 9")
        b.write_text("1 2 6 7 8 3")
        assert main(["match", str(a), str(b), "--window", "3"]) == 0


class TestMatchCommand:
    def test_hand_traced_hit_rates(self, capsys, tmp_path):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        a.write_text("5 6 7 8 9")
        b.write_text("1 2 6 7 8 3")
        out = tmp_path / "match.json"
        assert main(["match", str(a), str(b), "--window", "3",
                     "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["adaptive"]["hit_rate"] == 0.6
        assert report["adaptive"]["target_matches"] == [1, 2, 3]
        assert report["fixed"]["hit_rate"] == 0.0

    def test_non_integer_tokens_rejected(self, tmp_path):
        a = tmp_path / "a.txt"
        a.write_text("1 2 three")
        b = tmp_path / "b.txt"
        b.write_text("1 2 3")
        assert main(["match", str(a), str(b)]) == 1


class TestScheduleCommand:
    def test_bimodal_example_totals(self, capsys, tmp_path):
        path = tmp_path / "reqs.jsonl"
        _write_request_list(path)
        assert main(["schedule", "--trace", str(path), "--batch-size", "2"]) == 0
        out = capsys.readouterr().out
        assert "150.9253" in out      # sorted batching
        assert "161.4214" in out      # fcfs mixes the modes
        assert "brute-force" in out

    def test_missing_hit_rate_is_validation_error(self, tmp_path):
        path = tmp_path / "reqs.jsonl"
        path.write_text(json.dumps({"id": "a", "arrival_ms": 0, "tokens": [1]}) + "\n")
        assert main(["schedule", "--trace", str(path)]) == 1


class TestGenTraceCommand:
    def test_output_is_ingestible(self, tmp_path):
        out = tmp_path / "trace.jsonl"
        assert main(["gen-trace", "--out", str(out), "--requests", "5",
                     "--vocab-size", "256"]) == 0
        assert len(ingest_trace(out)) == 5

    def test_bimodal_flag(self, tmp_path):
        out = tmp_path / "trace.jsonl"
        assert main(["gen-trace", "--out", str(out), "--requests", "6",
                     "--bimodal", "--vocab-size", "256"]) == 0
        ids = [r.id for r in ingest_trace(out)]
        assert any(i.startswith("warm") for i in ids)
        assert any(i.startswith("hit") for i in ids)


class TestSimulateCommand:
    def _trace(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        write_trace(generate_trace(num_requests=5, seed=3, vocab_size=256,
                                   chunk_len=8, decode_steps=2), path)
        return path

    def test_fixed_seed_reports_are_byte_identical(self, tmp_path):
        trace = self._trace(tmp_path)
        outs = [tmp_path / "r1.json", tmp_path / "r2.json"]
        for out in outs:
            assert main(["simulate", "--trace", str(trace), "--seed", "5",
                         "--out", str(out), *SMALL_MODEL_FLAGS]) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()

    def test_csv_format(self, tmp_path):
        trace = self._trace(tmp_path)
        out = tmp_path / "rep.csv"
        assert main(["simulate", "--trace", str(trace), "--format", "csv",
                     "--out", str(out), *SMALL_MODEL_FLAGS]) == 0
        assert out.exists() and (tmp_path / "rep.agg.csv").exists()
        assert len(out.read_text().strip().splitlines()) == 6

    def test_cache_file_persists_between_runs(self, tmp_path):
        trace = self._trace(tmp_path)
        cache = tmp_path / "pool.bin"
        out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
        for out in (out1, out2):
            assert main(["simulate", "--trace", str(trace),
                         "--cache-file", str(cache), "--out", str(out),
                         *SMALL_MODEL_FLAGS]) == 0
        first = json.loads(out1.read_text())["aggregate"]["mean_hit_rate"]
        second = json.loads(out2.read_text())["aggregate"]["mean_hit_rate"]
        assert cache.exists()
        assert second >= first
        assert second == 1.0  # identical trace replayed against a warm pool

    def test_config_file_with_flag_override(self, tmp_path):
        trace = self._trace(tmp_path)
        config = tmp_path / "run.cfg"
        config.write_text(
            "mode = naive\nratio = 0.4  # flat key = value\n"
            "num-layers = 2\nnum-heads = 2\nd-model = 16\nvocab-size = 256\n"
            "window-size = 4\n"
        )
        out = tmp_path / "rep.json"
        assert main(["simulate", "--trace", str(trace), "--config", str(config),
                     "--mode", "selective", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["config"]["mode"] == "selective"  # flag wins
        assert report["config"]["ratio"] == 0.4          # file value kept

    def test_bad_config_key(self, tmp_path):
        trace = self._trace(tmp_path)
        config = tmp_path / "run.cfg"
        config.write_text("warp-speed = 9\n")
        assert main(["simulate", "--trace", str(trace),
                     "--config", str(config)]) == 1

    def test_unwritable_output_is_io_error(self, tmp_path):
        trace = self._trace(tmp_path)
        assert main(["simulate", "--trace", str(trace), "--out",
                     str(tmp_path / "missing" / "dir" / "r.json"),
                     *SMALL_MODEL_FLAGS]) == 2


class TestStudyCommands:
    def test_deviate_smoke(self, capsys):
        assert main(["deviate", "--instances", "2"]) == 0
        assert "ratios" in capsys.readouterr().out

    def test_select_smoke(self, capsys):
        assert main(["select", "--instances", "3"]) == 0
        out = capsys.readouterr().out
        assert "ideal" in out and "attention_weighted" in out
