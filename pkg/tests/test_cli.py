import json
import math

import pytest

from qdlink import cli
from qdlink.config import ConfigError, ExperimentConfig, dump_config, parse_config
from qdlink.protocol import NoiseParams, ProtocolParams
from qdlink.timetags import HEADER, read_timetags


def run(argv):
    return cli.main([str(a) for a in argv])


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg == ExperimentConfig()
        assert cfg.protocol == ProtocolParams()

    def test_parse_values(self):
        cfg = parse_config("""
            # a comment
            p = 0.05          # trailing comment
            zeeman_A = 2*pi*25.1e9
            dark_rate = 3
            seed = 17
            conditioned = false
            schedule = sweep
        """)
        assert cfg.protocol.p == 0.05
        assert cfg.protocol.zeeman_A == pytest.approx(2 * math.pi * 25.1e9)
        assert cfg.noise.dark_rate == 3.0
        assert cfg.run.seed == 17 and cfg.run.conditioned is False
        assert all(v.basis == "transverse" for v in cfg.schedule())

    @pytest.mark.parametrize("text", ["bogus = 1", "p 0.1", "p = abc", "p = 1.5", "seed = 1.5",
                                      "schedule = spiral", "conditioned = maybe"])
    def test_rejects_bad_input(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_dump_round_trip(self):
        cfg = parse_config("p = 0.02\nhom_visibility = 0.9\nshard_count = 3")
        assert parse_config(dump_config(cfg)) == cfg


class TestPrecedence:
    @pytest.fixture
    def config_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("p = 0.02\nseed = 5\nshard_count = 2\nn_attempts = 1000\n")
        return path

    def args(self, *argv):
        return cli.build_parser().parse_args(["simulate", "-o", "x", *map(str, argv)])

    def test_config_file(self, config_file):
        cfg = cli.resolve_config(self.args("--config", config_file))
        assert cfg.protocol.p == 0.02
        assert (cfg.run.seed, cfg.run.shard_count, cfg.run.n_attempts) == (5, 2, 1000)

    def test_flags_override_config(self, config_file):
        cfg = cli.resolve_config(self.args("--config", config_file, "--seed", "9", "--shards", "4",
                                           "--attempts", "50"))
        assert (cfg.run.seed, cfg.run.shard_count, cfg.run.n_attempts) == (9, 4, 50)
        assert cfg.protocol.p == 0.02

    def test_reference_defaults_reset_physics_only(self, config_file):
        cfg = cli.resolve_config(self.args("--config", config_file, "--paper-defaults", "--seed", "3"))
        assert cfg.protocol == ProtocolParams() and cfg.noise == NoiseParams()
        assert (cfg.run.seed, cfg.run.shard_count) == (3, 2)


class TestCommands:
    def test_simulate_zero_attempts(self, tmp_path):
        out = tmp_path / "empty.qtt"
        assert run(["simulate", "-o", out, "--attempts", 0]) == 0
        assert out.stat().st_size == HEADER.size
        header, tags = read_timetags(out)
        assert header.record_count == 0
        meta = json.loads((tmp_path / "empty.qtt.meta.json").read_text())
        assert meta["config"]["run"]["n_attempts"] == 0

    def test_simulate_then_analyze(self, tmp_path):
        out = tmp_path / "run.qtt"
        assert run(["simulate", "-o", out, "--attempts", 10**8, "--seed", 1]) == 0
        assert run(["analyze", "tomography", out, "-o", tmp_path / "tomo.csv"]) == 0
        rows = (tmp_path / "tomo.csv").read_text().splitlines()
        assert rows[0] == "label,value,uncertainty"
        assert any(r.startswith("fidelity,") for r in rows)

    def test_analyze_g2(self, tmp_path):
        out = tmp_path / "g2.qtt"
        assert run(["simulate", "-o", out, "--mode", "g2", "--block", "A", "--attempts", 10**7]) == 0
        assert run(["analyze", "g2", out, "-o", tmp_path / "g2.csv"]) == 0
        assert run(["analyze", "lifetime", out, "-o", tmp_path / "life.csv"]) == 0

    def test_curves_operating_point(self, tmp_path, capsys):
        assert run(["curves", "-o", tmp_path]) == 0
        assert "rate 7303 Hz" in capsys.readouterr().out
        lines = (tmp_path / "fidelity_vs_rate.csv").read_text().splitlines()
        assert lines[0] == "p,rate_hz,fidelity,true_fraction"
        row = [r for r in lines[1:] if float(r.split(",")[0]) == 0.07]
        assert len(row) == 1
        _, rate, fid, _ = map(float, row[0].split(","))
        assert rate == pytest.approx(7.3e3, rel=0.02)
        assert fid == pytest.approx(0.616, abs=0.01)
        assert {p.name for p in tmp_path.iterdir()} >= {"ramsey.csv", "phase_sweep.csv", "budget.csv"}

    def test_unknown_key_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nonsense = 1\n")
        assert run(["curves", "-o", tmp_path, "--config", cfg]) == 2
        report = json.loads(capsys.readouterr().err)
        assert report["error"] == "ConfigError"

    def test_corrupt_stream_is_reported(self, tmp_path, capsys):
        bad = tmp_path / "bad.qtt"
        bad.write_bytes(b"QTT1" + bytes(10))
        assert run(["analyze", "g2", bad, "-o", tmp_path / "x.csv"]) == 2
        assert json.loads(capsys.readouterr().err)["error"] == "TimeTagFormatError"

    def test_reproduce_fig4_and_workdir_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.WORKDIR_ENV, str(tmp_path / "env"))
        assert run(["reproduce", "fig4"]) == 0
        summary = json.loads((tmp_path / "env" / "fig4_summary.json").read_text())
        assert summary["passed"] and summary["outputs"] == ["fig4_fidelity_vs_rate.csv"]

    def test_failed_check_exit_code(self, tmp_path):
        cfg = tmp_path / "off.cfg"
        cfg.write_text("p = 0.2\n")
        assert run(["reproduce", "fig4", "--config", cfg, "--workdir", tmp_path]) == 1
        summary = json.loads((tmp_path / "fig4_summary.json").read_text())
        assert not summary["passed"]
        assert any(not c["passed"] for c in summary["checks"])

    def test_reproduce_fig3_deterministic(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            wd = tmp_path / name
            rc = run(["reproduce", "fig3", "--attempts", 5 * 10**7, "--seed", 21, "--shards", 3, "--workdir", wd])
            assert rc in (0, 1)
            outs.append({p.name: p.read_bytes() for p in wd.glob("*.csv")})
        assert set(outs[0]) == {"fig3a_tomography.csv", "fig3d_sweep.csv"}
        assert outs[0] == outs[1]
