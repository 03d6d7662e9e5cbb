"""Command-line front end tests.

Everything here runs tiny replica counts; the statistical content of the
subcommands is covered elsewhere.  What matters here is the config
resolution order, the shape and stability of the emitted records, and
the exit codes.
"""

import json
import subprocess
import sys

import pytest

from avoidance import acceptance, cli
from avoidance.errors import UsageError


def parse(*argv):
    return cli.parse_config(list(argv))


TINY_ANNULUS = ["annulus", "--n", "20", "--replicas", "1000", "--seed", "7"]


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

class TestParseConfig:
    def test_defaults_fill_in(self):
        cfg = parse("annulus")
        assert cfg.command == "annulus"
        assert cfg.params == {"n": 100.0, "a": 0.51, "A": 2.0,
                              "replicas": 200_000}
        assert cfg.seed == cli.DEFAULT_SEED
        assert cfg.format == "json"
        assert cfg.output is None
        assert all(v == "default" for v in cfg.provenance.values())

    def test_flags_are_recorded(self):
        cfg = parse("annulus", "--a", "0.6", "--seed", "3")
        assert cfg.params["a"] == 0.6
        assert cfg.seed == 3
        assert cfg.provenance["a"] == "flag"
        assert cfg.provenance["seed"] == "flag"
        assert cfg.provenance["A"] == "default"

    def test_config_file_then_flag_override(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("n = 30\na = 0.6\n# comment\nreplicas = 500\nseed = 11\n")
        cfg = parse("annulus", "--config", str(f), "--a", "0.51")
        assert cfg.params["n"] == 30.0
        assert cfg.params["replicas"] == 500
        assert cfg.params["a"] == 0.51  # flag wins over the file
        assert cfg.seed == 11
        assert cfg.provenance["n"] == "config"
        assert cfg.provenance["a"] == "flag"
        assert cfg.provenance["seed"] == "config"

    def test_unknown_config_key(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("bogus = 3\n")
        with pytest.raises(UsageError, match="unknown config key 'bogus'"):
            parse("annulus", "--config", str(f))

    def test_malformed_config_line(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("just some words\n")
        with pytest.raises(UsageError, match="expected key=value"):
            parse("annulus", "--config", str(f))

    def test_bad_config_value(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("n = abc\n")
        with pytest.raises(UsageError, match="config key 'n'"):
            parse("annulus", "--config", str(f))

    def test_missing_config_file(self):
        with pytest.raises(UsageError, match="cannot read config file"):
            parse("annulus", "--config", "/no/such/file.cfg")

    def test_unknown_flag_exits(self):
        with pytest.raises(SystemExit):
            parse("annulus", "--bogus", "1")

    def test_command_is_required(self):
        with pytest.raises(SystemExit):
            parse()

    def test_nonpositive_replicas_rejected(self):
        with pytest.raises(UsageError, match="--replicas"):
            parse("annulus", "--replicas", "0")

    def test_point_and_optional_converters(self):
        cfg = parse("couple-step", "--s2=-1,1,0,0", "--sample-size", "none",
                    "--epsilon", "0.25")
        assert cfg.params["s2"] == (-1, 1, 0, 0)
        assert cfg.params["sample-size"] is None
        assert cfg.params["epsilon"] == 0.25

    def test_help_documents_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            parse("green", "--help")
        assert exc.value.code == 0
        assert "(default (1, 0, 0, 0))" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

class TestRunRecords:
    def test_record_shape(self):
        record = cli.run(parse("invsq", "--n", "50", "--replicas", "200",
                               "--seed", "7"))
        assert record["schema"] == 1
        assert record["version"].startswith("v0.1.0")
        assert record["command"] == "invsq"
        assert record["seed"] == 7
        assert record["replicas"] == 200
        assert record["params"] == {"n": 50, "replicas": 200}
        assert record["provenance"]["n"] == "flag"
        assert 0.0 < record["value"]
        assert record["stderr"] > 0.0
        assert record["ci95"][0] < record["value"] < record["ci95"][1]
        assert record["wall_time"] > 0.0

    def test_rerun_is_byte_identical_except_wall_time(self):
        texts = []
        for _ in range(2):
            record = cli.run(parse(*TINY_ANNULUS))
            record.pop("wall_time")
            texts.append(json.dumps(record, sort_keys=True))
        assert texts[0] == texts[1]

    def test_seed_changes_the_estimate(self):
        a = cli.run(parse("invsq", "--n", "50", "--replicas", "200",
                          "--seed", "1"))
        b = cli.run(parse("invsq", "--n", "50", "--replicas", "200",
                          "--seed", "2"))
        assert a["value"] != b["value"]

    def test_worker_count_is_inert(self, monkeypatch):
        vals = {}
        for workers in ("1", "8"):
            monkeypatch.setenv("AVOIDANCE_THREADS", workers)
            record = cli.run(parse(*TINY_ANNULUS))
            vals[workers] = (record["value"], record["stderr"])
        assert vals["1"] == vals["8"]

    def test_exit_time_record_carries_tails(self):
        record = cli.run(parse("exit-time", "--n", "5", "--replicas", "300",
                               "--seed", "7"))
        assert [t for t, _, _ in record["tails"]] == [25, 50, 100, 200]

    @pytest.mark.filterwarnings("ignore::UserWarning")
    def test_drive_single_record(self):
        record = cli.run(parse("drive", "--radii", "4,8", "--sample-size",
                               "48", "--budget", "8", "--seed", "5"))
        assert record["value"] in (0.0, 1.0)
        assert record["stderr"] is None
        assert len(record["schedule"]) == 2
        assert len(record["p_sequence"]) <= 2
        assert {"first", "second"} == set(record["segments"])

    @pytest.mark.filterwarnings("ignore::UserWarning")
    def test_drive_batch_record(self):
        record = cli.run(parse("drive", "--radii", "4,8", "--replicas", "3",
                               "--sample-size", "48", "--budget", "8",
                               "--seed", "5"))
        assert len(record["drives"]) == 3
        assert 0.0 <= record["value"] <= 1.0
        assert all("p_sequence" in d for d in record["drives"])


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

class TestEmitReport:
    def test_json_round_trip(self, tmp_path):
        out = tmp_path / "report.json"
        cfg = parse("invsq", "--n", "50", "--replicas", "200", "--seed", "7",
                    "--output", str(out))
        record = cli.run(cfg)
        cli.emit_report(record, cfg)
        loaded = json.loads(out.read_text())
        assert loaded == json.loads(json.dumps(record))

    @pytest.mark.filterwarnings("ignore::UserWarning")
    def test_hittability_csv_header(self, tmp_path):
        out = tmp_path / "sweep.csv"
        cfg = parse("hittability", "--n", "8", "--m", "16", "--eps", "0.2,0.4",
                    "--outer", "10", "--inner", "10", "--seed", "7",
                    "--format", "csv", "--output", str(out))
        cli.emit_report(cli.run(cfg), cfg)
        lines = out.read_text().splitlines()
        assert lines[0] == "ε,δ,stderr,replicas"
        assert len(lines) == 3
        assert lines[1].startswith("0.2,")

    def test_scalar_csv_shape(self):
        cfg = parse(*TINY_ANNULUS, "--format", "csv")
        text = cli.render(cli.run(cfg), "csv")
        lines = text.splitlines()
        assert lines[0] == ("command,seed,value,stderr,ci_lo,ci_hi,"
                            "replicas,wall_time")
        assert lines[1].startswith("annulus,7,")

    def test_unwritable_output_is_io_error(self, capsys):
        code = cli.main(["invsq", "--n", "20", "--replicas", "50",
                         "--output", "/no-such-dir/report.json"])
        assert code == 3
        assert "cannot write report" in capsys.readouterr().err

    def test_stdout_when_no_output(self, capsys):
        assert cli.main(["invsq", "--n", "20", "--replicas", "50",
                         "--seed", "7"]) == 0
        record = json.loads(capsys.readouterr().out)
        assert record["command"] == "invsq"


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------

class TestMainExitCodes:
    def test_domain_error_maps_to_usage_exit(self, capsys):
        code = cli.main(["annulus", "--a", "1.5", "--A", "2"])
        assert code == 2
        assert "a must lie in (0,1)" in capsys.readouterr().err

    def test_verify_all_pass_is_zero(self, capsys):
        code = cli.main(["verify-all", "--only", "pass-through-ratio"])
        assert code == 0
        record = json.loads(capsys.readouterr().out)
        assert record["passed"] is True
        assert record["checks"][0]["name"] == "pass-through-ratio"

    def test_verify_all_failure_is_one(self, capsys, monkeypatch):
        def stub(seed):
            return acceptance.CheckResult("stub", False, "forced", {}, 0.0)

        monkeypatch.setattr(acceptance, "CHECKS", (("stub", stub),))
        code = cli.main(["verify-all", "--only", "stub"])
        assert code == 1
        record = json.loads(capsys.readouterr().out)
        assert record["passed"] is False
        assert record["value"] == 0.0

    def test_verify_all_unknown_check_name(self, capsys):
        assert cli.main(["verify-all", "--only", "no-such-check"]) == 2
        assert "unknown check names" in capsys.readouterr().err

    def test_verify_all_csv_has_row_per_check(self):
        cfg = parse("verify-all", "--only", "pass-through-ratio",
                    "--format", "csv")
        lines = cli.render(cli.run(cfg), "csv").splitlines()
        assert lines[0] == "name,passed,detail,wall_time"
        assert lines[1].startswith("pass-through-ratio,True,")


class TestModuleEntry:
    def test_python_dash_m(self):
        proc = subprocess.run(
            [sys.executable, "-m", "avoidance", "invsq", "--n", "20",
             "--replicas", "50", "--seed", "7"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert json.loads(proc.stdout)["command"] == "invsq"
