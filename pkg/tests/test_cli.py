import json
import math
import re

import pytest

from bsolock.cli import DEFAULTS, EXPERIMENTS, main, parse_config
from bsolock.errors import ParseError, UnknownKey


def read_table(path):
    lines = path.read_text().splitlines()
    header = {}
    for line in lines:
        if line.startswith("# "):
            k, v = line[2:].split(": ", 1)
            header[k] = v
    body = [line for line in lines if not line.startswith("#")]
    cols = body[0].split(",")
    rows = [dict(zip(cols, map(float, line.split(",")))) for line in body[1:]]
    return header, cols, rows


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config("Reversal")
        assert cfg.parameters == DEFAULTS["Reversal"]
        assert cfg.seed == 0 and cfg.output_path == "Reversal.csv"

    def test_every_experiment_has_defaults(self):
        for name in EXPERIMENTS:
            assert parse_config(name).parameters == DEFAULTS[name]

    def test_flag_beats_file_beats_default(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("eta: 0.03\nphi: 0.5\nseed: 9\n")
        cfg = parse_config("Reversal", str(f), ["phi=0.7"])
        assert cfg.parameters["eta"] == 0.03
        assert cfg.parameters["phi"] == 0.7
        assert cfg.parameters["m_max"] == 20
        assert cfg.seed == 9
        assert parse_config("Reversal", str(f), seed=2).seed == 2

    def test_types_follow_defaults(self):
        cfg = parse_config("LockScan", overrides=["N=4", "exact=true", "eta=1e-2"])
        assert cfg.parameters["N"] == 4 and isinstance(cfg.parameters["N"], int)
        assert cfg.parameters["exact"] is True

    def test_unknown_key_named(self, tmp_path):
        with pytest.raises(UnknownKey, match="'etaa'"):
            parse_config("Reversal", overrides=["etaa=0.1"])
        f = tmp_path / "c.yaml"
        f.write_text("pairz: 4\n")
        with pytest.raises(UnknownKey, match="'pairz'"):
            parse_config("Teleport", str(f))

    def test_malformed_number_named(self):
        with pytest.raises(ParseError, match="'eta'"):
            parse_config("Reversal", overrides=["eta=0.0.5"])
        with pytest.raises(ParseError, match="'m_max'"):
            parse_config("Reversal", overrides=["m_max=2.5"])

    def test_malformed_yaml_reports_line(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("eta: 0.05\nphi: [0.3\n")
        with pytest.raises(ParseError, match="line"):
            parse_config("Reversal", str(f))

    def test_bad_seed(self):
        with pytest.raises(ParseError):
            parse_config("Reversal", seed=-1)


class TestMain:
    def test_bso_scan_depth(self, tmp_path):
        out = tmp_path / "bso.csv"
        assert main(["BsoScan", "--out", str(out), "--set", "points=8", "--set", "eta=0.01"]) == 0
        header, cols, rows = read_table(out)
        assert cols == ["phi", "excited_population", "fit_amplitude", "fit_offset"]
        assert len(rows) == 8
        assert rows[0]["fit_amplitude"] == pytest.approx(0.02, rel=0.05)
        assert header["eta"] == "0.01" and header["experiment"] == "BsoScan"

    def test_csv_format(self, tmp_path):
        out = tmp_path / "r.csv"
        assert main(["Reversal", "--out", str(out), "--set", "m_max=3"]) == 0
        raw = out.read_bytes()
        assert b"\r" not in raw and raw.endswith(b"\n")
        value = raw.decode().splitlines()[-1].split(",")[2]
        assert len(re.sub(r"[^0-9]", "", value.split("e")[0]).lstrip("0")) == 17

    def test_rerun_byte_identical(self, tmp_path):
        args = ["Teleport", "--set", "pairs=2000", "--seed", "7"]
        assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_manifest_reproduces(self, tmp_path):
        a = tmp_path / "a.csv"
        assert main(["LockLoop", "--out", str(a), "--seed", "3", "--set", "iterations=2", "--set", "N=2",
                     "--set", "samples=500", "--set", "scan_points=8"]) == 0
        manifest = tmp_path / "a.csv.manifest.json"
        data = json.loads(manifest.read_text())
        assert data["seed"] == 3 and data["experiment"] == "LockLoop"
        assert data["parameters"]["max_step"] == "inf"
        assert set(data["versions"]) == {"bsolock", "numpy", "scipy", "python"}
        assert "a.csv.transcript.jsonl" in data["outputs"]
        b = tmp_path / "b.csv"
        assert main(["LockLoop", "--config", str(manifest), "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_manifest_for_other_experiment_refused(self, tmp_path, capsys):
        a = tmp_path / "a.csv"
        assert main(["Reversal", "--out", str(a), "--set", "m_max=2"]) == 0
        assert main(["Teleport", "--config", str(tmp_path / "a.csv.manifest.json")]) == 2

    def test_invalid_run_exits_nonzero(self, tmp_path, capsys):
        code = main(["Teleport", "--out", str(tmp_path / "t.csv"), "--set", "pairs=0"])
        assert code != 0
        assert "pairs" in capsys.readouterr().err
        assert not (tmp_path / "t.csv").exists()

    def test_config_error_exit_code(self, capsys):
        assert main(["Reversal", "--set", "bogus=1"]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_teleport_transcript_clean(self, tmp_path):
        out = tmp_path / "t.csv"
        assert main(["Teleport", "--out", str(out), "--set", "pairs=1000", "--set", "drop=0.3"]) == 0
        header, _, rows = read_table(out)
        assert header["audit_violations"] == "0"
        lines = (tmp_path / "t.csv.transcript.jsonl").read_text().splitlines()
        assert all(json.loads(line)["kind"] in {"ExcitationComplete", "IndexList", "Ack"} for line in lines)

    def test_reversal_columns(self, tmp_path):
        out = tmp_path / "r.csv"
        assert main(["Reversal", "--out", str(out), "--set", "m_max=2"]) == 0
        _, cols, rows = read_table(out)
        assert cols[:3] == ["m", "T_on", "fidelity_on"]
        for r in rows:
            assert r["fidelity_on"] > r["fidelity_off"]
            assert r["fidelity_rwa"] == pytest.approx(1.0, abs=1e-10)
            assert r["T_on"] == pytest.approx(r["m"] * math.pi)
