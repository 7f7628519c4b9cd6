import json
import subprocess
import sys

import pytest

from fiveg_privacy.cli import EXIT_OK, EXIT_USAGE, EXIT_VULNERABLE, main
from fiveg_privacy.profiles import PRESET_NAMES, hardened, profile_to_dict
from fiveg_privacy.proto import decode_trace

from oracles import EXPECTED_TABLE, PRESET_ORDER


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_list_profiles(capsys):
    code, out, _ = run(capsys, "list-profiles")
    assert code == EXIT_OK
    assert [line.split()[0] for line in out.splitlines()] == list(PRESET_NAMES)
    code, out, _ = run(capsys, "list-profiles", "--format", "structured")
    assert json.loads(out)["oai"] == ["E4", "E5"]


def test_simulate_attack_text_and_exit_codes(capsys):
    code, out, _ = run(capsys, "simulate", "--profile", "operator-nsa", "--attack", "imsi_catching")
    assert code == EXIT_OK and "Vulnerable" in out
    code, _, _ = run(capsys, "simulate", "--profile", "operator-nsa", "--attack", "imsi_catching",
                     "--fail-on-vulnerable")
    assert code == EXIT_VULNERABLE
    code, _, _ = run(capsys, "simulate", "--profile", "oai", "--attack", "imsi_catching",
                     "--fail-on-vulnerable")
    assert code == EXIT_OK


def test_simulate_structured_and_trace(capsys, tmp_path):
    path = tmp_path / "t.jsonl"
    code, out, _ = run(capsys, "simulate", "--profile", "operator-sa-b", "--attack",
                       "guti_realloc_tracking", "--format", "structured", "--trace", str(path))
    doc = json.loads(out)
    assert code == EXIT_OK and doc["outcome"] == "Vulnerable" and doc["evidence"]
    trace = decode_trace(path.read_bytes())
    assert set(doc["evidence"]) <= {e.seq for e in trace}


def test_simulate_session_then_audit(capsys, tmp_path):
    path = tmp_path / "s.jsonl"
    code, out, _ = run(capsys, "simulate", "--profile", "oai", "--paging-cycles", "2",
                       "--trace", str(path))
    assert code == EXIT_OK and out.startswith("oai:")
    code, out, _ = run(capsys, "audit", "--trace", str(path), "--format", "structured")
    assert code == EXIT_OK
    assert [f["rule"] for f in json.loads(out)] == ["R4", "R8", "R9"]
    code, _, _ = run(capsys, "audit", "--trace", str(path), "--fail-on-vulnerable")
    assert code == EXIT_VULNERABLE
    code, out, _ = run(capsys, "audit", "--trace", str(path), "--rules", "R1")
    assert code == EXIT_OK and "0 findings" in out


def test_adversary_override(capsys):
    code, out, _ = run(capsys, "simulate", "--profile", "operator-nsa", "--attack", "imsi_catching",
                       "--adversary", "passive", "--format", "structured")
    doc = json.loads(out)
    assert doc["outcome"] == "Mitigated" and "lacks" in doc["detail"]


def test_matrix_text_structured_and_file(capsys, tmp_path):
    code, out, _ = run(capsys, "matrix")
    assert code == EXIT_OK and out.splitlines()[0].split()[1:] == list(PRESET_ORDER)
    out_file = tmp_path / "m.json"
    code, _, _ = run(capsys, "matrix", "--format", "structured", "--out", str(out_file))
    doc = json.loads(out_file.read_text())
    for attack, row in EXPECTED_TABLE.items():
        assert tuple(doc["cells"][attack][p] for p in PRESET_ORDER) == row
    assert doc["generated_at"] is None
    code, _, _ = run(capsys, "matrix", "--fail-on-vulnerable")
    assert code == EXIT_VULNERABLE


def test_matrix_combined_and_stamp(capsys):
    code, out, _ = run(capsys, "matrix", "--combine-sa", "--stamp", "--format", "structured")
    doc = json.loads(out)
    assert doc["columns"] == ["operator-nsa", "operator-sa", "oai"]
    assert doc["generated_at"] is not None


def test_matrix_with_profile_file(capsys, tmp_path):
    path = tmp_path / "hard.json"
    path.write_text(json.dumps(profile_to_dict(hardened("lab"))))
    code, out, _ = run(capsys, "matrix", "--profiles", str(path), "--fail-on-vulnerable")
    assert code == EXIT_OK and "lab" in out.splitlines()[0]


@pytest.mark.parametrize("argv,needle", [
    (["simulate", "--profile", "nope"], "valid names"),
    (["simulate"], "required"),
    (["simulate", "--profile", "oai", "--attack", "nope"], "invalid choice"),
    (["audit", "--trace", "/nonexistent/x.jsonl"], "cannot read"),
    (["explain", "zzz"], "nothing to explain"),
    (["frobnicate"], "invalid choice"),
    (["matrix", "--profiles", "oai", "nope"], "unknown profile"),
])
def test_usage_errors_exit_one(capsys, argv, needle):
    code, _, err = run(capsys, *argv)
    assert code == EXIT_USAGE and needle in err


def test_bad_trace_reports_line(capsys, tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{}\n")
    code, _, err = run(capsys, "audit", "--trace", str(path))
    assert code == EXIT_USAGE and "line 1" in err


def test_bad_profile_file_reports_field(capsys, tmp_path):
    d = profile_to_dict(hardened())
    d["nas_ciphering"] = "NEA7"
    path = tmp_path / "p.json"
    path.write_text(json.dumps(d))
    code, _, err = run(capsys, "simulate", "--profile", str(path))
    assert code == EXIT_USAGE and "nas_ciphering" in err


def test_explain(capsys):
    code, out, _ = run(capsys, "explain", "R7")
    assert code == EXIT_OK and out.startswith("R7")


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fiveg_privacy", "explain", "E1"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.startswith("E1")
