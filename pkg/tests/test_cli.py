import json
import shutil

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustplane.cli import DISCREPANCY, OK, USAGE, main
from trustplane.model import fixture_path


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_boundaries_scoped_table(capsys):
    code, out, _ = run(capsys, "analyze", "boundaries", "--arch", "fixtures/paper_arch.json", "--mode", "scoped")
    assert code == OK and out.strip().splitlines()[-1].split() == ["Total", "200", "56", "72%"]


def test_boundaries_json_and_csv(capsys):
    code, out, _ = run(capsys, "analyze", "boundaries", "--format", "json", "--rows")
    doc = json.loads(out)
    assert code == OK and doc["total"]["scoped"] == 56 and len(doc["boundaries"]) == 200
    code, out, _ = run(capsys, "analyze", "boundaries", "--mode", "flat", "--format", "csv")
    assert out.strip().splitlines()[-1] == "total,200,200,0,0"


def test_boundaries_empty_arch(capsys, tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("{}")
    code, out, _ = run(capsys, "analyze", "boundaries", "--arch", str(path), "--mode", "flat")
    assert code == OK and out.strip().splitlines()[-1].split() == ["Total", "0", "0", "0%"]


def test_boundaries_diff(capsys, tmp_path):
    code, out, _ = run(capsys, "analyze", "boundaries", "--diff-fixture", "fixtures/appendix_c_boundaries.json")
    assert code == OK and "0 discrepancies" in out
    doc = json.loads(fixture_path("paper_arch.json").read_text())
    doc["handoffs"].append(["Monitor", "Admin"])
    path = tmp_path / "perturbed.json"
    path.write_text(json.dumps(doc))
    code, out, _ = run(capsys, "analyze", "boundaries", "--arch", str(path),
                       "--diff-fixture", "fixtures/appendix_c_boundaries.json")
    assert code == DISCREPANCY and "1 discrepancies" in out


def test_coverage_reports_summary_mismatch(capsys):
    code, out, _ = run(capsys, "analyze", "coverage", "--ablate", "P2")
    assert code == DISCREPANCY
    assert "note: P2 primary stated 3, counted 4" in out
    assert "without P2 (primary): 4 flagged" in out
    code, out, _ = run(capsys, "analyze", "coverage", "--format", "json")
    assert json.loads(out)["secondary"] == {"P1": 1, "P2": 0, "P3": 1, "P4": 0, "P5": 2}


def test_coverage_consistent_matrix_exits_zero(capsys, tmp_path):
    doc = json.loads(fixture_path("table3_matrix.json").read_text())
    doc.pop("summary")
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    assert run(capsys, "analyze", "coverage", "--matrix", str(path))[0] == OK


def test_coverage_malformed(capsys, tmp_path):
    path = tmp_path / "m.json"
    path.write_text('{"principles": ["P1"], "vectors": ["V"], "cells": [["maybe"]]}')
    code, _, err = run(capsys, "analyze", "coverage", "--matrix", str(path))
    assert code == USAGE and "unknown mark" in err


def test_trace(capsys):
    code, out, _ = run(capsys, "trace", "--chain", "builtin:AP-3", "--format", "json")
    assert code == OK and json.loads(out)[0]["summary"] == "Blocked at step 2 [P1, P3]"
    code, out, _ = run(capsys, "trace", "--chain", "builtin:AP-4", "--format", "json")
    assert json.loads(out)[0]["summary"] == "Constrained at step 1 [P5, P2]"
    code, out, _ = run(capsys, "trace", "--flat", "--chain", "builtin:AP-1", "--format", "json")
    assert json.loads(out)[0]["summary"] == "Completed (4 steps)"
    assert run(capsys, "trace", "--chain", "builtin:AP-7")[0] == USAGE


def test_simulate(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--scenario", "builtin:lifecycle")
    assert code == OK and "audit: Intact" in out
    code, out, _ = run(capsys, "simulate", "--inject", "AP-2@10", "--out", str(tmp_path), "--format", "json")
    report = json.loads(out)
    assert code == OK and report["counts"]["memory_writes_rejected"] == 1
    assert json.loads((tmp_path / "report.json").read_text()) == report
    code, out, _ = run(capsys, "audit", "verify", "--log", str(tmp_path / "audit.jsonl"),
                       "--head", report["audit"]["head"], "--length", str(report["audit"]["length"]))
    assert code == OK and out.startswith("Intact")


@pytest.mark.parametrize("argv", [
    ["simulate", "--scenario", "missing.json"],
    ["simulate", "--inject", "AP-2"],
    ["simulate", "--inject", "AP-2@soon"],
    ["simulate", "--inject", "AP-9@3"],
    ["simulate", "--scenario", "builtin:other"],
    ["analyze", "boundaries", "--arch", "builtin:nope"],
    ["analyze", "boundaries", "--mode", "diagonal"],
    ["analyze"],
    [],
])
def test_usage_errors(capsys, argv):
    assert run(capsys, *argv)[0] == USAGE


def test_audit_truncated_log(capsys, tmp_path):
    run(capsys, "simulate", "--out", str(tmp_path))
    log = tmp_path / "audit.jsonl"
    lines = log.read_bytes().splitlines(keepends=True)
    log.write_bytes(b"".join(lines[:3] + lines[4:]))
    code, out, _ = run(capsys, "audit", "verify", "--log", str(log))
    assert code == DISCREPANCY and out.startswith("Broken at seq 3")


def test_manifest_commands(capsys, tmp_path):
    issuer, pub = tmp_path / "issuer.json", tmp_path / "issuer.pub.json"
    assert run(capsys, "manifest", "keygen", "--key-id", "admin-issuer", "--out", str(issuer),
               "--public-out", str(pub))[0] == OK
    man = tmp_path / "monitor.json"
    assert run(capsys, "manifest", "build", "--phase", "Monitor", "--key", str(issuer), "--out", str(man))[0] == OK
    code, out, _ = run(capsys, "manifest", "verify", "--key", str(pub), "--manifest", str(man))
    assert code == OK and out.strip() == "Verified"
    # re-sign with another key, then verify against the original issuer
    other = tmp_path / "other.json"
    run(capsys, "manifest", "keygen", "--key-id", "admin-issuer", "--label", "other", "--out", str(other))
    copy = tmp_path / "copy.json"
    shutil.copy(man, copy)
    assert run(capsys, "manifest", "sign", "--key", str(other), "--manifest", str(copy))[0] == OK
    assert run(capsys, "manifest", "verify", "--key", str(pub), "--manifest", str(copy))[0] == DISCREPANCY
    body = bytearray(man.read_bytes())
    body[10] ^= 0x01
    man.write_bytes(bytes(body))
    code, out, _ = run(capsys, "manifest", "verify", "--key", str(pub), "--manifest", str(man))
    assert code == DISCREPANCY and out.startswith("SignatureInvalid")
    assert run(capsys, "manifest", "build", "--phase", "Nowhere", "--key", str(issuer),
               "--out", str(man))[0] == USAGE


WORDS = ["analyze", "boundaries", "coverage", "trace", "simulate", "manifest", "audit", "verify",
         "--arch", "--mode", "flat", "scoped", "--format", "json", "csv", "--chain", "builtin:AP-1",
         "builtin:zz", "--seed", "7", "x", "--inject", "AP-2@3", "--matrix", "--log", "nope.json"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(WORDS), max_size=6))
def test_fuzzed_argv_respects_exit_contract(argv):
    import contextlib
    import io
    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
        assert main(argv) in (OK, DISCREPANCY, USAGE)
