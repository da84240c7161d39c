"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""

import json
import shutil
import subprocess
import sys
import time

import pytest

from ocil.harness.logio import read_csv, write_csv
from ocil.verification import CRITERIA

pytestmark = pytest.mark.slow


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, report):
    res = CRITERIA[number]()
    print(res.line())
    report(res.line())
    assert res.passed, res.line()


def _ocil(*args):
    exe = shutil.which("ocil")
    cmd = [exe] if exe else [sys.executable, "-m", "ocil.harness.cli"]
    return subprocess.run(cmd + list(args), capture_output=True, text=True)


def test_criterion_10_determinism_and_io(tmp_path, report):
    t0 = time.perf_counter()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"environment": "cartpole", "mode": "sysid", "sigma": 0.05, "trials": 2,
                               "offline_epochs": 2, "record_timing": False}), encoding="utf-8")
    runs = []
    for name in ("a", "b"):
        res = _ocil("run", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name))
        assert res.returncode == 0, res.stderr
        runs.append((tmp_path / name / "trials.csv").read_bytes())
    identical = runs[0] == runs[1]
    logs = read_csv(tmp_path / "a" / "trials.csv")
    write_csv(logs, tmp_path / "again.csv")
    round_trip = (tmp_path / "again.csv").read_bytes() == runs[0]
    verify = _ocil("verify")
    print(verify.stdout, end="")
    ok = identical and round_trip and verify.returncode == 0
    line = (f"[{'PASS' if ok else 'FAIL'}] criterion 10 determinism and I/O: byte-identical reruns {identical}, "
            f"CSV round trip {round_trip}, ocil verify exit {verify.returncode} ({time.perf_counter() - t0:.1f} s)")
    print(line)
    report(line)
    assert ok, line + "\n" + verify.stderr
