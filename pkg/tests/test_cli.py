import csv
import os

import pytest

from functree.cli import main
from functree.experiments import ENDPOINTS_HEADER, SESSIONS_HEADER, SUMMARY_HEADER, SWEEP_HEADER
from functree.replay import TIMELINE_HEADER

SMALL = """
policy = "faasnet_ft"
vm_count = 10
concurrency = 8
[image]
size_bytes = 4_000_000
[network]
sample_interval_s = 0.5
"""


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(SMALL)
    return p


def header(path):
    with open(path, newline="") as fh:
        return tuple(next(csv.reader(fh)))


def test_convert_then_verify(tmp_path, capsys):
    src = tmp_path / "zero.img"
    src.write_bytes(b"\0" * (1 << 20))
    assert main(["convert", str(src), "--block-size", "512K"]) == 0
    out = capsys.readouterr().out
    assert "2 blocks" in out
    assert (tmp_path / "zero.img.fnbf").exists() and (tmp_path / "zero.img.manifest.json").exists()
    assert main(["verify", str(tmp_path / "zero.img.fnbf")]) == 0
    assert capsys.readouterr().out.strip() == "OK"


def test_convert_428mb_block_count(tmp_path, capsys):
    src = tmp_path / "big.img"
    with open(src, "wb") as fh:
        fh.truncate(428_000_000)
    assert main(["--quiet", "convert", str(src), "-o", str(tmp_path / "b")]) == 0
    assert capsys.readouterr().out == ""
    import json
    m = json.loads((tmp_path / "b.manifest.json").read_text())
    assert m["n_blocks"] == 817


def test_verify_detects_corruption(tmp_path, capsys):
    src = tmp_path / "x.img"
    src.write_bytes(os.urandom(100_000))
    main(["convert", str(src), "--block-size", "4096"])
    fnbf = tmp_path / "x.img.fnbf"
    raw = bytearray(fnbf.read_bytes())
    raw[-5] ^= 0xFF
    fnbf.write_bytes(bytes(raw))
    assert main(["verify", str(fnbf)]) == 3


def test_exit_codes(tmp_path, scenario):
    assert main(["convert", str(tmp_path / "missing")]) == 2
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    assert main(["convert", str(empty)]) == 3
    bad = tmp_path / "bad.toml"
    bad.write_text("vm_count = 0\n")
    assert main(["simulate", str(bad)]) == 4
    assert main(["simulate", str(tmp_path / "nope.toml")]) == 2
    badtrace = tmp_path / "t.csv"
    badtrace.write_text("time,fn,n\n")
    assert main(["replay", str(badtrace), str(scenario)]) == 3
    assert main(["sweep", str(scenario), "--axis", "policy", "--values", "nope"]) == 4
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_simulate_outputs_and_determinism(tmp_path, scenario):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--quiet", "simulate", str(scenario), "--out", str(a)]) == 0
    assert main(["simulate", str(scenario), "--out", str(b), "--quiet"]) == 0
    assert header(a / "sessions.csv") == SESSIONS_HEADER
    assert header(a / "endpoints.csv") == ENDPOINTS_HEADER
    assert header(a / "summary.csv") == SUMMARY_HEADER
    for name in ("sessions.csv", "endpoints.csv", "summary.csv", "run_manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = tmp_path / "c"
    main(["--quiet", "--seed", "7", "simulate", str(scenario), "--out", str(c)])
    assert '"seed": 7' in (c / "run_manifest.json").read_text()


def test_simulate_policy_override(tmp_path, scenario):
    out = tmp_path / "o"
    assert main(["--quiet", "--out", str(out), "simulate", str(scenario),
                 "--policy", "registry_full_pull"]) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert rows[0]["policy"] == "registry_full_pull"


def test_sweep_rows(tmp_path, scenario):
    out = tmp_path / "sw"
    assert main(["--quiet", "--out", str(out), "sweep", str(scenario), "--axis", "concurrency",
                 "--values", "2,4", "--policies", "faasnet_ft,registry_on_demand"]) == 0
    assert header(out / "sweep.csv") == SWEEP_HEADER
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [(r["value"], r["policy"]) for r in rows] == [
        ("2", "faasnet_ft"), ("2", "registry_on_demand"),
        ("4", "faasnet_ft"), ("4", "registry_on_demand")]


def test_sweep_block_size_suffixes(tmp_path, scenario):
    out = tmp_path / "bs"
    assert main(["--quiet", "--out", str(out), "sweep", str(scenario), "--axis", "block_size",
                 "--values", "256K,1M"]) == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [r["value"] for r in rows] == ["262144", "1048576"]


def test_replay_trace(tmp_path, scenario):
    trace = tmp_path / "t.csv"
    trace.write_text("t_s,function_id,count\n" + "".join(f"{t},f,1\n" for t in range(30)))
    out = tmp_path / "r"
    assert main(["--quiet", "--out", str(out), "replay", str(trace), str(scenario)]) == 0
    assert header(out / "timeline.csv") == TIMELINE_HEADER
    assert (out / "summary.csv").exists()
