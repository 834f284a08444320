import csv
import json
import shutil

import numpy as np
import pytest

from shifttrace.cli import main
from shifttrace.match import sweep_params
from shifttrace.pipeline import Analysis, Workspace

from conftest import small_config


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "w.json"
    p.write_text(json.dumps(small_config().to_json()))
    return p


@pytest.fixture(scope="module")
def world(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("cli") / "world"
    assert main(["simulate", "--seed", "5", "--config", str(config_file), "--out-dir", str(out)]) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_twice_gives_identical_manifests(tmp_path, config_file, world):
    assert main(["simulate", "--seed", "5", "--config", str(config_file), "--out-dir", str(tmp_path / "again")]) == 0
    for name in ("manifest.json", "simulate.manifest.json", "ground_truth.json"):
        assert (tmp_path / "again" / name).read_bytes() == (world / name).read_bytes()
    m = json.loads((world / "simulate.manifest.json").read_text())
    assert m["seed"] == 5 and m["command"] == "simulate"
    assert set(m["outputs"]) == {"manifest.json"}


def test_match_with_explicit_window_is_precise(world, tmp_path):
    assert main(["match", "--world", str(world), "--chain", "BTC", "--db", "0", "--da", "1", "--out-dir", str(tmp_path)]) == 0
    gt = json.loads((world / "ground_truth.json").read_text())
    truth = {t["shift_id"]: t for t in gt["trades"] if t["published"]}
    rows = read_csv(tmp_path / "matches.csv")
    assert rows and all(truth[r["shift_id"]]["cur_in"] == "BTC" for r in rows)
    aug = [r for r in rows if r["grade"] == "augmented"]
    assert aug
    for r in aug:
        t = truth[r["shift_id"]]
        assert r["phase1_tx"] == f"{t['deposit']['tx']}:{t['deposit']['n']}"
        assert r["addr_u"] == t["addr_u"]
    summary = json.loads((tmp_path / "match.json").read_text())
    assert list(summary) == ["BTC"] and summary["BTC"]["window"] == [0, 1]
    manifest = json.loads((tmp_path / "match.manifest.json").read_text())
    assert set(manifest["outputs"]) == {"matches.csv", "match.json"}


def test_sweep_all_writes_per_chain_tables(world, tmp_path):
    assert main(["sweep", "--world", str(world), "--chain", "all", "--max-delta", "10", "--out-dir", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "sweep.json").read_text())
    an = Analysis(Workspace.open(world))
    assert set(summary) == {s.cur_in for s in an.shifts}
    for c in ("BTC", "DASH"):
        rows = read_csv(tmp_path / "sweep" / f"{c}.csv")
        table = np.array([[int(r[f"da{j}"]) for j in range(11)] for r in rows])
        res = sweep_params([s for s in an.shifts if s.cur_in == c], an.chains[c], 10)
        assert (table == res.table).all()
        assert tuple(summary[c]["argmax"]) == res.argmax


def test_json_format_option(world, tmp_path):
    assert main(["sweep", "--world", str(world), "--chain", "BTC", "--max-delta", "3", "--format", "json", "--out-dir", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "sweep" / "BTC.json").read_text())
    assert len(rows) == 4 and set(rows[0]) == {"delta_before", "da0", "da1", "da2", "da3"}


def test_report_verify_passes_on_a_clean_world(world, tmp_path):
    assert main(["report", "--world", str(world), "--verify", "--out-dir", str(tmp_path)]) == 0
    v = json.loads((tmp_path / "verify.json").read_text())
    assert v["ok"] is True


def test_report_verify_fails_on_tampered_ground_truth(world, tmp_path):
    copy = tmp_path / "world"
    shutil.copytree(world, copy)
    gt = json.loads((copy / "ground_truth.json").read_text())
    gt["uturns"] = gt["uturns"][1:]
    (copy / "ground_truth.json").write_text(json.dumps(gt))
    assert main(["report", "--world", str(copy), "--verify", "--out-dir", str(tmp_path / "out")]) == 1


@pytest.mark.parametrize("command", ["patterns", "clusters", "privacy", "bots", "ingest"])
def test_every_report_command_runs(world, tmp_path, command):
    assert main([command, "--world", str(world), "--out-dir", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / f"{command}.manifest.json").read_text())
    assert manifest["outputs"]
    for name, digest in manifest["outputs"].items():
        assert (tmp_path / name).exists(), name
    assert manifest["inputs"]["world_config.json"]


def test_scrape_replays_fixtures(world, tmp_path):
    archive = tmp_path / "archive.ndjson"
    assert main(["scrape", "--world", str(world), "--archive", str(archive), "--out-dir", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "scrape.json").read_text())
    published = [t for t in json.loads((world / "ground_truth.json").read_text())["trades"] if t["published"]]
    assert (s["records"], s["gaps"], s["failures"]) == (len(published), 0, 0)
    assert main(["match", "--world", str(world), "--archive", str(archive), "--out-dir", str(tmp_path / "m")]) == 0


def test_exit_code_one_on_validation_errors(world, tmp_path, capsys):
    assert main(["bogus"]) == 1
    assert main(["match", "--world", str(world), "--db", "1", "--out-dir", str(tmp_path)]) == 1
    assert main(["match", "--world", str(world), "--chain", "NOPE", "--out-dir", str(tmp_path)]) == 1
    assert main(["clusters", "--world", str(world), "--address", "nocolon", "--out-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "error:" in err


def test_exit_code_one_on_malformed_ledger(world, tmp_path):
    copy = tmp_path / "world"
    shutil.copytree(world, copy)
    ledger = copy / "ledgers" / "BTC.ndjson"
    ledger.write_bytes(ledger.read_bytes() + b"{broken\n")
    assert main(["ingest", "--world", str(copy), "--chain", "BTC", "--out-dir", str(tmp_path / "o")]) == 1


def test_exit_code_two_on_io_errors(world, tmp_path):
    assert main(["match", "--world", str(tmp_path / "missing")]) == 2
    assert main(["scrape", "--feed", str(tmp_path / "nofeed"), "--archive", str(tmp_path / "a.ndjson")]) == 2
    copy = tmp_path / "world"
    shutil.copytree(world, copy)
    (copy / "ledgers" / "BTC.ndjson").unlink()
    assert main(["ingest", "--world", str(copy), "--chain", "BTC", "--out-dir", str(tmp_path / "o")]) == 2
