import json
import subprocess
import sys

import orjson
import pytest

from chaintrace import cli
from chaintrace.errors import InvariantViolation
from chaintrace.evidence import read_evidence
from chaintrace.synth import GenParams, generate, load_world, matrix_scenario, score, write_world

import random


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("w")
    w = generate(GenParams(chains=("BTC", "LTC", "ZEC"), n_entities=12, n_shifts=80, noise_txs=60,
                           uturn_rate=0.3, round_trips=20, founder_withdrawals=30, miner_payouts=4), seed=11)
    write_world(w, d)
    return d


def run(*argv):
    return cli.main([str(a) for a in argv])


def load(path):
    return json.loads(path.read_text())


def test_trace_writes_evidence(world_dir, tmp_path, capsys):
    out = tmp_path / "t"
    assert run("trace", "--chains", world_dir, "--shifts", world_dir / "shifts.csv",
               "--oracle", world_dir / "oracle.csv", "--out", out) == 0
    ev = read_evidence(out / "evidence.jsonl")
    assert ev and (out / "config.json").exists()
    summary = load(out / "trace_summary.json")
    assert summary["schema"] == "chaintrace.trace_summary/1"
    n = len(load_world(world_dir).shifts)
    assert summary["shifts"] == summary["resolved"] == n
    assert json.loads(capsys.readouterr().out)["pass_through"] == summary["pass_through"]


def test_score_matches_direct_call(world_dir, tmp_path):
    t = tmp_path / "t"
    run("trace", "--chains", world_dir, "--shifts", world_dir / "shifts.csv",
        "--oracle", world_dir / "oracle.csv", "--out", t)
    s = tmp_path / "s"
    assert run("score", "--pred", t / "evidence.jsonl", "--truth", world_dir, "--out", s) == 0
    got = load(s / "metrics.json")
    want = score(read_evidence(t / "evidence.jsonl"), load_world(world_dir)).to_json()
    got.pop("schema")
    assert got == json.loads(json.dumps(want))
    assert got["per_kind"]["PASS_THROUGH"]["precision"] == 1.0 and got["recall"] == 1.0


def test_zcash_analyze(world_dir, tmp_path):
    out = tmp_path / "z"
    assert run("zcash-analyze", "--chains", world_dir, "--tags", world_dir / "tags.csv", "--out", out, "--tsb") == 0
    s = load(out / "zcash_summary.json")
    assert s["founder_withdrawals"] == 30 and s["miner_payouts"] == 4
    assert len(load(out / "h5_sweep.json")["points"]) == 100
    assert "tsb_flagged" in s


def test_ingest_and_cluster(world_dir, tmp_path):
    out = tmp_path / "c"
    assert run("ingest", "--chains", world_dir, "--out", out) == 0
    assert set(load(out / "ingest.json")["chains"]) == {"BTC", "LTC", "ZEC"}
    assert run("cluster", "--chains", world_dir, "--tags", world_dir / "tags.csv", "--change", "--out", out) == 0
    s = load(out / "cluster_summary.json")
    assert s["clusters"] <= s["clusters_after_multi_input"]
    assert (out / "clusters.csv").read_text().startswith("address,chain,cluster_id")


def test_simulate(tmp_path):
    sc = tmp_path / "sc.jsonl"
    sc.write_bytes(b"\n".join(orjson.dumps(c) for c in matrix_scenario(random.Random(3), 50)))
    out = tmp_path / "m"
    assert run("simulate", "--scenario", sc, "--gas", "0.00883", "--out", out) == 0
    rep = load(out / "profit_report.json")
    assert rep["schema"] == "chaintrace.profit/1"
    assert rep["sum_net_ex_gas"] == "0" and rep["users"] == 50
    assert (out / "events.csv").read_text().startswith("seq,payer,payee")


def test_generate_then_report(tmp_path):
    out = tmp_path / "g"
    assert run("generate", "--chain-list", "BTC,LTC", "--n-shifts", "20", "--noise-txs", "10",
               "--seed", "4", "--out", out) == 0
    assert load(out / "generate.json")["shifts"] == 20
    w = load_world(out / "world")
    assert w.params.chains == ("BTC", "LTC") and w.seed == 4
    assert run("report", "--out", out) == 0
    rep = load(out / "report.json")
    assert "generate.json" in rep["sections"] and "config.json" in rep["sections"]


def test_config_replay_reproduces_outputs(tmp_path):
    out = tmp_path / "g"
    run("generate", "--chain-list", "BTC,ZEC", "--n-shifts", "15", "--round-trips", "5", "--seed", "7",
        "--out", out)
    first = (out / "world" / "truth.jsonl").read_bytes()
    (out / "world" / "truth.jsonl").unlink()
    assert run("--from-config", out / "config.json") == 0
    assert (out / "world" / "truth.jsonl").read_bytes() == first


@pytest.mark.parametrize("argv", [
    ["trace", "--out", "{tmp}"],
    ["trace", "--chains", "{tmp}/nowhere", "--out", "{tmp}"],
    ["simulate", "--out", "{tmp}"],
    ["score", "--out", "{tmp}"],
    ["simulate", "--bogus"],
    ["nonsense"],
    [],
    ["--from-config", "{tmp}/missing.json"],
])
def test_input_errors_exit_2(argv, tmp_path):
    assert run(*[a.replace("{tmp}", str(tmp_path)) for a in argv]) == 2


def test_rejected_scenario_call_exits_2_unless_lenient(tmp_path):
    sc = tmp_path / "sc.jsonl"
    sc.write_text('{"op":"register","user":"a"}\n{"op":"register","user":"a"}\n')
    assert run("simulate", "--scenario", sc, "--out", tmp_path) == 2
    assert run("simulate", "--scenario", sc, "--lenient", "--out", tmp_path) == 0
    assert load(tmp_path / "profit_report.json")["run"]["rejected"] == 1


def test_invariant_violation_exits_3(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise InvariantViolation("contract retains 1 wei")

    monkeypatch.setattr(cli, "run_scenario", broken)
    sc = tmp_path / "sc.jsonl"
    sc.write_text('{"op":"register","user":"a"}\n')
    assert run("simulate", "--scenario", sc, "--out", tmp_path) == 3


def test_help_lists_defaults():
    r = subprocess.run([sys.executable, "-m", "chaintrace", "trace", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    text = " ".join(r.stdout.split())
    assert "--uturn-window" in text and "(default: 1800)" in text and "(default: 15)" in text
