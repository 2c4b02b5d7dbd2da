import json

import pytest

from lpq.cli import EXIT_CONFIG, EXIT_DATA, EXIT_GATE, EXIT_OK, main
from lpq.datagen import ModelGenConfig

SMALL = ModelGenConfig(num_tables=3, table_rows=(500, 300, 200), emb_dim=8, dense_dim=4, bottom=(16, 8), top=(16, 1), seed=3)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "model.json").write_text(json.dumps(SMALL.to_dict()))
    assert main(["gen-model", "--config", str(d / "model.json"), "--out", str(d / "m")]) == EXIT_OK
    assert main(["gen-data", "--model", str(d / "m"), "--n", "3000", "--seed", "1", "--out", str(d / "train.jsonl")]) == EXIT_OK
    assert main(["gen-data", "--model", str(d / "m"), "--n", "3000", "--seed", "2", "--out", str(d / "eval.jsonl")]) == EXIT_OK
    (d / "scheme.json").write_text(json.dumps({"global": {}, "overrides": []}))
    return d


def _manifest(path):
    return json.loads(path.with_name(path.name + ".manifest.json").read_text())


def test_gen_manifests(work):
    man = _manifest(work / "m")
    assert man["command"] == "gen-model" and man["exit_code"] == 0
    assert len(man["config_hash"]) == 64 and man["seeds"]
    assert _manifest(work / "train.jsonl")["seeds"]["seed"] == 1


def test_gen_deterministic(work, tmp_path):
    assert main(["gen-data", "--model", str(work / "m"), "--n", "3000", "--seed", "1", "--out", str(tmp_path / "t.jsonl")]) == 0
    assert (tmp_path / "t.jsonl").read_bytes() == (work / "train.jsonl").read_bytes()


def test_pipeline(work, capsys):
    w = str(work)
    assert main(["calibrate", "--model", f"{w}/m", "--data", f"{w}/train.jsonl", "--n", "1024", "--out", f"{w}/cal.json"]) == 0
    assert main(["search", "--model", f"{w}/m", "--calib", f"{w}/train.jsonl", "--eval", f"{w}/eval.jsonl",
                 "--out-scheme", f"{w}/s/scheme.json", "--out-model", f"{w}/s/mq", "--ne-diff-max", "0.01"]) == EXIT_OK
    assert "status pass" in capsys.readouterr().out
    result = json.loads((work / "s" / "search_result.json").read_text())
    assert result["status"] == "pass"
    assert (work / "s" / "search.jsonl").exists()
    assert _manifest(work / "s" / "scheme.json")["exit_code"] == 0

    assert main(["quantize", "--model", f"{w}/m", "--scheme", f"{w}/s/scheme.json", "--calib", f"{w}/cal.json", "--out", f"{w}/q"]) == 0
    assert main(["eval", "--model-a", f"{w}/q", "--model-b", f"{w}/m", "--data", f"{w}/eval.jsonl", "--out", f"{w}/ev.json"]) == 0
    rep = json.loads((work / "ev.json").read_text())
    assert rep["ne_diff"] == (rep["ne_lowp"] - rep["ne_fp32"]) / rep["ne_fp32"]
    # an impossible gate maps to the accuracy-gate exit code
    assert main(["eval", "--model-a", f"{w}/q", "--model-b", f"{w}/m", "--data", f"{w}/eval.jsonl", "--threshold", "-1"]) == EXIT_GATE

    assert main(["debug", "--model-lowp", f"{w}/q", "--model-fp32", f"{w}/m", "--data", f"{w}/eval.jsonl", "--n", "64", "--out", f"{w}/dbg"]) == 0
    assert (work / "dbg" / "report.txt").exists() and json.loads((work / "dbg" / "report.json").read_text())["top_ops"]
    assert main(["debug", "--model-lowp", f"{w}/q", "--model-fp32", f"{w}/m", "--data", f"{w}/eval.jsonl", "--n", "99999", "--out", f"{w}/dbg2"]) == EXIT_CONFIG

    capsys.readouterr()
    assert main(["roofline", "--model", f"{w}/q", "--batch-dist", "fixed:1", "--out", f"{w}/roof.json"]) == 0
    assert "bound" in capsys.readouterr().out
    assert json.loads((work / "roof.json").read_text())


def test_monitor_cli(work):
    w = str(work)
    assert main(["gen-snapshots", "--config", f"{w}/model.json", "--count", "3", "--out", f"{w}/snaps"]) == 0
    code = main(["monitor", "--snapshots", f"{w}/snaps", "--scheme", f"{w}/scheme.json", "--eval", f"{w}/eval.jsonl", "--log", f"{w}/mon.jsonl"])
    lines = (work / "mon.jsonl").read_text().splitlines()
    assert len(lines) == 3
    recs = [json.loads(x) for x in lines]
    assert code == (EXIT_GATE if any(r["alert"] for r in recs) else EXIT_OK)
    assert _manifest(work / "mon.jsonl")["exit_code"] == code
    # an impossible threshold makes every snapshot alert
    assert main(["monitor", "--snapshots", f"{w}/snaps", "--scheme", f"{w}/scheme.json", "--eval", f"{w}/eval.jsonl",
                 "--threshold", "-1", "--log", f"{w}/mon2.jsonl"]) == EXIT_GATE


def test_search_gate_failure(tmp_path):
    w = str(tmp_path)
    assert main(["gen-model", "--fault", "bot_fc1:outlier-weights", "--out", f"{w}/mf"]) == 0
    for name, seed in (("train", 1), ("eval", 2)):
        assert main(["gen-data", "--model", f"{w}/mf", "--n", "3000", "--seed", str(seed), "--out", f"{w}/{name}.jsonl"]) == 0
    code = main(["search", "--model", f"{w}/mf", "--calib", f"{w}/train.jsonl", "--eval", f"{w}/eval.jsonl",
                 "--out-scheme", f"{w}/f/scheme.json", "--max-skip-flops-ratio", "0"])
    assert code == EXIT_GATE
    assert json.loads((tmp_path / "f" / "search_result.json").read_text())["status"] == "fail"


def test_config_errors(work, tmp_path):
    w = str(work)
    assert main(["gen-model", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["gen-model", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    (tmp_path / "neg.json").write_text(json.dumps({"emb_dim": -1}))
    assert main(["gen-model", "--config", str(tmp_path / "neg.json"), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["gen-model", "--fault", "nolayer", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["search", "--model", f"{w}/m", "--calib", f"{w}/train.jsonl", "--eval", f"{w}/eval.jsonl",
                 "--out-scheme", str(tmp_path / "s.json"), "--ne-diff-max", "0", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    assert main(["roofline", "--model", f"{w}/m", "--hw", "no-such-preset"]) == EXIT_CONFIG
    assert main(["roofline", "--model", f"{w}/m", "--batch-dist", "fixed:x"]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_data_errors(work, tmp_path):
    w = str(work)
    assert main(["roofline", "--model", str(tmp_path / "nope")]) == EXIT_DATA
    (tmp_path / "d.jsonl").write_text("garbage\n")
    assert main(["calibrate", "--model", f"{w}/m", "--data", str(tmp_path / "d.jsonl"), "--out", str(tmp_path / "c.json")]) == EXIT_DATA
    assert main(["monitor", "--snapshots", str(tmp_path / "none"), "--scheme", f"{w}/scheme.json", "--log", str(tmp_path / "l")]) in (EXIT_DATA, EXIT_CONFIG)
