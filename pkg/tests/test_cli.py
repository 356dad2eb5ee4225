import json

import pytest

from adgve.cli import main


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes")
    assert main(["gen-synthetic", "--count", "6", "--seed", "300", "--out", str(out)]) == 0
    return out


def test_gen_synthetic_writes_manifest(scenes):
    names = (scenes / "manifest.txt").read_text().split()
    assert len(names) == 6 and all((scenes / n).exists() for n in names)
    assert all((scenes / n.replace(".json", ".truth")).exists() for n in names)


def test_gen_from_spec_file(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps([{"seed": 1, "layout": "crosswalk", "violations": [{"kind": "non_yield"}]}]))
    assert main(["gen-synthetic", "--spec", str(spec), "--out", str(tmp_path / "out")]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "layout": "moon"}))
    assert main(["gen-synthetic", "--spec", str(bad), "--out", str(tmp_path / "out2")]) == 1


def test_score_is_deterministic(scenes, tmp_path):
    files = [str(scenes / n) for n in (scenes / "manifest.txt").read_text().split()]
    assert main(["score", *files, "--vlm-mode", "oracle_stub", "--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(["score", *files, "--vlm-mode", "oracle_stub", "--jobs", "3", "--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 6


def test_record_then_replay(scenes, tmp_path):
    files = [str(scenes / n) for n in (scenes / "manifest.txt").read_text().split()][:2]
    t = tmp_path / "t.jsonl"
    assert main(["score", *files, "--record", str(t), "--out", str(tmp_path / "live.jsonl")]) == 0
    args = ["score", *files, "--vlm-mode", "replay", "--transcript", str(t)]
    assert main([*args, "--out", str(tmp_path / "r1.jsonl")]) == 0
    assert main([*args, "--out", str(tmp_path / "r2.jsonl")]) == 0
    assert (tmp_path / "r1.jsonl").read_bytes() == (tmp_path / "r2.jsonl").read_bytes()
    live = [json.loads(x)["S_overall"] for x in (tmp_path / "live.jsonl").read_text().splitlines()]
    replay = [json.loads(x)["S_overall"] for x in (tmp_path / "r1.jsonl").read_text().splitlines()]
    assert live == replay


def test_filter_report_ablate(scenes, tmp_path, capsys):
    manifest = str(scenes / "manifest.txt")
    assert main(["filter", manifest, "--vlm-mode", "oracle_stub", "--out", str(tmp_path / "f")]) == 0
    kept = (tmp_path / "f" / "kept_manifest.txt").read_text().split()
    assert kept == [n for n in (scenes / "manifest.txt").read_text().split() if n in kept]
    assert main(["report", str(tmp_path / "f" / "reports.jsonl"), "--no-figures", "--out", str(tmp_path / "rep")]) == 0
    assert json.loads((tmp_path / "rep" / "summary.json").read_text())["videos"] == 6
    assert main(["ablate", manifest, "--vlm-mode", "oracle_stub", "--out", str(tmp_path / "abl.tsv")]) == 0
    lines = (tmp_path / "abl.tsv").read_text().splitlines()
    assert lines[0] == "section\tkey\tvalue"
    assert sum(1 for ln in lines if ln.startswith("coverage")) == 3
    assert main(["ablate", manifest, "--drop", "wheels", "--out", str(tmp_path / "x.tsv")]) == 1


def test_train_fusion(scenes, tmp_path):
    model = tmp_path / "m.txt"
    rc = main(["train-fusion", str(scenes / "manifest.txt"), "--vlm-mode", "oracle_stub", "--out", str(model)])
    assert rc == 0
    text = model.read_text()
    assert text.startswith("adgve-fusion 1\n") and "report.final_loss" in text
    out = tmp_path / "s.jsonl"
    first = str(scenes / (scenes / "manifest.txt").read_text().split()[0])
    assert main(["score", first, "--model", str(model), "--out", str(out)]) == 0


def test_exit_codes(tmp_path, scenes):
    assert main([]) == 1
    assert main(["score"]) == 1
    assert main(["score", str(tmp_path / "missing.json"), "--out", str(tmp_path / "r.jsonl")]) == 3
    record = json.loads((tmp_path / "r.jsonl").read_text())
    assert record["status"] == "error"
    good = str(scenes / (scenes / "manifest.txt").read_text().split()[0])
    assert main(["score", good, str(tmp_path / "missing.json"), "--out", str(tmp_path / "p.jsonl")]) == 2
    assert main(["report", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "x")]) == 1
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["report", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "x")]) == 3


def test_config_file_and_env(tmp_path, monkeypatch, scenes):
    conf = tmp_path / "c.conf"
    conf.write_text("fusion.threshold = 0.99\nvlm.mode = oracle_stub\n")
    first = str(scenes / (scenes / "manifest.txt").read_text().split()[0])
    assert main(["score", first, "--config", str(conf), "--out", str(tmp_path / "a.jsonl")]) == 0
    assert json.loads((tmp_path / "a.jsonl").read_text())["threshold"] == 0.99
    monkeypatch.setenv("ADGVE_CONFIG", str(conf))
    assert main(["score", first, "--threshold", "0.3", "--out", str(tmp_path / "b.jsonl")]) == 0
    assert json.loads((tmp_path / "b.jsonl").read_text())["threshold"] == 0.3
    conf.write_text("fusion.bogus = 1\n")
    assert main(["score", first, "--config", str(conf), "--out", str(tmp_path / "c.jsonl")]) == 1
