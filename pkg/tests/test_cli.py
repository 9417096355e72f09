import json
import os

import numpy as np
import pytest

from mkgc import cli
from mkgc import trainer as tr
from mkgc.datasets import load_dataset, read_id_map, read_rows
from mkgc.errors import NumericError
from mkgc.kgc import metrics_from_json

TINY = ["--set", "dim=8", "--set", "batch_size=128", "--set", "text_init=align", "--quiet"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds") / "syn"
    assert cli.main(["generate-synthetic", "--out", str(d), "--languages", "2", "--entities", "40",
                     "--triples", "240", "--coverage", "1.0,0.6", "--text-dim", "6", "--seed", "1"]) == 0
    return str(d)


@pytest.fixture(scope="module")
def run_dir(dataset, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run") / "r")
    assert cli.main(["train", "--data", dataset, "--out", out, "--epochs", "3"] + TINY) == 0
    return out


def test_generated_dataset_loads_back(dataset):
    ds = load_dataset(dataset)
    assert [kg.language for kg in ds.kgs] == ["L0", "L1"]
    assert ds.seed_pairs and ds.truth_pairs and ds.text_path
    assert "#entity" in open(os.path.join(dataset, "stats.txt")).read()
    assert json.load(open(os.path.join(dataset, "synthetic.json")))["seed"] == 1


def test_train_writes_complete_run(run_dir, dataset):
    files = set(os.listdir(run_dir))
    assert {"manifest.json", "best.ckpt", "last.ckpt", "metrics.json", "metrics.txt", "train_log.jsonl",
            "entity_ids.tsv", "relation_ids.tsv", "proposed_pairs.tsv"} <= files
    m = json.load(open(os.path.join(run_dir, "manifest.json")))
    assert m["status"] == "complete" and m["config"]["dim"] == 8 and m["config"]["epochs"] == 3
    assert m["dataset_hashes"] and m["code_version"].startswith("0.1.0+g")
    metrics = metrics_from_json(open(os.path.join(run_dir, "metrics.json")).read())
    assert set(metrics.per_language) == {"L0", "L1"}
    log = [json.loads(l) for l in open(os.path.join(run_dir, "train_log.jsonl"))]
    assert [r["epoch"] for r in log] == [1, 2, 3]
    ids = read_id_map(os.path.join(run_dir, "entity_ids.tsv"))
    assert sorted(ids.values()) == list(range(len(ids)))
    assert "r_align" in read_id_map(os.path.join(run_dir, "relation_ids.tsv"))
    rows = list(read_rows(os.path.join(run_dir, "proposed_pairs.tsv"), 7))
    assert {r[6] for r in rows} <= {"1", "2", "3"}


def test_completed_run_is_not_overwritten(run_dir, dataset, capsys):
    assert cli.main(["train", "--data", dataset, "--out", run_dir, "--epochs", "1"] + TINY) == 4
    assert "--force" in capsys.readouterr().err


def test_identical_runs_give_identical_metrics(dataset, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["train", "--data", dataset, "--out", str(tmp_path / name), "--epochs", "2"] + TINY) == 0
    a = open(tmp_path / "a" / "metrics.json", "rb").read()
    assert a == open(tmp_path / "b" / "metrics.json", "rb").read()


def test_resume_matches_uninterrupted(dataset, tmp_path):
    full, part = str(tmp_path / "full"), str(tmp_path / "part")
    assert cli.main(["train", "--data", dataset, "--out", full, "--epochs", "4"] + TINY) == 0
    assert cli.main(["train", "--data", dataset, "--out", part, "--epochs", "2"] + TINY) == 0
    assert cli.main(["train", "--data", dataset, "--out", part, "--epochs", "4", "--resume"] + TINY) == 0

    def strip(path):
        rows = [json.loads(l) for l in open(os.path.join(path, "train_log.jsonl"))]
        for r in rows:
            r.pop("wall_time")
        return rows

    assert strip(part) == strip(full)
    assert open(os.path.join(part, "metrics.json")).read() == open(os.path.join(full, "metrics.json")).read()


def test_evaluate_reproduces_run_metrics(run_dir, dataset, tmp_path, capsys):
    out = tmp_path / "m.json"
    ckpt = os.path.join(run_dir, "best.ckpt")
    assert cli.main(["evaluate", "--checkpoint", ckpt, "--data", dataset, "--out", str(out)]) == 0
    assert out.read_text() == open(os.path.join(run_dir, "metrics.json")).read()
    assert "macro_avg" in capsys.readouterr().out


def test_propose_pairs_and_attention_report(run_dir, dataset, tmp_path, capsys):
    ckpt = os.path.join(run_dir, "best.ckpt")
    tsv = tmp_path / "pairs.tsv"
    assert cli.main(["propose-pairs", "--checkpoint", ckpt, "--data", dataset, "--K", "3",
                     "--out", str(tsv)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["proposed"] == len(tsv.read_text().splitlines())
    assert 0.0 <= report["recovery"]["hits10"] <= 1.0
    att = tmp_path / "att.json"
    assert cli.main(["attention-report", "--checkpoint", ckpt, "--data", dataset, "--out", str(att)]) == 0
    mat = np.array(json.loads(att.read_text())["matrix"])
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-9)
    assert cli.main(["attention-report", "--checkpoint", ckpt, "--data", dataset, "--zero-alignment",
                     "--out", str(att)]) == 0
    np.testing.assert_allclose(json.loads(att.read_text())["matrix"], np.eye(2))


def test_config_precedence(dataset, tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# comment\ndim = 12\nlayers = 1\nepochs = 1\nshare_encoders = true\n")
    args = cli.build_parser().parse_args(["train", "--data", dataset, "--out", "x", "--config", str(conf)])
    assert (cli.effective_config(args).dim, cli.effective_config(args).share_encoders) == (12, True)
    args = cli.build_parser().parse_args(["train", "--data", dataset, "--out", "x", "--config", str(conf),
                                          "--set", "dim=10"])
    assert cli.effective_config(args).dim == 10
    args = cli.build_parser().parse_args(["train", "--data", dataset, "--out", "x", "--config", str(conf),
                                          "--set", "dim=10", "--dim", "8", "--fanout", "none"])
    c = cli.effective_config(args)
    assert (c.dim, c.layers, c.fanout) == (8, 1, None)


@pytest.mark.parametrize("argv, code", [
    (["train", "--data", "/nonexistent", "--out", "OUT"], 2),
    (["train", "--out", "OUT"], 4),
    (["train", "--data", "DATA", "--out", "OUT", "--set", "nope=1"], 4),
    (["train", "--data", "DATA", "--out", "OUT", "--lr", "-1"], 4),
    (["evaluate", "--checkpoint", "/nonexistent.ckpt", "--data", "DATA"], 2),
    (["sweep-alignment", "--data", "DATA", "--out", "OUT", "--ratios", "0,x"], 4),
    (["frobnicate"], 4),
    ([], 4),
])
def test_exit_codes(argv, code, dataset, tmp_path):
    argv = [a.replace("DATA", dataset).replace("OUT", str(tmp_path / "o")) for a in argv]
    assert cli.main(argv) == code


def test_numeric_failure_exit_code(dataset, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite loss in completion step")
    monkeypatch.setattr(tr, "train_epoch", boom)
    assert cli.main(["train", "--data", dataset, "--out", str(tmp_path / "n"), "--epochs", "1"] + TINY) == 3
    assert json.load(open(tmp_path / "n" / "manifest.json"))["status"] == "running"


def test_malformed_triple_file_is_data_error(tmp_path):
    d = tmp_path / "bad"
    d.mkdir()
    (d / "en.tsv").write_text("a\tr\n")
    assert cli.main(["train", "--data", str(d), "--out", str(tmp_path / "o")]) == 2


def test_ablate_and_sweep(dataset, tmp_path, capsys):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--data", dataset, "--out", str(out), "--modes", "plain-gnn,full",
                     "--epochs", "1"] + TINY[:-1]) == 0
    res = json.load(open(out / "ablation.json"))
    assert set(res) == {"plain-gnn", "full"}
    assert "R-GNN + NPG + SSL" in (out / "ablation.txt").read_text()
    sw = tmp_path / "sweep"
    assert cli.main(["sweep-alignment", "--data", dataset, "--out", str(sw), "--ratios", "0.5,1.0",
                     "--seeds", "0,1", "--epochs", "1"] + TINY[:-1]) == 0
    series = json.load(open(sw / "sweep.json"))
    assert set(series) == {"0.5000", "1.0000"}
    lines = (sw / "sweep.tsv").read_text().splitlines()
    assert lines[0] == "ratio\tlang\thits1\thits10\tmrr" and len(lines) == 1 + 2 * 3


def test_subsample_is_deterministic_and_sized():
    pairs = list(range(10))
    a = cli.subsample_seeds(pairs, 0.3, 5)
    assert a == cli.subsample_seeds(pairs, 0.3, 5) and len(a) == 3
    assert cli.subsample_seeds(pairs, 1.0, 0) == pairs
