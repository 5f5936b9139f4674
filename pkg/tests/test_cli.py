import json

import pytest

from coalfarris.cli import main
from coalfarris.seqevo import SequenceDataset


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture
def dataset(tmp_path, capsys):
    path = tmp_path / "data.bin"
    code, doc = run(capsys, "simulate", "--f", 0.3, "--m", 2000, "--k", 300, "--seed", 3, "--out", path,
                    "--fasta", tmp_path / "gene.fa", "--gene-trees", tmp_path / "genes.nwk")
    assert code == 0 and doc["m"] == 2000
    return path


def test_simulate_writes_outputs(dataset, tmp_path):
    data = SequenceDataset.load(dataset)
    assert (data.m, data.k, data.n) == (2000, 300, 3)
    fasta = (tmp_path / "gene.fa").read_text()
    assert fasta.startswith(";gene 0\n>1\n") and fasta.count(">") == 3 * 2000
    assert len((tmp_path / "genes.nwk").read_text().splitlines()) == 2000


def test_reduce_then_infer_triplet(dataset, tmp_path, capsys):
    noisy, side = tmp_path / "noisy.bin", tmp_path / "deltas.json"
    code, doc = run(capsys, "reduce", "--in", dataset, "--out", noisy, "--deltas", side, "--seed", 1)
    assert code == 0
    deltas = json.loads(side.read_text())
    assert set(deltas["delta_hat"]) == {"1,2", "2,1", "1,3", "3,1", "2,3", "3,2"}
    assert deltas["delta_hat"]["1,2"] == -deltas["delta_hat"]["2,1"]
    code, doc = run(capsys, "infer-triplet", "--in", noisy, "--deltas", side)
    assert code == 0
    assert {"topology", "s_values", "q_star", "alpha"} <= set(doc)


def test_infer_triplet_with_index_ranges(dataset, capsys):
    code, doc = run(capsys, "infer-triplet", "--in", dataset, "--q1", "0-199", "--q2", "200-1999")
    assert code == 0 and doc["topology"] in {"12|3", "13|2", "23|1"} | {"unresolved(1,2,3)"}


def test_infer_writes_tree(dataset, tmp_path, capsys):
    out = tmp_path / "tree.nwk"
    code, doc = run(capsys, "infer", "--in", dataset, "--out", out, "--seed", 2)
    assert code == 0 and doc["status"] == "ok"
    assert out.read_text().strip() == doc["tree"]


def test_experiment(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"f_grid": [0.3], "m_grid": [200], "k_grid": [100], "trials": 2, "seed": 5}))
    code, doc = run(capsys, "experiment", "--config", cfg, "--out", tmp_path / "run", "--threads", 2)
    assert code == 0
    assert (tmp_path / "run" / "trials.csv").read_text().count("\n") == 3


def test_identifiability(capsys):
    code, doc = run(capsys, "identifiability", "--f", 0.2, "--samples", 20000, "--seed", 1)
    assert code == 0 and len(doc["permutations"]) == 3


def test_msc_density_and_quantile(capsys):
    code, doc = run(capsys, "msc", "density", "--a", "1", "--b", "2", "--x", "0,0.1,1")
    assert code == 0 and doc["cdf"][0] == 0.0 and len(doc["pdf"]) == 3
    code, doc = run(capsys, "msc", "quantile", "--newick", "((1:1.0[&mu=1],2:1.0[&mu=1]):0.5[&mu=1],3:1.5[&mu=1]);",
                    "--a", "1", "--b", "3", "--alpha", "0.5", "--xi", "0.1")
    assert code == 0 and doc["quantile"][0] > 0 and doc["gap"][0]["gap"] > 0


def test_bad_input_returns_error_code(tmp_path, capsys):
    code = main(["infer", "--in", str(tmp_path / "missing.bin")])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_reduction_failure_exit_code(tmp_path, capsys):
    path = tmp_path / "tiny.bin"
    run(capsys, "simulate", "--m", 20, "--k", 10, "--out", path)
    code = main(["reduce", "--in", str(path), "--out", str(tmp_path / "n.bin"), "--retries", "0"])
    assert code == 3
    assert "reduction failed" in capsys.readouterr().err
