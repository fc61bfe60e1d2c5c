import csv
import json

import numpy as np
import pytest

from esesim.cli import main
from esesim.compress import load_masks
from esesim.model import load_model


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture
def pipeline(tmp_path):
    d = tmp_path
    assert run("generate", "--out", d / "m.json", "--hidden", 64, "--proj", 32, "--input-dim", 20) == 0
    assert run("prune", d / "m.json", "--out", d / "p.json", "--masks", d / "k.json",
               "--balanced", "--n-pe", 8, "--density", 0.2) == 0
    assert run("quantize", d / "p.json", "--out", d / "q.json", "--plan", d / "plan.json") == 0
    assert run("encode", d / "q.json", "--masks", d / "k.json", "--out", d / "e.json",
               "--n-pe", 8, "--dump", d / "dump.txt") == 0
    assert run("schedule", "--model", d / "q.json", "--out", d / "s.json", "--dot", d / "s.dot") == 0
    return d


def test_full_pipeline(pipeline, capsys):
    d = pipeline
    assert run("simulate", d / "e.json", "--schedule", d / "s.json", "--out", d / "r.json",
               "--csv", d / "st.csv", "--n-pe", 8) == 0
    rep = json.loads((d / "r.json").read_text())
    assert 0 < rep["utilization"] <= 1 and rep["throughput"]["sparse_gops"] > 0
    assert run("report", d / "r.json", "--out-dir", d / "rep") == 0
    summary = dict(csv.reader((d / "rep" / "summary.csv").open()))
    assert {"utilization", "sparse_gops", "equivalent_gops"} <= set(summary)
    assert (d / "rep" / "timeline.png").exists() and (d / "rep" / "matrices.csv").exists()
    stages = [s["stage"] for s in json.loads((d / "pipeline.json").read_text())["stages"]]
    assert stages == ["generate", "prune", "quantize", "encode", "schedule", "simulate"]


def test_balanced_prune_equal_loads(pipeline):
    masks = load_masks(pipeline / "k.json")
    kept = masks["0/W_ir"].kept
    loads = [int(kept[p::8].sum()) for p in range(8)]
    assert len(set(loads)) == 1


def test_density_one_is_identity(tmp_path):
    run("generate", "--out", tmp_path / "m.json", "--hidden", 16, "--proj", 8, "--input-dim", 4)
    assert run("prune", tmp_path / "m.json", "--out", tmp_path / "p.json", "--masks",
               tmp_path / "k.json", "--density", 1.0, "--n-pe", 4) == 0
    (a,), (b,) = load_model(tmp_path / "m.json"), load_model(tmp_path / "p.json")
    for k, v in a.tensors().items():
        assert getattr(b, k).tobytes() == v.tobytes()


def test_idempotent(tmp_path):
    outs = []
    for sub in ("a", "b"):
        d = tmp_path / sub
        run("--seed", 3, "generate", "--out", d / "m.json", "--hidden", 16, "--proj", 8, "--input-dim", 4)
        run("prune", d / "m.json", "--out", d / "p.json", "--masks", d / "k.json", "--n-pe", 4)
        run("quantize", d / "p.json", "--out", d / "q.json")
        outs.append([(d / f).read_bytes() for f in ("m.json", "m.bin", "p.bin", "k.bin", "q.json", "q.bin")])
    assert outs[0] == outs[1]


def test_run_zero_model(tmp_path):
    d = tmp_path
    run("generate", "--zero", "--out", d / "m.json", "--hidden", 8, "--proj", 4, "--input-dim", 3)
    run("quantize", d / "m.json", "--out", d / "q.json")
    np.savetxt(d / "x.csv", np.random.default_rng(0).normal(size=(4, 3)), delimiter=",")
    assert run("run", d / "q.json", "--inputs", d / "x.csv", "--out", d / "y.csv") == 0
    y = np.loadtxt(d / "y.csv", delimiter=",", skiprows=1)
    assert y.shape == (4, 5) and not y[:, 1:].any()


def test_run_scheduled_matches_fused(pipeline):
    d = pipeline
    np.save(d / "x.npy", np.random.default_rng(1).normal(size=(3, 20)))
    assert run("run", d / "q.json", "--inputs", d / "x.npy", "--out", d / "y1.csv") == 0
    assert run("run", d / "q.json", "--inputs", d / "x.npy", "--out", d / "y2.csv",
               "--schedule", d / "s.json") == 0
    assert (d / "y1.csv").read_text() == (d / "y2.csv").read_text()


def test_exit_codes(tmp_path, pipeline):
    assert run("prune", tmp_path / "missing.json", "--out", tmp_path / "x.json", "--masks", tmp_path / "y.json") == 2
    (tmp_path / "bad.json").write_text('{"states": 3}')
    assert run("simulate", pipeline / "e.json", "--schedule", tmp_path / "bad.json", "--out",
               tmp_path / "r.json", "--n-pe", 8) == 3
    assert run("quantize", pipeline / "m.json", "--width", 4, "--out", tmp_path / "q4.json") == 4


def test_stale_input_detected(pipeline):
    d = pipeline
    # regenerate the model with another seed; the pruned model is now stale
    assert run("--seed", 9, "generate", "--out", d / "m.json", "--hidden", 64, "--proj", 32, "--input-dim", 20) == 0
    assert run("quantize", d / "p.json", "--out", d / "q2.json") == 3
    # a downstream file edited by hand is caught too
    with (d / "q.json").open("a") as fh:
        fh.write(" ")
    assert run("encode", d / "q.json", "--masks", d / "k.json", "--out", d / "e2.json", "--n-pe", 8) == 3


def test_sweeps_and_lut(tmp_path):
    assert run("sweep", "fifo", "--depths", "1,8", "--seeds", 1, "--out", tmp_path / "f.csv",
               "--plot", tmp_path / "f.png") == 0
    rows = list(csv.DictReader((tmp_path / "f.csv").open()))
    assert [r["depth"] for r in rows] == ["1", "8"]
    assert float(rows[0]["median_utilization"]) < float(rows[1]["median_utilization"])
    assert run("lut", "sigmoid", "--out", tmp_path / "l.csv") == 0
    assert (tmp_path / "l.csv").read_text().splitlines()[1025] == "1024,0.0,16384"
