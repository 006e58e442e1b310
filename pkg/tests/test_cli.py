import csv
import json

import pytest

from pxsgmcmc import cli, store

SMALL = ["--n_train=64", "--n_test=50", "--steps_per_cycle=20", "--cycles=3",
         "--widths=[2,6,2]", "--batch_size=32", "--bound_steps=20", "--grid_n=4",
         "--barrier_points=5", "--landscape_examples=50"]
MOG = ["--mog_samples=30", "--mog_grid=11", "--chains=2"]


def run(cmd, out, *extra):
    return cli.main([cmd, f"--out={out}", *SMALL, *extra])


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name != "samples.pxs.json"}


def test_full_pipeline_deterministic(tmp_path):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert run("sample", d, "--seed=5") == 0
        assert run("eval", d, "--seed=5") == 0
        assert run("diag", d, "--seed=5") == 0
        assert run("mog", d, "--seed=5", *MOG) == 0
    a, b = outputs(dirs[0]), outputs(dirs[1])
    assert set(a) >= {"trace.csv", "svalues.csv", "samples.pxs", "metrics.json", "barrier.csv",
                      "subspace.csv", "bound.csv", "samples.csv", "modes.csv", "density-grid.csv"}
    assert a == b
    metrics = json.loads(a["metrics.json"])
    assert metrics["num_samples"] == 3
    assert b"\r\n" not in a["trace.csv"]


def test_sample_outputs(tmp_path):
    assert run("sample", tmp_path, "--c=1", "--d=1", "--chains=2") == 0
    loaded = store.load(tmp_path / "samples.pxs")
    assert len(loaded) == 6
    assert {m["chain"] for m in loaded.meta} == {0, 1}
    assert set(loaded.samples[0]) == {"0.W", "0.b", "1.W", "1.b"}
    trace = read_rows(tmp_path / "trace.csv")
    assert trace[0] == cli.TRACE_HEADER and len(trace) == 1 + 2 * 60
    assert store.load_metadata(tmp_path / "samples.pxs")["config"]["c"] == 1


def test_seed_changes_output(tmp_path):
    assert run("sample", tmp_path / "a", "--seed=1") == 0
    assert run("sample", tmp_path / "b", "--seed=2") == 0
    assert (tmp_path / "a/trace.csv").read_bytes() != (tmp_path / "b/trace.csv").read_bytes()


def test_mog_zero_samples(tmp_path):
    assert run("mog", tmp_path, "--mog_samples=0", "--mog_grid=3") == 0
    assert read_rows(tmp_path / "samples.csv") == [["chain", "method", "x", "y"]]
    modes = read_rows(tmp_path / "modes.csv")
    assert [r[2] for r in modes[1:]] == ["0", "0"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "cycles": 2}))
    out = tmp_path / "o"
    assert cli.main(["sample", f"--config={cfg}", f"--out={out}", *SMALL]) == 0
    side = json.loads((out / "samples.pxs.json").read_text())
    assert side["metadata"]["config"]["seed"] == 3
    assert side["metadata"]["config"]["cycles"] == 3


@pytest.mark.parametrize("bad", [["--sampler=nuts"], ["--bogus=1"], ["--lr0=-1"], ["stray"]])
def test_bad_config_exit_2(tmp_path, bad):
    assert run("sample", tmp_path, *bad) == 2


def test_bad_json_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert cli.main(["sample", f"--config={cfg}", f"--out={tmp_path}"]) == 2


def test_missing_checkpoint_exit_4(tmp_path):
    assert run("eval", tmp_path, f"--checkpoint={tmp_path / 'nope.pxs'}") == 4


def test_divergence_exit_3(tmp_path):
    assert run("sample", tmp_path, "--lr0=1e4") == 3
    rows = read_rows(tmp_path / "trace.csv")
    assert rows[0] == cli.TRACE_HEADER
    assert len(rows) < 1 + 60
    assert not (tmp_path / "samples.pxs").exists()


def test_threads_do_not_change_output(tmp_path, monkeypatch):
    monkeypatch.setenv("PX_THREADS", "1")
    assert run("sample", tmp_path / "a", "--chains=2") == 0
    monkeypatch.setenv("PX_THREADS", "4")
    assert run("sample", tmp_path / "b", "--chains=2") == 0
    assert (tmp_path / "a/trace.csv").read_bytes() == (tmp_path / "b/trace.csv").read_bytes()
    assert (tmp_path / "a/samples.pxs").read_bytes() == (tmp_path / "b/samples.pxs").read_bytes()
