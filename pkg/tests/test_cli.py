import json

import numpy as np
import pytest

from gsau import cli
from gsau.autodiff import NumericError
from gsau.data import load_snapshot
from gsau.synthetic import two_block_log

SMALL = ["--dim", "8", "--seq-layers", "1", "--max-seq-len", "10", "--batch-size", "64", "--epochs", "2"]


@pytest.fixture(scope="module")
def snapshot(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    log = d / "log.tsv"
    log.write_text("".join(f"{r.user}\t{r.item}\t{r.timestamp}\n" for r in two_block_log(seed=1)))
    assert cli.main(["preprocess", str(log), str(d / "ds.npz")]) == 0
    return d / "ds.npz"


def test_preprocess_prints_summary(tmp_path, capsys):
    log = tmp_path / "log.csv"
    log.write_text("".join(f"{r.timestamp},{r.item},{r.user}\n" for r in two_block_log(seed=2)))
    assert cli.main(["preprocess", str(log), str(tmp_path / "a.npz"), "--format", "csv", "--columns", "2,1,0"]) == 0
    out = capsys.readouterr().out
    assert "users 40" in out and "items 40" in out and "interactions 400" in out and "density 0.25" in out


def test_preprocess_on_snapshot_is_a_no_op(snapshot, tmp_path, capsys):
    before = snapshot.read_bytes()
    assert cli.main(["preprocess", str(snapshot), str(snapshot)]) == 0
    assert snapshot.read_bytes() == before
    assert cli.main(["preprocess", str(snapshot), str(tmp_path / "copy.npz")]) == 0
    assert (tmp_path / "copy.npz").read_bytes() == before
    assert load_snapshot(tmp_path / "copy.npz").fingerprint() == load_snapshot(snapshot).fingerprint()


def test_preprocess_subsample(tmp_path, capsys):
    log = tmp_path / "log.tsv"
    log.write_text("".join(f"{r.user}\t{r.item}\t{r.timestamp}\n" for r in two_block_log(seed=3)))
    assert cli.main(["preprocess", str(log), str(tmp_path / "s.npz"), "--subsample-users", "25"]) == 0
    ds = load_snapshot(tmp_path / "s.npz")
    assert 0 < ds.n_users <= 25  # re-filtering may drop a few more
    assert min(len(s) for s in ds.sequences) >= 5
    assert np.bincount(np.concatenate(ds.sequences), minlength=ds.n_items).min() >= 5


@pytest.mark.parametrize("argv", [
    ["preprocess", "x", "y", "--delimiter", "ab"],
    ["preprocess", "x", "y", "--columns", "0,0,1"],
    ["train", "--out", "o"],
    ["train", "--data", "d", "--out", "o", "--unknown-flag"],
    ["train", "--data", "d", "--out", "o", "--ablation", "without-graph,without-sequential"],
    ["train", "--data", "d", "--out", "o", "--ablation", "without-rec", "--variant", "gsau-rec"],
    ["train", "--data", "d", "--out", "o", "--ablation", "sideways"],
    ["train", "--data", "d", "--out", "o", "--dim", "9", "--heads", "2"],
    ["train", "--data", "d", "--out", "o", "--batch-size", "1"],
    ["train", "--data", "d", "--out", "o", "--scoring-head", "fused"],
    ["sweep-gamma", "--data", "d", "--out", "o", "--grid", "0.1,x"],
    ["frobnicate"],
])
def test_usage_errors(argv, capsys):
    assert cli.main(argv) == cli.EXIT_USAGE


def test_missing_data_is_a_data_error(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "none.tsv"), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_numeric_failure_exit_code(snapshot, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(cli, "fit", boom)
    assert cli.main(["train", "--data", str(snapshot), "--out", str(tmp_path / "o")] + SMALL) == cli.EXIT_NUMERIC


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\ngamma = 0.3\ndim = 16\nbatch-size = 128\n")
    resolved = cli.resolve(cli.read_config_file(cfg), {"gamma": 0.2})
    assert resolved["gamma"] == 0.2 and resolved["dim"] == 16 and resolved["batch_size"] == 128
    assert resolved["lr"] == 1e-3
    cfg.write_text("gama = 0.3\n")
    with pytest.raises(cli.UsageError, match="unknown key"):
        cli.read_config_file(cfg)


def test_resolved_config_round_trips(tmp_path):
    raw = cli.resolve({}, {"data": "x", "ablation": "without-rec", "clip_norm": 5.0})
    spec = cli.RunSpec.from_dict(raw)
    (tmp_path / "c.txt").write_text(cli.format_config(spec.raw))
    again = cli.RunSpec.from_dict(cli.resolve(cli.read_config_file(tmp_path / "c.txt"), {}))
    assert again.loss == spec.loss and again.model == spec.model and again.train == spec.train
    assert spec.loss.variant == "gsau"


@pytest.mark.parametrize("ablation, field", [
    ("without-graph", "without_graph"),
    ("without-sequential", "without_sequential"),
    ("without-ui-uniform", "without_ui_uniform"),
])
def test_ablation_flags(ablation, field):
    spec = cli.RunSpec.from_dict(cli.resolve({}, {"data": "x", "ablation": ablation}))
    assert getattr(spec.loss, field) and spec.loss.variant == "gsau_rec"


def test_uniformity_pooling_flag():
    both = cli.RunSpec.from_dict(cli.resolve({}, {"data": "x", "uniformity_pooling": "union"})).loss
    assert both.graph_pooling == "union" and both.seq_pooling == "union"
    mixed = cli.RunSpec.from_dict(cli.resolve({}, {"data": "x", "uniformity_pooling": "average",
                                                   "seq_pooling": "union"})).loss
    assert mixed.graph_pooling == "average" and mixed.seq_pooling == "union"


def test_headline_flags():
    spec = cli.RunSpec.from_dict(cli.resolve({}, {"data": "x", "variant": "gsau-rec", "gamma": 0.1}))
    assert spec.loss.variant == "gsau_rec" and spec.loss.gamma == 0.1
    assert spec.model.dim == 64 and spec.train.epochs == 300 and spec.train.patience == 10


def test_train_writes_run_directory(snapshot, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(snapshot), "--out", str(out), "--seed", "7"] + SMALL) == 0
    assert "GSAU (rec) (test)" in capsys.readouterr().out
    for name in ("config.txt", "meta.json", "epochs.jsonl", "report.jsonl", "report.txt", "model.ckpt"):
        assert (out / name).exists(), name
    meta = json.loads((out / "meta.json").read_text())
    assert meta["seed"] == 7 and len(meta["dataset_fingerprint"]) == 16
    epochs = [json.loads(l) for l in (out / "epochs.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in epochs] == [1, 2]
    assert "20" in epochs[0]["valid"]["ndcg"]
    assert "seed = 7" in (out / "config.txt").read_text()
    test = json.loads((out / "report.jsonl").read_text().splitlines()[1])
    assert test["split"] == "test" and test["meta"]["dataset_fingerprint"] == meta["dataset_fingerprint"]

    # the resolved config alone reproduces the run
    again = tmp_path / "again"
    assert cli.main(["train", "--config", str(out / "config.txt"), "--out", str(again)]) == 0
    assert (again / "report.jsonl").read_text() == (out / "report.jsonl").read_text()
    strip = lambda p: [{k: v for k, v in json.loads(l).items() if k != "seconds"} for l in p.read_text().splitlines()]
    assert strip(again / "epochs.jsonl") == strip(out / "epochs.jsonl")


def test_evaluate_matches_training_report(snapshot, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(snapshot), "--out", str(out)] + SMALL) == 0
    capsys.readouterr()
    assert cli.main(["evaluate", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out.splitlines()[0])
    trained = json.loads((out / "report.jsonl").read_text().splitlines()[1])
    assert printed["ndcg"] == trained["ndcg"] and printed["recall"] == trained["recall"]
    assert cli.main(["evaluate", str(out), "--scoring-head", "graph", "--split", "valid"]) == 0
    assert cli.main(["evaluate", str(tmp_path / "nowhere")]) == cli.EXIT_USAGE


def test_resume_continues_epochs(snapshot, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(snapshot), "--out", str(out)] + SMALL) == 0
    assert cli.main(["train", "--data", str(snapshot), "--out", str(out), "--resume"] + SMALL[:-1] + ["3"]) == 0
    epochs = [json.loads(l)["epoch"] for l in (out / "epochs.jsonl").read_text().splitlines()]
    assert epochs == [1, 2, 3]


def test_sweep_gamma(snapshot, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert cli.main(["sweep-gamma", "--data", str(snapshot), "--out", str(out), "--grid", "0.1,0.3"] + SMALL) == 0
    rows = (out / "summary.tsv").read_text().splitlines()
    assert rows[0].startswith("gamma\tbest_epoch") and [r.split("\t")[0] for r in rows[1:]] == ["0.1", "0.3"]
    assert "gamma = 0.3" in (out / "gamma-0.3" / "config.txt").read_text()
    assert "gamma=0.1" in capsys.readouterr().out


def test_default_grid():
    assert cli.GAMMA_GRID == (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
    assert np.isclose(sum(cli.GAMMA_GRID), 1.55)
