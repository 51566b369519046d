import hashlib
import json
import os

import pytest

from milab import cli
from milab import data as dt

SYNTH = {"m": 8, "bags_per_split": {"train": 8, "val": 6, "test": 6}, "bag_size": 10, "witness_rate": 0.2}
TRAIN = {
    "T": 4, "refresh_period": 2, "pretrain_epochs": 2, "pretrain_batch": 32, "n_anchors": 16, "n_same": 3, "n_diff": 3,
    "steps_per_epoch": 2, "embed_dim": 8, "proj_dim": 4, "hidden": [16], "ce_batch": 64,
    "aggregator": {"kind": "ds_mil", "lr": 5e-3, "max_epochs": 2, "step_size": 2},
}


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth = write_json(root / "synth.json", SYNTH)
    train = write_json(root / "train.json", TRAIN)
    assert cli.main(["synth", "--config", synth, "--seed", "1", "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--mode", "pretrain", "--data", str(root / "data"), "--config", train,
                     "--out", str(root / "pre")]) == 0
    return root, synth, train


def train(env, mode, out, *extra):
    root, _, cfg = env
    return cli.main(["train", "--mode", mode, "--data", str(root / "data"), "--config", cfg,
                     "--pretrained", str(root / "pre" / "checkpoints" / "encoder.mile"), "--out", str(out),
                     "--threads", "1", *extra])


def test_synth_prints_realized_witness_rate_and_is_deterministic(env, tmp_path, capsys):
    root, synth, _ = env
    assert cli.main(["synth", "--config", synth, "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    out = capsys.readouterr().out
    assert "train\trealized_witness_rate\t0.200000" in out
    for name in ("features.milf", "manifest.json"):
        assert sha(tmp_path / "d" / name) == sha(root / "data" / name)


def test_reference_synth_witness_rate(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path / "ref")]) == 0
    assert "train\trealized_witness_rate\t0.100000" in capsys.readouterr().out


def test_malformed_config_exits_2_without_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()
    cfg = write_json(tmp_path / "wr.json", {"witness_rate": 2.0})
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "y")]) == 2
    assert not (tmp_path / "y").exists()


def test_missing_artifacts_exit_3(env, tmp_path):
    root, _, cfg = env
    assert cli.main(["train", "--mode", "its2clr", "--data", str(root / "data"), "--config", cfg,
                     "--pretrained", str(tmp_path / "none.mile"), "--out", str(tmp_path / "o")]) == 3
    assert cli.main(["train", "--mode", "pretrain", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "o")]) == 3


def test_ground_truth_without_instance_labels_exits_3(env, tmp_path):
    root, _, cfg = env
    ds = dt.load_dataset(root / "data")
    for b in ds.bags:
        b.instance_labels = None
    dt.save_dataset(ds, tmp_path / "blind")
    code = cli.main(["train", "--mode", "gt", "--data", str(tmp_path / "blind"), "--config", cfg,
                     "--pretrained", str(root / "pre" / "checkpoints" / "encoder.mile"), "--out", str(tmp_path / "o")])
    assert code == 3


def test_its2clr_run_is_byte_identical(env, tmp_path):
    assert train(env, "its2clr", tmp_path / "a") == 0
    assert train(env, "its2clr", tmp_path / "b") == 0
    assert sha(tmp_path / "a" / "curves.csv") == sha(tmp_path / "b" / "curves.csv")
    ck = sorted(os.listdir(tmp_path / "a" / "checkpoints"))
    assert ck == sorted(os.listdir(tmp_path / "b" / "checkpoints")) and len(ck) >= 4
    for name in ck:
        assert sha(tmp_path / "a" / "checkpoints" / name) == sha(tmp_path / "b" / "checkpoints" / name)
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert {"command", "config", "seed", "inputs", "outputs", "git_describe", "wall_clock_seconds"} <= set(man)


def test_fixed_ce_writes_pseudo_labels_once(env, tmp_path):
    assert train(env, "ce", tmp_path / "ce", "--iterative", "false") == 0
    man = json.loads((tmp_path / "ce" / "manifest.json").read_text())
    assert man["pseudo_label_writes"] == [0]
    assert (tmp_path / "ce" / "pseudo_labels.csv").exists()


def test_end_to_end_shares_the_pretrained_hash(env, tmp_path):
    root, _, _ = env
    assert train(env, "e2e", tmp_path / "e") == 0
    man = json.loads((tmp_path / "e" / "manifest.json").read_text())
    from milab import encoder as enc, pipeline as pl
    pre = enc.load_checkpoint(root / "pre" / "checkpoints" / "encoder.mile")
    assert man["pretrained_sha256"] == pl.checkpoint_hash(enc.to_bytes(pre))


def test_eval_rows_and_unknown_kind(env, tmp_path):
    root, _, cfg = env
    assert cli.main(["eval", "--run", str(root / "pre"), "--data", str(root / "data"), "--config", cfg,
                     "--aggregators", "max,topk,attention,ds_mil,transformer", "--linear-eval",
                     "--out", str(tmp_path / "ev")]) == 0
    lines = (tmp_path / "ev" / "eval_report.csv").read_text().splitlines()
    assert lines[0] == "aggregator,metric,mean,std,n_runs"
    bag_rows = [l for l in lines if ",bag_auc_test," in l]
    assert len(bag_rows) == 5 and all(l.endswith(",5") for l in bag_rows)
    assert any(l.startswith("linear,instance_auc_test,") for l in lines)
    assert cli.main(["eval", "--run", str(root / "pre"), "--data", str(root / "data"), "--aggregators", "clam"]) == 2


def test_plot_is_deterministic(env, tmp_path):
    assert train(env, "its2clr", tmp_path / "r") == 0
    assert cli.main(["plot", str(tmp_path / "r"), "--out", str(tmp_path / "p1.svg")]) == 0
    assert cli.main(["plot", str(tmp_path / "r"), "--out", str(tmp_path / "p2.svg")]) == 0
    assert sha(tmp_path / "p1.svg") == sha(tmp_path / "p2.svg")
    assert sha(tmp_path / "p1.tsv") == sha(tmp_path / "p2.tsv")
    assert "<svg" in (tmp_path / "p1.svg").read_text()
    assert cli.main(["plot", str(tmp_path / "nothing"), "--out", str(tmp_path / "p3.svg")]) == 2


def test_thread_flag_and_env(env, tmp_path, monkeypatch):
    monkeypatch.setenv("MILAB_THREADS", "zero")
    root, synth, _ = env
    assert cli.main(["synth", "--config", synth, "--out", str(tmp_path / "d")]) == 2
    assert cli.main(["synth", "--config", synth, "--threads", "0", "--out", str(tmp_path / "d")]) == 2
