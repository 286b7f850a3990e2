import json
import subprocess
import sys

import numpy as np
import pytest

from breathorder import tensor as tc
from breathorder.cli import main
from breathorder.dataio import load_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--sequences", "5", "--clips", "4", "--seed", "1"]) == 0
    return root


def test_synth_counts_and_reproducible(workspace, tmp_path):
    data = workspace / "data"
    assert len(list(data.rglob("*.vclp"))) == 20
    assert json.loads((data / "config.json").read_text())["synth"]["M"] == 4
    assert main(["synth", "--out", str(tmp_path / "again"), "--sequences", "5", "--clips", "4", "--seed", "1"]) == 0
    for f in sorted(data.rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(data)).read_bytes()


def test_synth_rejects_two_clips(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--clips", "2"]) == 1


def test_mask_keeps_four_of_sixteen_tiles(workspace, tmp_path):
    out = tmp_path / "masked"
    assert main(["mask", "--data", str(workspace / "data"), "--out", str(out), "--keep-ratio", "0.2",
                 "--previews", "1"]) == 0
    clip = load_dataset(out)[0].clips[0]
    tiles = clip.frames.reshape(8, 4, 8, 4, 8, 3)
    nonzero = (np.abs(tiles).sum(axis=(2, 4, 5)) > 0).sum(axis=(1, 2))
    assert np.all(nonzero <= 4)
    assert (out / "previews").is_dir() and (out / "config.json").is_file()


def test_mask_full_ratio_is_identity(workspace, tmp_path):
    assert main(["mask", "--data", str(workspace / "data"), "--out", str(tmp_path), "--keep-ratio", "1.0",
                 "--previews", "0"]) == 0
    for a, b in zip(load_dataset(workspace / "data"), load_dataset(tmp_path)):
        assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(a.clips, b.clips))


def test_missing_inputs_exit_two(tmp_path):
    assert main(["mask", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert main(["inspect", str(tmp_path / "nothing.bock")]) == 2


def test_bad_config_exit_one(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epochs": 9}}))
    assert main(["train", "--config", str(cfg), "--data", str(workspace / "data"), "--out", str(tmp_path / "r")]) == 1
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r"), "--keep-ratio", "0"]) == 1


@pytest.fixture(scope="module")
def trained(workspace):
    run = workspace / "run"
    assert main(["train", "--data", str(workspace / "data"), "--out", str(run), "--epochs", "1",
                 "--method", "embedding", "--posenc", "liere", "--mgm", "on"]) == 0
    return run


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"config.json", "split.json", "model.bock", "train_log.csv", "epochs.csv", "checkpoints"} <= names
    split = json.loads((trained / "split.json").read_text())
    assert set(split["train"]).isdisjoint(split["test"]) and len(split["test"]) == 1
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["encoder"]["mgm_enabled"] is True and cfg["train"]["seed"] == cfg["seed"]
    assert "proto.sob" in tc.load_checkpoint(trained / "model.bock")


def test_eval_and_curve(workspace, trained, tmp_path):
    ev = tmp_path / "ev"
    assert main(["eval", "--data", str(workspace / "data"), "--ckpt", str(trained), "--ckpt",
                 str(trained / "model.bock"), "--out", str(ev)]) == 0
    rows = (ev / "results.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].startswith("embedding,liere,on,")
    assert rows[1] == rows[2]
    assert main(["curve", "--report", str(ev), "--out", str(tmp_path / "cv")]) == 0
    assert (tmp_path / "cv" / "curve.csv").read_bytes() == (ev / "curve.csv").read_bytes()


def test_eval_rejects_mismatched_checkpoint(workspace, trained, tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "config.json").write_text((trained / "config.json").read_text())
    tc.save_checkpoint(bad / "model.bock", {"x": np.zeros(1)})
    assert main(["eval", "--data", str(workspace / "data"), "--ckpt", str(bad), "--out", str(tmp_path / "e")]) == 1
    (bad / "model.bock").write_bytes(b"junk")
    assert main(["eval", "--data", str(workspace / "data"), "--ckpt", str(bad), "--out", str(tmp_path / "e")]) == 2


def test_gradcheck_subset():
    assert main(["gradcheck", "--only", "softmax", "--only", "expm_skew"]) == 0
    assert main(["gradcheck", "--only", "nonexistent"]) == 1


def test_inspect(trained, workspace, capsys):
    assert main(["inspect", str(trained / "model.bock")]) == 0
    assert "tensors" in capsys.readouterr().out
    clip = next((workspace / "data").rglob("*.vclp"))
    assert main(["inspect", str(clip)]) == 0
    assert main(["inspect", str(workspace / "data")]) == 0


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "breathorder", "synth", "--out", str(tmp_path), "--clips", "1"],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "config error" in res.stderr
