import csv

import numpy as np

from ifssnet.cli import load_dataset, run
from ifssnet.volume import MaskVolume, read_mvol, write_mvol


def _err_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return err[0]


def test_schedule_interval(capsys):
    assert run(["schedule", "--mode", "interval", "--T", "1400", "--period", "100", "--k", "3"]) == 0
    out = capsys.readouterr().out.split()
    assert len(out) == 42 and out[:4] == ["0", "1", "2", "100"]


def test_schedule_decremental(capsys):
    assert run(["schedule", "--mode", "decremental", "--T", "1400", "--n", "29"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 29
    assert len(lines[0].split()) == 230 and len(lines[1].split()) == 115


def test_usage_errors(capsys, tmp_path):
    assert run(["bogus"]) == 2
    assert _err_line(capsys).startswith("error: usage:")
    assert run(["eval", "--pred", "a", "--gt", "b", "--report", "r", "--nope"]) == 2
    assert _err_line(capsys).startswith("error: usage:")
    assert run(["eval", "--pred", str(tmp_path / "x.mvol"), "--gt", "b", "--report", "r"]) == 2
    assert _err_line(capsys).startswith("error: missing-file:")


def test_bad_mvol_is_single_line(capsys, tmp_path):
    bad = tmp_path / "bad.mvol"
    bad.write_bytes(b"junk\n")
    assert run(["eval", "--pred", str(bad), "--gt", str(bad), "--report", str(tmp_path / "r.csv")]) == 1
    assert _err_line(capsys).startswith("error: mvol: bad magic")


def test_unknown_config_key(capsys, tmp_path):
    spec = tmp_path / "spec.cfg"
    spec.write_text("seed = 1\nsede = 2\n")
    assert run(["gen-phantom", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 2
    assert "sede" in _err_line(capsys)


def test_eval_perfect(tmp_path, capsys):
    m = np.zeros((4, 6, 6), np.uint8)
    m[1:3, 2:4, 2:4] = 1
    write_mvol(MaskVolume(m, (0.5, 0.5, 0.5)), tmp_path / "m.mvol")
    code = run(["eval", "--pred", str(tmp_path / "m.mvol"), "--gt", str(tmp_path / "m.mvol"),
                "--report", str(tmp_path / "r.csv"), "--per-slice", str(tmp_path / "s.csv")])
    assert code == 0
    with open(tmp_path / "r.csv") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["dice"]) == 1.0 and float(row["vol_err_pct"]) == 0.0
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 5


def test_baseline_commands(tmp_path):
    m = np.zeros((5, 8, 8), np.uint8)
    m[0, 2:5, 2:5] = 1
    m[4, 3:6, 3:6] = 1
    sdir = tmp_path / "sparse"
    sdir.mkdir()
    write_mvol(MaskVolume(m), sdir / "mask.mvol")
    (sdir / "schedule.txt").write_text("0 4\n")
    for method in ("zero", "fbs"):
        out = tmp_path / f"{method}.mvol"
        assert run(["baseline", "--method", method, "--sparse", str(sdir), "--out", str(out)]) == 0
        res = read_mvol(out).data
        np.testing.assert_array_equal(res[[0, 4]], m[[0, 4]])


def test_pipeline_round_trip(tmp_path, capsys):
    spec = tmp_path / "spec.cfg"
    spec.write_text("count = 2\nseed = 5\ndepth_T = 8\nheight = 32\nwidth = 32\n")
    data = tmp_path / "data"
    assert run(["gen-phantom", "--spec", str(spec), "--out", str(data)]) == 0
    names, pairs = load_dataset(data)
    assert names == ["p000", "p001"] and pairs[0][0].shape == (8, 32, 32)

    cfg = tmp_path / "train.cfg"
    cfg.write_text(
        "in_hw = 32\nchannels = 2,2,2,2,4\natrous_rates = 1,2\nepochs = 1\nfinal_lr_epochs = 0\n"
        "tbptt_chunk = 3\nfloor_frac = 0.4\ninit_frac = 0.5\nbudget_frac = 0.45\n"
    )
    for mode in ("full", "few_shot"):
        ckpt = tmp_path / f"{mode}.pt"
        assert run(["train", "--mode", mode, "--data", str(data), "--config", str(cfg), "--out", str(ckpt)]) == 0
        assert ckpt.exists() and (tmp_path / f"{mode}.pt.log.csv").exists()

    pred = tmp_path / "pred.mvol"
    args = ["propagate", "--ckpt", str(tmp_path / "full.pt"), "--volume", str(data / "p001" / "volume.mvol"),
            "--seeds", str(data / "p001" / "mask_0.mvol"), "--out", str(pred), "--fuse", "mean"]
    assert run(args) == 0
    first = pred.read_bytes()
    assert run(args) == 0
    assert pred.read_bytes() == first
    assert '"mean"' in (tmp_path / "pred.mvol.json").read_text()
    assert run(["eval", "--pred", str(pred), "--gt", str(data / "p001" / "mask_0.mvol"),
                "--report", str(tmp_path / "r.csv")]) == 0
    assert "dice" in capsys.readouterr().out
