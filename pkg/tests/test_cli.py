"""Config parsing and the command-line surface, end to end on tiny runs."""

import numpy as np
import pytest

from nextvlad.cli import main
from nextvlad.config import RunConfig, batch_max_frames, model_config_from, resolve_dims
from nextvlad.data import read_dataset
from nextvlad.train import load_checkpoint


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------


def test_unknown_keys_rejected_everywhere(tmp_path):
    cfg = RunConfig()
    with pytest.raises(KeyError, match="unknown"):
        cfg.set("train.nope", "1")
    with pytest.raises(KeyError, match="unknown"):
        cfg.apply_overrides(["bogus.key=3"])
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.base_lr = 0.1\nwat = 7\n")
    with pytest.raises(KeyError, match="unknown"):
        cfg.load_file(bad)


def test_config_file_parsing_with_comments(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text(
        "# a comment\n"
        "train.base_lr = 0.001   # trailing comment\n"
        "\n"
        "model.kind = netvlad\n"
        "train.lr_staircase = true\n")
    cfg = RunConfig()
    cfg.load_file(f)
    assert cfg["train.base_lr"] == 0.001
    assert cfg["model.kind"] == "netvlad"
    assert cfg["train.lr_staircase"] is True


def test_type_validation():
    cfg = RunConfig()
    with pytest.raises(ValueError, match="int"):
        cfg.set("train.steps", "many")
    with pytest.raises(ValueError, match="boolean"):
        cfg.set("train.lr_staircase", "maybe")


def test_echo_roundtrip():
    cfg = RunConfig()
    cfg.set("train.base_lr", "0.00125")
    cfg.set("model.experts", "3")
    cfg.set("model.reverse_whitening", "true")
    back = RunConfig.from_echo(cfg.echo())
    assert back.echo() == cfg.echo()
    assert back["train.base_lr"] == 0.00125
    assert back["model.experts"] == 3


def test_resolve_dims_from_dataset(tmp_path):
    path = tmp_path / "d.fav"
    assert main(["gen-data", "--out", str(path), "--videos", "6", "--classes", "3",
                 "--set", "data.visual_dim=8", "--set", "data.audio_dim=4"]) == 0
    ds = read_dataset(path)
    cfg = RunConfig()
    cfg.set("model.hidden", "16")
    cfg.set("model.se_ratio", "4")
    cfg.set("vlad.clusters", "2")
    cfg.set("vlad.groups", "2")
    resolve_dims(cfg, ds)
    mc = model_config_from(cfg)
    assert mc.video_dim == 8 and mc.audio_dim == 4 and mc.num_classes == 3
    assert batch_max_frames(cfg) == cfg["data.frames_max"]


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a.fav", tmp_path / "b.fav"
    args = ["gen-data", "--videos", "10", "--classes", "4", "--seed", "7"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_default_spec_pipeline_smoke(tmp_path):
    # gen-data with no overrides must produce a file cmd_train can consume
    path = tmp_path / "default.fav"
    assert main(["gen-data", "--out", str(path)]) == 0
    ds = read_dataset(path)
    assert (len(ds), ds.num_classes, ds.visual_dim, ds.audio_dim) == (2000, 20, 64, 16)
    out = tmp_path / "run"
    rc = main(["train", "--dataset", str(path), "--out", str(out),
               "--steps", "1", "--batch-size", "16", "--seed", "1"] + TINY)
    assert rc == 0
    assert (out / "checkpoint.ckpt").exists()


def test_gen_data_too_many_labels_fails(tmp_path, capsys):
    rc = main(["gen-data", "--out", str(tmp_path / "x.fav"),
               "--videos", "4", "--classes", "4", "--labels-per-video", "5"])
    assert rc == 1
    assert "labels_max" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train / eval / predict
# ---------------------------------------------------------------------------


TINY = ["--set", "model.hidden=16", "--set", "vlad.clusters=2", "--set", "vlad.groups=2",
        "--set", "model.se_ratio=4", "--set", "model.dropout=0.2"]


@pytest.fixture()
def tiny_dataset(tmp_path):
    path = tmp_path / "tiny.fav"
    assert main(["gen-data", "--out", str(path), "--videos", "24", "--classes", "4",
                 "--set", "data.visual_dim=8", "--set", "data.audio_dim=4",
                 "--set", "data.frames_min=2", "--set", "data.frames_max=4",
                 "--seed", "11"]) == 0
    return path


def test_train_lr_zero_checkpoint_equals_init(tmp_path, tiny_dataset):
    out = tmp_path / "frozen"
    rc = main(["train", "--dataset", str(tiny_dataset), "--out", str(out),
               "--steps", "1", "--lr", "0", "--batch-size", "8", "--seed", "3"] + TINY)
    assert rc == 0
    ckpt = load_checkpoint(out / "checkpoint.ckpt")

    from nextvlad.cli import _build_params
    cfg = RunConfig.from_echo(ckpt.config_echo)
    fresh = _build_params(cfg)
    for name, t in fresh.named_parameters().items():
        assert np.array_equal(ckpt.tensors[name], t.data), name


def test_train_eval_cross_command_consistency(tmp_path, tiny_dataset, capsys):
    out = tmp_path / "run"
    rc = main(["train", "--dataset", str(tiny_dataset), "--out", str(out),
               "--steps", "12", "--lr", "0.002", "--batch-size", "8", "--seed", "3"] + TINY)
    assert rc == 0
    train_line = [l for l in capsys.readouterr().out.splitlines() if "GAP" in l][-1]
    trained_gap = float(train_line.rsplit(" ", 1)[-1])

    rc = main(["eval", "--checkpoint", str(out / "checkpoint.ckpt"),
               "--dataset", str(tiny_dataset)])
    assert rc == 0
    eval_line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("GAP@20")][0]
    eval_gap = float(eval_line.split()[1])
    assert abs(trained_gap - eval_gap) < 5e-5  # train prints 4 decimals

    # log file exists with header and one row per step
    log = (out / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,lr,loss,bce,kl,gap"
    assert len(log) == 13
    assert (out / "config.txt").exists()


def test_predict_then_eval_from_csv_matches(tmp_path, tiny_dataset, capsys):
    out = tmp_path / "run"
    main(["train", "--dataset", str(tiny_dataset), "--out", str(out),
          "--steps", "8", "--batch-size", "8", "--seed", "5"] + TINY)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.ckpt"),
                 "--dataset", str(tiny_dataset)]) == 0
    direct = float(capsys.readouterr().out.splitlines()[0].split()[1])

    csv_path = tmp_path / "preds.csv"
    assert main(["predict", "--checkpoint", str(out / "checkpoint.ckpt"),
                 "--dataset", str(tiny_dataset), "--out", str(csv_path)]) == 0
    capsys.readouterr()
    assert main(["eval", "--predictions", str(csv_path),
                 "--dataset", str(tiny_dataset)]) == 0
    from_csv = float(capsys.readouterr().out.splitlines()[0].split()[1])
    assert direct == from_csv


def test_mixture_with_zero_temperature_logs_zero_kl(tmp_path, tiny_dataset):
    out = tmp_path / "mix0"
    rc = main(["train", "--dataset", str(tiny_dataset), "--out", str(out),
               "--steps", "4", "--batch-size", "8", "--seed", "3",
               "--mixture", "3", "--kd-temperature", "0"] + TINY)
    assert rc == 0
    rows = (out / "train_log.csv").read_text().splitlines()[1:]
    assert all(row.split(",")[4] == "0.0" for row in rows)


def test_mixture_with_temperature_logs_nonzero_kl(tmp_path, tiny_dataset):
    out = tmp_path / "mix3"
    rc = main(["train", "--dataset", str(tiny_dataset), "--out", str(out),
               "--steps", "3", "--batch-size", "8", "--seed", "3",
               "--mixture", "3", "--kd-temperature", "3"] + TINY)
    assert rc == 0
    rows = (out / "train_log.csv").read_text().splitlines()[1:]
    assert any(float(row.split(",")[4]) > 0 for row in rows)


def test_resume_continues_log(tmp_path, tiny_dataset):
    out = tmp_path / "resume"
    main(["train", "--dataset", str(tiny_dataset), "--out", str(out),
          "--steps", "4", "--batch-size", "8", "--seed", "3"] + TINY)
    main(["train", "--dataset", str(tiny_dataset), "--out", str(out),
          "--resume", str(out / "checkpoint.ckpt"), "--steps", "8"])
    rows = (out / "train_log.csv").read_text().splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == [str(i) for i in range(1, 9)]


# ---------------------------------------------------------------------------
# param-count / verify
# ---------------------------------------------------------------------------


def test_param_count_paper_scale_configs(capsys):
    assert main(["param-count"]) == 0
    out = capsys.readouterr().out
    assert "71,352,320" in out  # video stream at defaults
    assert "1,048,576" in out  # SE gate at H=2048, r=8

    assert main(["param-count", "--set", "model.kind=netvlad"]) == 0
    out = capsys.readouterr().out
    assert "268,697,600" in out


def test_param_count_mismatch_nonzero_exit(monkeypatch, capsys):
    import nextvlad.cli as cli

    monkeypatch.setattr(cli, "param_count_nextvlad", lambda cfg: 1)
    assert main(["param-count"]) == 1
    assert "MISMATCH" in capsys.readouterr().out


def test_verify_command_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "checks passed" in out


def test_eval_requires_source(capsys, tmp_path, tiny_dataset):
    assert main(["eval", "--dataset", str(tiny_dataset)]) == 2
