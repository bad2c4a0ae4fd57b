import csv
import logging

import numpy as np
import pytest

from stylerl.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_OK,
    SNAPSHOT_NAME,
    ConfigError,
    main,
    read_run_config,
    write_run_config,
)
from stylerl.container import read_container, write_container
from stylerl.imageio import save_image
from stylerl.metrics import DISCLAIMER, read_report_rows
from stylerl.trainer import TrainConfig

SMALL = """\
# tiny run for tests
image_size = 16
warmup = 2
replay_batch = 2
horizon = 3
pool_capacity = 20
total_env_steps = 4
checkpoint_interval = 0
"""


@pytest.fixture(scope="module")
def trained(corpus_dirs, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "small.cfg"
    cfg.write_text(SMALL)
    code = main(["train", "--config", str(cfg), "--content-dir", str(corpus_dirs["content"]),
                 "--style-dir", str(corpus_dirs["style"]), "--out", str(out / "a"), "--seed", "3"])
    assert code == EXIT_OK
    return out / "a"


def log_without_wall_time(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r.pop("wall_time")
    return rows


def test_read_run_config_overrides_defaults(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text(SMALL + "learning_rate = 0.001\nbackbone = seed:3\n")
    cfg = read_run_config(path)
    assert cfg.image_size == 16 and cfg.learning_rate == 0.001 and cfg.backbone == "seed:3"
    assert cfg.gamma == TrainConfig().gamma


def test_unknown_key_names_key_and_line(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("horizon = 3\nbatchsize = 4\n")
    with pytest.raises(ConfigError, match=r"'batchsize'.*:2"):
        read_run_config(path)


def test_config_snapshot_roundtrip(tmp_path):
    cfg = TrainConfig(image_size=32, seed=7, content_dir="x")
    write_run_config(cfg, tmp_path / "snap")
    assert read_run_config(tmp_path / "snap") == cfg


def test_train_outputs(trained):
    assert (trained / "final.ckpt").is_file()
    assert (trained / "train_log.csv").is_file()
    assert (trained / SNAPSHOT_NAME).is_file()
    snap = read_run_config(trained / SNAPSHOT_NAME)
    assert snap.seed == 3 and snap.total_env_steps == 4


def test_snapshot_reproduces_run(trained, tmp_path):
    code = main(["train", "--config", str(trained / SNAPSHOT_NAME), "--out", str(tmp_path / "b")])
    assert code == EXIT_OK
    assert log_without_wall_time(tmp_path / "b" / "train_log.csv") == log_without_wall_time(trained / "train_log.csv")
    a, b = read_container(trained / "final.ckpt"), read_container(tmp_path / "b" / "final.ckpt")
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_train_missing_style_dir_exit_2(corpus_dirs, tmp_path, caplog):
    missing = tmp_path / "no_styles_here"
    with caplog.at_level(logging.ERROR):
        code = main(["train", "--content-dir", str(corpus_dirs["content"]), "--style-dir", str(missing),
                     "--out", str(tmp_path / "o"), "--steps", "1"])
    assert code == EXIT_DATA
    assert str(missing) in caplog.text


def test_train_unknown_key_exit_1(corpus_dirs, tmp_path, caplog):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rat = 0.1\n")
    with caplog.at_level(logging.ERROR):
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert "learning_rat" in caplog.text


def test_train_invalid_value_exit_1(corpus_dirs, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("replay_batch = 1\n")
    assert main(["train", "--config", str(cfg), "--content-dir", str(corpus_dirs["content"]),
                 "--style-dir", str(corpus_dirs["style"]), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def stylize(trained, corpus_dirs, out, steps):
    content = sorted(corpus_dirs["heldout_content"].iterdir())[0]
    style = sorted(corpus_dirs["heldout_style"].iterdir())[0]
    return main(["stylize", "--ckpt", str(trained / "final.ckpt"), "--content", str(content),
                 "--style", str(style), "--steps", str(steps), "--out", str(out)])


def test_stylize_writes_padded_sequence_byte_identically(trained, corpus_dirs, tmp_path):
    assert stylize(trained, corpus_dirs, tmp_path / "x", 10) == EXIT_OK
    assert stylize(trained, corpus_dirs, tmp_path / "y", 10) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "x").iterdir())
    assert names == [f"seq_{i:03d}.png" for i in range(1, 11)]
    for name in names:
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_stylize_zero_steps_exit_1(trained, corpus_dirs, tmp_path, caplog):
    with caplog.at_level(logging.ERROR):
        assert stylize(trained, corpus_dirs, tmp_path / "z", 0) == EXIT_CONFIG
    assert "steps must be ≥ 1" in caplog.text


def test_stylize_architecture_mismatch_exit_1(trained, corpus_dirs, tmp_path):
    arrays = read_container(trained / "final.ckpt")
    arrays["builder.out.weight"] = np.zeros((3, 16, 5, 5), dtype=np.float32)
    bad = tmp_path / "bad"
    bad.mkdir()
    write_container(bad / "final.ckpt", arrays)
    assert stylize(bad, corpus_dirs, tmp_path / "o", 2) == EXIT_CONFIG


def test_eval_report(trained, corpus_dirs, tmp_path, capsys):
    report = tmp_path / "r.csv"
    code = main(["eval", "--ckpt", str(trained / "final.ckpt"), "--content-dir", str(corpus_dirs["heldout_content"]),
                 "--style-dir", str(corpus_dirs["style"]), "--steps", "5", "--indices", "1", "5",
                 "--report", str(report)])
    assert code == EXIT_OK
    assert report.read_text().splitlines()[0] == DISCLAIMER
    n_content = len(list(corpus_dirs["heldout_content"].iterdir()))
    n_style = len(list(corpus_dirs["style"].iterdir()))
    assert len(read_report_rows(report)) == n_content * n_style * 2
    assert "params:" in capsys.readouterr().out


def test_eval_empty_content_dir_exit_2(trained, corpus_dirs, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = main(["eval", "--ckpt", str(trained / "final.ckpt"), "--content-dir", str(empty),
                 "--style-dir", str(corpus_dirs["style"]), "--report", str(tmp_path / "r.csv")])
    assert code == EXIT_DATA


def test_log_level_from_environment(monkeypatch):
    from stylerl import cli

    monkeypatch.setenv("RLMS_LOG", "debug")
    root = logging.getLogger()
    saved = root.handlers[:], root.level
    root.handlers = []
    try:
        cli._configure_logging()
        assert root.level == logging.DEBUG
    finally:
        root.handlers, _ = saved
        root.setLevel(saved[1])
