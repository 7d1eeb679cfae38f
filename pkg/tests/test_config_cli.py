"""Configuration parsing/merging and the command-line interface contract."""

import numpy as np
import pytest

from spikedistill.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from spikedistill.config import ConfigError, DEFAULTS, RunConfig, derive_seed, parse_config_text


# ---------------------------------------------------------------------------
# config parsing


def test_parse_values_and_comments():
    text = "# a comment\ndistill.alpha = 2.0\ntrain.epochs=5  # trailing comment\n\n"
    out = parse_config_text(text)
    assert out == {"distill.alpha": "2.0", "train.epochs": "5"}


def test_parse_rejects_unknown_key():
    with pytest.raises(ConfigError, match="line 2.*unknown key"):
        parse_config_text("train.lr = 0.1\ndistill.gamma = 1.0\n")


def test_parse_rejects_non_assignment():
    with pytest.raises(ConfigError, match="line 1.*key=value"):
        parse_config_text("just some words\n")


def test_defaults_build():
    cfg = RunConfig.build()
    assert cfg.distill.t_student == 2 and cfg.distill.t_teacher == 4
    assert cfg.train.lr == 0.1 and cfg.train.batch_size == 64
    assert cfg.data_kind == "moving-bar"
    assert cfg.spec.input_size == 8


def test_override_beats_file():
    file_values = {"distill.alpha": "0.5", "train.epochs": "7"}
    cfg = RunConfig.build(file_values, {"distill.alpha": 2.0, "train.seed": None})
    assert cfg.distill.alpha == 2.0  # flag wins
    assert cfg.train.epochs == 7  # file survives where no flag is given
    assert cfg.train.seed == int(DEFAULTS["train.seed"])  # None overrides are skipped


def test_unknown_override_key():
    with pytest.raises(ConfigError, match="unknown override key"):
        RunConfig.build(None, {"train.optimizer": "adam"})


def test_invalid_value_becomes_config_error():
    with pytest.raises(ConfigError):
        RunConfig.build({"distill.ts": "9", "distill.tt": "4"})
    with pytest.raises(ConfigError):
        RunConfig.build({"train.augment": "maybe"})


def test_resolved_text_roundtrip():
    cfg = RunConfig.build({"distill.alpha": "0.25"})
    text = cfg.resolved_text()
    assert "distill.alpha = 0.25" in text
    reparsed = parse_config_text(text)
    assert RunConfig.build(reparsed).distill.alpha == 0.25


def test_derive_seed_deterministic_distinct():
    assert derive_seed(0, 1) == derive_seed(0, 1)
    streams = {derive_seed(42, s) for s in range(32)}
    assert len(streams) == 32
    assert all(0 <= s < 2**31 for s in streams)


# ---------------------------------------------------------------------------
# CLI: training / eval round-trip


BARS_CFG = """
model.input_channels = 1
data.kind = bars
data.train_n = 32
data.test_n = 16
data.noise = 0.05
train.epochs = 1
train.batch_size = 8
distill.ts = 1
distill.tt = 2
"""


def write_cfg(tmp_path, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(BARS_CFG + extra)
    return str(path)


def test_cli_train_and_eval_roundtrip(tmp_path, capsys):
    out_dir = tmp_path / "run"
    cfg = write_cfg(tmp_path)
    code = main(["train", "--config", cfg, "--out", str(out_dir)])
    captured = capsys.readouterr().out
    assert code == EXIT_OK
    assert (out_dir / "resolved.cfg").exists()
    assert (out_dir / "metrics.csv").exists()
    assert (out_dir / "checkpoint_final").exists()
    assert (out_dir / "checkpoint_best").exists()
    train_acc_line = [l for l in captured.splitlines() if l.startswith("accuracy=")][-1]

    code = main(["eval", "--checkpoint", str(out_dir / "checkpoint_final"), "--config", cfg])
    eval_out = capsys.readouterr().out
    assert code == EXIT_OK
    eval_acc_line = [l for l in eval_out.splitlines() if l.startswith("accuracy=")][-1]
    assert eval_acc_line == train_acc_line  # round-trip reproduces bitwise


def test_cli_metrics_schema(tmp_path):
    out_dir = tmp_path / "run"
    main(["train", "--config", write_cfg(tmp_path), "--out", str(out_dir)])
    header = (out_dir / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,split,task_loss,tsd_loss,ssd_loss,total_loss,accuracy,weak_accuracy,wall_seconds"


def test_cli_flag_overrides_reach_resolved_cfg(tmp_path):
    out_dir = tmp_path / "run"
    main(["train", "--config", write_cfg(tmp_path), "--alpha", "0.125", "--out", str(out_dir)])
    resolved = (out_dir / "resolved.cfg").read_text()
    assert "distill.alpha = 0.125" in resolved


def test_cli_missing_dataset_path(tmp_path, capsys):
    code = main(["train", "--data", "idx", "--out", str(tmp_path / "x")])
    err = capsys.readouterr().err
    assert code == EXIT_USAGE
    assert "data.images" in err


def test_cli_bad_config_file(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no.such.key = 1\n")
    code = main(["train", "--config", str(bad)])
    assert code == EXIT_USAGE
    assert "unknown key" in capsys.readouterr().err


def test_cli_eval_corrupt_checkpoint(tmp_path, capsys):
    out_dir = tmp_path / "run"
    cfg = write_cfg(tmp_path)
    main(["train", "--config", cfg, "--out", str(out_dir)])
    blob = out_dir / "checkpoint_final.bin"
    blob.write_bytes(blob.read_bytes()[:-16])
    code = main(["eval", "--checkpoint", str(out_dir / "checkpoint_final"), "--config", cfg])
    assert code == EXIT_USAGE
    assert "blob size mismatch" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# CLI tools


def test_cli_tools_integrate(tmp_path, capsys):
    from spikedistill.datasets import EventStream, save_evst

    n = 100
    t = np.arange(0, 100_000, 1_000, dtype=np.int64)
    stream = EventStream(t=t, x=np.zeros(n, int), y=np.zeros(n, int), p=np.zeros(n, int),
                         sensor_width=8, sensor_height=8)
    evst = tmp_path / "in.evst"
    save_evst(evst, stream)
    out = tmp_path / "frames.npy"
    code = main(["tools", "integrate", "--in", str(evst), "--window-ms", "10", "--out", str(out)])
    assert code == EXIT_OK
    assert "frames=10" in capsys.readouterr().out
    frames = np.load(out)
    assert frames.shape == (10, 2, 8, 8)
    assert frames.sum() == n


def test_cli_tools_integrate_missing_file(tmp_path, capsys):
    code = main(["tools", "integrate", "--in", str(tmp_path / "nope.evst"), "--out", str(tmp_path / "o.npy")])
    assert code == EXIT_USAGE


def test_cli_tools_risk(tmp_path, capsys):
    out = tmp_path / "risk.csv"
    code = main(["tools", "risk", "--contexts", "toy2", "--n", "20", "--m", "200",
                 "--seed", "0", "--out", str(out)])
    assert code == EXIT_OK
    assert "variance_ratio=" in capsys.readouterr().out
    assert out.read_text().startswith("estimator,mean,variance")


def test_cli_tools_risk_unknown_contexts(capsys):
    code = main(["tools", "risk", "--contexts", "toy9"])
    assert code == EXIT_USAGE


def test_cli_tools_gradcheck(capsys):
    code = main(["tools", "gradcheck"])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "max relative error" in out


def test_cli_tools_sfr_and_early_exit(tmp_path, capsys):
    out_dir = tmp_path / "run"
    cfg = write_cfg(tmp_path)
    main(["train", "--config", cfg, "--out", str(out_dir)])
    capsys.readouterr()

    pgm = tmp_path / "map.pgm"
    code = main(["tools", "sfr", "--checkpoint", str(out_dir / "checkpoint_final"),
                 "--config", cfg, "--stage", "0", "--samples", "8", "--out", str(pgm)])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "mean_sfr=" in out
    assert pgm.read_bytes().startswith(b"P5\n")
    assert (tmp_path / "map.pgm.csv").exists()

    code = main(["tools", "early-exit", "--checkpoint", str(out_dir / "checkpoint_final"),
                 "--config", cfg, "--threshold", "0.9"])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "full_accuracy=" in out and "exit_fraction=" in out
