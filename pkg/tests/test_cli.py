import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from disentangle.cli import main
from disentangle.config import ConfigError, parse_config
from disentangle.trainer import load_checkpoint

TINY = [
    "synthetic.num_identities=3", "synthetic.samples_per_identity=30", "synthetic.image_side=8",
    "arch.channels=4,6,8", "arch.disc_channels=4,6,8", "arch.dim_s=4", "arch.dim_z=3",
    "iterations=4", "batch_size=4", "log_every=2", "lr_gen=0.002", "lr_adv=0.002",
]


def run_dirs(out: Path):
    return sorted(p for p in out.iterdir() if p.is_dir())


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert main(["train", *TINY, f"out={out}"]) == 0
    (run,) = run_dirs(out)
    return run


# ---------------------------------------------------------------- config

def test_override_beats_file(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\nlambda_gan=2.0\n\nkl_weight = 3\n")
    cfg = parse_config(f, ["lambda_gan=0.5"])
    assert cfg.train.lambda_gan == 0.5 and cfg.train.kl_weight == 3.0


def test_negative_lambda_rejected(tmp_path):
    with pytest.raises(ConfigError, match="lambda_gan"):
        parse_config(None, ["lambda_gan=-1"])


def test_unknown_key_names_key_and_line(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("lambda_gan=1\nlamda_gan=2\n")
    with pytest.raises(ConfigError, match=r"c.txt:2.*lamda_gan"):
        parse_config(f)


def test_type_mismatch_and_malformed_line(tmp_path):
    with pytest.raises(ConfigError, match="iterations"):
        parse_config(None, ["iterations=many"])
    f = tmp_path / "c.txt"
    f.write_text("just words\n")
    with pytest.raises(ConfigError, match="c.txt:1"):
        parse_config(f)


def test_missing_required_key():
    with pytest.raises(ConfigError, match="mnist.images"):
        parse_config(None, ["dataset=mnist"])
    with pytest.raises(ConfigError, match="held_out"):
        parse_config(None, ["split=identity"])


def test_empty_file_gives_defaults_echoed(tmp_path):
    f = tmp_path / "empty.txt"
    f.write_text("")
    a, b = parse_config(f), parse_config(None)
    assert a.echo() == b.echo()
    assert f"out={Path.cwd() / 'runs'}" in a.echo()
    assert "lambda_gan=1.0" in a.echo() or "lambda_gan=1" in a.echo()
    again = tmp_path / "echo.txt"
    again.write_text(a.echo())
    assert parse_config(again).echo() == a.echo()


def test_relative_paths_resolve_against_config_file(tmp_path):
    sub = tmp_path / "cfgs"
    sub.mkdir()
    (sub / "c.txt").write_text("dataset=mnist\nmnist.images=data/i.gz\nmnist.labels=data/l.gz\n")
    cfg = parse_config(sub / "c.txt")
    assert Path(cfg["mnist.images"]) == sub / "data" / "i.gz"


# ---------------------------------------------------------------- train

def test_train_writes_run_layout(trained):
    assert {"config.txt", "train.log", "checkpoint.dvc"} <= {p.name for p in trained.iterdir()}
    name = trained.name
    assert name.endswith("-0") and len(name.split("-")[0]) == 8
    assert len((trained / "train.log").read_text().splitlines()) == 2
    ck = load_checkpoint(trained / "checkpoint.dvc")
    assert ck.iteration == 4 and ck.config.arch.image_side == 8 and ck.config.arch.num_labels == 3


def test_train_twice_identical_checkpoints(tmp_path, trained):
    assert main(["train", *TINY, f"out={tmp_path}"]) == 0
    (run,) = run_dirs(tmp_path)
    assert (run / "checkpoint.dvc").read_bytes() == (trained / "checkpoint.dvc").read_bytes()


def test_train_with_config_file(tmp_path):
    f = tmp_path / "run.txt"
    f.write_text("\n".join(TINY + ["iterations=2", "out=myruns", "seed=7"]) + "\n")
    assert main(["train", "--config", str(f)]) == 0
    (run,) = run_dirs(tmp_path / "myruns")
    assert run.name.endswith("-7")


def test_train_divergence_exit_code(tmp_path):
    assert main(["train", *TINY, "lr_gen=1e6", "iterations=20", f"out={tmp_path}"]) == 1


# ---------------------------------------------------------------- eval / generate

def test_eval_swap_writes_nine_by_nine_grid(trained, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.dvc"), "--mode", "swap", "--n", "8",
                 "--out", str(tmp_path)]) == 0
    im = Image.open(tmp_path / "swap.png")
    assert im.size == (9 * 10 + 2, 9 * 10 + 2) and im.mode == "L"


@pytest.mark.parametrize("mode,files", [("interp", ["interp.png"]), ("retrieve", ["retrieve.txt", "retrieve.png"]),
                                        ("sample", ["samples.png"]), ("metric", ["report.txt", "report.kv"])])
def test_eval_modes(trained, tmp_path, mode, files):
    args = ["eval", "--checkpoint", str(trained / "checkpoint.dvc"), "--mode", mode, "--out", str(tmp_path),
            "--n", "2", "--count", "3"]
    assert main(args) == 0
    for f in files:
        assert (tmp_path / f).stat().st_size > 0
    if mode == "interp":
        assert Image.open(tmp_path / "interp.png").size == (7 * 10 + 2,) * 2
    if mode == "retrieve":
        lines = (tmp_path / "retrieve.txt").read_text().splitlines()
        assert len(lines) == 6 and lines[1].startswith("rank=1")
    if mode == "metric":
        assert "z.test_error=" in (tmp_path / "report.kv").read_text()


def test_generate(trained, tmp_path):
    target = tmp_path / "g.png"
    assert main(["generate", "--checkpoint", str(trained / "checkpoint.dvc"), "--count", "4",
                 "--output", str(target)]) == 0
    assert Image.open(target).size == (5 * 10 + 2, 12)


def test_eval_missing_checkpoint_is_usage_error(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.dvc"), "--mode", "swap"]) == 2


def test_eval_without_checkpoint_flag_is_usage_error():
    assert main(["eval", "--mode", "swap"]) == 2


def test_eval_dataset_mismatch_is_usage_error(trained, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.dvc"), "--mode", "swap",
                 "synthetic.image_side=12", "--out", str(tmp_path)]) == 2


def test_bad_checkpoint_is_usage_error(tmp_path):
    bad = tmp_path / "bad.dvc"
    bad.write_bytes(b"nope")
    assert main(["eval", "--checkpoint", str(bad), "--mode", "swap"]) == 2


def test_unknown_subcommand_and_bad_override():
    assert main(["fly"]) == 2
    assert main(["train", "no_such_key=1"]) == 2
    assert main(["train", "lambda_gan=-1"]) == 2


def test_thread_env(monkeypatch, trained, tmp_path):
    monkeypatch.setenv("DISENT_THREADS", "1")
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.dvc"), "--mode", "swap", "--n", "2",
                 "--out", str(tmp_path)]) == 0
    monkeypatch.setenv("DISENT_THREADS", "lots")
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.dvc"), "--mode", "swap", "--n", "2",
                 "--out", str(tmp_path)]) == 2


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "disentangle.cli", "eval"], capture_output=True, text=True)
    assert res.returncode == 2 and "checkpoint" in res.stderr


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--tolerance", "1e-30"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "checks passed" in out
