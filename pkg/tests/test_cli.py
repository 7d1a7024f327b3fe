import numpy as np
import pytest
from PIL import Image

from scinst.cli import main
from scinst.toydata import write_toy_dataset
from scinst.training import TrainConfig, build_state, save_checkpoint


@pytest.fixture(scope="module")
def fresh_checkpoint(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    save_checkpoint(build_state(TrainConfig()), d / "latest.ckpt")
    return d / "latest.ckpt"


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    return write_toy_dataset(tmp_path_factory.mktemp("toy"), 2, 2, size=64)


def test_unknown_flag_and_subcommand_are_usage_errors(capsys):
    assert main(["stylize", "--bogus"]) == 2
    assert main(["dance"]) == 2
    assert main([]) == 2


def test_train_missing_dataset(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'content_dir = "{tmp_path / "gone"}"\nstyle_dir = "{tmp_path}"\n')
    assert main(["train", "--config", str(cfg)]) == 2
    assert str(tmp_path / "gone") in capsys.readouterr().err


def test_train_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("n = 2\nsteps = oops\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_train_tiny_run(tmp_path, toy, capsys):
    c, s = toy
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'content_dir = "{c}"\nstyle_dir = "{s}"\nout_dir = "{tmp_path / "run"}"\n'
                   "n = 2\nimage_size = 32\ncrop_size = 32\nsteps = 10\n")
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "run" / "latest.ckpt").is_file()
    assert len((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()) == 10
    assert "total" in capsys.readouterr().out


def test_stylize_writes_content_sized_png_deterministically(tmp_path, toy, fresh_checkpoint):
    c, s = toy
    content, style = sorted(c.iterdir())[0], sorted(s.iterdir())[0]
    args = ["stylize", "--content", str(content), "--style", str(style), "--checkpoint", str(fresh_checkpoint)]
    assert main(args + ["--out", str(tmp_path / "a.png")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.png")]) == 0
    a = np.asarray(Image.open(tmp_path / "a.png"))
    assert a.shape == (64, 64, 3)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_stylize_resizes_style_and_uses_env_checkpoint(tmp_path, toy, fresh_checkpoint, monkeypatch):
    c, _ = toy
    Image.new("RGB", (50, 30), (10, 200, 30)).save(tmp_path / "style.png")
    monkeypatch.setenv("SCINST_CHECKPOINT_DIR", str(fresh_checkpoint.parent))
    out = tmp_path / "o.png"
    assert main(["stylize", "--content", str(sorted(c.iterdir())[0]), "--style", str(tmp_path / "style.png"),
                 "--out", str(out)]) == 0
    assert Image.open(out).size == (64, 64)


def test_stylize_rejects_indivisible_content(tmp_path, toy, fresh_checkpoint, capsys):
    Image.new("RGB", (60, 64)).save(tmp_path / "odd.png")
    _, s = toy
    rc = main(["stylize", "--content", str(tmp_path / "odd.png"), "--style", str(sorted(s.iterdir())[0]),
               "--checkpoint", str(fresh_checkpoint), "--out", str(tmp_path / "x.png")])
    assert rc == 2 and "divisible by 8" in capsys.readouterr().err
    assert not (tmp_path / "x.png").exists()


def test_stylize_missing_checkpoint(tmp_path, toy, monkeypatch, capsys):
    monkeypatch.delenv("SCINST_CHECKPOINT_DIR", raising=False)
    c, s = toy
    rc = main(["stylize", "--content", str(sorted(c.iterdir())[0]), "--style", str(sorted(s.iterdir())[0]),
               "--out", str(tmp_path / "x.png")])
    assert rc == 2 and "SCINST_CHECKPOINT_DIR" in capsys.readouterr().err


def test_grid_outputs(tmp_path, toy, fresh_checkpoint):
    c, s = toy
    out = tmp_path / "grid"
    assert main(["grid", "--contents", str(c), "--styles", str(s), "--checkpoint", str(fresh_checkpoint),
                 "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["contact_sheet.png", "s0_c0.png", "s0_c1.png", "s1_c0.png", "s1_c1.png"]
    w, h = Image.open(out / "contact_sheet.png").size
    assert (h, w) == (2 * 64 + 4, 2 * 64 + 4)


def test_grid_empty_dir(tmp_path, toy, fresh_checkpoint):
    (tmp_path / "empty").mkdir()
    assert main(["grid", "--contents", str(tmp_path / "empty"), "--styles", str(toy[1]),
                 "--checkpoint", str(fresh_checkpoint), "--out", str(tmp_path / "g")]) == 2


def test_verify_subset_and_fault_injection(capsys):
    assert main(["verify", "--only", "sigma_positive", "scin_neutral"]) == 0
    out = capsys.readouterr().out
    assert "sigma_positivity" in out and "tolerance" in out
    assert main(["verify", "--only", "sigma_positive", "--epsilon", "0"]) == 1
    assert "FAIL" in capsys.readouterr().out
