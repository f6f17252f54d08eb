import json

import pytest
import torch

from tweedie_inverse import cli
from tweedie_inverse.config import ConfigError, load_config, tasks, train_config, validate, weight_scheme
from tweedie_inverse.data import save_checkpoint, write_png
from tweedie_inverse.denoiser import BiasFreeCNN, BiasFreeCNNConfig


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def test_schema_reports_key_paths():
    with pytest.raises(ConfigError, match="train/lr"):
        validate({"train": {"lr": -1}})
    with pytest.raises(ConfigError, match="Additional properties"):
        validate({"bogus": 1})
    with pytest.raises(ConfigError, match="tasks/0"):
        validate({"tasks": ["deblur"]})


def test_config_builds_objects(tmp_path):
    path = write_config(tmp_path / "c.json", tasks=["inpaint", {"name": "sr2", "solver": {"max_iters": 10}},
                                                    {"name": "bb", "kind": "random_basis",
                                                     "solver": {"preset": "long_sigma08"}}, "denoise"],
                        train={"loss": "l1", "epochs": 3}, dataset={"crop_size": 32},
                        weights={"kind": "normalised", "denoise_losses": {"5": 0.5, "50": 1.0}})
    cfg = load_config(path)
    ts = tasks(cfg)
    assert [t.name for t in ts] == ["inpaint", "sr2", "bb", "denoise"]
    assert ts[1].solver_config.max_iters == 10 and ts[1].solver_config.beta == 0.4
    assert ts[2].solver_config.sigma0 == 0.8 and ts[2].kind == "random_basis"
    tc = train_config(cfg, 4)
    assert tc.loss_kind == "l1" and tc.crop_size == 32 and tc.seed == 4
    assert weight_scheme(cfg).denoise_losses == {5.0: 0.5, 50.0: 1.0}


def test_duplicate_tasks_rejected(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.json", tasks=["sr2", "sr2"]))
    with pytest.raises(ConfigError):
        tasks(cfg)


def test_bad_config_exit_code(tmp_path, capsys):
    path = write_config(tmp_path / "c.json", train={"epochs": "many"})
    assert cli.main(["--config", path, "train", "--dry-run"]) == cli.EXIT_CONFIG
    assert "train/epochs" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["train", "--config", str(tmp_path / "broken.json")]) == cli.EXIT_CONFIG


def test_dry_run_prints_plan(tmp_path, capsys):
    path = write_config(tmp_path / "c.json", tasks=["inpaint", "sr2", "sensing", "denoise"],
                        weights={"kind": "normalised"})
    assert cli.main(["--config", path, "train", "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "inpaint\titerative\tinpaint_block\t50\t0.2\t0.09\t0.8\t71.4286" in out
    assert "sigma-dependent" in out


def test_missing_inputs_exit_io(tmp_path):
    assert cli.main(["--out", str(tmp_path), "degrade", str(tmp_path / "nope.png")]) == cli.EXIT_IO
    (tmp_path / "junk.twsv").write_bytes(b"TWSV" + b"\x00" * 40)
    assert cli.main(["--out", str(tmp_path), "eval", str(tmp_path / "junk.twsv")]) == cli.EXIT_IO


def _model(path, scale=1.0, in_ch=3):
    m = BiasFreeCNN(BiasFreeCNNConfig(depth=2, channels=4, input_channels=in_ch))
    with torch.no_grad():
        for p in m.parameters():
            p.mul_(scale)
    save_checkpoint(m, path)
    return str(path)


def _degrade(tmp_path, seed="0"):
    img = tmp_path / "img.png"
    write_png(img, torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(0)))
    cfg = write_config(tmp_path / "c.json", tasks=[{"name": "sr2", "solver": {"max_iters": 3}}])
    assert cli.main(["--config", cfg, "--out", str(tmp_path / "out"), "degrade", str(img), "--seed", seed]) == 0
    return cfg, tmp_path / "out" / "degrade" / "img.sr2.twsm"


def test_degrade_solve_roundtrip_and_provenance(tmp_path):
    cfg, meas = _degrade(tmp_path)
    side = json.loads(meas.with_suffix(".json").read_text())
    assert side["source"] == "img.png" and side["descriptor"]["kind"] == "sr2"
    assert side["solver"]["max_iters"] == 3
    ckpt = _model(tmp_path / "m.twsv")
    assert cli.main(["--config", cfg, "--out", str(tmp_path / "out"), "solve", str(meas), "--checkpoint", ckpt]) == 0
    solved = tmp_path / "out" / "solve"
    trace = (solved / "img.sr2.trace.tsv").read_text().splitlines()
    assert len(trace) == 4
    prov = (solved / "img.sr2.json").read_text()
    assert str(tmp_path) not in prov and "time" not in prov
    first = (solved / "img.sr2.png").read_bytes()
    assert cli.main(["--config", cfg, "--out", str(tmp_path / "out"), "solve", str(meas), "--checkpoint", ckpt]) == 0
    assert (solved / "img.sr2.png").read_bytes() == first


def test_seed_changes_operator(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    _, a = _degrade(tmp_path / "a", "1")
    _, b = _degrade(tmp_path / "b", "2")
    da = json.loads(a.with_suffix(".json").read_text())["descriptor"]["seed"]
    db = json.loads(b.with_suffix(".json").read_text())["descriptor"]["seed"]
    assert da != db


def test_solver_divergence_exit_code(tmp_path):
    cfg, meas = _degrade(tmp_path)
    ckpt = _model(tmp_path / "huge.twsv", scale=1e20)
    assert cli.main(["--config", cfg, "--out", str(tmp_path / "out"), "solve", str(meas),
                     "--checkpoint", ckpt]) == cli.EXIT_DIVERGED


def test_training_divergence_exit_code(tmp_path):
    ckpt = _model(tmp_path / "huge.twsv", scale=1e20)
    cfg = write_config(tmp_path / "c.json", model={"checkpoint": "huge.twsv"}, dataset={"crop_size": 16},
                       tasks=[{"name": "sr2", "solver": {"max_iters": 2}}], train={"epochs": 1})
    assert cli.main(["--config", cfg, "--out", str(tmp_path / "out"), "train"]) == cli.EXIT_TRAIN_DIVERGED


def test_all_rows_failing_exit_code(tmp_path):
    ckpt = _model(tmp_path / "gray.twsv", in_ch=1)
    cfg = write_config(tmp_path / "c.json", dataset={"max_test_images": 2},
                       tasks=[{"name": "sr2", "solver": {"max_iters": 2}}], eval={"sigmas": []})
    assert cli.main(["--config", cfg, "--out", str(tmp_path / "out"), "eval", ckpt]) == cli.EXIT_EVAL_FAILED


def test_eval_name_validation(tmp_path):
    ckpt = _model(tmp_path / "m.twsv")
    assert cli.main(["--out", str(tmp_path), "eval", ckpt, ckpt, "--names", "x", "x"]) == cli.EXIT_CONFIG


def test_train_init_and_resume(tmp_path, capsys):
    ckpt = _model(tmp_path / "m.twsv")
    cfg = write_config(tmp_path / "c.json", dataset={"crop_size": 16},
                       tasks=[{"name": "sr2", "solver": {"max_iters": 2}}, "denoise"],
                       train={"epochs": 2, "first_cycle": 1, "cycle": 1, "lr": 1e-4},
                       weights={"kind": "normalised", "calibrate": True})
    out = str(tmp_path / "out")
    assert cli.main(["--config", cfg, "--out", out, "train", "--init", ckpt]) == 0
    train_dir = tmp_path / "out" / "train"
    assert sorted(p.name for p in train_dir.glob("*.twsv")) == ["ckpt_e0000.twsv", "ckpt_e0001.twsv"]
    weights = json.loads((train_dir / "weights.json").read_text())
    assert set(weights["prior_losses"]) == {"sr2"} and "50" in weights["denoise_losses"]
    history = (train_dir / "history.tsv").read_text()
    capsys.readouterr()
    assert cli.main(["--config", cfg, "--out", out, "train", "--resume"]) == 0
    assert "nothing to do" in capsys.readouterr().out
    assert (train_dir / "history.tsv").read_text() == history
