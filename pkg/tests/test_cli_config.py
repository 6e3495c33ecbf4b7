import json
import subprocess
import sys

import pytest

from phononet import config as cfgmod
from phononet.cli import main
from phononet.errors import ConfigError

SMALL = """
[dataset]
kind = "spectral"
n_per_class = 4
duration_s = 1.5e-3

[surrogate]
n_train = 150

[training]
shape = [2, 2]
iterations = 4
restarts = 1
correction_period = 2

[deep]
iterations = 2
restarts = 1
"""


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(SMALL)
    return ["--config", str(p), "--out", str(tmp_path / "out")], tmp_path / "out"


def events(out):
    return [json.loads(line) for line in (out / "run.log.jsonl").read_text().splitlines()]


# ---------------------------------------------------------------- config


def test_defaults_validate():
    cfg = cfgmod.RunConfig()
    cfgmod.validate(cfg)
    assert cfg.surrogate.n_train == 800 and cfg.training.shape == [3, 3]


def test_unknown_section_or_key():
    with pytest.raises(ConfigError, match="nope"):
        cfgmod.from_dict({"nope": {}})
    with pytest.raises(ConfigError, match="typo"):
        cfgmod.from_dict({"training": {"typo": 1}})


def test_override_parses_toml_values():
    cfg = cfgmod.RunConfig()
    cfgmod.override(cfg, "training.shape", "[4, 5]")
    cfgmod.override(cfg, "physics.Q", "250")
    cfgmod.override(cfg, "dataset.kind", "temporal")
    assert cfg.training.shape == [4, 5] and cfg.physics.Q == 250.0 and cfg.dataset.kind == "temporal"
    with pytest.raises(ConfigError):
        cfgmod.override(cfg, "training", "1")


def test_config_hash_tracks_content():
    a, b = cfgmod.RunConfig(), cfgmod.RunConfig()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    b.training.seed = 1
    assert a.hash() != b.hash()


def test_example_config_loads():
    from pathlib import Path

    cfg = cfgmod.load(Path(__file__).parents[1] / "configs" / "example.toml")
    cfgmod.validate(cfg)


# ---------------------------------------------------------------- exit codes


def test_unknown_flag_exits_1(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus"])
    assert e.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[training]\nspeed = 3\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 1


def test_missing_inputs_exit_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.toml")]) == 2
    assert main(["train", "--out", str(tmp_path / "o")]) == 2
    ev = events(tmp_path / "o")
    assert ev[-1]["event"] == "end" and ev[-1]["exit"] == 2


def test_band_crossing_is_data_error(tmp_path):
    code = main(["bands", "misfit", "--f7", "60,60,60,60", "--f8", "70,70,59,70", "--f9", "80,80,80,80", "--out", str(tmp_path)])
    assert code == 4


# ---------------------------------------------------------------- commands


def test_bands_misfit(tmp_path, capsys):
    code = main(["bands", "misfit", "--f7", "60,60,60,60", "--f8", "70,72,74,72", "--f9", "80,80,80,80", "--out", str(tmp_path)])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["N"] == pytest.approx(34.19951114299887, rel=1e-12)
    assert (tmp_path / "misfit.json").exists()


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--shape", "2x2", "--steps", "300", "--out", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["max_rel_err"] < 1e-5
    assert json.loads((tmp_path / "gradcheck.json").read_text())["max_rel_err"] == out["max_rel_err"]


def test_single_layer_pipeline(small, capsys):
    common, out = small
    assert main(["dataset", "prepare", *common]) == 0
    assert main(["surrogate", "gen", *common]) == 0
    assert main(["surrogate", "fit", *common]) == 0
    assert main(["train", *common]) == 0
    assert main(["eval", *common]) == 0
    capsys.readouterr()
    for name in ("report.json", "checkpoint.json", "loss_curve.csv", "hist_train.csv", "hist_test.csv", "transfer.csv", "loss_curve.png", "eval.json"):
        assert (out / name).exists(), name
    ck = json.loads((out / "checkpoint.json").read_text())
    assert ck["kind"] == "single" and ck["shape"] == [2, 2]
    ev = events(out)
    starts = [e for e in ev if e["event"] == "start"]
    assert len(starts) == 5 and all("config_hash" in e and "versions" in e for e in starts)
    assert all(e["exit"] == 0 for e in ev if e["event"] == "end")


def test_overrides_and_threads_env(small, monkeypatch, capsys):
    common, out = small
    monkeypatch.setenv("PHONONET_THREADS", "2")
    assert main(["dataset", "prepare", *common, "--set", "dataset.n_per_class=3"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["train"] + summary["test"] == 6
    assert events(out)[0]["threads"] == 2
    monkeypatch.setenv("PHONONET_THREADS", "x")
    assert main(["dataset", "prepare", *common]) == 1


def test_deep_and_simulate(small, capsys):
    common, out = small
    assert main(["dataset", "prepare", *common]) == 0
    assert main(["train", "--deep", "--no-figures", *common]) == 0
    ck = json.loads((out / "checkpoint.json").read_text())
    assert ck["kind"] == "deep" and "layers" in ck["network"]
    assert main(["simulate", "--shape", "2x2", "--steps", "400", *common]) == 0
    assert (out / "simulate" / "trajectory.csv").read_text().startswith("t,x_out\n")


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "phononet.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("phononet ")
    r = subprocess.run([sys.executable, "-m", "phononet.cli", "frobnicate"], capture_output=True, text=True)
    assert r.returncode == 1
