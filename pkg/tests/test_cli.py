import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ffamc import __version__
from ffamc.autodiff import load_tensors
from ffamc.cli import main
from ffamc.config import DEFAULTS, RunConfig, documented_defaults
from ffamc.channel import ConfigError
from ffamc.models import build_model

ROOT = Path(__file__).resolve().parents[1]

TINY = """\
# two scenarios, ten frames: 32 samples each
channel.scenarios = los_static_uncorrelated, nlos_mobile_random
data.frames_per_scenario = 10
data.train_fraction = 0.75
"""

# small network so training smoke runs stay fast
SMALL_MODEL = """\
model.growth_channels = 2
model.lstm_hidden = 8
model.fcl_sizes = 16,16,15
train.epochs = 5
train.learning_rate = 0.05
dqn.episodes = 2
dqn.batch_size = 16
"""


def write_cfg(tmp_path, text, name="run.conf"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """generate -> train (all four policies) -> eval on a tiny config."""
    d = tmp_path_factory.mktemp("run")
    cfg = write_cfg(d, TINY.replace("10\n", "30\n") + SMALL_MODEL)
    assert main(["generate", "--config", cfg, "--out", str(d / "gen")]) == 0
    data = str(d / "gen" / "dataset.amcd")
    for model in ("cnn_lstm", "cnn_only", "dqn", "lut"):
        assert main(["train", "--config", cfg, "--dataset", data, "--model", model, "--out", str(d / model)]) == 0
    ck = [str(d / m / "model.amcw") for m in ("cnn_lstm", "cnn_only", "dqn")]
    args = ["eval", "--config", cfg, "--dataset", data, "--out", str(d / "eval")]
    for c in ck:
        args += ["--checkpoint", c]
    assert main(args) == 0
    return d, cfg, data


# --- config --------------------------------------------------------------------


def test_config_defaults_documented():
    text = documented_defaults()
    for k in DEFAULTS:
        assert f"\n{k} = " in "\n" + text
    assert RunConfig.parse(text).values == RunConfig.defaults().values


def test_config_rejects_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError):
        RunConfig.parse("channel.bogus = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("train.epochs = 1\ntrain.epochs = 2\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("train.epochs\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("train.epochs = many\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("channel.scenarios = los_static_nowhere\n")


def test_config_render_round_trip():
    cfg = RunConfig.parse(TINY + SMALL_MODEL)
    assert RunConfig.parse(cfg.render()).values == cfg.values
    assert cfg.with_seed(9)["train.seed"] == 9 and cfg.with_seed(9)["channel.master_seed"] == 9


def test_config_views():
    cfg = RunConfig.parse(TINY + SMALL_MODEL)
    assert [c.tag for c in cfg.catalog()] == ["los_static_uncorrelated", "nlos_mobile_random"]
    assert cfg.model().fcl_sizes == (16, 16, 15)
    assert cfg.link().noise_power == 0.0337
    assert cfg.dqn().episodes == 2


# --- generate ------------------------------------------------------------------


def test_missing_config_exits_2(tmp_path, capsys):
    rc = main(["generate", "--config", str(tmp_path / "absent.conf"), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path):
    cfg = write_cfg(tmp_path, "phy.noise_power = -1\n")
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_tiny_generate_budget_and_idempotence(tmp_path):
    cfg = write_cfg(tmp_path, TINY)
    t = time.perf_counter()
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert time.perf_counter() - t < 10.0
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    for name in ("dataset.amcd", "manifest.json", "label_histogram.csv", "config.effective", "VERSION"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["total_samples"] == 64
    assert (tmp_path / "a" / "VERSION").read_text().strip() == f"ffamc {__version__}"
    assert RunConfig.parse((tmp_path / "a" / "config.effective").read_text()).values == RunConfig.parse(TINY).values


def test_seed_override_changes_data(tmp_path):
    cfg = write_cfg(tmp_path, TINY)
    main(["generate", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed-override", "5"])
    assert (tmp_path / "a" / "dataset.amcd").read_bytes() != (tmp_path / "b" / "dataset.amcd").read_bytes()
    assert "channel.master_seed = 5" in (tmp_path / "b" / "config.effective").read_text()


def test_bad_thread_count(tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--threads", "0"]) == 2


# --- train / eval ----------------------------------------------------------------


def test_train_outputs(tiny_run):
    d, _, _ = tiny_run
    for m in ("cnn_lstm", "cnn_only"):
        rows = list(csv.DictReader(open(d / m / "train_report.csv")))
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4, 5]
        assert (d / m / "model.amcw.arch.json").exists() and (d / m / "config.effective").exists()
    assert len(list(csv.DictReader(open(d / "dqn" / "train_report.csv")))) == 2
    lut = list(csv.DictReader(open(d / "lut" / "lut.csv")))
    assert len(lut) == 15 and [int(r["class"]) for r in lut] == list(range(10, 25))


def test_eval_outputs(tiny_run):
    d, _, _ = tiny_run
    rows = list(csv.DictReader(open(d / "eval" / "comparison.csv")))
    assert [r["policy"] for r in rows] == ["cnn_lstm", "cnn_only", "dqn", "lut"]
    assert all(0 <= float(r["accuracy"]) <= 1 and int(r["n"]) == 56 for r in rows)
    for p in ("cnn_lstm", "cnn_only", "dqn", "lut"):
        cm = np.loadtxt(d / "eval" / f"confusion_{p}.csv", delimiter=",", skiprows=1)
        assert cm.shape == (15, 16)
    rep = json.loads((d / "eval" / "report.json").read_text())
    assert set(rep["metadata"]["lstm_ablation"]) == {"all", "mobile"}
    assert rep["metadata"]["seeds"]["train.seed"] == 0
    curves = list(csv.DictReader(open(d / "eval" / "training_curves.csv")))
    assert {r["model"] for r in curves} == {"cnn_lstm", "cnn_only"} and len(curves) == 10
    assert (d / "eval" / "VERSION").exists() and (d / "eval" / "config.effective").exists()


def test_pipeline_is_idempotent(tiny_run, tmp_path):
    d, cfg, data = tiny_run
    assert main(["train", "--config", cfg, "--dataset", data, "--model", "cnn_lstm", "--out", str(tmp_path / "t")]) == 0
    for name in ("model.amcw", "model.amcw.arch.json", "train_report.csv"):
        assert (tmp_path / "t" / name).read_bytes() == (d / "cnn_lstm" / name).read_bytes(), name
    args = ["eval", "--config", cfg, "--dataset", data, "--out", str(tmp_path / "e"),
            "--checkpoint", str(d / "cnn_lstm" / "model.amcw"), "--checkpoint", str(d / "cnn_only" / "model.amcw"),
            "--checkpoint", str(d / "dqn" / "model.amcw")]
    assert main(args) == 0
    for f in (d / "eval").iterdir():
        assert (tmp_path / "e" / f.name).read_bytes() == f.read_bytes(), f.name


def test_zero_learning_rate_keeps_initial_checkpoint(tiny_run, tmp_path):
    d, _, data = tiny_run
    text = TINY.replace("10\n", "30\n") + SMALL_MODEL.replace("train.learning_rate = 0.05", "train.learning_rate = 0")
    cfg = write_cfg(tmp_path, text)
    assert main(["train", "--config", cfg, "--dataset", data, "--model", "cnn_lstm", "--out", str(tmp_path / "t")]) == 0
    init = build_model("cnn_lstm", RunConfig.parse(text).model())
    saved = load_tensors(tmp_path / "t" / "model.amcw")
    for p in init.params():
        assert saved[p.name].tobytes() == p.value.tobytes()


def test_descriptor_mismatch_fails(tiny_run, tmp_path):
    d, _, data = tiny_run
    other = write_cfg(tmp_path, TINY.replace("10\n", "30\n") + SMALL_MODEL.replace("lstm_hidden = 8", "lstm_hidden = 9"))
    rc = main(["eval", "--config", other, "--dataset", data, "--out", str(tmp_path / "e"),
               "--checkpoint", str(d / "cnn_lstm" / "model.amcw")])
    assert rc == 2


def test_missing_checkpoint_is_data_error(tiny_run, tmp_path):
    _, cfg, data = tiny_run
    rc = main(["eval", "--config", cfg, "--dataset", data, "--out", str(tmp_path / "e"),
               "--checkpoint", str(tmp_path / "nothing.amcw")])
    assert rc == 3


def test_corrupt_dataset_is_data_error(tiny_run, tmp_path):
    _, cfg, data = tiny_run
    bad = tmp_path / "bad.amcd"
    bad.write_bytes(Path(data).read_bytes()[:-5])
    assert main(["train", "--config", cfg, "--dataset", str(bad), "--model", "lut", "--out", str(tmp_path / "o")]) == 3
    assert main(["histogram", "--dataset", str(tmp_path / "none.amcd"), "--out", str(tmp_path / "o")]) == 3


def test_divergence_is_numeric_failure(tiny_run, tmp_path):
    _, _, data = tiny_run
    text = TINY.replace("10\n", "30\n") + SMALL_MODEL.replace("dqn.episodes = 2", "dqn.episodes = 3") + \
        "dqn.learning_rate = 1.0\n"
    cfg = write_cfg(tmp_path, text)
    assert main(["train", "--config", cfg, "--dataset", data, "--model", "dqn", "--out", str(tmp_path / "o")]) == 4


def test_seq_len_mismatch_is_config_error(tiny_run, tmp_path):
    _, _, data = tiny_run
    cfg = write_cfg(tmp_path, TINY.replace("10\n", "30\n") + "model.seq_len = 2\n")
    assert main(["train", "--config", cfg, "--dataset", data, "--model", "lut", "--out", str(tmp_path / "o")]) == 2


# --- histogram --------------------------------------------------------------------


def test_histogram_command(tiny_run, tmp_path):
    _, _, data = tiny_run
    assert main(["histogram", "--dataset", data, "--out", str(tmp_path / "all")]) == 0
    names = sorted(p.name for p in (tmp_path / "all").iterdir())
    assert "histogram_summary.csv" in names and "histogram_nlos_mobile_random.csv" in names
    assert main(["histogram", "--dataset", data, "--scenario", "mobile", "--out", str(tmp_path / "m")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "m" / "histogram_mobile.csv")))
    assert sum(int(r["count"]) for r in rows) == 28 * 4


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "ffamc.cli", "--version"], capture_output=True, text=True, cwd=ROOT)
    assert out.returncode == 0 and out.stdout.strip() == f"ffamc {__version__}"
    out = subprocess.run([sys.executable, "-m", "ffamc.cli", "train", "--out", str(tmp_path)], capture_output=True,
                         text=True, cwd=ROOT)
    assert out.returncode == 2  # argparse usage error: --dataset and --model missing


def test_golden_short_run(tiny_run):
    # recorded once from this seeded configuration; guards against silent numeric drift
    d, _, _ = tiny_run
    last = list(csv.DictReader(open(d / "cnn_only" / "train_report.csv")))[-1]
    assert float(last["loss"]) == pytest.approx(0.5379050854579166, rel=1e-9)
    assert float(last["test_acc"]) == 47 / 56
