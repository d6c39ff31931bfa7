import csv
import io as _io
from pathlib import Path

import numpy as np
import pytest

from dvdp import cli
from dvdp.io import read_checkpoint, read_tensor, write_tensor
from dvdp.mlp import MlpDenoiser
from dvdp.cascade import build_cascade
from dvdp.schedule import build_schedule

FIXTURES = Path(__file__).parent / "fixtures"

BAD = {
    "bad_unknown_key.ini": "channels",
    "bad_unknown_section.ini": "sampler",
    "bad_value_T.ini": "T",
    "bad_value_mode.ini": "mode",
    "bad_turning_points.ini": "turning_points",
    "bad_level_rule.ini": "level_rule",
    "bad_batch.ini": "batch",
    "bad_stds.ini": "stds",
    "bad_sectionless.ini": "lambda_min",
    "bad_backend.ini": "backend",
    "bad_eta_window.ini": "eta_window",
}


def ini(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def rows(text):
    return list(csv.DictReader(_io.StringIO(text)))


def test_schedule_to_stdout(capsys):
    assert cli.main(["schedule", "--quiet"]) == 0
    out = rows(capsys.readouterr().out)
    assert len(out) == 1001
    assert list(out[0]) == ["t", "sigma_bar", "lambda_bar_0", "lambda_bar_1"]
    assert float(out[0]["sigma_bar"]) == 0.0
    assert float(out[0]["lambda_bar_0"]) == 1.0 and float(out[0]["lambda_bar_1"]) == 1.0
    assert float(out[600]["lambda_bar_0"]) == pytest.approx(0.01, rel=1e-12)


def test_schedule_to_file(tmp_path):
    assert cli.main(["schedule", "--quiet", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "schedule.csv").read_text()
    assert text.count("\n") == 1002


def test_forward(tmp_path):
    cfg = ini(tmp_path, "[cascade]\nbase_shape = 1,8,8\nK = 2\n[schedule]\nturning_points = 300,600\n"
              f"[forward]\ninput = {tmp_path / 'x0.dvtf'}\nseed = 4\n")
    x0 = np.random.default_rng(0).standard_normal((1, 8, 8)).astype(np.float32)
    write_tensor(tmp_path / "x0.dvtf", x0)
    outs = []
    for run in ("a", "b"):
        assert cli.main(["forward", "--quiet", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
        outs.append(sorted((tmp_path / run).iterdir()))
    names = [p.name for p in outs[0]]
    # each turning point is written on both sides of the downsampling
    assert names == [
        "x_t0000_k0.dvtf", "x_t0300_k0.dvtf", "x_t0300_k1.dvtf",
        "x_t0600_k1.dvtf", "x_t0600_k2.dvtf", "x_t1000_k2.dvtf",
    ]
    assert outs[0][0].read_bytes() == (tmp_path / "x0.dvtf").read_bytes()
    shapes = [read_tensor(p).shape for p in outs[0]]
    assert shapes == [(1, 8, 8), (1, 8, 8), (1, 4, 4), (1, 4, 4), (1, 2, 2), (1, 2, 2)]
    assert read_tensor(outs[0][1]).dtype == np.float32
    for a, b in zip(*outs):
        assert a.read_bytes() == b.read_bytes()


def test_forward_needs_input(tmp_path, capsys):
    assert cli.main(["forward", "--quiet"]) == 2
    assert "input" in capsys.readouterr().err


def sample_config(tmp_path, extra=""):
    return ini(tmp_path, "[cascade]\nbase_shape = 1,8,8\nK = 1\n[sample]\nmode = ddim\nddim_steps = 50\n"
               f"count = 9\nseed = 3\n{extra}", "sample.ini")


def test_sample_writes_count_files(tmp_path, monkeypatch):
    cfg = sample_config(tmp_path)
    assert cli.main(["sample", "--quiet", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len([f for f in files if f.endswith(".dvtf")]) == 9
    assert len([f for f in files if f.endswith(".pgm")]) == 9
    assert read_tensor(tmp_path / "a" / "sample_0000.dvtf").shape == (1, 8, 8)
    assert (tmp_path / "a" / "sample_0008.pgm").read_text().startswith("P2\n8 8\n255\n")
    # the thread count does not change the bytes
    monkeypatch.setenv("DVDP_THREADS", "3")
    assert cli.main(["sample", "--quiet", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_samples(tmp_path):
    cfg = sample_config(tmp_path, "pgm = false\n")
    cli.main(["sample", "--quiet", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["sample", "--quiet", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "99"])
    cli.main(["sample", "--quiet", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "99"])
    a, b, c = (read_tensor(tmp_path / d / "sample_0000.dvtf") for d in "abc")
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(b, c)
    assert not (tmp_path / "a" / "sample_0000.pgm").exists()


def train_config(tmp_path, lr, iterations=40):
    return ini(tmp_path, f"[train]\niterations = {iterations}\nbatch = 16\nlr = {lr}\nlr_final = {lr}\nhidden = 8\n",
               f"train_{lr}_{iterations}.ini")


def test_train_zero_lr_equals_initialisation(tmp_path):
    assert cli.main(["train", "--quiet", "--config", str(train_config(tmp_path, 0.0)), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", "--quiet", "--config", str(train_config(tmp_path, 0.0, 0)), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "checkpoint.dvck").read_bytes() == (tmp_path / "b" / "checkpoint.dvck").read_bytes()
    params, meta = read_checkpoint(tmp_path / "a" / "checkpoint.dvck")
    c = build_cascade((1, 2, 2), 1)
    s = build_schedule()
    fresh = MlpDenoiser(c, s, hidden=8, rng=np.random.default_rng([0, 0]))
    for name, arr in fresh.params.items():
        assert params[name].tobytes() == arr.tobytes()
    assert meta["schedule"] == s.fingerprint()
    assert len(rows((tmp_path / "a" / "loss.csv").read_text())) == 40


def test_train_then_sample_from_checkpoint(tmp_path):
    assert cli.main(["train", "--quiet", "--config", str(train_config(tmp_path, 0.002)), "--out", str(tmp_path)]) == 0
    cfg = ini(tmp_path, f"[sample]\ncount = 2\nmode = ddim\nddim_steps = 20\ncheckpoint = {tmp_path / 'checkpoint.dvck'}\n")
    assert cli.main(["sample", "--quiet", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert read_tensor(tmp_path / "s" / "sample_0001.dvtf").shape == (1, 2, 2)


def test_checkpoint_mismatch_is_config_error(tmp_path, capsys):
    cli.main(["train", "--quiet", "--config", str(train_config(tmp_path, 0.0, 1)), "--out", str(tmp_path)])
    cfg = ini(tmp_path, f"[schedule]\nlambda_min = 0.02\n[sample]\ncheckpoint = {tmp_path / 'checkpoint.dvck'}\n")
    assert cli.main(["sample", "--quiet", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
    assert "schedule" in capsys.readouterr().err


def test_divergence_exits_3(tmp_path, capsys):
    cfg = train_config(tmp_path, 1e6, 200)
    assert cli.main(["train", "--quiet", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    assert "numeric" in capsys.readouterr().err


def test_verify_sweep(tmp_path):
    cfg = ini(tmp_path, "[verify]\nn = 40000\n")
    assert cli.main(["verify", "--quiet", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    out = rows((tmp_path / "verify.csv").read_text())
    assert [float(r["lambda_min"]) for r in out] == [0.3, 0.1, 0.03, 0.01]
    assert all(r["verdict"] == "pass" for r in out)
    assert all(r["T1"] == "600" for r in out)


@pytest.mark.parametrize("name,key", sorted(BAD.items()))
def test_malformed_config_exits_2(name, key, capsys):
    assert cli.main(["schedule", "--config", str(FIXTURES / name)]) == 2
    assert key in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["schedule", "--config", str(tmp_path / "nope.ini")]) == 2


def test_bad_arguments_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["sample", "--seed", "x"])
    assert exc.value.code == 2
