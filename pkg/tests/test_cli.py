import csv
import io
import json

import numpy as np
import pytest

from rdm.cli import EVAL_COLUMNS, main
from rdm.config import KEYS, ConfigError, RunConfig, load_config, parse_config_text
from rdm.data import load_dataset
from rdm.metrics import BENCH_COLUMNS
from rdm.sampler import SamplerPlan, predict_calls

TINY = """\
# tiny run
data.n_train = 16
data.n_test = 8
data.frames = 12
data.features = 2
data.labels = 2
schedule.T = 10
model.segments = 4
flow.blocks = 2
flow.context_size = 4
flow.hidden = 4
denoiser.width = 8
denoiser.depth = 2
denoiser.step_width = 4
train.batch_size = 4
train.max_steps = 3
sampler.n_samples = 4
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    assert main(["-q", "train", "--config", str(cfg), "--out-dir", str(out),
                 "--set", "train.checkpoint_every=2"]) == 0
    return root, cfg, out


# --- config ---------------------------------------------------------------------


def test_config_parsing_and_render():
    cfg = parse_config_text("train.max_steps = none\nsampler.t_start = auto  # comment\n"
                            "denoiser.attention = yes\nsampler.t_start = segments\n")
    assert cfg["train.max_steps"] is None and cfg["denoiser.attention"] is True
    assert cfg["sampler.t_start"] == "segments"
    assert cfg.explicit == {"train.max_steps", "sampler.t_start", "denoiser.attention"}
    again = parse_config_text(cfg.render())
    assert again.values == cfg.values
    assert set(cfg.values) == set(KEYS)


@pytest.mark.parametrize("text", ["bogus.key = 1", "schedule.T = ten", "train.lr_flow"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_config_validation_and_overrides(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig().apply_overrides(["data.features=3"])
    with pytest.raises(ConfigError):
        RunConfig().apply_overrides(["sampler.mode=entangled"])
    with pytest.raises(ConfigError):
        RunConfig().apply_overrides(["noequals"])
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.cfg"))
    assert load_config(None, ["schedule.T=7"])["schedule.T"] == 7


# --- train ----------------------------------------------------------------------------


def test_train_outputs(run):
    _, _, out = run
    names = {p.name for p in out.iterdir()}
    assert {"checkpoint.rdm", "checkpoint_step2.rdm", "metrics.csv", "config.resolved",
            "test.rdmd"} <= names
    rows = list(csv.DictReader(io.StringIO((out / "metrics.csv").read_text())))
    assert [int(r["step"]) for r in rows] == [1, 2, 3]
    assert "train.max_steps = 3" in (out / "config.resolved").read_text()


def test_train_resume_reproduces_next_loss(run, tmp_path):
    root, cfg, out = run
    res = tmp_path / "resumed"
    assert main(["-q", "train", "--config", str(cfg), "--out-dir", str(res),
                 "--resume", str(out / "checkpoint_step2.rdm")]) == 0
    full = list(csv.DictReader(io.StringIO((out / "metrics.csv").read_text())))
    resumed = list(csv.DictReader(io.StringIO((res / "metrics.csv").read_text())))
    assert resumed == [full[2]]


def test_train_missing_dataset_is_usage_error(run, tmp_path):
    _, cfg, _ = run
    assert main(["-q", "train", "--config", str(cfg), "--out-dir", str(tmp_path),
                 "--set", f"data.path={tmp_path / 'nope.rdmd'}"]) == 2


def test_train_divergence_exit_code(run, tmp_path, capsys):
    _, cfg, _ = run
    code = main(["-q", "train", "--config", str(cfg), "--out-dir", str(tmp_path),
                 "--set", "train.lr_denoiser=1e300", "--set", "train.lr_flow=1e300"])
    assert code == 3
    assert "i=" in capsys.readouterr().err


def test_unknown_key_exit_code(run, tmp_path):
    _, cfg, _ = run
    assert main(["-q", "train", "--config", str(cfg), "--set", "train.speed=1"]) == 2


# --- sample ---------------------------------------------------------------------------------


def test_sample_deterministic(run, tmp_path):
    _, cfg, out = run
    a, b = tmp_path / "a.rdmd", tmp_path / "b.rdmd"
    for p in (a, b):
        assert main(["-q", "sample", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.rdm"),
                     "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.rdmd.json").read_bytes() == (tmp_path / "b.rdmd.json").read_bytes()
    side = json.loads((tmp_path / "a.rdmd.json").read_text())
    assert side["calls"]["denoiser_calls"] == predict_calls(SamplerPlan(L_target=4), 10).denoiser_calls
    assert side["beyond_horizon_segments"] == [] and side["checkpoint_step"] == 3
    assert load_dataset(a).sequences.shape == (4, 12, 2)


def test_sample_beyond_horizon(run, tmp_path):
    _, cfg, out = run
    p = tmp_path / "long.rdmd"
    assert main(["-q", "sample", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.rdm"),
                 "--out", str(p), "--set", "sampler.L_target=6"]) == 0
    side = json.loads((tmp_path / "long.rdmd.json").read_text())
    assert side["beyond_horizon_segments"] == [4, 5]
    assert len(side["noise_proxy"]) == 6 and np.all(np.isfinite(side["noise_proxy"]))
    assert load_dataset(p).sequences.shape == (4, 18, 2)


def test_sample_errors(run, tmp_path):
    _, cfg, out = run
    ckpt = out / "checkpoint.rdm"
    assert main(["-q", "sample", "--config", str(cfg), "--checkpoint", str(ckpt), "--out",
                 str(tmp_path / "x"), "--set", "model.segments=3"]) == 2
    bad = tmp_path / "bad.rdm"
    bad.write_bytes(ckpt.read_bytes()[:-20])
    assert main(["-q", "sample", "--config", str(cfg), "--checkpoint", str(bad), "--out",
                 str(tmp_path / "x")]) == 2
    assert main(["-q", "sample", "--config", str(cfg), "--checkpoint", str(tmp_path / "none.rdm"),
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["-q", "sample", "--config", str(cfg), "--checkpoint", str(ckpt), "--out",
                 str(tmp_path / "x"), "--set", "sampler.t_start=2", "--set", "sampler.L_target=9"]) == 2


# --- eval and bench -------------------------------------------------------------------


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_eval_against_itself_and_schema(run, tmp_path):
    _, cfg, out = run
    test = out / "test.rdmd"
    p = tmp_path / "self.csv"
    assert main(["-q", "eval", "--config", str(cfg), "--dataset", str(test), "--samples", str(test),
                 "--out", str(p)]) == 0
    row = _rows(p)[0]
    assert abs(float(row["frechet"])) < 1e-8 and float(row["mse"]) == 0.0
    q = tmp_path / "model.csv"
    assert main(["-q", "eval", "--config", str(cfg), "--dataset", str(test), "--checkpoint",
                 str(out / "checkpoint.rdm"), "--out", str(q)]) == 0
    with open(q) as fh:
        assert fh.readline().strip().split(",") == list(EVAL_COLUMNS)
    row = _rows(q)[0]
    assert float(row["frechet"]) >= 0 and int(row["denoiser_calls"]) > 0
    assert row["flow_residual_depth"] != ""


def test_bench_matrix(run, tmp_path):
    _, cfg, out = run
    p = tmp_path / "bench.csv"
    assert main(["-q", "bench", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.rdm"),
                 "--repeats", "1", "--n-samples", "2", "--dataset", str(out / "test.rdmd"),
                 "--out", str(p), "--set", "sampler.t_start=9"]) == 0
    with open(p) as fh:
        assert fh.readline().strip().split(",") == list(BENCH_COLUMNS)
    rows = _rows(p)
    assert len(rows) == 12
    for r in rows:
        plan = SamplerPlan(r["mode"], t_start=9, L_target=int(r["L"]))
        exp = predict_calls(plan, 10)
        assert int(r["denoiser_calls"]) == exp.denoiser_calls
        assert int(r["flow_calls"]) == exp.flow_calls
        assert float(r["wall_ms_std"]) == 0.0
        assert r["frechet"] != "" and r["speedup_vs_ar"] != ""
    stair4 = next(r for r in rows if r["mode"] == "staircase" and r["L"] == "4")
    assert float(stair4["speedup_vs_ar"]) == pytest.approx(40 / 34, abs=1e-5)


def test_bench_bad_matrix(run):
    _, cfg, out = run
    assert main(["-q", "bench", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.rdm"),
                 "--modes", "warp"]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert len(lines) >= 10 and all(line.startswith("PASS") for line in lines)


def test_generate_command(tmp_path):
    p = tmp_path / "g.rdmd"
    assert main(["-q", "generate", "--out", str(p), "--test-out", str(tmp_path / "t.rdmd"),
                 "--set", "data.n_train=5", "--set", "data.n_test=2", "--set", "data.kind=damped"]) == 0
    assert len(load_dataset(p)) == 5 and len(load_dataset(tmp_path / "t.rdmd")) == 2


def test_usage_error_from_argparse():
    with pytest.raises(SystemExit) as info:
        main(["sample"])
    assert info.value.code == 2
