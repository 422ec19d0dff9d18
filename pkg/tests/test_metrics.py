import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdm.flow import ConditionalFlow
from rdm.metrics import (BENCH_COLUMNS, BenchRun, GaussianStats, flow_roundtrip_residual,
                         frame_features, frechet_gaussian, sequence_frechet, trajectory_mse,
                         bench_report)
from rdm.sampler import SamplerPlan, predict_calls


def test_frechet_one_dimensional_closed_form():
    a = GaussianStats(np.array([0.0]), np.array([[1.0]]))
    b = GaussianStats(np.array([1.0]), np.array([[1.0]]))
    assert frechet_gaussian(a, b) == pytest.approx(1.0, abs=1e-12)
    c = GaussianStats(np.array([0.0]), np.array([[4.0]]))
    assert frechet_gaussian(a, c) == pytest.approx(1.0, abs=1e-12)


def test_frechet_identical_and_mismatch():
    rng = np.random.default_rng(0)
    s = GaussianStats.from_features(rng.standard_normal((500, 3)))
    assert abs(frechet_gaussian(s, s)) <= 1e-10
    with pytest.raises(ValueError):
        frechet_gaussian(s, GaussianStats(np.zeros(2), np.eye(2)))


def test_frechet_diagonal_oracle():
    va, vb = np.array([1.0, 4.0, 0.25]), np.array([9.0, 1.0, 0.25])
    a = GaussianStats(np.array([1.0, 0.0, 2.0]), np.diag(va))
    b = GaussianStats(np.zeros(3), np.diag(vb))
    expected = 1.0 + 4.0 + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2)
    assert frechet_gaussian(a, b) == pytest.approx(expected, abs=1e-12)


def _spd(rng, d):
    m = rng.standard_normal((d, d))
    return m @ m.T + 0.1 * np.eye(d)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_frechet_symmetric_and_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    a = GaussianStats(rng.standard_normal(d), _spd(rng, d))
    b = GaussianStats(rng.standard_normal(d), _spd(rng, d))
    dab, dba = frechet_gaussian(a, b), frechet_gaussian(b, a)
    assert dab >= 0 and abs(dab - dba) <= 1e-10 * max(1.0, dab)


def test_stats_are_symmetric_psd():
    s = GaussianStats.from_features(np.random.default_rng(0).standard_normal((5, 8)))
    assert np.array_equal(s.cov, s.cov.T)
    assert np.linalg.eigvalsh(s.cov).min() >= -1e-10


def test_frame_features_layout():
    seqs = np.arange(12.0).reshape(1, 4, 3)
    feats = frame_features(seqs)
    assert feats.shape == (3, 6)
    assert np.array_equal(feats[0], [0, 1, 2, 3, 3, 3])
    assert frame_features(seqs, with_diffs=False).shape == (4, 3)


def test_sequence_frechet_self_and_shift():
    seqs = np.random.default_rng(0).standard_normal((40, 10, 2))
    assert sequence_frechet(seqs, seqs) <= 1e-10
    assert sequence_frechet(seqs + 1.0, seqs) == pytest.approx(2.0, abs=1e-9)


def test_trajectory_mse():
    a = np.zeros((2, 3, 2))
    assert trajectory_mse(a, a + 2.0) == 4.0
    assert trajectory_mse(np.ones((5, 3, 2)), np.zeros((2, 3, 2))) == 1.0
    with pytest.raises(ValueError):
        trajectory_mse(np.zeros((2, 3, 2)), np.zeros((2, 4, 2)))


# --- flow residual ------------------------------------------------------------------


def test_identity_flow_residual_zero():
    flow = ConditionalFlow(4, context_size=4, n_blocks=3, random_state=0)
    x = np.random.default_rng(0).standard_normal((3, 5, 4))
    rep = flow_roundtrip_residual(flow, x, np.zeros((3, 4)), 8)
    assert rep.residuals == [0.0] * 8 and rep.stable_depth == 8


def test_adversarial_flow_residual_finite():
    flow = ConditionalFlow(4, context_size=4, n_blocks=6, final_init_std=0.0, random_state=0)
    for name, p in flow.params.items():
        if name.endswith("scale.out.b"):
            p.data[:] = 10.0
    x = np.random.default_rng(1).standard_normal((2, 5, 4))
    rep = flow_roundtrip_residual(flow, x, np.zeros((2, 4)), 8)
    assert len(rep.residuals) == 8 and np.all(np.isfinite(rep.residuals))
    assert rep.max_residual <= 1e-3


def test_residual_depth_stops_at_threshold():
    flow = ConditionalFlow(4, context_size=4, n_blocks=2, final_init_std=0.3, random_state=0)
    x = np.random.default_rng(1).standard_normal((2, 5, 4))
    rep = flow_roundtrip_residual(flow, x, np.zeros((2, 4)), 4, threshold=-1.0)
    assert rep.stable_depth == 0 and len(rep.residuals) == 4
    with pytest.raises(ValueError):
        flow_roundtrip_residual(flow, x, np.zeros((2, 4)), 0)


# --- bench report -------------------------------------------------------------------


def _run(mode, L=4, T=10, **kw):
    plan = SamplerPlan(mode, L_target=L, **kw)
    return BenchRun(plan, predict_calls(plan, T), 1.5)


def test_bench_speedup_ratio():
    text = bench_report([_run("autoregressive"), _run("staircase", t_start=9)], T=10)
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(BENCH_COLUMNS)
    row = dict(zip(BENCH_COLUMNS, lines[2].split(",")))
    assert row["denoiser_calls"] == "34" and row["t_start"] == "9"
    assert float(row["speedup_vs_ar"]) == pytest.approx(40 / 34, abs=1e-5)
    assert float(row["speedup_vs_ar"]) == pytest.approx(1.18, abs=5e-3)


def test_bench_single_row_warns_without_baseline():
    with pytest.warns(RuntimeWarning):
        text = bench_report([_run("staircase")], T=10)
    lines = text.strip().split("\n")
    assert len(lines) == 2
    assert dict(zip(BENCH_COLUMNS, lines[1].split(",")))["speedup_vs_ar"] == ""
    with pytest.raises(ValueError):
        bench_report([], T=10)


def test_bench_volume_cost_scaled():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        text = bench_report([_run("autoregressive"), _run("volume")], T=10)
    row = dict(zip(BENCH_COLUMNS, text.strip().split("\n")[2].split(",")))
    assert float(row["speedup_vs_ar"]) == 1.0
