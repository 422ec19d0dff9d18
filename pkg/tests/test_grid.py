import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdm.flow import ConditionalFlow
from rdm.grid import GridPoint, diffuse_only, grid_noisy_sample, segment, segment_batch
from rdm.numerics import Tensor, no_grad
from rdm.schedule import linear_schedule


@pytest.mark.parametrize("F,L,S", [(196, 4, 49), (196, 7, 28), (56, 4, 14), (56, 7, 8)])
def test_segment_lengths(F, L, S):
    seg = segment(np.zeros((F, 3)), L, pad_mode="strict")
    assert (seg.L, seg.S, seg.D) == (L, S, 3)


def test_padding_modes():
    seq = np.arange(20.0).reshape(10, 2)
    with pytest.raises(ValueError):
        segment(seq, 3, pad_mode="strict")
    seg = segment(seq, 3)
    assert seg.S == 4 and seg.n_padded == 2
    frames = seg.frames()
    assert np.array_equal(frames[:10], seq)
    assert np.array_equal(frames[10], seq[-1]) and np.array_equal(frames[11], seq[-1])


def test_segment_rejects_bad_L():
    with pytest.raises(ValueError):
        segment(np.zeros((3, 2)), 4)


def test_segment_batch_matches_single():
    rng = np.random.default_rng(0)
    seqs = rng.standard_normal((3, 10, 2))
    batch = segment_batch(seqs, 3)
    for n in range(3):
        assert np.array_equal(batch[n], segment(seqs[n], 3).segments)


def test_grid_point_bounds():
    GridPoint(4, 100).validate(4, 100)
    with pytest.raises(ValueError):
        GridPoint(5, 10).validate(4, 100)
    with pytest.raises(ValueError):
        GridPoint(0, 101).validate(4, 100)


def test_diffuse_only_edge_cases():
    s = linear_schedule(100)
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 2))
    assert np.array_equal(diffuse_only(x0, 0, eps, s), x0)
    np.testing.assert_array_equal(diffuse_only(np.zeros_like(x0), 40, eps, s),
                                  np.sqrt(1 - s.alpha_bars[40]) * eps)
    with pytest.raises(ValueError):
        diffuse_only(x0, 3, eps[:1], s)
    per_item = diffuse_only(x0, np.array([0, 100]), eps, s)
    assert np.array_equal(per_item[0], x0[0])
    assert isinstance(diffuse_only(Tensor(x0), 5, eps, s), Tensor)


def test_diffuse_only_monte_carlo_mean():
    s = linear_schedule(100)
    x0 = np.array([[0.7, -1.2]])
    t = 50
    eps = np.random.default_rng(1).standard_normal((10_000, 1, 2))
    out = diffuse_only(np.broadcast_to(x0, eps.shape).copy(), t, eps, s)
    se = np.sqrt(1 - s.alpha_bars[t]) / np.sqrt(10_000)
    assert np.all(np.abs(out.mean(axis=0) - np.sqrt(s.alpha_bars[t]) * x0) < 3 * se)


@pytest.mark.parametrize("t", [1, 50, 100])
def test_diffuse_only_variance(t):
    s = linear_schedule(100)
    eps = np.random.default_rng(t).standard_normal((20_000, 2))
    out = diffuse_only(np.zeros_like(eps), t, eps, s)
    assert np.all(np.abs(out.var(axis=0) / (1 - s.alpha_bars[t]) - 1) < 0.05)


def test_grid_sample_identity_flow_independent_of_i():
    s = linear_schedule(20)
    flow = ConditionalFlow(2, context_size=4, n_blocks=2, random_state=0)
    rng = np.random.default_rng(0)
    x00, eps = rng.standard_normal((1, 3, 2)), rng.standard_normal((1, 3, 2))
    emb = np.zeros((1, 4))
    base = diffuse_only(x00, 7, eps, s)
    with no_grad():
        for i in range(4):
            x, ld, trace = grid_noisy_sample(x00, i, 7, eps, flow, emb, s)
            assert np.array_equal(x.data, base) and len(trace) == i and np.all(ld.data == 0)


def test_grid_sample_one_affine_block_by_hand():
    s = linear_schedule(20)
    flow = ConditionalFlow(2, context_size=4, n_blocks=1, random_state=0)
    flow.params["block0.scale.out.b"].data[:] = 0.05
    flow.params["block0.shift.out.b"].data[:] = 0.3
    x00 = np.array([[[0.5, -1.0]]])
    eps = np.array([[[0.2, 0.4]]])
    t = 9
    ab = s.alpha_bars[t]
    u = np.sqrt(ab) * x00 + np.sqrt(1 - ab) * eps
    expected = np.array([u[0, 0, 0], u[0, 0, 1] * np.exp(0.05) + 0.3])
    with no_grad():
        x, ld, _ = grid_noisy_sample(x00, 1, t, eps, flow, np.zeros((1, 4)), s)
    np.testing.assert_allclose(x.data[0, 0], expected, rtol=0, atol=1e-15)
    assert ld.data[0] == pytest.approx(0.05, abs=1e-15)


def test_noise_shared_across_temporal_steps():
    # x^1_t is one flow step applied to x^0_t built from the same eps
    s = linear_schedule(20)
    flow = ConditionalFlow(2, context_size=4, n_blocks=2, final_init_std=0.3, random_state=0)
    rng = np.random.default_rng(0)
    eps = rng.standard_normal((50, 2, 2))
    x00 = rng.standard_normal((50, 2, 2))
    emb = rng.standard_normal((50, 4))
    with no_grad():
        x0t, _, _ = grid_noisy_sample(x00, 0, 12, eps, flow, emb, s)
        x2t, ld2, _ = grid_noisy_sample(x00, 2, 12, eps, flow, emb, s)
        ref, ld_ref, _, _ = flow.apply_n(x0t.data, emb, 2)
    assert np.array_equal(x2t.data, ref.data) and np.array_equal(ld2.data, ld_ref.data)


def test_negative_i_rejected():
    s = linear_schedule(5)
    flow = ConditionalFlow(2, context_size=4, n_blocks=1)
    with pytest.raises(ValueError):
        grid_noisy_sample(np.zeros((1, 1, 2)), -1, 1, np.zeros((1, 1, 2)), flow, np.zeros((1, 4)), s)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8), st.sampled_from(["repeat_last", "strict"]))
def test_segment_shape_invariant(F, L, mode):
    if L > F:
        return
    seq = np.random.default_rng(F).standard_normal((F, 2))
    if mode == "strict" and F % L:
        with pytest.raises(ValueError):
            segment(seq, L, mode)
        return
    seg = segment(seq, L, mode)
    assert seg.L * seg.S == F + seg.n_padded
    assert np.array_equal(seg.frames()[:F], seq)
