"""Acceptance criteria 1-9.

Each test prints and records one ``PASS``/``FAIL`` line; the lines are
repeated in the pytest terminal summary.  Run directly with
``python3 tests/test_acceptance.py`` for the lines alone.
"""

import itertools
import json
import time

import numpy as np
import pytest

from _oracles import ddpm_reference_loss, grads, vanilla_ddpm
from rdm.checkpoint import checkpoint_bytes, parse_checkpoint
from rdm.cli import main as cli_main
from rdm.data import gen_lissajous, train_test_split
from rdm.estimator import RecurrentDiffusion
from rdm.flow import ConditionalFlow, logdet_check
from rdm.gradcheck import training_suite
from rdm.metrics import sequence_frechet
from rdm.networks import ModelConfig, RDMNetworks
from rdm.numerics import backward, no_grad
from rdm.sampler import MODES, SamplerPlan, predict_calls, sample
from rdm.schedule import linear_schedule
from rdm.training import TrainConfig, compute_loss

RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


# --- 1: flow correctness -----------------------------------------------------------


def test_criterion_1_flow_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    L = 4
    single, multi, anti_k1, anti_k6, fd = 0.0, 0.0, True, 0.0, 0.0
    for seed in range(5):
        flow = ConditionalFlow(4, context_size=8, n_blocks=6, coupling_hidden=8,
                               final_init_std=0.3, random_state=seed)
        x = rng.standard_normal((8, 14, 4))
        emb = 0.5 * rng.standard_normal((8, 8))
        with no_grad():
            ctx = flow.advance(flow.initial_context(emb), x)
            y, ld = flow.forward(x, ctx)
            back, ldi = flow.inverse(y, ctx)
            single = max(single, float(np.max(np.abs(back.data - x))))
            anti_k6 = max(anti_k6, float(np.max(np.abs(ld.data + ldi.data))))
            for n in range(1, L + 1):
                yn, _, _, trace = flow.apply_n(x, emb, n)
                bn, _ = flow.inverse_n(yn, n, trace)
                multi = max(multi, float(np.max(np.abs(bn.data - x))))
        k1 = ConditionalFlow(4, context_size=8, n_blocks=1, final_init_std=0.3, random_state=seed)
        with no_grad():
            c1 = k1.advance(k1.initial_context(emb), x)
            y1, l1 = k1.forward(x, c1)
            _, l1i = k1.inverse(y1, c1)
        anti_k1 &= np.array_equal(l1.data, -l1i.data)
        f3 = ConditionalFlow(3, context_size=4, n_blocks=4, final_init_std=0.5, clamp=(-1.0, 1.0),
                             random_state=seed)
        with no_grad():
            c3 = f3.advance(f3.initial_context(rng.standard_normal((1, 4))), rng.standard_normal((1, 2, 3)))
        fd = max(fd, logdet_check(f3, c3, random_state=seed))
    elapsed = time.perf_counter() - t0
    ok = (single <= 1e-6 and multi <= 1e-5 and fd <= 1e-3 and anti_k1 and anti_k6 <= 1e-12
          and elapsed < 10)
    report(1, ok, f"roundtrip single={single:.2e} (<=1e-6) n<=L={multi:.2e} (<=1e-5) "
                  f"logdet_fd_D3={fd:.2e} (<=1e-3) antisym K=1 bitwise={anti_k1} "
                  f"K=6 max|ld+ld_inv|={anti_k6:.1e} (<=1e-12) runtime={elapsed:.1f}s (<10s)")


# --- 2: gradient suite ----------------------------------------------------------------


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    (res,) = training_suite(seed=0)
    elapsed = time.perf_counter() - t0
    report(2, res.ok and elapsed < 30,
           f"full loss D=2 S=2 L=2 K=2 max_rel_err={res.error:.2e} (<=1e-4) runtime={elapsed:.1f}s (<30s)")


# --- 3: volume-diffusion degeneration ------------------------------------------------------


def test_criterion_3_single_segment_is_ddpm():
    cfg = ModelConfig(n_features=4, segment_length=14, n_segments=1, n_labels=4, T=100,
                      flow_blocks=2, context_size=8, coupling_hidden=8, denoiser_width=32)
    nets = RDMNetworks(cfg, random_state=0)
    rng = np.random.default_rng(5)
    segs = rng.standard_normal((16, 1, 14, 4))
    labels = rng.integers(0, 4, size=16)
    for st in nets.stores().values():
        st.zero_grad()
    ours, _ = compute_loss(nets, segs, labels, TrainConfig(flow_loss_weight=0.0), np.random.default_rng(7))
    backward(ours)
    g_ours = grads(nets)
    for st in nets.stores().values():
        st.zero_grad()
    ref = ddpm_reference_loss(nets, segs[:, 0], labels, np.random.default_rng(7))
    backward(ref)
    g_ref = grads(nets)
    loss_eq = ours.data.tobytes() == ref.data.tobytes()
    grad_eq = g_ours.keys() == g_ref.keys() and all(g_ours[k].tobytes() == g_ref[k].tobytes() for k in g_ref)
    report(3, loss_eq and grad_eq, f"L=1 lambda=0 loss bitwise={loss_eq} "
                                   f"gradients bitwise={grad_eq} over {len(g_ref)} tensors")


# --- 4: sampler oracle equivalence ----------------------------------------------------------


def test_criterion_4_samplers_match_ddpm():
    shape = (14, 4)
    checks = []
    for T in (10, 100):
        cfg = ModelConfig(n_features=4, segment_length=14, n_segments=4, n_labels=4, T=T,
                          flow_blocks=2, context_size=8, coupling_hidden=8, denoiser_width=32)
        nets = RDMNetworks(cfg, random_state=1, flow_init_std=0.2)
        labels = np.array([0, 1, 2, 3])
        ref_rng = np.random.default_rng(3)
        ref = vanilla_ddpm(nets.predict, nets.schedule, labels, ref_rng, shape)
        for mode in ("staircase", "autoregressive", "disentangled"):
            rng = np.random.default_rng(3)
            res = sample(nets.predict, nets.flow, nets.schedule, SamplerPlan(mode, L_target=1), labels,
                         rng, shape, nets.condition(labels).data)
            same = (res.segments[:, 0].tobytes() == ref.tobytes()
                    and rng.bit_generator.state == ref_rng.bit_generator.state)
            checks.append((T, mode, same))
    bad = [(T, m) for T, m, ok in checks if not ok]
    report(4, not bad, f"{len(checks) - len(bad)}/{len(checks)} (T, mode) runs bitwise equal to DDPM"
                       + (f"; mismatches {bad}" if bad else ""))


# --- 5: call counts --------------------------------------------------------------------------


def test_criterion_5_call_counts():
    T = 100
    cfg = ModelConfig(n_features=2, segment_length=2, n_segments=4, n_labels=1, T=T, flow_blocks=2,
                      context_size=4, coupling_hidden=4, denoiser_width=8, denoiser_depth=2, step_width=4)
    nets = RDMNetworks(cfg, random_state=0, flow_init_std=0.2)
    mismatches, cheaper, configs = [], 0, 0
    for L, n, mode in itertools.product([1, 4, 7], [10, 50, None], MODES):
        plan = SamplerPlan(mode, n_steps=n, L_target=L)
        res = sample(nets.predict, nets.flow, nets.schedule, plan, np.zeros(1, int),
                     np.random.default_rng(0), (2, 2), nets.condition([0]).data)
        if res.counter != predict_calls(plan, T):
            mismatches.append((L, n, mode))
    strict = []
    for L, n in itertools.product([4, 7], [10, 50, None]):
        plan = SamplerPlan("staircase", n_steps=n, L_target=L)
        assert plan.resolve_t_start(T) < T
        st = predict_calls(plan, T).denoiser_calls
        ar = predict_calls(SamplerPlan("autoregressive", n_steps=n, L_target=L), T).denoiser_calls
        configs += 1
        cheaper += st < ar
        strict.append(f"L={L},n={n or T}:{st}<{ar}")
    ok = not mismatches and cheaper == configs
    report(5, ok, f"36 instrumented runs, mismatches={mismatches}; staircase<autoregressive in "
                  f"{cheaper}/{configs} ({' '.join(strict)})")


# --- 6 and 8: trained toy model ------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy():
    t0 = time.perf_counter()
    full = gen_lissajous(n=2048 + 256, F=56, D=4, n_labels=4, seed=0)
    tr, te = train_test_split(len(full), 256, seed=0)
    train, test = full.subset(tr), full.subset(te)
    untrained = RecurrentDiffusion(max_steps=0, random_state=0).fit(train.sequences, train.labels)
    est = RecurrentDiffusion(max_steps=2000, random_state=0).fit(train.sequences, train.labels)
    return {"train": train, "test": test, "untrained": untrained, "est": est,
            "train_s": time.perf_counter() - t0}


def test_criterion_6_end_to_end(toy):
    t0 = time.perf_counter()
    h = np.array([r["total"] for r in toy["est"].history_])
    first, last = h[:50].mean(), h[-50:].mean()
    ratio = last / first

    def frechet(est):
        seqs, _ = est.sample(512, random_state=1)
        return sequence_frechet(seqs, toy["test"].sequences)

    fu, ft = frechet(toy["untrained"]), frechet(toy["est"])
    elapsed = toy["train_s"] + time.perf_counter() - t0
    ok = ratio < 0.5 and fu / ft >= 2 and elapsed < 600
    report(6, ok, f"(a) loss last50/first50={last:.4f}/{first:.4f}={ratio:.3f} (<0.5; "
                  f"single steps {h[-1]:.4f}/{h[0]:.4f}) (b) frechet untrained/trained="
                  f"{fu:.4f}/{ft:.4f}={fu / ft:.2f}x (>=2) runtime={elapsed:.0f}s (<600s)")


def test_criterion_8_rollout(toy):
    est = toy["est"]
    L = est.networks_.config.n_segments
    seqs, _ = est.sample(64, n_segments=2 * L, random_state=2)
    res = est.last_result_
    proxy = res.noise_proxy
    ok = (np.isfinite(seqs).all() and seqs.shape[1] == 2 * L * est.networks_.config.segment_length
          and len(proxy) == 2 * L and np.all(np.isfinite(proxy)))
    report(8, ok, f"L_target={2 * L} frames={seqs.shape[1]} finite={np.isfinite(seqs).all()} "
                  f"beyond={res.beyond_horizon} noise_proxy=[{', '.join(f'{p:.4f}' for p in proxy)}]")


# --- 7: route symmetry ---------------------------------------------------------------------------


def test_criterion_7_route_symmetry():
    T, S, D, L, N = 100, 2, 2, 3, 10_000
    schedule = linear_schedule(T)
    flow = ConditionalFlow(D, context_size=4, n_blocks=2, final_init_std=0.0, random_state=0)
    flow.params["block0.scale.out.b"].data[:] = 0.08
    flow.params["block0.shift.out.b"].data[:] = 0.5
    flow.params["block1.scale.out.b"].data[:] = -0.05
    flow.params["block1.shift.out.b"].data[:] = -0.3
    mu = np.array([[0.5, -1.0], [1.5, 0.2]])
    var = np.array([[0.3, 1.0], [0.6, 0.2]])

    # frozen couplings ignore their inputs, so f^j is the elementwise map a_j * x + b_j
    emb1 = np.zeros((1, 4))
    with no_grad():
        b = [flow.apply_n(np.zeros((1, S, D)), emb1, j)[0].data[0] for j in range(L)]
        a = [flow.apply_n(np.ones((1, S, D)), emb1, j)[0].data[0] - b[j] for j in range(L)]

    def oracle(x, x_prev, t, j, labels):
        origin = (x - b[j]) / a[j]
        ab = schedule.alpha_bars[t]
        post = mu + np.sqrt(ab) * var / (ab * var + 1 - ab) * (origin - np.sqrt(ab) * mu)
        return a[j] * post + b[j]

    out = {}
    for mode in ("staircase", "autoregressive"):
        res = sample(oracle, flow, schedule, SamplerPlan(mode, L_target=L), np.zeros(N, int),
                     np.random.default_rng(11 if mode == "staircase" else 12), (S, D), np.zeros((N, 4)))
        out[mode] = res.segments.reshape(N, L, S * D)

    worst, n_checks = 0.0, 0
    for j in range(L):
        xs, xa = out["staircase"][:, j], out["autoregressive"][:, j]
        ms, ma = xs.mean(0), xa.mean(0)
        se_m = np.sqrt(xs.var(0) / N + xa.var(0) / N)
        worst = max(worst, float(np.max(np.abs(ms - ma) / se_m)))
        cs, ca = np.cov(xs, rowvar=False), np.cov(xa, rowvar=False)
        se_c = np.sqrt((np.outer(np.diag(cs), np.diag(cs)) + cs ** 2) / N
                       + (np.outer(np.diag(ca), np.diag(ca)) + ca ** 2) / N)
        iu = np.triu_indices(S * D)
        worst = max(worst, float(np.max(np.abs(cs - ca)[iu] / se_c[iu])))
        n_checks += S * D + len(iu[0])
    report(7, worst <= 3.0, f"frozen affine flow + posterior-mean oracle, N={N}: max |diff|/SE over "
                            f"{n_checks} mean/cov entries = {worst:.2f} (<=3)")


# --- 9: persistence determinism -------------------------------------------------------------------


TINY_CFG = """\
data.n_train = 32
data.n_test = 8
data.frames = 16
schedule.T = 20
model.segments = 4
flow.blocks = 2
flow.context_size = 8
flow.hidden = 8
denoiser.width = 16
train.batch_size = 8
train.max_steps = 5
sampler.n_samples = 8
sampler.seed = 4
"""


def test_criterion_9_persistence(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    run = tmp_path / "run"
    assert cli_main(["-q", "train", "--config", str(cfg), "--out-dir", str(run)]) == 0
    ckpt_path = run / "checkpoint.rdm"

    # save -> load -> save round trip of the container itself
    raw = ckpt_path.read_bytes()
    resaved = tmp_path / "resaved.rdm"
    resaved.write_bytes(checkpoint_bytes(parse_checkpoint(raw)))
    container_eq = resaved.read_bytes() == raw

    outs = []
    for i, ck in enumerate((ckpt_path, ckpt_path, resaved)):
        p = tmp_path / f"s{i}.rdmd"
        assert cli_main(["-q", "sample", "--config", str(cfg), "--checkpoint", str(ck), "--out", str(p)]) == 0
        outs.append((p.read_bytes(), json.loads((tmp_path / f"s{i}.rdmd.json").read_text())))
    files_eq = all(o[0] == outs[0][0] for o in outs) and all(o[1] == outs[0][1] for o in outs)
    report(9, container_eq and files_eq,
           f"checkpoint re-save bitwise={container_eq}; 3 sample runs (2 original, 1 re-saved) "
           f"byte-identical={files_eq} ({len(outs[0][0])} bytes)")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
