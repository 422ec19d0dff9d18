"""``rdm`` command line: train, sample, eval, bench, gradcheck, generate.

Exit codes: 0 success, 2 usage or file-format problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import (DatasetFormatError, SyntheticDataset, atomic_write, gen_damped_oscillator,
                   gen_lissajous, load_dataset, save_dataset, train_test_split)
from .estimator import RecurrentDiffusion
from .gradcheck import run_all
from .metrics import (BenchRun, bench_report, flow_roundtrip_residual, sequence_frechet,
                      trajectory_mse)
from .numerics import NonFiniteError
from .sampler import MODES, PlanningError, SamplingInstabilityError, predict_calls
from .training import TrainingDivergedError

__all__ = ["main", "EVAL_COLUMNS"]

log = logging.getLogger("rdm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
EVAL_COLUMNS = ("mode", "L", "n_steps", "t_start", "n_samples", "frechet", "mse",
                "flow_residual_depth", "flow_residual_max", "denoiser_calls", "flow_calls")


class UsageError(Exception):
    pass


# --- helpers --------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None))
    log.info("resolved config:\n%s", cfg.render().rstrip())
    return cfg


def _generate(cfg: RunConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    gen = gen_lissajous if cfg["data.kind"] == "lissajous" else gen_damped_oscillator
    n_train, n_test = cfg["data.n_train"], cfg["data.n_test"]
    full = gen(n=n_train + n_test, F=cfg["data.frames"], D=cfg["data.features"],
               n_labels=cfg["data.labels"], seed=cfg["data.seed"])
    if n_test == 0:
        return full, full.subset(slice(0, 0))
    tr, te = train_test_split(n_train + n_test, n_test, seed=cfg["data.seed"])
    return full.subset(tr), full.subset(te)


def _load_dataset(path) -> SyntheticDataset:
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path}")
    ds = load_dataset(path)
    if ds.mean is not None and ds.normalized:
        raise UsageError(f"{path} holds normalised data; store data units")
    return ds


def _load_ckpt(path):
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _estimator(cfg: RunConfig) -> RecurrentDiffusion:
    return RecurrentDiffusion(
        n_segments=cfg["model.segments"], T=cfg["schedule.T"], beta_start=cfg["schedule.beta_start"],
        beta_end=cfg["schedule.beta_end"], flow_blocks=cfg["flow.blocks"],
        context_size=cfg["flow.context_size"], coupling_hidden=cfg["flow.hidden"], clamp=cfg["flow.clamp"],
        denoiser_width=cfg["denoiser.width"], denoiser_depth=cfg["denoiser.depth"],
        step_width=cfg["denoiser.step_width"], attention=cfg["denoiser.attention"],
        lr_flow=cfg["train.lr_flow"], lr_denoiser=cfg["train.lr_denoiser"],
        batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"], max_steps=cfg["train.max_steps"],
        w_mode=cfg["train.w_mode"], flow_loss_weight=cfg["train.flow_loss_weight"],
        sigma_inf=cfg["flow.sigma_inf"], replication=cfg["train.replication"],
        n_labels=cfg["data.labels"], random_state=cfg["train.seed"])


def _plan_kwargs(cfg: RunConfig, trained_L: int) -> dict:
    L = cfg["sampler.L_target"]
    return {"mode": cfg["sampler.mode"], "n_steps": cfg["sampler.n_steps"], "t_start": cfg["sampler.t_start"],
            "n_segments": trained_L if L is None else L, "eta": cfg["sampler.eta"], "seed": cfg["sampler.seed"]}


def _history_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["step", "total", "diffusion", "flow", "det_weight_mean"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# --- commands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args)
    train, test = _generate(cfg)
    save_dataset(train, args.out)
    if args.test_out:
        save_dataset(test, args.test_out)
    print(f"wrote {len(train)} sequences to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out_dir = args.out_dir or cfg["io.out_dir"]
    if cfg["data.path"] is not None:
        train = _load_dataset(cfg["data.path"])
        test = None
    else:
        train, test = _generate(cfg)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output dir {out_dir}: {exc.strerror}") from None
    atomic_write(os.path.join(out_dir, "config.resolved"), cfg.render().encode())
    if test is not None and len(test):
        save_dataset(test, os.path.join(out_dir, "test.rdmd"))

    every = cfg["train.checkpoint_every"]

    def on_step(est, bd):
        if every and est.step_ % every == 0:
            save_checkpoint(est.to_checkpoint(), os.path.join(out_dir, f"checkpoint_step{est.step_}.rdm"))
        if est.step_ % 100 == 0:
            log.info("step %d loss %.5f", est.step_, bd.total)

    if args.resume:
        est = RecurrentDiffusion.from_checkpoint(_load_ckpt(args.resume)).resume(train.sequences, train.labels)
        target = cfg["train.max_steps"]
        remaining = 0 if target is None else max(0, target - est.step_)
        est.partial_fit(remaining, callback=on_step)
    else:
        est = _estimator(cfg).fit(train.sequences, train.labels, callback=on_step)
    save_checkpoint(est.to_checkpoint(), os.path.join(out_dir, "checkpoint.rdm"))
    atomic_write(os.path.join(out_dir, "metrics.csv"), _history_csv(est.history_).encode())
    print(f"trained {est.step_} steps; checkpoint in {out_dir}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _config(args)
    ckpt = _load_ckpt(args.checkpoint)
    trained_L = ckpt.model_config.n_segments
    if "model.segments" in cfg.explicit and cfg["model.segments"] != trained_L:
        raise UsageError(f"config model.segments={cfg['model.segments']} but checkpoint was "
                         f"trained with L={trained_L}")
    est = RecurrentDiffusion.from_checkpoint(ckpt)
    kw = _plan_kwargs(cfg, trained_L)
    rng = np.random.default_rng(cfg["sampler.seed"])
    seqs, labels = est.sample(cfg["sampler.n_samples"], mode=kw["mode"], n_steps=kw["n_steps"],
                              t_start=kw["t_start"], n_segments=kw["n_segments"], eta=kw["eta"],
                              random_state=rng)
    res = est.last_result_
    plan = res.plan
    out = SyntheticDataset(seqs, labels, {"kind": "generated", "plan": plan.to_dict(),
                                          "sampler_seed": cfg["sampler.seed"]})
    save_dataset(out, args.out)
    beyond = list(range(trained_L, plan.L_target)) if plan.L_target > trained_L else []
    side = {"plan": plan.to_dict(), "seed": cfg["sampler.seed"], "t_start": plan.resolve_t_start(est.T),
            "calls": res.counter.to_dict(), "trained_L": trained_L, "beyond_horizon_segments": beyond,
            "noise_proxy": getattr(res, "noise_proxy", None) or None,
            "checkpoint_step": ckpt.step}
    atomic_write(args.out + ".json", (json.dumps(side, indent=2, sort_keys=True) + "\n").encode())
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return EXIT_OK


def _eval_row(est, ckpt_L, cfg, reference, samples=None, counter=None, plan=None) -> dict:
    row = dict.fromkeys(EVAL_COLUMNS, "")
    F = min(samples.shape[1], reference.sequences.shape[1])
    row["frechet"] = repr(sequence_frechet(samples[:, :F], reference.sequences[:, :F]))
    row["mse"] = repr(trajectory_mse(samples[:, :F], reference.sequences[:, :F]))
    row["n_samples"] = samples.shape[0]
    if plan is not None:
        row.update(mode=plan.mode, L=plan.L_target, n_steps=len(plan.steps(est.T)),
                   t_start=plan.resolve_t_start(est.T), denoiser_calls=counter.denoiser_calls,
                   flow_calls=counter.flow_calls)
    if est is not None:
        nets = est.networks_
        S = nets.config.segment_length
        x = (reference.sequences - est.mean_) / est.std_
        if x.shape[1] >= S:
            emb = nets.embedding["table"].data[np.minimum(reference.labels, est.n_labels_ - 1)]
            rep = flow_roundtrip_residual(nets.flow, x[:, :S], emb, 2 * ckpt_L)
            row["flow_residual_depth"] = rep.stable_depth
            row["flow_residual_max"] = repr(rep.max_residual)
    return row


def cmd_eval(args) -> int:
    cfg = _config(args)
    reference = _load_dataset(args.dataset)
    est = ckpt = None
    if args.checkpoint:
        ckpt = _load_ckpt(args.checkpoint)
        est = RecurrentDiffusion.from_checkpoint(ckpt)
    if args.samples:
        samples = _load_dataset(args.samples).sequences
        row = _eval_row(est, ckpt.model_config.n_segments if ckpt else 0, cfg, reference, samples)
    elif est is None:
        raise UsageError("eval needs --checkpoint or --samples")
    else:
        kw = _plan_kwargs(cfg, ckpt.model_config.n_segments)
        n = cfg["sampler.n_samples"] if "sampler.n_samples" in cfg.explicit else len(reference)
        seqs, _ = est.sample(n, mode=kw["mode"], n_steps=kw["n_steps"], t_start=kw["t_start"],
                             n_segments=kw["n_segments"], eta=kw["eta"],
                             random_state=np.random.default_rng(cfg["sampler.seed"]))
        res = est.last_result_
        row = _eval_row(est, ckpt.model_config.n_segments, cfg, reference, seqs, res.counter, res.plan)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(EVAL_COLUMNS), lineterminator="\n")
    w.writeheader()
    w.writerow(row)
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    ckpt = _load_ckpt(args.checkpoint)
    est = RecurrentDiffusion.from_checkpoint(ckpt)
    reference = _load_dataset(args.dataset) if args.dataset else None
    lengths = [int(v) for v in args.lengths.split(",")]
    modes = args.modes.split(",")
    bad = [m for m in modes if m not in MODES]
    if bad or args.repeats < 1 or any(L < 1 for L in lengths):
        raise UsageError(f"invalid bench matrix (modes {bad}, repeats {args.repeats}, lengths {lengths})")
    runs = []
    for L in lengths:
        for mode in modes:
            plan = est.make_plan(mode, cfg["sampler.n_steps"], cfg["sampler.t_start"], L, cfg["sampler.eta"],
                                 cfg["sampler.seed"])
            labels = np.arange(args.n_samples) % est.n_labels_
            times = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                res = est.sample_segments(labels, plan, random_state=cfg["sampler.seed"])
                times.append(1000.0 * (time.perf_counter() - t0))
            expected = predict_calls(plan, est.T)
            if expected != res.counter:
                raise RuntimeError(f"call counts {res.counter} differ from closed form {expected}")
            frechet = mse = None
            if reference is not None:
                seqs = est.to_data_units(res)
                F = min(seqs.shape[1], reference.sequences.shape[1])
                frechet = sequence_frechet(seqs[:, :F], reference.sequences[:, :F])
                mse = trajectory_mse(seqs[:, :F], reference.sequences[:, :F])
            runs.append(BenchRun(plan, res.counter, float(np.mean(times)), plan.resolve_t_start(est.T),
                                 float(np.std(times)), frechet, mse))
    _emit(bench_report(runs, est.T), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name} max_rel_err={r.error:.3e} tol={r.tolerance:.0e}")
    return EXIT_OK if all(r.ok for r in results) else 1


def _emit(text: str, path) -> None:
    if path:
        atomic_write(path, text.encode())
    else:
        sys.stdout.write(text)


# --- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdm", description="Recurrent diffusion for segmented sequences.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return sp

    g = with_config(sub.add_parser("generate", help="write a synthetic dataset"))
    g.add_argument("--out", required=True)
    g.add_argument("--test-out")
    g.set_defaults(func=cmd_generate)

    t = with_config(sub.add_parser("train", help="fit a model and write a checkpoint"))
    t.add_argument("--out-dir")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.set_defaults(func=cmd_train)

    s = with_config(sub.add_parser("sample", help="generate sequences from a checkpoint"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = with_config(sub.add_parser("eval", help="quality metrics against a dataset"))
    e.add_argument("--checkpoint")
    e.add_argument("--dataset", required=True)
    e.add_argument("--samples", help="evaluate this dataset file instead of sampling")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = with_config(sub.add_parser("bench", help="time sampling routes and count calls"))
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--dataset", help="reference data for frechet/mse columns")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--lengths", default="1,4,7")
    b.add_argument("--modes", default=",".join(MODES))
    b.add_argument("--n-samples", type=int, default=16)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    gc = sub.add_parser("gradcheck", help="run the gradient suites; nonzero exit on failure")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (TrainingDivergedError, SamplingInstabilityError, NonFiniteError) as exc:
        print(f"rdm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DatasetFormatError, PlanningError) as exc:
        print(f"rdm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"rdm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
