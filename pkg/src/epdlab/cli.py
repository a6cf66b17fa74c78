"""Command-line front end.

Every command writes a delimited report whose first line records the package
version, the seed, and the fully resolved configuration, so any output file
can be reproduced from itself.  Figures render next to the CSV unless
--no-plot is given.

Exit codes: 0 success, 2 configuration error, 3 invariant violation in a
checkpoint or policy file, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .core import integrate, make_schedule, prior_sample
from .distill import TeacherConfig, train_distill
from .errors import ConfigError, DivergenceError, InvariantError
from .evaluate import (compare_solvers, latency_bench, pca_residual_analysis,
                       run_for_baseline, run_for_checkpoint,
                       steps_for_para_nfe)
from .parallel import get_pool, set_worker_count
from .params import load_checkpoint, save_checkpoint
from .rdpo import (RdpoConfig, load_policy, mode_thetas, save_policy,
                   train_rdpo)
from .solvers import BASELINE_STEPPERS, epd_stepper
from .toymodels import (CostWrappedField, GmmField, GmmModel,
                        default_validation_model)


def _resolved_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "config"}
    return cfg


def _write_csv(path: str, rows: list[dict], args: argparse.Namespace) -> None:
    if not rows:
        raise InvariantError("refusing to write an empty report")
    meta = json.dumps(_resolved_config(args), sort_keys=True,
                      separators=(",", ":"), default=str)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# epdlab={__version__} seed={args.seed} config={meta}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _figure_path(out: str) -> str:
    stem, _ = os.path.splitext(out)
    return stem + ".png"


def _sibling(out: str, suffix: str) -> str:
    stem, _ = os.path.splitext(out)
    return stem + suffix


def _field_from_checkpoint(ckpt):
    if ckpt.model is None:
        raise ConfigError("checkpoint does not embed a model description; "
                          "cannot rebuild the gradient field")
    return GmmField(GmmModel.from_dict(ckpt.model))


def _load_model(path: str | None):
    if path is None:
        return default_validation_model(), "gmm-default"
    model = GmmModel.from_json_file(path)
    return model, os.path.splitext(os.path.basename(path))[0]


def cmd_distill(args) -> int:
    if args.k < 1:
        raise ConfigError(f"--k must be a positive integer, got {args.k}")
    if args.nfe < 1:
        raise ConfigError(f"--nfe must be a positive integer, got {args.nfe}")
    model, model_id = _load_model(args.model)
    field = GmmField(model)
    n_steps = steps_for_para_nfe("epd", args.nfe, args.afs)
    schedule = make_schedule(args.schedule, n_steps)
    teacher = TeacherConfig(solver=args.teacher, m_intermediate=args.m)
    result = train_distill(field, schedule, k=args.k, teacher=teacher,
                           epochs=args.epochs, batch_size=args.batch,
                           cache_size=args.cache, lr=args.lr, afs=args.afs,
                           seed=args.seed, model=model.to_dict(),
                           model_id=model_id)
    save_checkpoint(result.checkpoint, args.out)
    rows = []
    for epoch in range(result.loss_history.shape[0]):
        row = {"epoch": epoch}
        for n in range(result.loss_history.shape[1]):
            row[f"loss_step_{n}"] = result.loss_history[epoch, n]
        row["wall_s"] = result.epoch_seconds[epoch]
        rows.append(row)
    log_path = _sibling(args.out, "_loss.csv")
    _write_csv(log_path, rows, args)
    if not args.no_plot:
        from .plotting import save_loss_curves
        save_loss_curves(result.loss_history, _sibling(args.out, "_loss.png"))
    print(f"wrote {args.out} and {log_path}")
    return 0


def cmd_rdpo(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    field = _field_from_checkpoint(ckpt)
    cfg = RdpoConfig(clip_eps=args.clip, kl_coeff=args.kl, lr=args.lr,
                     group_size=args.group, contexts_per_iter=args.contexts,
                     kappa=args.kappa, pool_size=args.pool,
                     ref_substeps=args.ref_substeps)
    result = train_rdpo(field, ckpt, cfg, iterations=args.iters,
                        seed=args.seed)
    save_policy(result.policy, args.out)
    rows = [{"iteration": int(row[0]), "mean_reward": row[1],
             "mean_kl": row[2], "clip_fraction": row[3], "wall_s": row[4]}
            for row in result.history]
    log_path = _sibling(args.out, "_history.csv")
    _write_csv(log_path, rows, args)
    if not args.no_plot:
        from .plotting import save_reward_curve
        save_reward_curve(result.history, _sibling(args.out, "_history.png"))
    print(f"wrote {args.out} and {log_path}")
    return 0


def cmd_sample(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be positive, got {args.count}")
    ckpt = load_checkpoint(args.ckpt)
    field = _field_from_checkpoint(ckpt)
    if args.policy is not None:
        policy = load_policy(args.policy)
        if policy.k != ckpt.k:
            raise InvariantError(
                f"policy has {policy.k} branches but the checkpoint "
                f"has {ckpt.k}")
        if not np.allclose(policy.schedule.times, ckpt.schedule.times,
                           rtol=1e-12):
            raise InvariantError("policy and checkpoint schedules differ")
        thetas = mode_thetas(policy)
        afs = policy.afs
    else:
        thetas = tuple(ckpt.materialize_all())
        afs = ckpt.afs
    rng = np.random.default_rng(args.seed)
    noises = prior_sample(ckpt.schedule.t_max, (args.count, field.dim), rng)
    traj = integrate(field, epd_stepper(thetas, ckpt.n_steps),
                     ckpt.schedule, noises, afs=afs)
    samples = traj.endpoint
    rows = []
    for i in range(samples.shape[0]):
        row = {"index": i}
        for j in range(samples.shape[1]):
            row[f"x{j}"] = samples[i, j]
        rows.append(row)
    _write_csv(args.out, rows, args)
    if not args.no_plot:
        from .plotting import save_samples_figure
        means = np.array(ckpt.model["means"]) if ckpt.model else None
        save_samples_figure(samples, _figure_path(args.out), means=means)
    print(f"wrote {args.out}")
    return 0


def _parse_int_list(text, flag: str) -> list[int]:
    # config files may supply a real JSON list instead of the flag string
    parts = text if isinstance(text, (list, tuple)) \
        else [p for p in str(text).split(",") if p.strip()]
    try:
        values = [int(part) for part in parts]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{flag} expects comma-separated integers, "
                          f"got {text!r}") from exc
    if not values:
        raise ConfigError(f"{flag} must name at least one value")
    return values


def cmd_compare(args) -> int:
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()]
    budgets = _parse_int_list(args.nfe, "--nfe")
    runs = []
    for solver in solvers:
        if solver not in BASELINE_STEPPERS:
            raise ConfigError(f"unknown solver {solver!r} in --solvers; "
                              f"choose from {sorted(BASELINE_STEPPERS)}")
        for budget in budgets:
            try:
                runs.append(run_for_baseline(solver, budget, afs=args.afs,
                                             schedule_kind=args.schedule))
            except ConfigError:
                print(f"note: {solver} cannot spend a budget of {budget} "
                      f"rounds (afs={args.afs}); row skipped",
                      file=sys.stderr)
    ckpt = None
    if args.ckpt is not None:
        ckpt = load_checkpoint(args.ckpt)
        runs.append(run_for_checkpoint(ckpt))
    if not runs:
        raise ConfigError("no runnable solver/budget combinations")
    field = GmmField(default_validation_model()) if ckpt is None \
        else _field_from_checkpoint(ckpt)
    rng = np.random.default_rng(args.seed)
    noises = prior_sample(80.0, (args.count, field.dim), rng)
    rows = compare_solvers(field, runs, noises,
                           oracle_substeps=args.oracle_substeps,
                           with_timing=not args.no_timing)
    _write_csv(args.out, rows, args)
    if not args.no_plot:
        from .plotting import save_compare_figure
        save_compare_figure(rows, _figure_path(args.out))
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    ks = _parse_int_list(args.k, "--k")
    if any(k < 1 for k in ks):
        raise ConfigError(f"--k entries must be positive integers, got {ks}")
    field = CostWrappedField(GmmField(default_validation_model()),
                             cost_ms=args.cost_ms)
    schedule = make_schedule(args.schedule, args.steps)
    rows = latency_bench(field, schedule, ks, repetitions=args.reps,
                         warmup=args.warmup, afs=args.afs, pool=get_pool())
    if not args.no_plot:
        from .plotting import save_bench_figure
        save_bench_figure(rows, _figure_path(args.out))
    for row in rows:
        if row["ci95_ms"] is None:
            row["ci95_ms"] = ""
    _write_csv(args.out, rows, args)
    print(f"wrote {args.out}")
    return 0


def cmd_analyze(args) -> int:
    if args.ckpt is not None:
        ckpt = load_checkpoint(args.ckpt)
        field = _field_from_checkpoint(ckpt)
        run = run_for_checkpoint(ckpt)
        stepper, schedule, afs = run.stepper, run.schedule, run.afs
    else:
        if args.solver not in BASELINE_STEPPERS:
            raise ConfigError(f"unknown solver {args.solver!r}")
        field = GmmField(default_validation_model())
        stepper = BASELINE_STEPPERS[args.solver]()
        schedule = make_schedule(args.schedule, args.steps)
        afs = args.afs
    rng = np.random.default_rng(args.seed)
    noises = prior_sample(schedule.t_max, (args.count, field.dim), rng)
    traj = integrate(field, stepper, schedule, noises, afs=afs)
    curve = pca_residual_analysis(traj)
    rows = [{"component": i + 1, "cumulative_explained_variance": curve[i]}
            for i in range(curve.size)]
    _write_csv(args.out, rows, args)
    if not args.no_plot:
        from .plotting import save_pca_curve
        save_pca_curve(curve, _figure_path(args.out))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epdlab",
        description="Few-step ODE sampling laboratory: ensemble "
                    "parallel-direction solver steps on analytic toys.")
    parser.add_argument("--version", action="version",
                        version=f"epdlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_out):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=default_out)
        p.add_argument("--threads", type=int, default=None,
                       help="worker pool size for concurrent branch "
                            "evaluations (env EPDLAB_THREADS)")
        p.add_argument("--config", default=None,
                       help="JSON file whose entries override flags")
        p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("distill", help="fit solver parameters to a teacher")
    p.add_argument("--model", default=None, help="model JSON (default: "
                   "builtin four-mode mixture)")
    p.add_argument("--nfe", type=int, default=6,
                   help="sequential evaluation-round budget (even without "
                        "--afs, odd with)")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--schedule", default="uniform",
                   choices=["uniform", "polynomial", "logsnr"])
    p.add_argument("--teacher", default="dpm2",
                   choices=["dpm2", "heun", "rk4"])
    p.add_argument("--m", type=int, default=6,
                   help="teacher times inserted per student interval")
    p.add_argument("--afs", action="store_true")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--cache", type=int, default=2048)
    p.add_argument("--lr", type=float, default=0.01)
    common(p, "ckpt.json")

    p = sub.add_parser("rdpo", help="policy-optimize a distilled checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--group", type=int, default=4)
    p.add_argument("--clip", type=float, default=0.2)
    p.add_argument("--kappa", type=float, default=20.0)
    p.add_argument("--kl", type=float, default=0.01)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--contexts", type=int, default=8)
    p.add_argument("--pool", type=int, default=512)
    p.add_argument("--ref-substeps", type=int, default=1000)
    common(p, "policy.json")

    p = sub.add_parser("sample", help="generate samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--policy", default=None,
                   help="policy JSON; its per-step modes replace the "
                        "checkpoint parameters")
    p.add_argument("--count", type=int, default=256)
    common(p, "samples.csv")

    p = sub.add_parser("compare", help="error table across solvers")
    p.add_argument("--solvers", default="euler,heun,dpm2,ipndm")
    p.add_argument("--nfe", default="4,6,8",
                   help="comma-separated round budgets")
    p.add_argument("--afs", action="store_true")
    p.add_argument("--schedule", default="polynomial",
                   choices=["uniform", "polynomial", "logsnr"])
    p.add_argument("--ckpt", default=None,
                   help="adds an ensemble row at the checkpoint's budget")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--oracle-substeps", type=int, default=300)
    p.add_argument("--no-timing", action="store_true",
                   help="drop the wall-time column (byte-stable output)")
    common(p, "compare.csv")

    p = sub.add_parser("bench", help="branch-parallel latency benchmark")
    p.add_argument("--cost-ms", type=float, default=10.0)
    p.add_argument("--k", default="1,2")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--schedule", default="uniform",
                   choices=["uniform", "polynomial", "logsnr"])
    p.add_argument("--afs", action="store_true")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    common(p, "bench.csv")

    p = sub.add_parser("analyze", help="trajectory residual geometry")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--solver", default="euler")
    p.add_argument("--schedule", default="polynomial",
                   choices=["uniform", "polynomial", "logsnr"])
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--afs", action="store_true")
    p.add_argument("--count", type=int, default=64)
    common(p, "analyze.csv")

    return parser


COMMANDS = {
    "distill": cmd_distill,
    "rdpo": cmd_rdpo,
    "sample": cmd_sample,
    "compare": cmd_compare,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
}


def _apply_config_file(args: argparse.Namespace) -> None:
    if getattr(args, "config", None) is None:
        return
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {args.config}: "
                          f"{exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {args.config} is not valid JSON: "
                          f"{exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError("config file must hold a JSON object")
    known = set(vars(args))
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("command", "config"):
            raise ConfigError(f"config key {key!r} is not a flag of "
                              f"the {args.command} command")
        setattr(args, dest, value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args)
        if args.threads is not None:
            set_worker_count(args.threads)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
