"""Metrics and comparison harness: endpoint errors against a fine oracle,
NFE budget accounting, trajectory-geometry analysis, latency benchmarking,
and a kernel-free two-sample statistic for distribution-level checks."""

from __future__ import annotations

from dataclasses import dataclass
import time

import numpy as np
from scipy.spatial.distance import cdist

from .core import (GradientField, Stepper, TimeSchedule, Trajectory,
                   integrate, make_schedule, reference_solve)
from .errors import ConfigError
from .params import Checkpoint, init_default, materialize
from .solvers import BASELINE_STEPPERS, epd_stepper

# evaluation rounds per step for each solver family
SINGLE_ROUND = ("euler", "ipndm")
DOUBLE_ROUND = ("heun", "dpm2", "epd", "epd-plugin")


def endpoint_error(states: np.ndarray, oracle: np.ndarray) -> float:
    """Mean L2 distance between matched endpoints, averaged over the batch."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    oracle = np.atleast_2d(np.asarray(oracle, dtype=float))
    if states.shape != oracle.shape:
        raise ConfigError(f"shape mismatch {states.shape} vs {oracle.shape}")
    return float(np.mean(np.linalg.norm(states - oracle, axis=-1)))


def trajectory_error(run: Trajectory, oracle: Trajectory) -> np.ndarray:
    """Mean L2 distance at every shared schedule time, indexed like the
    schedule (entry n is the error at times[n], data end first)."""
    if len(run.states) != len(oracle.states):
        raise ConfigError("trajectories have different step counts")
    if not np.allclose(run.times, oracle.times, rtol=1e-12):
        raise ConfigError("trajectories use different schedules")
    out = np.zeros(len(run.states))
    for n in range(len(run.states)):
        a, b = run.state_at_index(n), oracle.state_at_index(n)
        out[n] = np.mean(np.linalg.norm(np.atleast_2d(a - b), axis=-1))
    return out


def steps_for_para_nfe(solver: str, para_nfe: int, afs: bool = False) -> int:
    """Step count that spends exactly para_nfe sequential evaluation rounds.

    Single-round solvers use one round per step; two-round solvers use a
    start round plus one concurrent branch round.  The analytic first step
    saves one start round either way.
    """
    if para_nfe < 1:
        raise ConfigError(f"para_nfe must be >= 1, got {para_nfe}")
    saved = 1 if afs else 0
    if solver in SINGLE_ROUND:
        return para_nfe + saved
    if solver in DOUBLE_ROUND:
        if (para_nfe + saved) % 2 != 0:
            kind = "odd" if afs else "even"
            raise ConfigError(
                f"{solver} needs an {kind} para_nfe budget "
                f"(afs={afs}), got {para_nfe}")
        n = (para_nfe + saved) // 2
        if n < 1:
            raise ConfigError(f"para_nfe {para_nfe} too small for {solver}")
        return n
    raise ConfigError(f"unknown solver {solver!r}")


@dataclass(frozen=True)
class SolverRun:
    """One row of a comparison: a named stepper bound to its schedule."""

    name: str
    stepper: Stepper
    schedule: TimeSchedule
    afs: bool = False
    k: int = 1


def run_for_baseline(solver: str, para_nfe: int, afs: bool = False,
                     schedule_kind: str = "polynomial", t_min: float = 0.002,
                     t_max: float = 80.0, rho: float = 7.0) -> SolverRun:
    if solver not in BASELINE_STEPPERS:
        raise ConfigError(f"unknown baseline {solver!r}, expected one of "
                          f"{sorted(BASELINE_STEPPERS)}")
    n = steps_for_para_nfe(solver, para_nfe, afs)
    schedule = make_schedule(schedule_kind, n, t_min=t_min, t_max=t_max,
                             rho=rho)
    return SolverRun(name=solver, stepper=BASELINE_STEPPERS[solver](),
                     schedule=schedule, afs=afs, k=1)


def run_for_checkpoint(ckpt: Checkpoint, name: str = "epd",
                       pool=None) -> SolverRun:
    thetas = tuple(ckpt.materialize_all())
    return SolverRun(name=name,
                     stepper=epd_stepper(thetas, ckpt.n_steps, pool=pool),
                     schedule=ckpt.schedule, afs=ckpt.afs, k=ckpt.k)


def compare_solvers(field: GradientField, runs, noises: np.ndarray,
                    oracle_substeps: int = 1000,
                    with_timing: bool = True) -> list[dict]:
    """Endpoint error vs a fine oracle for each run, plus NFE accounting.

    Oracle endpoints are computed once per distinct schedule.  Rows come
    back in run order; wall_ms covers the batched sampling call only.
    """
    noises = np.atleast_2d(np.asarray(noises, dtype=float))
    oracle_cache: dict[bytes, np.ndarray] = {}
    rows = []
    for run in runs:
        key = run.schedule.times.tobytes()
        if key not in oracle_cache:
            oracle_cache[key] = reference_solve(
                field, run.schedule, noises,
                substeps=oracle_substeps).endpoint
        tic = time.perf_counter()
        traj = integrate(field, run.stepper, run.schedule, noises,
                         afs=run.afs)
        wall_ms = (time.perf_counter() - tic) * 1e3
        row = {
            "solver": run.name,
            "k": run.k,
            "n_steps": run.schedule.n_steps,
            "para_nfe": traj.nfe_parallel,
            "nfe_total": traj.nfe_total,
            "error": endpoint_error(traj.endpoint, oracle_cache[key]),
        }
        if with_timing:
            row["wall_ms"] = wall_ms
        rows.append(row)
    return rows


DEGENERATE_VARIANCE = 1e-18


def pca_residual_curve(states: np.ndarray) -> np.ndarray:
    """Cumulative explained-variance ratios of one trajectory's residuals.

    Removes each state's projection onto the chord from the start state to
    the endpoint, then eigendecomposes the covariance of what is left.  An
    (almost) collinear trajectory has no residual signal; by convention it
    reports all ones (everything explained from the first component on).
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[0] < 3:
        raise ConfigError("need a (n_times, dim) stack of at least 3 states")
    d = states.shape[1]
    chord = states[-1] - states[0]
    rel = states - states[0]
    norm2 = float(chord @ chord)
    if norm2 > 0.0:
        residual = rel - np.outer(rel @ chord / norm2, chord)
    else:
        residual = rel
    total_scale = max(1.0, norm2)
    centered = residual - residual.mean(axis=0)
    cov = centered.T @ centered / centered.shape[0]
    eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
    eigvals = np.clip(eigvals, 0.0, None)
    total = float(np.sum(eigvals))
    if total <= DEGENERATE_VARIANCE * total_scale:
        return np.ones(d)
    return np.cumsum(eigvals) / total


def pca_residual_analysis(trajectories) -> np.ndarray:
    """Batch-averaged cumulative explained-variance curve.

    Accepts a batched Trajectory or an array shaped (n_times, batch, dim).
    """
    if isinstance(trajectories, Trajectory):
        states = np.stack(trajectories.states)
    else:
        states = np.asarray(trajectories, dtype=float)
    if states.ndim == 2:
        states = states[:, None, :]
    if states.ndim != 3:
        raise ConfigError("expected states shaped (n_times, batch, dim)")
    curves = [pca_residual_curve(states[:, b, :])
              for b in range(states.shape[1])]
    return np.mean(curves, axis=0)


def latency_bench(field: GradientField, schedule: TimeSchedule, k_values,
                  repetitions: int = 100, warmup: int = 10, afs: bool = False,
                  pool=None, x_init: np.ndarray | None = None) -> list[dict]:
    """Wall-clock stats for full sampling runs at each branch count.

    The same initial noise is reused everywhere so content differences
    cannot leak into the comparison; the 95% interval uses the normal
    approximation and is absent for a single repetition.
    """
    if repetitions < 1 or warmup < 0:
        raise ConfigError("repetitions must be >= 1 and warmup >= 0")
    if x_init is None:
        rng = np.random.default_rng(0)
        x_init = schedule.t_max * rng.standard_normal(field.dim)
    rows = []
    for k in k_values:
        if k < 1:
            raise ConfigError(f"branch count must be >= 1, got {k}")
        thetas = tuple(materialize(raw, *schedule.step_interval(n))
                       for n, raw in enumerate(init_default(schedule.n_steps, k)))
        stepper = epd_stepper(thetas, schedule.n_steps, pool=pool)
        times_ms = np.zeros(repetitions)
        for rep in range(warmup + repetitions):
            tic = time.perf_counter()
            traj = integrate(field, stepper, schedule, x_init, afs=afs)
            elapsed = (time.perf_counter() - tic) * 1e3
            if rep >= warmup:
                times_ms[rep - warmup] = elapsed
        mean = float(np.mean(times_ms))
        if repetitions > 1:
            ci95 = float(1.96 * np.std(times_ms, ddof=1)
                         / np.sqrt(repetitions))
        else:
            ci95 = None
        rows.append({"k": k, "mean_ms": mean, "ci95_ms": ci95,
                     "n_steps": schedule.n_steps,
                     "para_nfe": traj.nfe_parallel,
                     "nfe_total": traj.nfe_total})
    return rows


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Two-sample energy statistic 2 E|x-y| - E|x-x'| - E|y-y'|.

    Nonnegative, zero only when the samples share a distribution; no
    bandwidth parameter to tune.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[1] != y.shape[1]:
        raise ConfigError("samples must share dimensionality")
    cross = float(np.mean(cdist(x, y)))
    within_x = float(np.mean(cdist(x, x)))
    within_y = float(np.mean(cdist(y, y)))
    return 2.0 * cross - within_x - within_y
