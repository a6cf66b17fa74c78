"""Solver step rules for few-step generation.

Every rule shares one signature, (field, ctx) -> StepResult, and holds no
mutable state; multistep history lives in the context and is managed by the
integration driver. Factory helpers bind per-step parameters and return a
Stepper for core.integrate.

The ensemble step evaluates K branch gradients at probe states reached by a
short Euler move from the step's start point, then advances with their
convex combination:

    x_next = x + (1 + o) h sum_k lam_k eps(x + (tau_k - t_start) d_start,
                                           tau_k + delta_k)

Branch evaluations are independent reads and may run concurrently; the
combination is always reduced in ascending branch order so parallel and
serial execution agree bitwise.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .core import GradientField, StepContext, StepResult, Stepper
from .errors import InvariantError
from .parallel import parallel_map
from .params import MaterializedStepParams

SIMPLEX_TOL = 1e-9

#----------------------------------------------------------------------------
# Single-step rules.


def _start_gradient(field: GradientField, ctx: StepContext) -> tuple[np.ndarray, int]:
    """Gradient at (x, t_start) and its evaluation cost (0 when supplied)."""
    if ctx.start_grad is not None:
        return ctx.start_grad, 0
    return field.evaluate(ctx.x, ctx.t_start), 1


def euler_step(field: GradientField, ctx: StepContext) -> StepResult:
    """x_next = x + h eps(x, t_start)."""
    d, cost = _start_gradient(field, ctx)
    return StepResult(x_next=ctx.x + ctx.h * d, nfe_total=cost, nfe_parallel=cost)


def heun_step(field: GradientField, ctx: StepContext) -> StepResult:
    """Trapezoidal correction of the Euler predictor."""
    d1, cost = _start_gradient(field, ctx)
    x_pred = ctx.x + ctx.h * d1
    d2 = field.evaluate(x_pred, ctx.t_end)
    x_next = ctx.x + ctx.h * 0.5 * (d1 + d2)
    return StepResult(x_next=x_next, nfe_total=cost + 1, nfe_parallel=cost + 1)


def dpm2_step(field: GradientField, ctx: StepContext) -> StepResult:
    """Midpoint rule with the geometric-mean intermediate time.

    Probes to s = sqrt(t_start t_end) by Euler, then takes the full step
    with the midpoint gradient.
    """
    d1, cost = _start_gradient(field, ctx)
    s = float(np.sqrt(ctx.t_start * ctx.t_end))
    x_mid = ctx.x + (s - ctx.t_start) * d1
    d_mid = field.evaluate(x_mid, s)
    x_next = ctx.x + ctx.h * d_mid
    return StepResult(x_next=x_next, nfe_total=cost + 1, nfe_parallel=cost + 1)


#----------------------------------------------------------------------------
# Multistep rule (Adams-Bashforth warmup ladder, order <= 4).

IPNDM_COEFS = (
    (1.0,),
    (3.0 / 2.0, -1.0 / 2.0),
    (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0),
    (55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0),
)


def _multistep_combine(d_cur: np.ndarray, history: tuple[np.ndarray, ...],
                       max_order: int) -> np.ndarray:
    order = min(len(history) + 1, max_order)
    coefs = IPNDM_COEFS[order - 1]
    d = coefs[0] * d_cur
    for i in range(1, order):
        d = d + coefs[i] * history[i - 1]
    return d


def ipndm_step(field: GradientField, ctx: StepContext, max_order: int = 4) -> StepResult:
    """Improved pseudo-numerical multistep rule.

    Uses up to three past gradients (most recent first in ctx.history) with
    the warmup coefficient ladder, one fresh evaluation per step.
    """
    d_cur, cost = _start_gradient(field, ctx)
    d = _multistep_combine(d_cur, ctx.history, max_order)
    return StepResult(x_next=ctx.x + ctx.h * d, nfe_total=cost, nfe_parallel=cost,
                      history_grad=d_cur)


#----------------------------------------------------------------------------
# Ensemble parallel-direction rules.


def _branch_gradients(field: GradientField, ctx: StepContext,
                      theta: MaterializedStepParams, d_start: np.ndarray,
                      pool: ThreadPoolExecutor | None) -> list[np.ndarray]:
    lo, hi = sorted((ctx.t_start, ctx.t_end))
    tau = np.asarray(theta.tau, dtype=float)
    lam = np.asarray(theta.lam, dtype=float)
    if np.any(lam < 0.0) or abs(float(lam.sum()) - 1.0) > SIMPLEX_TOL:
        raise InvariantError(f"branch weights must lie on the simplex, got {lam}")
    if not np.all(np.isfinite(tau)) or np.any(tau < lo) or np.any(tau > hi):
        raise InvariantError(
            f"branch times {tau} outside step interval [{lo:g}, {hi:g}]")
    eval_times = tau + np.asarray(theta.delta, dtype=float)
    if np.any(eval_times <= 0.0):
        raise InvariantError(f"shifted branch times {eval_times} must stay positive")

    def one(k: int) -> np.ndarray:
        x_probe = ctx.x + (tau[k] - ctx.t_start) * d_start
        return field.evaluate(x_probe, eval_times[k])

    return parallel_map(one, range(len(tau)), pool)


def _branch_mix(grads: Sequence[np.ndarray], theta: MaterializedStepParams) -> np.ndarray:
    # accumulate in ascending branch order; keeps parallel == serial bitwise
    mix = theta.lam[0] * grads[0]
    for k in range(1, len(grads)):
        mix = mix + theta.lam[k] * grads[k]
    return mix


def epd_step(field: GradientField, ctx: StepContext,
             theta: MaterializedStepParams,
             pool: ThreadPoolExecutor | None = None) -> StepResult:
    """Ensemble step: K concurrent branch gradients, convex-combined.

    Costs K+1 evaluations in 2 parallel rounds (one fewer of each when the
    start gradient is supplied).
    """
    d_start, cost = _start_gradient(field, ctx)
    grads = _branch_gradients(field, ctx, theta, d_start, pool)
    mix = _branch_mix(grads, theta)
    x_next = ctx.x + (1.0 + theta.o) * ctx.h * mix
    return StepResult(x_next=x_next, nfe_total=cost + len(grads),
                      nfe_parallel=cost + 1)


def epd_plugin_ipndm_step(field: GradientField, ctx: StepContext,
                          theta: MaterializedStepParams,
                          pool: ThreadPoolExecutor | None = None,
                          max_order: int = 4) -> StepResult:
    """Multistep rule with the ensemble direction in place of the
    current-time gradient.

    d_ens = (1 + o) sum_k lam_k eps(probe_k, tau_k + delta_k) feeds the
    Adams-Bashforth combination and is what enters the history, so later
    steps extrapolate from the improved directions.
    """
    d_start, cost = _start_gradient(field, ctx)
    grads = _branch_gradients(field, ctx, theta, d_start, pool)
    d_ens = (1.0 + theta.o) * _branch_mix(grads, theta)
    d = _multistep_combine(d_ens, ctx.history, max_order)
    return StepResult(x_next=ctx.x + ctx.h * d, nfe_total=cost + len(grads),
                      nfe_parallel=cost + 1, history_grad=d_ens)


#----------------------------------------------------------------------------
# Stepper factories binding per-step parameters.


def euler_stepper() -> Stepper:
    return euler_step


def heun_stepper() -> Stepper:
    return heun_step


def dpm2_stepper() -> Stepper:
    return dpm2_step


def ipndm_stepper(max_order: int = 4) -> Stepper:
    def step(field: GradientField, ctx: StepContext) -> StepResult:
        return ipndm_step(field, ctx, max_order=max_order)
    return step


def _theta_for(thetas: Sequence[MaterializedStepParams], ctx: StepContext,
               n_steps: int) -> MaterializedStepParams:
    if len(thetas) != n_steps:
        raise InvariantError(
            f"expected {n_steps} per-step parameter sets, got {len(thetas)}")
    return thetas[ctx.index]


def epd_stepper(thetas: Sequence[MaterializedStepParams], n_steps: int,
                pool: ThreadPoolExecutor | None = None) -> Stepper:
    """Ensemble stepper with per-step parameters indexed by ctx.index."""
    def step(field: GradientField, ctx: StepContext) -> StepResult:
        return epd_step(field, ctx, _theta_for(thetas, ctx, n_steps), pool=pool)
    return step


def epd_plugin_stepper(thetas: Sequence[MaterializedStepParams], n_steps: int,
                       pool: ThreadPoolExecutor | None = None,
                       max_order: int = 4) -> Stepper:
    def step(field: GradientField, ctx: StepContext) -> StepResult:
        return epd_plugin_ipndm_step(field, ctx, _theta_for(thetas, ctx, n_steps),
                                     pool=pool, max_order=max_order)
    return step


BASELINE_STEPPERS = {
    "euler": euler_stepper,
    "heun": heun_stepper,
    "dpm2": dpm2_stepper,
    "ipndm": ipndm_stepper,
}
