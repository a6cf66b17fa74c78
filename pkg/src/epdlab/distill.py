"""Stage 1: distill ensemble step parameters against a fine-grained teacher.

The teacher integrates the same probability-flow ODE on a refined schedule
(extra geometrically spaced times inside every student interval), producing
reference states at each student time.  Student parameters are then fit so
that the few-step trajectory matches those references, interval by interval,
from the noisy end of the schedule down to the data end.

Gradients are estimated by central finite differences on the unconstrained
logits.  The loss at student time t_n depends only on the parameter blocks of
steps n..N-1, so each inner iteration perturbs just that span.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
import time

import numpy as np

from .core import (GradientField, TimeSchedule, Trajectory, afs_direction,
                   integrate, prior_sample, reference_solve)
from .errors import ConfigError, DivergenceError
from .optim import Adam
from .params import Checkpoint, RawStepParams, init_default, materialize
from .solvers import dpm2_stepper, epd_step, heun_stepper, ipndm_stepper

TEACHER_SOLVERS = ("dpm2", "heun", "ipndm", "rk4")


@dataclass(frozen=True)
class TeacherConfig:
    solver: str = "dpm2"
    m_intermediate: int = 6
    # rk4 ignores m_intermediate and runs classic RK4 with `substeps`
    # uniform substeps inside each student interval instead.
    substeps: int = 100

    def __post_init__(self):
        if self.solver not in TEACHER_SOLVERS:
            raise ConfigError(f"unknown teacher solver {self.solver!r}, "
                              f"expected one of {TEACHER_SOLVERS}")
        if self.solver != "rk4" and self.m_intermediate < 1:
            raise ConfigError("m_intermediate must be >= 1")
        if self.solver == "rk4" and self.substeps < 1:
            raise ConfigError("substeps must be >= 1")


def build_teacher_schedule(student: TimeSchedule, m_intermediate: int) -> TimeSchedule:
    """Insert m geometrically spaced times inside each student interval.

    Student times are kept bitwise intact, so teacher index (m+1)*n lands
    exactly on student index n.
    """
    if m_intermediate < 1:
        raise ConfigError("m_intermediate must be >= 1")
    ts = student.times
    out = []
    for n in range(student.n_steps):
        seg = np.exp(np.linspace(np.log(ts[n]), np.log(ts[n + 1]),
                                 m_intermediate + 2))
        seg[0] = ts[n]
        out.append(seg[:-1])
    out.append(ts[-1:])
    times = np.concatenate(out)
    return TimeSchedule(times=times, kind="teacher", rho=student.rho)


def _teacher_stepper(cfg: TeacherConfig):
    if cfg.solver == "dpm2":
        return dpm2_stepper()
    if cfg.solver == "heun":
        return heun_stepper()
    return ipndm_stepper()


def teacher_reference(field: GradientField, student: TimeSchedule,
                      cfg: TeacherConfig, x_init: np.ndarray) -> np.ndarray:
    """Reference states at every student time, shape (N+1, *batch, dim).

    refs[n] approximates the exact flow at student time times[n]; refs[N]
    is x_init itself.  x_init may be a batch.
    """
    n = student.n_steps
    if cfg.solver == "rk4":
        traj = reference_solve(field, student, x_init, substeps=cfg.substeps)
        return np.stack([traj.state_at_index(i) for i in range(n + 1)])
    teacher = build_teacher_schedule(student, cfg.m_intermediate)
    traj = integrate(field, _teacher_stepper(cfg), teacher, x_init, afs=False)
    stride = cfg.m_intermediate + 1
    return np.stack([traj.state_at_index(i * stride) for i in range(n + 1)])


def simulate_to(field: GradientField, schedule: TimeSchedule,
                raws: tuple[RawStepParams, ...], x_init: np.ndarray,
                stop_index: int = 0, afs: bool = False,
                pool=None) -> np.ndarray:
    """Run the ensemble student from times[N] down to times[stop_index].

    Returns only the final state; used inside the finite-difference loss
    where full trajectories would be wasted work.
    """
    n_steps = schedule.n_steps
    if len(raws) != n_steps:
        raise ConfigError(f"got {len(raws)} parameter blocks for "
                          f"{n_steps} steps")
    if not 0 <= stop_index <= n_steps:
        raise ConfigError(f"stop_index {stop_index} outside [0, {n_steps}]")
    x = np.asarray(x_init, dtype=float)
    from .core import StepContext  # local import keeps module load cheap
    for n in range(n_steps - 1, stop_index - 1, -1):
        t_start, t_end = schedule.step_interval(n)
        start_grad = afs_direction(x, t_start) if (afs and n == n_steps - 1) else None
        ctx = StepContext(x=x, t_start=t_start, t_end=t_end, index=n,
                          history=(), start_grad=start_grad)
        theta = materialize(raws[n], t_start, t_end)
        res = epd_step(field, ctx, theta, pool=pool)
        x = res.x_next
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite state during student rollout",
                                  step_index=n, t=t_end)
    return x


def distill_loss(x: np.ndarray, y: np.ndarray) -> float:
    """Mean over the batch of the squared L2 distance along the last axis."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return float(np.mean(np.sum(d * d, axis=-1)))


def estimate_gradient(fn, params: np.ndarray, fd_step: float = 1e-4,
                      indices=None) -> np.ndarray:
    """Central finite differences of a scalar function, O(fd_step^2)."""
    p = np.asarray(params, dtype=float)
    grad = np.zeros_like(p)
    idx = range(p.size) if indices is None else indices
    for i in idx:
        bump = np.zeros_like(p)
        bump[i] = fd_step
        grad[i] = (fn(p + bump) - fn(p - bump)) / (2.0 * fd_step)
    return grad


def fd_order_estimate(fn, params: np.ndarray, index: int,
                      fd_step: float = 2e-3) -> float:
    """Observed convergence order of the central difference at one coordinate.

    Halves the step twice and compares successive estimates; a correct
    central scheme on a smooth function gives roughly 2.
    """
    vals = []
    for h in (fd_step, fd_step / 2.0, fd_step / 4.0):
        g = estimate_gradient(fn, params, fd_step=h, indices=[index])
        vals.append(g[index])
    d1 = abs(vals[0] - vals[1])
    d2 = abs(vals[1] - vals[2])
    if d2 == 0.0:
        return np.inf
    return float(np.log2(d1 / d2))


def _pack(raws) -> np.ndarray:
    return np.concatenate([r.flatten() for r in raws])


def _unpack(flat: np.ndarray, n_steps: int, k: int) -> tuple[RawStepParams, ...]:
    width = 4 * k
    return tuple(RawStepParams.from_flat(flat[n * width:(n + 1) * width], k)
                 for n in range(n_steps))


@dataclass
class DistillResult:
    checkpoint: Checkpoint
    # loss_history[e, n] is the mean of the step-n loss over the batches of
    # epoch e, measured before that epoch's updates to block n.
    loss_history: np.ndarray
    epoch_seconds: list = dataclass_field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return float(self.loss_history[-1, 0])


def train_distill(field: GradientField, schedule: TimeSchedule, k: int,
                  teacher: TeacherConfig | None = None, epochs: int = 40,
                  batch_size: int = 64, cache_size: int = 2048,
                  lr: float = 0.01, fd_step: float = 1e-4,
                  afs: bool = False, seed: int = 0,
                  init: tuple[RawStepParams, ...] | None = None,
                  model=None, model_id: str | None = None,
                  progress=None) -> DistillResult:
    """Fit ensemble step parameters to a fine teacher on cached noise draws.

    The outer loop shuffles a fixed cache of prior samples into minibatches.
    For each minibatch the inner loop walks n = N-1 .. 0 and applies one
    update to the blocks of steps n..N-1, so early-schedule blocks get
    refined against every downstream target.  Each step block owns its own
    Adam state.
    """
    if teacher is None:
        teacher = TeacherConfig()
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    if cache_size < batch_size:
        raise ConfigError("cache_size must be >= batch_size")
    n_steps = schedule.n_steps
    width = 4 * k

    rng = np.random.default_rng(seed)
    noises = prior_sample(schedule.t_max, (cache_size, field.dim), rng)
    refs = teacher_reference(field, schedule, teacher, noises)

    raws = init if init is not None else init_default(n_steps, k)
    if len(raws) != n_steps or any(r.k != k for r in raws):
        raise ConfigError("init does not match n_steps and k")
    flat = _pack(raws)
    adams = [Adam(width, lr) for _ in range(n_steps)]

    loss_history = np.zeros((epochs, n_steps))
    epoch_seconds = []
    n_batches = cache_size // batch_size

    for epoch in range(epochs):
        tic = time.perf_counter()
        perm = rng.permutation(cache_size)
        sums = np.zeros(n_steps)
        for b in range(n_batches):
            sel = perm[b * batch_size:(b + 1) * batch_size]
            x_init = noises[sel]
            for n in range(n_steps - 1, -1, -1):
                lo = n * width
                target = refs[n][sel]

                def span_loss(sub):
                    local = _unpack(np.concatenate([flat[:lo], sub]),
                                    n_steps, k)
                    x = simulate_to(field, schedule, local, x_init,
                                    stop_index=n, afs=afs)
                    return distill_loss(x, target)

                sums[n] += span_loss(flat[lo:])
                grad = estimate_gradient(span_loss, flat[lo:], fd_step=fd_step)
                for j in range(n, n_steps):
                    seg = slice((j - n) * width, (j - n + 1) * width)
                    flat[j * width:(j + 1) * width] = adams[j].step(
                        flat[j * width:(j + 1) * width], grad[seg])
        loss_history[epoch] = sums / n_batches
        epoch_seconds.append(time.perf_counter() - tic)
        if progress is not None:
            progress(epoch, loss_history[epoch])

    ckpt = Checkpoint(stage="distill", schedule=schedule,
                      raw=_unpack(flat, n_steps, k), afs=afs,
                      model_id=model_id, model=model)
    return DistillResult(checkpoint=ckpt, loss_history=loss_history,
                         epoch_seconds=epoch_seconds)


def evaluate_endpoint_error(field: GradientField, schedule: TimeSchedule,
                            ckpt: Checkpoint, teacher: TeacherConfig,
                            x_init: np.ndarray) -> float:
    """Mean squared endpoint distance to the teacher on given noise draws."""
    refs = teacher_reference(field, schedule, teacher, x_init)
    x = simulate_to(field, schedule, ckpt.raw, x_init, stop_index=0,
                    afs=ckpt.afs)
    return distill_loss(x, refs[0])
