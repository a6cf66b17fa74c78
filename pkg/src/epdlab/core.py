"""Probability-flow ODE core: time schedules, the integration driver, and
the high-accuracy reference integrator.

Convention: noise scale sigma(t) = t with unit data scaling, so the flow is

    dx/dt = eps(x, t),   eps(x, t) = -t * grad_x log p(x; t).

Generation runs t from t_max down to t_min. Schedules store their times in
increasing order with times[0] = t_min; generation step n moves the state
from times[n+1] to times[n], so step indices count down N-1, ..., 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError

SCHEDULE_KINDS = ("uniform", "polynomial", "logsnr")

DEFAULT_T_MIN = 0.002
DEFAULT_T_MAX = 80.0


class GradientField:
    """Interface for the flow gradient eps(x, t).

    Implementations must be read-only under evaluate so that concurrent
    branch evaluations are safe.
    """

    dim: int

    def evaluate(self, x: np.ndarray, t) -> np.ndarray:
        """eps at state x (..., dim) and time t (scalar, or broadcastable
        to the leading shape of x)."""
        raise NotImplementedError


@dataclass(frozen=True)
class TimeSchedule:
    """Discrete times t_0 < t_1 < ... < t_N with t_0 = t_min.

    kind is informational for serialization; times carry the truth.
    """

    times: np.ndarray
    kind: str = "custom"
    rho: float | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.size < 2:
            raise ConfigError("schedule needs at least two times")
        if not np.all(np.isfinite(t)):
            raise ConfigError("schedule times must be finite")
        if t[0] <= 0.0:
            raise ConfigError(f"schedule times must be positive, got t_min={t[0]}")
        if not np.all(np.diff(t) > 0.0):
            raise ConfigError("schedule times must be strictly increasing")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def step_interval(self, n: int) -> tuple[float, float]:
        """(t_start, t_end) for generation step n, with t_start > t_end."""
        return float(self.times[n + 1]), float(self.times[n])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "rho": self.rho,
            "times": [float(v) for v in self.times],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TimeSchedule":
        if "times" not in d:
            raise ConfigError("schedule dict missing 'times'")
        return cls(times=np.asarray(d["times"], dtype=float),
                   kind=str(d.get("kind", "custom")),
                   rho=d.get("rho"))


def make_schedule(kind: str, n_steps: int,
                  t_min: float = DEFAULT_T_MIN, t_max: float = DEFAULT_T_MAX,
                  rho: float = 7.0) -> TimeSchedule:
    """Build a named schedule with n_steps intervals.

    uniform     linear in t
    polynomial  t_i = (t_min^(1/rho) + (i/N) (t_max^(1/rho) - t_min^(1/rho)))^rho
    logsnr      uniform in log t
    """
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    if not (0.0 < t_min < t_max):
        raise ConfigError(f"need 0 < t_min < t_max, got ({t_min}, {t_max})")
    if kind == "uniform":
        times = np.linspace(t_min, t_max, n_steps + 1)
    elif kind == "polynomial":
        if rho <= 0:
            raise ConfigError(f"rho must be positive, got {rho}")
        i = np.arange(n_steps + 1) / n_steps
        root = t_min ** (1.0 / rho) + i * (t_max ** (1.0 / rho) - t_min ** (1.0 / rho))
        times = root ** rho
    elif kind == "logsnr":
        times = np.exp(np.linspace(np.log(t_min), np.log(t_max), n_steps + 1))
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    # endpoints must be exact regardless of transform roundoff
    times[0] = t_min
    times[-1] = t_max
    return TimeSchedule(times=times, kind=kind,
                        rho=rho if kind == "polynomial" else None)


def prior_sample(t_max: float, shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Draw x_{t_max} ~ N(0, t_max^2 I)."""
    return t_max * rng.standard_normal(tuple(shape))


@dataclass(frozen=True)
class StepContext:
    """Read-only inputs for one generation step.

    x moves from t_start down to t_end (t_end < t_start); index is the
    schedule step index n. history holds up to three past gradients, most
    recent first, for multistep rules. start_grad, when set, replaces the
    field evaluation at (x, t_start); the analytic first step supplies it.
    """

    x: np.ndarray
    t_start: float
    t_end: float
    index: int
    history: tuple[np.ndarray, ...] = ()
    start_grad: np.ndarray | None = None

    @property
    def h(self) -> float:
        """Signed step, negative during generation."""
        return self.t_end - self.t_start


@dataclass
class StepResult:
    x_next: np.ndarray
    nfe_total: int
    nfe_parallel: int
    history_grad: np.ndarray | None = None


Stepper = Callable[[GradientField, StepContext], StepResult]


@dataclass
class Trajectory:
    """States recorded at schedule times in generation order.

    times is strictly decreasing, times[0] = t_max; states[i] is the state
    at times[i], so states[-1] is the generated endpoint at t_min. The NFE
    counters distinguish total evaluations from parallel rounds (one round
    covers evaluations that can run concurrently).
    """

    times: np.ndarray
    states: np.ndarray
    nfe_total: int
    nfe_parallel: int

    def __post_init__(self):
        if not np.all(np.diff(self.times) < 0.0):
            raise ConfigError("trajectory times must be strictly decreasing")
        if len(self.states) != len(self.times):
            raise ConfigError("trajectory state/time length mismatch")

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def state_at_index(self, n: int) -> np.ndarray:
        """State at schedule index n (ascending-time convention)."""
        return self.states[len(self.times) - 1 - n]


MAX_HISTORY = 3


def afs_direction(x: np.ndarray, t: float) -> np.ndarray:
    """Analytic start direction d = x / t.

    At large t the flow gradient approaches x/t (the prior dominates), so
    the first step can skip its start-point evaluation.
    """
    return x / t


def _check_finite(x: np.ndarray, n: int, t: float) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite state after step {n} (t={t:g})",
                              step_index=n, t=t)


def integrate(field: GradientField, stepper: Stepper, schedule: TimeSchedule,
              x_init: np.ndarray, afs: bool = False) -> Trajectory:
    """Run stepper over the schedule from t_max down to t_min.

    With afs=True the first step's start-point gradient is the analytic
    direction instead of a field evaluation, saving one evaluation (and
    one parallel round) over the whole run.
    """
    times = schedule.times
    n_steps = schedule.n_steps
    x = np.asarray(x_init, dtype=float)
    states = [x]
    history: list[np.ndarray] = []
    nfe_total = 0
    nfe_parallel = 0
    for n in range(n_steps - 1, -1, -1):
        t_start, t_end = schedule.step_interval(n)
        start_grad = None
        if afs and n == n_steps - 1:
            start_grad = afs_direction(x, t_start)
        ctx = StepContext(x=x, t_start=t_start, t_end=t_end, index=n,
                          history=tuple(history), start_grad=start_grad)
        res = stepper(field, ctx)
        _check_finite(res.x_next, n, t_end)
        x = res.x_next
        states.append(x)
        nfe_total += res.nfe_total
        nfe_parallel += res.nfe_parallel
        if res.history_grad is not None:
            history.insert(0, res.history_grad)
            del history[MAX_HISTORY:]
    return Trajectory(times=times[::-1].copy(), states=np.stack(states),
                      nfe_total=nfe_total, nfe_parallel=nfe_parallel)


def reference_solve(field: GradientField, schedule: TimeSchedule,
                    x_init: np.ndarray, substeps: int = 100) -> Trajectory:
    """Classical RK4 with `substeps` uniform sub-intervals per schedule
    interval, recording states at the schedule times only.

    This is the accuracy oracle; it makes no attempt to be cheap.
    """
    if substeps < 1:
        raise ConfigError(f"substeps must be >= 1, got {substeps}")
    x = np.asarray(x_init, dtype=float)
    states = [x]
    nfe = 0
    for n in range(schedule.n_steps - 1, -1, -1):
        t_start, t_end = schedule.step_interval(n)
        hs = (t_end - t_start) / substeps
        t = t_start
        for _ in range(substeps):
            k1 = field.evaluate(x, t)
            k2 = field.evaluate(x + 0.5 * hs * k1, t + 0.5 * hs)
            k3 = field.evaluate(x + 0.5 * hs * k2, t + 0.5 * hs)
            k4 = field.evaluate(x + hs * k3, t + hs)
            x = x + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += hs
            nfe += 4
        _check_finite(x, n, t_end)
        states.append(x)
    return Trajectory(times=schedule.times[::-1].copy(), states=np.stack(states),
                      nfe_total=nfe, nfe_parallel=nfe)
