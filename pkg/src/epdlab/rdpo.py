"""Stage 2: residual Dirichlet policy optimization of solver parameters.

A stochastic solver is built around a distilled checkpoint: per step, branch
positions come from a Dirichlet over interval segments (linear time, ordered)
and mixture weights from a Dirichlet over the simplex.  Base concentrations
are pinned so the policy mode at zero residual reproduces the distilled
solver; training moves only log-space residuals on the concentrations.

Updates use group rollouts that share the initial noise, leave-one-out
advantages, the clipped ratio surrogate, and a KL penalty toward the base
policy.  Gradients are analytic through alpha = base * exp(residual).

Probe-time offsets and the overshoot scale stay frozen at their Stage-1
values; only positions and mixture weights are stochastic.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import time

import numpy as np

from .core import TimeSchedule, integrate, prior_sample, reference_solve
from .dirichlet import (PolicyConcentrations, dirichlet_grad_log_pdf,
                        dirichlet_kl, dirichlet_kl_grad, dirichlet_log_pdf,
                        dirichlet_mode, dirichlet_sample, init_base,
                        positions_to_segments, segments_to_positions)
from .errors import ConfigError, DivergenceError, InvariantError
from .optim import Adam
from .parallel import parallel_map
from .params import Checkpoint, MaterializedStepParams
from .solvers import epd_stepper

POLICY_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RdpoConfig:
    clip_eps: float = 0.2
    kl_coeff: float = 0.01
    lr: float = 7e-5
    group_size: int = 4
    contexts_per_iter: int = 8
    epochs_per_batch: int = 1
    kappa: float = 20.0
    pool_size: int = 512
    ref_substeps: int = 1000

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.kl_coeff < 0.0:
            raise ConfigError("kl_coeff must be nonnegative")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2 for leave-one-out "
                              "baselines")
        if self.contexts_per_iter < 1 or self.epochs_per_batch < 1:
            raise ConfigError("contexts_per_iter and epochs_per_batch "
                              "must be >= 1")
        if self.kappa <= 0.0:
            raise ConfigError("kappa must be positive")
        if self.pool_size < self.contexts_per_iter:
            raise ConfigError("pool_size must cover contexts_per_iter")
        if self.ref_substeps < 1:
            raise ConfigError("ref_substeps must be >= 1")


@dataclass
class DirichletPolicy:
    """Stochastic solver policy: per-step Dirichlets plus frozen extras.

    delta is the trainable flat residual, laid out per step as the position
    block (k+1) followed by the mixture block (k), steps in ascending order.
    """

    schedule: TimeSchedule
    k: int
    base_pos: np.ndarray      # (n_steps, k+1)
    base_mix: np.ndarray      # (n_steps, k)
    frozen_delta: np.ndarray  # (n_steps, k) probe-time offsets
    frozen_o: np.ndarray      # (n_steps,) overshoot scales
    delta: np.ndarray         # (n_steps, 2k+1) log-space residuals
    kappa: float
    afs: bool = False

    def __post_init__(self):
        n, k = self.schedule.n_steps, self.k
        self.base_pos = np.asarray(self.base_pos, dtype=float)
        self.base_mix = np.asarray(self.base_mix, dtype=float)
        self.frozen_delta = np.asarray(self.frozen_delta, dtype=float)
        self.frozen_o = np.asarray(self.frozen_o, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)
        shapes = {"base_pos": (n, k + 1), "base_mix": (n, k),
                  "frozen_delta": (n, k), "frozen_o": (n,),
                  "delta": (n, 2 * k + 1)}
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ConfigError(f"policy field {name} has shape {got}, "
                                  f"expected {want}")
        if np.any(self.base_pos <= 0.0) or np.any(self.base_mix <= 0.0):
            raise ConfigError("base concentrations must be positive")

    @property
    def n_steps(self) -> int:
        return self.schedule.n_steps

    @property
    def delta_size(self) -> int:
        return self.delta.size

    def step_concentrations(self, n: int) -> PolicyConcentrations:
        return PolicyConcentrations(base_pos=self.base_pos[n],
                                    base_mix=self.base_mix[n],
                                    delta_pos=self.delta[n, :self.k + 1],
                                    delta_mix=self.delta[n, self.k + 1:])

    def alpha_pos(self, n: int) -> np.ndarray:
        return self.base_pos[n] * np.exp(self.delta[n, :self.k + 1])

    def alpha_mix(self, n: int) -> np.ndarray:
        return self.base_mix[n] * np.exp(self.delta[n, self.k + 1:])

    def get_delta(self) -> np.ndarray:
        return self.delta.ravel().copy()

    def set_delta(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.delta.size:
            raise ConfigError("residual vector has the wrong size")
        self.delta = flat.reshape(self.delta.shape).copy()


def policy_from_checkpoint(ckpt: Checkpoint, kappa: float = 20.0) -> DirichletPolicy:
    """Base policy whose mode reproduces the distilled solver.

    Stage-1 branch positions are unordered; the policy's segment view needs
    them ordered along the generation direction, so branches are sorted per
    step and the mixture weights and frozen offsets permuted to match.  A
    reordered branch sum can differ from the original only by float
    reassociation.
    """
    if kappa <= 0.0:
        raise ConfigError("kappa must be positive")
    n_steps, k = ckpt.n_steps, ckpt.k
    base_pos = np.zeros((n_steps, k + 1))
    base_mix = np.zeros((n_steps, k))
    frozen_delta = np.zeros((n_steps, k))
    frozen_o = np.zeros(n_steps)
    for n, theta in enumerate(ckpt.materialize_all()):
        t_start, t_end = ckpt.schedule.step_interval(n)
        ratio = (theta.tau - t_start) / (t_end - t_start)
        order = np.argsort(ratio, kind="stable")
        segments = positions_to_segments(theta.tau[order], t_start, t_end)
        base_pos[n] = init_base(segments, kappa)
        base_mix[n] = init_base(theta.lam[order], kappa)
        frozen_delta[n] = theta.delta[order]
        frozen_o[n] = theta.o
    return DirichletPolicy(schedule=ckpt.schedule, k=k, base_pos=base_pos,
                           base_mix=base_mix, frozen_delta=frozen_delta,
                           frozen_o=frozen_o,
                           delta=np.zeros((n_steps, 2 * k + 1)), kappa=kappa,
                           afs=ckpt.afs)


def mode_thetas(policy: DirichletPolicy) -> tuple[MaterializedStepParams, ...]:
    """Deterministic solver parameters from the per-step Dirichlet modes."""
    out = []
    for n in range(policy.n_steps):
        t_start, t_end = policy.schedule.step_interval(n)
        segments = dirichlet_mode(policy.alpha_pos(n), clamp=True)
        tau = segments_to_positions(segments, t_start, t_end)
        lam = dirichlet_mode(policy.alpha_mix(n), clamp=True)
        out.append(MaterializedStepParams(tau=tau, lam=lam,
                                          delta=policy.frozen_delta[n],
                                          o=float(policy.frozen_o[n])))
    return tuple(out)


def sample_solver_params(policy: DirichletPolicy, rng: np.random.Generator):
    """Draw per-step segments and mixture weights; return the joint log-prob.

    Returns (draws_pos (N, k+1), draws_mix (N, k), logp).
    """
    n_steps, k = policy.n_steps, policy.k
    draws_pos = np.zeros((n_steps, k + 1))
    draws_mix = np.zeros((n_steps, k))
    logp = 0.0
    for n in range(n_steps):
        a_pos, a_mix = policy.alpha_pos(n), policy.alpha_mix(n)
        draws_pos[n] = dirichlet_sample(a_pos, rng)
        draws_mix[n] = dirichlet_sample(a_mix, rng)
        logp += float(dirichlet_log_pdf(a_pos, draws_pos[n]))
        logp += float(dirichlet_log_pdf(a_mix, draws_mix[n]))
    if not np.isfinite(logp):
        raise InvariantError("non-finite rollout log-probability")
    return draws_pos, draws_mix, logp


def thetas_from_draws(policy: DirichletPolicy, draws_pos: np.ndarray,
                      draws_mix: np.ndarray) -> tuple[MaterializedStepParams, ...]:
    out = []
    for n in range(policy.n_steps):
        t_start, t_end = policy.schedule.step_interval(n)
        tau = segments_to_positions(draws_pos[n], t_start, t_end)
        out.append(MaterializedStepParams(tau=tau, lam=draws_mix[n],
                                          delta=policy.frozen_delta[n],
                                          o=float(policy.frozen_o[n])))
    return tuple(out)


def rollout_log_prob(policy: DirichletPolicy, draws_pos: np.ndarray,
                     draws_mix: np.ndarray) -> float:
    logp = 0.0
    for n in range(policy.n_steps):
        logp += float(dirichlet_log_pdf(policy.alpha_pos(n), draws_pos[n]))
        logp += float(dirichlet_log_pdf(policy.alpha_mix(n), draws_mix[n]))
    return logp


def rollout_grad_log_prob(policy: DirichletPolicy, draws_pos: np.ndarray,
                          draws_mix: np.ndarray) -> np.ndarray:
    """d log pi / d delta, flat (delta_size,); chain rule through
    alpha = base * exp(delta) multiplies the alpha-gradient by alpha."""
    grad = np.zeros_like(policy.delta)
    for n in range(policy.n_steps):
        a_pos, a_mix = policy.alpha_pos(n), policy.alpha_mix(n)
        grad[n, :policy.k + 1] = dirichlet_grad_log_pdf(
            a_pos, draws_pos[n]) * a_pos
        grad[n, policy.k + 1:] = dirichlet_grad_log_pdf(
            a_mix, draws_mix[n]) * a_mix
    return grad.ravel()


def policy_kl(policy: DirichletPolicy) -> float:
    """Sum of per-step KLs from the current policy to its base."""
    total = 0.0
    for n in range(policy.n_steps):
        total += dirichlet_kl(policy.alpha_pos(n), policy.base_pos[n])
        total += dirichlet_kl(policy.alpha_mix(n), policy.base_mix[n])
    return total


def policy_kl_grad(policy: DirichletPolicy) -> np.ndarray:
    grad = np.zeros_like(policy.delta)
    for n in range(policy.n_steps):
        a_pos, a_mix = policy.alpha_pos(n), policy.alpha_mix(n)
        grad[n, :policy.k + 1] = dirichlet_kl_grad(
            a_pos, policy.base_pos[n]) * a_pos
        grad[n, policy.k + 1:] = dirichlet_kl_grad(
            a_mix, policy.base_mix[n]) * a_mix
    return grad.ravel()


def toy_reward(x0: np.ndarray, reference_x0: np.ndarray) -> float:
    """Negative squared endpoint distance; 0 at exact agreement."""
    x0 = np.asarray(x0, dtype=float)
    reference_x0 = np.asarray(reference_x0, dtype=float)
    if x0.shape != reference_x0.shape:
        raise ConfigError(f"endpoint shape {x0.shape} does not match "
                          f"reference {reference_x0.shape}")
    d = x0 - reference_x0
    return -float(np.sum(d * d))


def rloo_advantages(rewards: np.ndarray) -> np.ndarray:
    """Leave-one-out advantages: subtract the mean of the other rewards."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ConfigError("need at least 2 rewards per group")
    total = np.sum(r)
    return r - (total - r) / (r.size - 1)


def ppo_surrogate(logp_new, logp_old, advantage, clip_eps: float):
    """Per-sample clipped surrogate loss (to be minimized)."""
    ratio = np.exp(np.asarray(logp_new, dtype=float)
                   - np.asarray(logp_old, dtype=float))
    advantage = np.asarray(advantage, dtype=float)
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage
    return -np.minimum(unclipped, clipped)


@dataclass
class RolloutGroup:
    """G candidate rollouts that share one initial noise."""

    context_id: int
    x_init: np.ndarray
    reference: np.ndarray
    draws_pos: np.ndarray  # (G, n_steps, k+1)
    draws_mix: np.ndarray  # (G, n_steps, k)
    logp_old: np.ndarray   # (G,)
    endpoints: np.ndarray  # (G, dim)
    rewards: np.ndarray    # (G,)

    def __post_init__(self):
        g = self.rewards.size
        if g < 2:
            raise ConfigError("rollout groups need G >= 2")
        if not np.all(np.isfinite(self.logp_old)):
            raise InvariantError("non-finite log-probabilities in group")

    @property
    def group_size(self) -> int:
        return self.rewards.size

    def advantages(self) -> np.ndarray:
        return rloo_advantages(self.rewards)


def rollout_endpoint(field, policy: DirichletPolicy,
                     thetas: tuple[MaterializedStepParams, ...],
                     x_init: np.ndarray, pool=None) -> np.ndarray:
    traj = integrate(field, epd_stepper(thetas, policy.n_steps, pool=pool),
                     policy.schedule, x_init, afs=policy.afs)
    return traj.endpoint


def collect_group(field, policy: DirichletPolicy, context_id: int,
                  x_init: np.ndarray, reference: np.ndarray, group_size: int,
                  rngs, pool=None) -> RolloutGroup:
    """Roll out G sampled solvers from one shared noise.

    rngs must supply one independent generator per candidate; rollouts can
    run concurrently, results reduce in candidate order.
    """
    if len(rngs) != group_size:
        raise ConfigError("need one rng per group member")

    def one(rng):
        draws_pos, draws_mix, logp = sample_solver_params(policy, rng)
        thetas = thetas_from_draws(policy, draws_pos, draws_mix)
        x0 = rollout_endpoint(field, policy, thetas, x_init)
        return draws_pos, draws_mix, logp, x0, toy_reward(x0, reference)

    results = parallel_map(one, list(rngs), pool)
    return RolloutGroup(
        context_id=context_id, x_init=x_init, reference=reference,
        draws_pos=np.stack([r[0] for r in results]),
        draws_mix=np.stack([r[1] for r in results]),
        logp_old=np.array([r[2] for r in results]),
        endpoints=np.stack([r[3] for r in results]),
        rewards=np.array([r[4] for r in results]))


def _flatten_groups(groups):
    advs, logps, draw_pairs = [], [], []
    for grp in groups:
        a = grp.advantages()
        for g in range(grp.group_size):
            advs.append(a[g])
            logps.append(grp.logp_old[g])
            draw_pairs.append((grp.draws_pos[g], grp.draws_mix[g]))
    return np.array(advs), np.array(logps), draw_pairs


def rdpo_objective(policy: DirichletPolicy, groups, cfg: RdpoConfig) -> float:
    """Mean clipped surrogate plus the KL penalty, at the current residuals."""
    advs, logp_old, draw_pairs = _flatten_groups(groups)
    logp_new = np.array([rollout_log_prob(policy, dp, dm)
                         for dp, dm in draw_pairs])
    loss = ppo_surrogate(logp_new, logp_old, advs, cfg.clip_eps)
    return float(np.mean(loss) + cfg.kl_coeff * policy_kl(policy))


def rdpo_gradient(policy: DirichletPolicy, groups, cfg: RdpoConfig):
    """Analytic gradient of rdpo_objective w.r.t. the flat residuals.

    Returns (grad, stats) where stats carries the surrogate diagnostics.
    """
    advs, logp_old, draw_pairs = _flatten_groups(groups)
    logp_new = np.array([rollout_log_prob(policy, dp, dm)
                         for dp, dm in draw_pairs])
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * advs
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advs
    active = unclipped <= clipped  # min picks the unclipped branch
    grad = np.zeros(policy.delta_size)
    for j, (dp, dm) in enumerate(draw_pairs):
        if active[j]:
            grad -= advs[j] * ratio[j] * rollout_grad_log_prob(policy, dp, dm)
    grad /= len(draw_pairs)
    kl_value = policy_kl(policy)
    if cfg.kl_coeff > 0.0:
        grad = grad + cfg.kl_coeff * policy_kl_grad(policy)
    objective = float(np.mean(-np.minimum(unclipped, clipped))
                      + cfg.kl_coeff * kl_value)
    stats = {
        "objective": objective,
        "mean_kl": kl_value,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
    }
    return grad, stats


def policy_update(policy: DirichletPolicy, groups, cfg: RdpoConfig,
                  adam: Adam | None = None) -> dict:
    """Apply epochs_per_batch gradient steps to the residuals in place."""
    if adam is None:
        adam = Adam(policy.delta_size, cfg.lr)
    rewards = np.concatenate([grp.rewards for grp in groups])
    stats = {}
    for _ in range(cfg.epochs_per_batch):
        grad, stats = rdpo_gradient(policy, groups, cfg)
        if not np.isfinite(stats["objective"]) or not np.all(np.isfinite(grad)):
            raise DivergenceError("non-finite policy objective")
        policy.set_delta(adam.step(policy.get_delta(), grad))
    stats["mean_reward"] = float(np.mean(rewards))
    return stats


@dataclass
class RdpoResult:
    policy: DirichletPolicy
    # rows: iteration, mean_reward, mean_kl, clip_fraction, wall_time
    history: np.ndarray
    config: RdpoConfig

    @property
    def reward_curve(self) -> np.ndarray:
        return self.history[:, 1]


def train_rdpo(field, ckpt: Checkpoint, cfg: RdpoConfig | None = None,
               iterations: int = 200, seed: int = 0, pool=None,
               progress=None) -> RdpoResult:
    """Fine-tune a distilled checkpoint against the fine-solver reward.

    Contexts (initial noises standing in for prompts) are drawn from a fixed
    pre-referenced pool each iteration; every context spawns group_size
    rollouts sharing its noise.  Rngs are keyed by (seed, iteration, context,
    candidate) so the reward curve is reproducible regardless of how
    rollouts are scheduled.
    """
    if cfg is None:
        cfg = RdpoConfig()
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    policy = policy_from_checkpoint(ckpt, kappa=cfg.kappa)
    schedule = policy.schedule

    pool_rng = np.random.default_rng([seed, 0])
    noises = prior_sample(schedule.t_max, (cfg.pool_size, field.dim), pool_rng)
    refs = reference_solve(field, schedule, noises,
                           substeps=cfg.ref_substeps).endpoint

    adam = Adam(policy.delta_size, cfg.lr)
    history = np.zeros((iterations, 5))
    for it in range(iterations):
        tic = time.perf_counter()
        select_rng = np.random.default_rng([seed, 1, it])
        chosen = select_rng.choice(cfg.pool_size, size=cfg.contexts_per_iter,
                                   replace=False)
        groups = []
        for c in chosen:
            rngs = [np.random.default_rng([seed, 2, it, int(c), g])
                    for g in range(cfg.group_size)]
            groups.append(collect_group(field, policy, int(c), noises[c],
                                        refs[c], cfg.group_size, rngs,
                                        pool=pool))
        stats = policy_update(policy, groups, cfg, adam)
        history[it] = (it, stats["mean_reward"], stats["mean_kl"],
                       stats["clip_fraction"], time.perf_counter() - tic)
        if progress is not None:
            progress(it, stats)
    return RdpoResult(policy=policy, history=history, config=cfg)


def policy_to_dict(policy: DirichletPolicy) -> dict:
    return {
        "version": POLICY_SCHEMA_VERSION,
        "kind": "dirichlet-policy",
        "k": policy.k,
        "kappa": policy.kappa,
        "afs": policy.afs,
        "schedule": policy.schedule.to_dict(),
        "base_pos": policy.base_pos.tolist(),
        "base_mix": policy.base_mix.tolist(),
        "frozen_delta": policy.frozen_delta.tolist(),
        "frozen_o": policy.frozen_o.tolist(),
        "delta": policy.delta.tolist(),
    }


def policy_from_dict(data: dict) -> DirichletPolicy:
    if not isinstance(data, dict) or data.get("kind") != "dirichlet-policy":
        raise InvariantError("not a policy file")
    if data.get("version") != POLICY_SCHEMA_VERSION:
        raise InvariantError(f"unsupported policy version {data.get('version')}")
    try:
        schedule = TimeSchedule.from_dict(data["schedule"])
        policy = DirichletPolicy(
            schedule=schedule, k=int(data["k"]),
            base_pos=np.array(data["base_pos"], dtype=float),
            base_mix=np.array(data["base_mix"], dtype=float),
            frozen_delta=np.array(data["frozen_delta"], dtype=float),
            frozen_o=np.array(data["frozen_o"], dtype=float),
            delta=np.array(data["delta"], dtype=float),
            kappa=float(data["kappa"]), afs=bool(data["afs"]))
    except KeyError as exc:
        raise InvariantError(f"policy file missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise InvariantError(f"malformed policy file: {exc}") from exc
    return policy


def save_policy(policy: DirichletPolicy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy_to_dict(policy), fh, indent=2)
        fh.write("\n")


def load_policy(path) -> DirichletPolicy:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read policy file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvariantError(f"policy file {path} is not valid JSON: "
                             f"{exc}") from exc
    return policy_from_dict(data)
