"""Ensemble step parameters: unconstrained logits, their squashed forms,
and the checkpoint JSON format.

Each generation step owns K branches. Per branch the raw parameters are
four logits; squashing maps them into their constrained ranges:

    r     = sigmoid(r_logit)                 in (0, 1)
    lam   = softmax(lambda_logit)            on the simplex (across branches)
    s     = 1 + 0.1 (sigmoid(s_logit) - 0.5) in (0.95, 1.05)
    sigma = 1 + 0.1 (sigmoid(sigma_logit) - 0.5)

Materialization against a step interval (t_start > t_end) then gives the
quantities the solver consumes:

    tau   = t_start^r * t_end^(1-r)     geometric interpolation
    delta = (s - 1) tau                 branch time shift
    o     = sum_k lam_k sigma_k - 1     step-size correction, |o| <= 0.05

Everything is smooth in the logits; materialize_jacobian supplies the
analytic derivatives used to validate finite-difference training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .core import TimeSchedule
from .errors import ConfigError, InvariantError

SQUASH_HALF_WIDTH = 0.05
_RANGE_TOL = 1e-12
SIMPLEX_TOL = 1e-9
_CROSS_CHECK_TOL = 1e-6

RAW_FIELDS = ("r_logit", "lambda_logit", "s_logit", "sigma_logit")
MATERIALIZED_FIELDS = ("r", "lambda", "s", "sigma")


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def inverse_sigmoid(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise InvariantError(f"value {p} outside the open squash range (0, 1)")
    return np.log(p) - np.log1p(-p)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    m = z.max()
    e = np.exp(z - m)
    return e / e.sum()


@dataclass(frozen=True)
class RawStepParams:
    """Unconstrained per-step logits, each an array of length K."""

    r_logit: np.ndarray
    lambda_logit: np.ndarray
    s_logit: np.ndarray
    sigma_logit: np.ndarray

    def __post_init__(self):
        arrays = {}
        k = None
        for name in RAW_FIELDS:
            a = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if a.ndim != 1 or not np.all(np.isfinite(a)):
                raise ConfigError(f"{name} must be a finite 1-d array")
            if k is None:
                k = a.size
            elif a.size != k:
                raise ConfigError("logit arrays must share the branch count")
            arrays[name] = a
        for name, a in arrays.items():
            object.__setattr__(self, name, a)

    @property
    def k(self) -> int:
        return self.r_logit.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, name) for name in RAW_FIELDS])

    @classmethod
    def from_flat(cls, flat: np.ndarray, k: int) -> "RawStepParams":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (4 * k,):
            raise ConfigError(f"expected flat shape ({4 * k},), got {flat.shape}")
        parts = np.split(flat, 4)
        return cls(*parts)


@dataclass(frozen=True)
class MaterializedStepParams:
    """Solver-facing step parameters for one interval."""

    tau: np.ndarray
    lam: np.ndarray
    delta: np.ndarray
    o: float

    def __post_init__(self):
        for name in ("tau", "lam", "delta"):
            object.__setattr__(self, name,
                               np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @property
    def k(self) -> int:
        return self.tau.size


def squash(raw: RawStepParams) -> dict[str, np.ndarray]:
    """Constrained values {r, lam, s, sigma} from the logits."""
    return {
        "r": sigmoid(raw.r_logit),
        "lam": softmax(raw.lambda_logit),
        "s": 1.0 + 2.0 * SQUASH_HALF_WIDTH * (sigmoid(raw.s_logit) - 0.5),
        "sigma": 1.0 + 2.0 * SQUASH_HALF_WIDTH * (sigmoid(raw.sigma_logit) - 0.5),
    }


def materialize(raw: RawStepParams, t_start: float, t_end: float) -> MaterializedStepParams:
    """Bind raw logits to the interval (t_start, t_end), t_start > t_end > 0.

    tau lands strictly inside the interval; delta keeps tau + delta
    positive for any logits because |s - 1| < 0.05.
    """
    if not (t_start > t_end > 0.0):
        raise ConfigError(f"need t_start > t_end > 0, got ({t_start}, {t_end})")
    sq = squash(raw)
    tau = np.exp(sq["r"] * np.log(t_start) + (1.0 - sq["r"]) * np.log(t_end))
    delta = (sq["s"] - 1.0) * tau
    o = float(np.dot(sq["lam"], sq["sigma"]) - 1.0)
    return MaterializedStepParams(tau=tau, lam=sq["lam"], delta=delta, o=o)


def materialize_jacobian(raw: RawStepParams, t_start: float,
                         t_end: float) -> dict[str, np.ndarray]:
    """Analytic derivatives of the materialized outputs w.r.t. the logits.

    Keys: dtau_dr (K,), dlam_dlogit (K, K) with [i, j] = dlam_i/dlogit_j,
    ddelta_dr (K,), ddelta_ds (K,), do_dlam (K,), do_dsigma (K,).
    Derivatives not listed are identically zero.
    """
    sq = squash(raw)
    r = sq["r"]
    lam = sq["lam"]
    s = sq["s"]
    sigma = sq["sigma"]
    tau = np.exp(r * np.log(t_start) + (1.0 - r) * np.log(t_end))
    dr_dlogit = r * (1.0 - r)
    ds_dlogit = 2.0 * SQUASH_HALF_WIDTH * sigmoid(raw.s_logit) * (1.0 - sigmoid(raw.s_logit))
    dsig_dlogit = (2.0 * SQUASH_HALF_WIDTH
                   * sigmoid(raw.sigma_logit) * (1.0 - sigmoid(raw.sigma_logit)))
    dtau_dr = tau * (np.log(t_start) - np.log(t_end)) * dr_dlogit
    dlam = np.diag(lam) - np.outer(lam, lam)
    return {
        "dtau_dr": dtau_dr,
        "dlam_dlogit": dlam,
        "ddelta_dr": (s - 1.0) * dtau_dr,
        "ddelta_ds": tau * ds_dlogit,
        "do_dlam": dlam.T @ sigma,
        "do_dsigma": lam * dsig_dlogit,
    }


def init_default(n_steps: int, k: int) -> list[RawStepParams]:
    """Neutral initialization.

    Branch ratios evenly spaced in (0, 1) (K=2 gives {1/3, 2/3}), uniform
    mixture weights, and zero shift/correction logits so delta = 0, o = 0.
    """
    if n_steps < 1 or k < 1:
        raise ConfigError(f"need n_steps >= 1 and k >= 1, got ({n_steps}, {k})")
    targets = np.arange(1, k + 1) / (k + 1)
    r_logit = inverse_sigmoid(targets)
    zero = np.zeros(k)
    return [RawStepParams(r_logit=r_logit.copy(), lambda_logit=zero.copy(),
                          s_logit=zero.copy(), sigma_logit=zero.copy())
            for _ in range(n_steps)]


#----------------------------------------------------------------------------
# Checkpoint serialization.

CHECKPOINT_VERSION = 1
STAGES = ("distill", "rdpo")


@dataclass
class Checkpoint:
    stage: str
    schedule: TimeSchedule
    raw: list[RawStepParams]
    afs: bool = False
    model_id: str | None = None
    model: dict | None = None

    @property
    def k(self) -> int:
        return self.raw[0].k

    @property
    def n_steps(self) -> int:
        return len(self.raw)

    def materialize_all(self) -> list[MaterializedStepParams]:
        return [materialize(self.raw[n], *self.schedule.step_interval(n))
                for n in range(self.n_steps)]


def _branch_dicts(raw: RawStepParams) -> list[dict]:
    sq = squash(raw)
    out = []
    for k in range(raw.k):
        out.append({
            "r_logit": float(raw.r_logit[k]),
            "lambda_logit": float(raw.lambda_logit[k]),
            "s_logit": float(raw.s_logit[k]),
            "sigma_logit": float(raw.sigma_logit[k]),
            "r": float(sq["r"][k]),
            "lambda": float(sq["lam"][k]),
            "s": float(sq["s"][k]),
            "sigma": float(sq["sigma"][k]),
        })
    return out


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    d = {
        "version": CHECKPOINT_VERSION,
        "stage": ckpt.stage,
        "k": ckpt.k,
        "n_steps": ckpt.n_steps,
        "schedule": ckpt.schedule.to_dict(),
        "afs": bool(ckpt.afs),
        "steps": [{"n": n, "branches": _branch_dicts(ckpt.raw[n])}
                  for n in range(ckpt.n_steps)],
    }
    if ckpt.model_id is not None:
        d["model_id"] = ckpt.model_id
    if ckpt.model is not None:
        d["model"] = ckpt.model
    return d


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    with open(path, "w") as f:
        json.dump(checkpoint_to_dict(ckpt), f, indent=1, sort_keys=True)
        f.write("\n")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvariantError(msg)


def _logits_from_materialized(br: dict, lam_all: np.ndarray, idx: int) -> dict[str, float]:
    r = float(br["r"])
    s = float(br["s"])
    sigma = float(br["sigma"])
    _require(0.0 < r < 1.0, f"branch ratio r={r} outside (0, 1)")
    for name, v in (("s", s), ("sigma", sigma)):
        _require(abs(v - 1.0) <= SQUASH_HALF_WIDTH + _RANGE_TOL,
                 f"branch {name}={v} outside [{1 - SQUASH_HALF_WIDTH}, {1 + SQUASH_HALF_WIDTH}]")
    u_s = (s - 1.0) / (2.0 * SQUASH_HALF_WIDTH) + 0.5
    u_sig = (sigma - 1.0) / (2.0 * SQUASH_HALF_WIDTH) + 0.5
    return {
        "r_logit": float(inverse_sigmoid(r)),
        # softmax is shift-invariant; log(lam) recovers it exactly for a
        # normalized mixture
        "lambda_logit": float(np.log(lam_all[idx])),
        "s_logit": float(inverse_sigmoid(u_s)),
        "sigma_logit": float(inverse_sigmoid(u_sig)),
    }


def _parse_step(step: dict, n: int, k: int) -> RawStepParams:
    _require(isinstance(step, dict) and step.get("n") == n,
             f"step {n} missing or out of order")
    branches = step.get("branches")
    _require(isinstance(branches, list) and len(branches) == k,
             f"step {n} must have exactly {k} branches")
    have_raw = all(all(f in br for f in RAW_FIELDS) for br in branches)
    have_mat = all(all(f in br for f in MATERIALIZED_FIELDS) for br in branches)
    _require(have_raw or have_mat,
             f"step {n} branches need either all logits or all materialized values")

    if have_mat:
        lam_all = np.array([float(br["lambda"]) for br in branches])
        _require(np.all(lam_all > 0.0) and abs(float(lam_all.sum()) - 1.0) <= SIMPLEX_TOL,
                 f"step {n} mixture weights {lam_all} not on the simplex")
    if not have_raw:
        derived = [_logits_from_materialized(br, lam_all, i)
                   for i, br in enumerate(branches)]
        branches = [dict(br, **dv) for br, dv in zip(branches, derived)]

    raw = RawStepParams(
        r_logit=np.array([float(br["r_logit"]) for br in branches]),
        lambda_logit=np.array([float(br["lambda_logit"]) for br in branches]),
        s_logit=np.array([float(br["s_logit"]) for br in branches]),
        sigma_logit=np.array([float(br["sigma_logit"]) for br in branches]),
    )
    sq = squash(raw)
    _require(bool(np.all(np.abs(sq["s"] - 1.0) <= SQUASH_HALF_WIDTH + _RANGE_TOL)),
             f"step {n} scale s out of range after rematerialization")
    _require(bool(np.all(np.abs(sq["sigma"] - 1.0) <= SQUASH_HALF_WIDTH + _RANGE_TOL)),
             f"step {n} scale sigma out of range after rematerialization")
    _require(abs(float(sq["lam"].sum()) - 1.0) <= SIMPLEX_TOL,
             f"step {n} rematerialized mixture not on the simplex")
    if have_mat and have_raw:
        for name, key in (("r", "r"), ("s", "s"), ("sigma", "sigma")):
            stored = np.array([float(br[key]) for br in branches])
            _require(bool(np.all(np.abs(sq[name] - stored) <= _CROSS_CHECK_TOL)),
                     f"step {n}: stored {key} disagrees with its logits")
        stored_lam = np.array([float(br["lambda"]) for br in branches])
        _require(bool(np.all(np.abs(sq["lam"] - stored_lam) <= _CROSS_CHECK_TOL)),
                 f"step {n}: stored lambda disagrees with its logits")
    return raw


def checkpoint_from_dict(d: dict) -> Checkpoint:
    _require(isinstance(d, dict), "checkpoint must be a JSON object")
    for key in ("version", "stage", "k", "n_steps", "schedule", "steps"):
        _require(key in d, f"checkpoint missing required key {key!r}")
    _require(d["version"] == CHECKPOINT_VERSION,
             f"unsupported checkpoint version {d['version']!r}")
    _require(d["stage"] in STAGES, f"unknown stage {d['stage']!r}")
    k = d["k"]
    n_steps = d["n_steps"]
    _require(isinstance(k, int) and k >= 1, f"k must be a positive int, got {k!r}")
    _require(isinstance(n_steps, int) and n_steps >= 1,
             f"n_steps must be a positive int, got {n_steps!r}")
    try:
        schedule = TimeSchedule.from_dict(d["schedule"])
    except ConfigError as e:
        raise InvariantError(f"bad schedule in checkpoint: {e}") from e
    _require(schedule.n_steps == n_steps,
             f"schedule has {schedule.n_steps} intervals but n_steps={n_steps}")
    steps = d["steps"]
    _require(isinstance(steps, list) and len(steps) == n_steps,
             f"expected {n_steps} steps, got {len(steps) if isinstance(steps, list) else type(steps)}")
    raw = [_parse_step(step, n, k) for n, step in enumerate(steps)]
    ckpt = Checkpoint(stage=d["stage"], schedule=schedule, raw=raw,
                      afs=bool(d.get("afs", False)),
                      model_id=d.get("model_id"), model=d.get("model"))
    # materialization must succeed and respect the correction-range bound
    for theta in ckpt.materialize_all():
        _require(abs(theta.o) <= SQUASH_HALF_WIDTH + _RANGE_TOL,
                 f"step correction o={theta.o} out of range")
    return ckpt


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path) as f:
            d = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InvariantError(f"checkpoint {path} is not valid JSON: {e}") from e
    return checkpoint_from_dict(d)


def reference_checkpoint(para_nfe: int) -> Checkpoint:
    """Published K=2 reference parameters for the CIFAR-10 measurement,
    keyed by parallel evaluation budget (3, 5, 7, or 9)."""
    text = resources.files("epdlab.data").joinpath("cifar10_k2_reference.json").read_text()
    table = json.loads(text)
    key = str(para_nfe)
    if key not in table:
        raise ConfigError(f"no reference entry for Para. NFE {para_nfe}; "
                          f"have {sorted(table)}")
    return checkpoint_from_dict(table[key])
