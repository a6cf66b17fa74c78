"""Analytic toy diffusion models with exact flow gradients.

A Gaussian mixture smoothed by the noising kernel stays a Gaussian mixture:
at time t, component j has covariance (s_j^2 + t^2) I. That makes the score
(and hence the flow gradient) exact, so solver error can be measured without
a trained network in the loop.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import GradientField
from .errors import ConfigError

_SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class GmmModel:
    """Mixture of J isotropic Gaussians in R^d.

    weights (J,) nonnegative, summing to 1; means (J, d); stds (J,) positive
    per-component standard deviations of the clean data.
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.atleast_1d(np.asarray(self.stds, dtype=float))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", s)
        if mu.ndim != 2:
            raise ConfigError("means must be a (J, d) array")
        j = mu.shape[0]
        if w.shape != (j,) or s.shape != (j,):
            raise ConfigError("weights, means, stds must agree on component count")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _SIMPLEX_TOL:
            raise ConfigError("weights must be nonnegative and sum to 1")
        if np.any(s <= 0):
            raise ConfigError("stds must be positive")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(),
                "means": self.means.tolist(),
                "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        try:
            return cls(weights=np.asarray(d["weights"], dtype=float),
                       means=np.asarray(d["means"], dtype=float),
                       stds=np.asarray(d["stds"], dtype=float))
        except KeyError as e:
            raise ConfigError(f"model dict missing key {e.args[0]!r}") from e

    @classmethod
    def from_json_file(cls, path: str) -> "GmmModel":
        try:
            with open(path) as f:
                d = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read model file {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"model file {path} is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"model file {path} must contain a JSON object")
        return cls.from_dict(d)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n clean data points from the mixture."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        return self.means[comp] + self.stds[comp, None] * rng.standard_normal((n, self.dim))


def default_validation_model() -> GmmModel:
    """Four well-separated components at (+-4, +-4), std 0.5, equal weights."""
    means = np.array([[4.0, 4.0], [4.0, -4.0], [-4.0, 4.0], [-4.0, -4.0]])
    return GmmModel(weights=np.full(4, 0.25), means=means, stds=np.full(4, 0.5))


class GmmField(GradientField):
    """Exact flow gradient for a GmmModel.

    eps(x, t) = -t grad_x log p(x; t)
              = t * sum_j gamma_j(x, t) (x - mu_j) / (s_j^2 + t^2)

    with responsibilities gamma computed through log-sum-exp.
    """

    def __init__(self, model: GmmModel):
        self.model = model
        self.dim = model.dim

    def _log_components(self, x: np.ndarray, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m = self.model
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        diff = x[..., None, :] - m.means                    # (..., J, d)
        var = m.stds ** 2 + t[..., None] ** 2               # (..., J)
        sq = np.sum(diff * diff, axis=-1)                   # (..., J)
        logc = (np.log(m.weights) - 0.5 * m.dim * np.log(2.0 * np.pi * var)
                - 0.5 * sq / var)
        return logc, diff, var

    def log_density(self, x: np.ndarray, t) -> np.ndarray:
        logc, _, _ = self._log_components(x, t)
        return logsumexp(logc, axis=-1)

    def score(self, x: np.ndarray, t) -> np.ndarray:
        """grad_x log p(x; t)."""
        logc, diff, var = self._log_components(x, t)
        gamma = np.exp(logc - logsumexp(logc, axis=-1, keepdims=True))
        return -np.sum((gamma / var)[..., None] * diff, axis=-2)

    def evaluate(self, x: np.ndarray, t) -> np.ndarray:
        t_arr = np.asarray(t, dtype=float)
        return -t_arr[..., None] * self.score(x, t)


def exact_flow(model: GmmModel, x: np.ndarray, t_from: float, t_to: float) -> np.ndarray:
    """Closed-form flow map for a single-component model.

    The flow of an isotropic Gaussian contracts radially around the mean:

        x(t_to) = mu + (x - mu) sqrt(s^2 + t_to^2) / sqrt(s^2 + t_from^2)

    Raises ConfigError for mixtures with more than one component, where no
    closed form exists.
    """
    if model.n_components != 1:
        raise ConfigError("exact_flow requires a single-component model")
    mu = model.means[0]
    s2 = float(model.stds[0]) ** 2
    scale = np.sqrt((s2 + t_to ** 2) / (s2 + t_from ** 2))
    return mu + (np.asarray(x, dtype=float) - mu) * scale


class CostWrappedField(GradientField):
    """Delegates to an inner field, then busy-waits until cost_ms of
    wall-clock time has elapsed since entry.

    The wait spins on a small matrix product rather than sleeping, so it
    occupies the interpreter the way a compute-bound network evaluation
    would while still releasing the GIL inside each product. Concurrent
    evaluations therefore overlap on wall-clock time.
    """

    def __init__(self, inner: GradientField, cost_ms: float = 10.0):
        if cost_ms < 0:
            raise ConfigError(f"cost_ms must be nonnegative, got {cost_ms}")
        self.inner = inner
        self.dim = inner.dim
        self.cost_ms = float(cost_ms)
        self.eval_count = 0
        self._spin = np.ones((96, 96)) / 96.0

    def evaluate(self, x: np.ndarray, t) -> np.ndarray:
        entered = time.perf_counter()
        out = self.inner.evaluate(x, t)
        deadline = entered + self.cost_ms / 1000.0
        while time.perf_counter() < deadline:
            self._spin @ self._spin
        self.eval_count += 1
        return out
