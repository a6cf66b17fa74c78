import time

import numpy as np
import pytest

from epdlab.errors import ConfigError
from epdlab.toymodels import (CostWrappedField, GmmField, GmmModel,
                              default_validation_model, exact_flow)


def test_single_gaussian_epsilon_value():
    # mu=0, s=1, d=1: eps(x, t) = t x / (1 + t^2); at x=t=80 this is 6400/6401
    model = GmmModel(weights=[1.0], means=[[0.0]], stds=[1.0])
    field = GmmField(model)
    got = field.evaluate(np.array([80.0]), 80.0)
    assert np.allclose(got, 6400.0 / 6401.0, rtol=1e-14)


def test_epsilon_matches_fd_score():
    # independent oracle: central differences of the exact log-density
    model = default_validation_model()
    field = GmmField(model)
    rng = np.random.default_rng(11)
    h = 1e-6
    for _ in range(40):
        x = rng.normal(scale=6.0, size=2)
        t = float(10 ** rng.uniform(-2, 1.8))
        grad = np.zeros(2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            grad[i] = (field.log_density(x + e, t) - field.log_density(x - e, t)) / (2 * h)
        assert np.allclose(field.evaluate(x, t), -t * grad, rtol=1e-5, atol=1e-6)


def test_epsilon_batched_and_per_row_times():
    model = default_validation_model()
    field = GmmField(model)
    rng = np.random.default_rng(5)
    xs = rng.normal(scale=5.0, size=(7, 2))
    ts = 10 ** rng.uniform(-2, 1.5, size=7)
    batched = field.evaluate(xs, ts)
    for i in range(7):
        assert np.array_equal(batched[i], field.evaluate(xs[i], float(ts[i])))


def test_responsibilities_stable_far_from_modes():
    model = default_validation_model()
    field = GmmField(model)
    out = field.evaluate(np.array([400.0, -400.0]), 0.01)
    assert np.all(np.isfinite(out))
    # at tiny t the flow gradient is nearly t * (x - mu_near) / s^2
    near = np.array([4.0, -4.0])
    expected = 0.01 * (np.array([400.0, -400.0]) - near) / 0.25
    assert np.allclose(out, expected, rtol=1e-3)


def test_exact_flow_identity_and_rejects_mixture():
    model = GmmModel(weights=[1.0], means=[[2.0, -1.0]], stds=[0.6])
    x = np.array([5.0, 5.0])
    assert np.allclose(exact_flow(model, x, 3.0, 3.0), x)
    with pytest.raises(ConfigError):
        exact_flow(default_validation_model(), x, 3.0, 1.0)


def test_exact_flow_composes():
    model = GmmModel(weights=[1.0], means=[[0.5]], stds=[1.2])
    x = np.array([9.0])
    direct = exact_flow(model, x, 10.0, 0.1)
    via = exact_flow(model, exact_flow(model, x, 10.0, 2.0), 2.0, 0.1)
    assert np.allclose(direct, via, rtol=1e-12)


def test_model_validation():
    with pytest.raises(ConfigError):
        GmmModel(weights=[0.5, 0.4], means=[[0.0], [1.0]], stds=[1.0, 1.0])
    with pytest.raises(ConfigError):
        GmmModel(weights=[0.5, 0.5], means=[[0.0], [1.0]], stds=[1.0, -1.0])
    with pytest.raises(ConfigError):
        GmmModel(weights=[1.0], means=[[0.0, 0.0]], stds=[1.0, 1.0])


def test_model_dict_roundtrip(tmp_path):
    model = default_validation_model()
    path = tmp_path / "model.json"
    import json
    path.write_text(json.dumps(model.to_dict()))
    back = GmmModel.from_json_file(str(path))
    assert np.array_equal(back.means, model.means)
    assert np.array_equal(back.weights, model.weights)


def test_model_sample_moments():
    model = default_validation_model()
    rng = np.random.default_rng(0)
    x = model.sample(rng, 40000)
    assert x.shape == (40000, 2)
    assert np.allclose(x.mean(axis=0), [0.0, 0.0], atol=0.15)
    # per-coordinate variance: 16 (mean spread) + 0.25 (component std)
    assert np.allclose(x.var(axis=0), 16.25, rtol=0.05)


def test_cost_wrapper_wall_clock_and_transparency():
    field = GmmField(default_validation_model())
    wrapped = CostWrappedField(field, cost_ms=10.0)
    x = np.array([1.0, -2.0])
    t0 = time.perf_counter()
    out = wrapped.evaluate(x, 5.0)
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    assert elapsed_ms >= 10.0
    assert np.array_equal(out, field.evaluate(x, 5.0))
    assert wrapped.eval_count == 1
