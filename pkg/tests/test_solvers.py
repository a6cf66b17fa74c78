import numpy as np
import pytest

from epdlab.core import (StepContext, integrate, make_schedule, prior_sample,
                         GradientField)
from epdlab.errors import InvariantError
from epdlab.parallel import get_pool
from epdlab.params import MaterializedStepParams, init_default, materialize
from epdlab.solvers import (dpm2_step, dpm2_stepper, epd_plugin_stepper,
                            epd_step, epd_stepper, euler_step, euler_stepper,
                            heun_step, heun_stepper, ipndm_stepper)
from epdlab.toymodels import GmmField, GmmModel, default_validation_model


class TimeField(GradientField):
    """eps(x, t) = t, state-independent; x(t) = x0 + (t^2 - t0^2)/2."""

    dim = 1

    def evaluate(self, x, t):
        return np.broadcast_to(np.asarray(t, dtype=float)[..., None],
                               np.shape(x)).copy()


def ctx_for(x, t_start, t_end, **kw):
    return StepContext(x=np.asarray(x, dtype=float), t_start=t_start,
                       t_end=t_end, index=kw.pop("index", 0), **kw)


def degenerate_theta(t_start):
    return MaterializedStepParams(tau=[t_start], lam=[1.0], delta=[0.0], o=0.0)


def test_single_step_frozen_values():
    # hand-derived on eps = t from t=3 to t=1, x0=10
    field = TimeField()
    ctx = ctx_for([10.0], 3.0, 1.0)
    assert np.allclose(euler_step(field, ctx).x_next, [4.0])
    assert np.allclose(heun_step(field, ctx).x_next, [6.0])
    assert np.allclose(dpm2_step(field, ctx).x_next, [10.0 - 2.0 * np.sqrt(3.0)])


def test_heun_exact_on_linear_field():
    # trapezoid integrates a linear-in-t gradient exactly
    field = TimeField()
    sch = make_schedule("uniform", 3, t_min=1.0, t_max=3.0)
    traj = integrate(field, heun_stepper(), sch, np.array([10.0]))
    assert np.allclose(traj.endpoint, [10.0 + (1.0 - 9.0) / 2.0], rtol=1e-14)


def test_ipndm_frozen_sequence():
    # warmup ladder on eps = t over uniform times [1, 5/3, 7/3, 3]
    field = TimeField()
    sch = make_schedule("uniform", 3, t_min=1.0, t_max=3.0)
    traj = integrate(field, ipndm_stepper(), sch, np.array([10.0]))
    assert np.allclose(traj.states[:, 0], [10.0, 8.0, 20.0 / 3.0, 52.0 / 9.0],
                       rtol=1e-13)
    assert traj.nfe_total == 3


def test_ipndm_first_step_is_euler():
    field = GmmField(default_validation_model())
    sch = make_schedule("uniform", 1, t_min=1.0, t_max=3.0)
    x0 = np.array([0.3, -0.7])
    a = integrate(field, ipndm_stepper(), sch, x0)
    b = integrate(field, euler_stepper(), sch, x0)
    assert np.array_equal(a.endpoint, b.endpoint)


def test_epd_reduces_to_euler_bitwise():
    field = GmmField(default_validation_model())
    rng = np.random.default_rng(0)
    sch = make_schedule("polynomial", 4, rho=7.0)
    thetas = [degenerate_theta(sch.step_interval(n)[0]) for n in range(4)]
    for _ in range(20):
        x0 = prior_sample(sch.t_max, (2,), rng)
        a = integrate(field, epd_stepper(thetas, 4), sch, x0)
        b = integrate(field, euler_stepper(), sch, x0)
        assert np.array_equal(a.states, b.states)


def test_epd_plugin_reduces_to_ipndm_bitwise():
    field = GmmField(default_validation_model())
    rng = np.random.default_rng(1)
    sch = make_schedule("polynomial", 5, rho=7.0)
    thetas = [degenerate_theta(sch.step_interval(n)[0]) for n in range(5)]
    for _ in range(20):
        x0 = prior_sample(sch.t_max, (2,), rng)
        a = integrate(field, epd_plugin_stepper(thetas, 5), sch, x0)
        b = integrate(field, ipndm_stepper(), sch, x0)
        assert np.array_equal(a.states, b.states)


def test_epd_parallel_matches_serial_bitwise():
    field = GmmField(default_validation_model())
    sch = make_schedule("uniform", 3)
    raws = init_default(3, 4)
    thetas = [materialize(raws[n], *sch.step_interval(n)) for n in range(3)]
    rng = np.random.default_rng(2)
    pool = get_pool()
    for _ in range(10):
        x0 = prior_sample(sch.t_max, (2,), rng)
        serial = integrate(field, epd_stepper(thetas, 3, pool=None), sch, x0)
        parallel = integrate(field, epd_stepper(thetas, 3, pool=pool), sch, x0)
        assert np.array_equal(serial.states, parallel.states)


def test_epd_nfe_accounting():
    field = GmmField(default_validation_model())
    sch = make_schedule("uniform", 2)
    raws = init_default(2, 2)
    thetas = [materialize(raws[n], *sch.step_interval(n)) for n in range(2)]
    x0 = np.array([10.0, -10.0])
    plain = integrate(field, epd_stepper(thetas, 2), sch, x0)
    assert (plain.nfe_total, plain.nfe_parallel) == (6, 4)
    with_afs = integrate(field, epd_stepper(thetas, 2), sch, x0, afs=True)
    assert (with_afs.nfe_total, with_afs.nfe_parallel) == (5, 3)


def test_baseline_nfe_accounting():
    field = GmmField(default_validation_model())
    sch = make_schedule("uniform", 4)
    x0 = np.array([1.0, 1.0])
    cases = {
        euler_stepper(): (4, 3),
        heun_stepper(): (8, 7),
        dpm2_stepper(): (8, 7),
        ipndm_stepper(): (4, 3),
    }
    for stepper, (full, with_afs) in cases.items():
        assert integrate(field, stepper, sch, x0).nfe_total == full
        assert integrate(field, stepper, sch, x0, afs=True).nfe_total == with_afs


def test_afs_first_step_direction():
    # with x = t_N * v the analytic direction is v itself
    field = GmmField(default_validation_model())
    sch = make_schedule("uniform", 1, t_min=1.0, t_max=80.0)
    v = np.array([0.3, -0.4])
    x0 = 80.0 * v
    traj = integrate(field, euler_stepper(), sch, x0, afs=True)
    assert np.allclose(traj.endpoint, x0 + (1.0 - 80.0) * v, rtol=1e-12)
    assert traj.nfe_total == 0


def test_epd_rejects_bad_simplex():
    field = GmmField(default_validation_model())
    ctx = ctx_for([1.0, 1.0], 3.0, 1.0)
    theta = MaterializedStepParams(tau=[2.0, 1.5], lam=[0.6, 0.3],
                                   delta=[0.0, 0.0], o=0.0)
    with pytest.raises(InvariantError):
        epd_step(field, ctx, theta)


def test_epd_rejects_out_of_interval_tau():
    field = GmmField(default_validation_model())
    ctx = ctx_for([1.0, 1.0], 3.0, 1.0)
    theta = MaterializedStepParams(tau=[3.5], lam=[1.0], delta=[0.0], o=0.0)
    with pytest.raises(InvariantError):
        epd_step(field, ctx, theta)


def test_epd_branches_see_shifted_times():
    # delta moves only the evaluation time, not the probe state
    calls = []

    class Recorder(GradientField):
        dim = 1

        def evaluate(self, x, t):
            calls.append((np.array(x, copy=True), float(np.asarray(t))))
            return np.zeros_like(np.asarray(x, dtype=float))

    field = Recorder()
    ctx = ctx_for([2.0], 4.0, 1.0)
    theta = MaterializedStepParams(tau=[2.0, 3.0], lam=[0.5, 0.5],
                                   delta=[0.1, -0.2], o=0.0)
    epd_step(field, ctx, theta)
    assert [t for _, t in calls] == [4.0, 2.1, 2.8]


def test_epd_with_coincident_midpoint_branches_equals_dpm2():
    # two branches pinned at the geometric midpoint with equal weights
    # collapse to the midpoint rule bitwise
    field = GmmField(default_validation_model())
    sch = make_schedule("uniform", 3)
    thetas = []
    for n in range(3):
        t_start, t_end = sch.step_interval(n)
        mid = float(np.sqrt(t_start * t_end))
        thetas.append(MaterializedStepParams(tau=[mid, mid], lam=[0.5, 0.5],
                                             delta=[0.0, 0.0], o=0.0))
    rng = np.random.default_rng(9)
    for _ in range(10):
        x0 = prior_sample(sch.t_max, (2,), rng)
        a = integrate(field, epd_stepper(thetas, 3), sch, x0)
        b = integrate(field, dpm2_stepper(), sch, x0)
        assert np.array_equal(a.states, b.states)
