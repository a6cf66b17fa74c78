import json

import numpy as np
import pytest

from epdlab.core import make_schedule
from epdlab.errors import ConfigError, InvariantError
from epdlab.params import (Checkpoint, MaterializedStepParams, RawStepParams,
                           checkpoint_from_dict, checkpoint_to_dict,
                           init_default, inverse_sigmoid, load_checkpoint,
                           materialize, materialize_jacobian,
                           reference_checkpoint, save_checkpoint, sigmoid,
                           squash)


def test_squash_limits():
    raw = RawStepParams(r_logit=[-30.0, 30.0], lambda_logit=[0.0, 0.0],
                        s_logit=[0.0, 0.0], sigma_logit=[0.0, 0.0])
    theta = materialize(raw, 4.0, 1.0)
    # r -> 0 pins tau at the interval end, r -> 1 at the start
    assert np.allclose(theta.tau, [1.0, 4.0], rtol=1e-10)


def test_materialize_geometric_midpoint():
    raw = RawStepParams(r_logit=[0.0], lambda_logit=[0.0],
                        s_logit=[0.0], sigma_logit=[0.0])
    theta = materialize(raw, 4.0, 1.0)
    assert np.allclose(theta.tau, [2.0], rtol=1e-14)
    assert np.allclose(theta.delta, [0.0])
    assert theta.o == 0.0
    assert np.allclose(theta.lam, [1.0])


def test_materialize_frozen_values():
    # frozen from a direct transcription of the squash formulas
    raw = RawStepParams(r_logit=[0.3, -0.7], lambda_logit=[0.2, -0.4],
                        s_logit=[1.1, -2.0], sigma_logit=[0.5, 0.9])
    theta = materialize(raw, 4.0, 1.0)
    assert np.allclose(theta.tau, [2.21742458, 1.58405723], rtol=1e-7)
    assert np.allclose(theta.lam, [0.64565631, 0.35434369], rtol=1e-7)
    assert np.allclose(theta.delta, [0.05549329, -0.06032044], atol=1e-7)
    assert np.isclose(theta.o, 0.015381526540664492, rtol=1e-10)
    sq = squash(raw)
    assert np.allclose(sq["s"], [1.02502601, 0.96192029], rtol=1e-7)
    assert np.allclose(sq["sigma"], [1.01224593, 1.02109495], rtol=1e-7)


def test_materialize_ranges_random():
    rng = np.random.default_rng(4)
    for _ in range(200):
        k = int(rng.integers(1, 5))
        raw = RawStepParams(*(rng.normal(scale=4.0, size=k) for _ in range(4)))
        t_end = float(10 ** rng.uniform(-2.5, 0.5))
        t_start = t_end * float(10 ** rng.uniform(0.05, 1.5))
        theta = materialize(raw, t_start, t_end)
        assert np.all(theta.tau > t_end) and np.all(theta.tau < t_start)
        assert np.all(theta.lam > 0) and abs(theta.lam.sum() - 1.0) < 1e-12
        assert abs(theta.o) <= 0.05 + 1e-12
        assert np.all(theta.tau + theta.delta > 0)


def test_materialize_jacobian_matches_fd():
    rng = np.random.default_rng(12)
    h = 1e-5
    for _ in range(10):
        k = int(rng.integers(1, 4))
        logits = [rng.normal(scale=2.0, size=k) for _ in range(4)]
        t_start, t_end = 5.0, 0.8

        def mat(vals):
            return materialize(RawStepParams(*vals), t_start, t_end)

        jac = materialize_jacobian(RawStepParams(*logits), t_start, t_end)
        for i in range(k):
            bump = [a.copy() for a in logits]
            bump[0][i] += h
            up = mat(bump)
            bump[0][i] -= 2 * h
            dn = mat(bump)
            assert np.isclose((up.tau[i] - dn.tau[i]) / (2 * h), jac["dtau_dr"][i],
                              rtol=1e-6, atol=1e-10)
            assert np.isclose((up.delta[i] - dn.delta[i]) / (2 * h), jac["ddelta_dr"][i],
                              rtol=1e-6, atol=1e-10)
            bump = [a.copy() for a in logits]
            bump[1][i] += h
            up = mat(bump)
            bump[1][i] -= 2 * h
            dn = mat(bump)
            fd_lam = (up.lam - dn.lam) / (2 * h)
            assert np.allclose(fd_lam, jac["dlam_dlogit"][:, i], rtol=1e-6, atol=1e-9)
            assert np.isclose((up.o - dn.o) / (2 * h), jac["do_dlam"][i],
                              rtol=1e-6, atol=1e-10)
            bump = [a.copy() for a in logits]
            bump[2][i] += h
            up = mat(bump)
            bump[2][i] -= 2 * h
            dn = mat(bump)
            assert np.isclose((up.delta[i] - dn.delta[i]) / (2 * h), jac["ddelta_ds"][i],
                              rtol=1e-6, atol=1e-10)
            bump = [a.copy() for a in logits]
            bump[3][i] += h
            up = mat(bump)
            bump[3][i] -= 2 * h
            dn = mat(bump)
            assert np.isclose((up.o - dn.o) / (2 * h), jac["do_dsigma"][i],
                              rtol=1e-6, atol=1e-10)


def test_init_default_targets():
    thetas = init_default(3, 2)
    assert len(thetas) == 3
    assert np.allclose(sigmoid(thetas[0].r_logit), [1.0 / 3.0, 2.0 / 3.0], rtol=1e-14)
    theta = materialize(thetas[0], 4.0, 1.0)
    assert np.allclose(theta.lam, [0.5, 0.5])
    assert np.allclose(theta.delta, [0.0, 0.0])
    assert theta.o == 0.0
    single = init_default(1, 1)[0]
    assert np.allclose(sigmoid(single.r_logit), [0.5])


def test_flatten_roundtrip():
    raw = init_default(1, 3)[0]
    flat = raw.flatten()
    assert flat.shape == (12,)
    back = RawStepParams.from_flat(flat, 3)
    for name in ("r_logit", "lambda_logit", "s_logit", "sigma_logit"):
        assert np.array_equal(getattr(back, name), getattr(raw, name))


def test_inverse_sigmoid_domain():
    assert np.allclose(inverse_sigmoid(sigmoid(np.array([-3.0, 0.0, 5.0]))),
                       [-3.0, 0.0, 5.0], rtol=1e-9)
    with pytest.raises(InvariantError):
        inverse_sigmoid(np.array([1.0]))


def test_checkpoint_roundtrip(tmp_path):
    sch = make_schedule("uniform", 2)
    ckpt = Checkpoint(stage="distill", schedule=sch, raw=init_default(2, 2),
                      afs=True, model_id="toy")
    path = tmp_path / "ckpt.json"
    save_checkpoint(ckpt, str(path))
    back = load_checkpoint(str(path))
    assert back.stage == "distill" and back.k == 2 and back.n_steps == 2
    assert back.afs is True and back.model_id == "toy"
    assert np.array_equal(back.schedule.times, sch.times)
    for a, b in zip(back.raw, ckpt.raw):
        assert np.allclose(a.flatten(), b.flatten(), rtol=1e-12)


def test_checkpoint_rejects_bad_simplex(tmp_path):
    sch = make_schedule("uniform", 1)
    d = checkpoint_to_dict(Checkpoint(stage="distill", schedule=sch,
                                      raw=init_default(1, 2)))
    for br in d["steps"][0]["branches"]:
        del br["r_logit"], br["lambda_logit"], br["s_logit"], br["sigma_logit"]
    d["steps"][0]["branches"][0]["lambda"] = 0.6
    d["steps"][0]["branches"][1]["lambda"] = 0.3
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    with pytest.raises(InvariantError):
        load_checkpoint(str(path))


def test_checkpoint_rejects_out_of_range_scale():
    sch = make_schedule("uniform", 1)
    d = checkpoint_to_dict(Checkpoint(stage="distill", schedule=sch,
                                      raw=init_default(1, 1)))
    br = d["steps"][0]["branches"][0]
    for f in ("r_logit", "lambda_logit", "s_logit", "sigma_logit"):
        del br[f]
    br["s"] = 1.2
    with pytest.raises(InvariantError):
        checkpoint_from_dict(d)


def test_checkpoint_rejects_schema_problems():
    sch = make_schedule("uniform", 1)
    good = checkpoint_to_dict(Checkpoint(stage="distill", schedule=sch,
                                         raw=init_default(1, 1)))
    bad = dict(good)
    bad["version"] = 2
    with pytest.raises(InvariantError):
        checkpoint_from_dict(bad)
    bad = dict(good)
    del bad["steps"]
    with pytest.raises(InvariantError):
        checkpoint_from_dict(bad)
    bad = json.loads(json.dumps(good))
    del bad["steps"][0]["branches"][0]["r_logit"]
    del bad["steps"][0]["branches"][0]["r"]
    with pytest.raises(InvariantError):
        checkpoint_from_dict(bad)
    bad = json.loads(json.dumps(good))
    bad["stage"] = "finetune"
    with pytest.raises(InvariantError):
        checkpoint_from_dict(bad)


def test_checkpoint_cross_check_detects_tampering():
    sch = make_schedule("uniform", 1)
    d = checkpoint_to_dict(Checkpoint(stage="distill", schedule=sch,
                                      raw=init_default(1, 2)))
    d["steps"][0]["branches"][0]["r"] += 0.05
    with pytest.raises(InvariantError):
        checkpoint_from_dict(d)


def test_missing_checkpoint_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_checkpoint(str(tmp_path / "nope.json"))


def test_reference_checkpoints_validate():
    for pnfe, n_expected in ((3, 2), (5, 3), (7, 4), (9, 5)):
        ckpt = reference_checkpoint(pnfe)
        assert ckpt.k == 2 and ckpt.n_steps == n_expected and ckpt.afs
        thetas = ckpt.materialize_all()
        for n, theta in enumerate(thetas):
            t_start, t_end = ckpt.schedule.step_interval(n)
            assert np.all(theta.tau > t_end) and np.all(theta.tau < t_start)
            assert abs(theta.lam.sum() - 1.0) <= 1e-9
            assert abs(theta.o) <= 0.05
    with pytest.raises(ConfigError):
        reference_checkpoint(4)


def test_reference_checkpoint_matches_published_row():
    # Para. NFE 3, step 0, branch 0 row: r, s, sigma, lambda
    ckpt = reference_checkpoint(3)
    sq = squash(ckpt.raw[0])
    assert np.isclose(sq["r"][0], 0.01339, atol=1e-9)
    assert np.isclose(sq["s"][0], 0.96349, atol=1e-9)
    assert np.isclose(sq["sigma"][0], 0.99731, atol=1e-9)
    assert np.isclose(sq["lam"][0], 0.85185, atol=1e-6)
