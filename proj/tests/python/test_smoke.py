"""Smoke tests for the cfdistill Python bindings."""

import math

import numpy as np
import pytest

import cfdistill as cf


def test_ballistic_and_idm():
    assert cf.ballistic_step(10.0, 0.0, 1.0, 0.1) == pytest.approx((10.1, 1.005))
    v, x = cf.ballistic_step(0.2, 0.0, -5.0, 0.1)
    assert v == 0.0 and x == pytest.approx(0.004)
    p = cf.IdmParams()
    s_e = cf.idm_equilibrium_spacing(p, 15.0)
    assert s_e == pytest.approx(24.5 / math.sqrt(0.9375))
    assert abs(cf.idm_accel(p, 15.0, s_e, 0.0)) < 1e-9
    assert cf.IdmModel(p).accel(15.0, s_e, 0.0) == pytest.approx(0.0, abs=1e-9)


def test_invalid_params_raise():
    with pytest.raises(ValueError):
        cf.IdmParams(T=0.0)


def test_scenarios_and_votes():
    s = cf.generate_scenarios(500, seed=3)
    assert s.shape == (500, 3)
    assert np.array_equal(s, cf.generate_scenarios(500, seed=3))
    assert (s[:, 1] >= 0.1).all()
    assert cf.majority_vote([1, 1, 1, 1, -5]) == (1.0, 4)
    with pytest.raises(cf.NoValidVotesError):
        cf.majority_vote([])
    assert cf.parse_acceleration("**Final acceleration:** 0.75 m/s²") == pytest.approx(0.75)
    system, user = cf.build_prompt(10.0, 20.0, 1.0)
    assert "10.00" in user


def test_oracle_and_training_roundtrip(tmp_path):
    states = cf.generate_scenarios(400, seed=1)
    labels, clean = cf.oracle_labels(states, k=3, seed=2)
    assert np.allclose(labels, clean)
    model, info = cf.train(states, labels, {"mode": "consist", "max_epochs": 3, "seed": 4})
    assert len(info["epochs"]) == 3
    assert math.isfinite(info["test_wmape"])
    path = tmp_path / "m.json"
    model.save(str(path))
    back = cf.load_model(str(path))
    assert back.accel(10.0, 20.0, 0.0) == model.accel(10.0, 20.0, 0.0)


def test_gradients_and_stability():
    m = cf.MlpModel.initialize([8, 8], seed=0)
    states = cf.generate_scenarios(32, seed=5)
    labels = np.full(32, 0.3)
    rep = cf.check_param_grads(m, states, labels, np.empty((0, 3)), coordinates=50, seed=1)
    assert rep["failures"] == 0
    eq = cf.find_equilibria(cf.IdmModel(cf.IdmParams()), {})
    assert eq and all(abs(p["residual"]) <= 1e-6 for p in eq)
    assert cf.string_stability_criterion(-1.0, 0.5, -0.5) == pytest.approx(1.0)
    assert cf.monotonicity_audit(cf.IdmModel(), states) == (0.0, 0.0, 0.0)


def test_platoon_and_metrics():
    r = cf.platoon_simulate(cf.IdmModel(cf.IdmParams(30, 1.0, 2, 0.3, 1.5)), n=20, horizon=40.0)
    assert not r["collided"]
    assert r["s_e"] > 0
    assert cf.wmape(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)
    star = {"a": 4.769, "b": 6.987, "c": 4.715}
    assert cf.aggregate_errors(star, star) == pytest.approx(5.311, abs=1e-3)
