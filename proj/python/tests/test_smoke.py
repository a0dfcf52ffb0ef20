import json
import math

import numpy as np
import pytest

import kfl


def test_golden_ratio_steady_state():
    one = np.eye(1)
    P = kfl.dare_solve(one, one, one, one)
    assert abs(P[0, 0] - (1 + math.sqrt(5)) / 2) < 1e-10


def test_static_filter_matches_least_squares():
    ys = np.full((10, 1), 2.0)
    means, covs = kfl.kalman_filter(np.eye(1), np.eye(1), np.zeros((1, 1)), np.eye(1), ys, np.zeros(1))
    assert means.shape == (10, 1)
    assert abs(covs[-1][0, 0] - 1 / 11) < 1e-12
    assert abs(means[-1, 0] - 10 * 2 / 11) < 1e-12


def test_contraction_identity():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(4, 4))
    P = B @ B.T + 0.1 * np.eye(4)
    out = kfl.contraction_check(P, rng.normal(size=(2, 4)), np.eye(2))
    assert out["identity_residual"] < 1e-8


def test_edmd_recovers_linear_operator():
    A = np.array([[0.9, -0.2], [0.2, 0.9]])
    states = [np.array([1.0, 0.0])]
    for _ in range(30):
        states.append(A @ states[-1])
    fit = kfl.edmd_fit(np.array(states), "identity")
    assert np.max(np.abs(fit["K"] - A)) < 1e-8
    assert fit["observables"] == ["x1", "x2"]
    eig = kfl.koopman_spectrum(A)
    assert all(abs(abs(z) - math.hypot(0.9, 0.2)) < 1e-12 for z in eig)


def test_degenerate_trajectory_is_refused():
    line = np.array([[0.1 * i, 0.1 * i] for i in range(1, 20)])
    with pytest.raises(kfl.SingularError):
        kfl.edmd_fit(line, "monomials:2")


def test_config_hash_and_training():
    cfg = {"task": {"type": "linear_regression", "d": 3, "T": 30}, "seeds": [0, 1]}
    text = json.dumps(cfg)
    reordered = json.dumps({"seeds": [0, 1], "task": {"T": 30, "type": "linear_regression", "d": 3}})
    assert kfl.config_hash(text) == kfl.config_hash(reordered)
    runs = kfl.train(text)
    assert [r["seed"] for r in runs] == [0, 1]
    assert len(runs[0]["losses"]) == 30
    assert not runs[0]["diverged"]
    assert kfl.train(text, seed=0)[0]["final_theta"].tolist() == runs[0]["final_theta"].tolist()


def test_config_errors_raise():
    with pytest.raises(kfl.ConfigError):
        kfl.config_hash('{"task": {"type": "linear_regression", "dd": 1}}')
    assert issubclass(kfl.ConfigError, kfl.KflError)


def test_filter_suite_passes():
    results = kfl.verify("filter")
    assert {r["name"] for r in results} >= {"golden-ratio-fixed-point"}
    assert all(r["passed"] for r in results)
