import numpy as np
import pytest

from lrs import ConfigError, GroundTruth, ModelState, PrivacyConfig, SolverConfig, TaskDataset, theta


def test_theta_direct_formula():
    u = np.eye(2)[:, :1]
    state = ModelState(u, np.array([[3.0]]), np.array([[0.0], [1.0]]))
    assert np.allclose(state.theta(0), [3.0, 1.0])


def test_theta_zero_case():
    state = ModelState(np.eye(3)[:, :2], np.zeros((4, 2)), np.zeros((3, 4)))
    assert np.all(state.theta(0) == 0)


def test_theta_matches_double_loop_oracle(rng):
    d, r, t = 9, 3, 5
    q, _ = np.linalg.qr(rng.standard_normal((d, r)))
    w = rng.standard_normal((t, r))
    b = rng.standard_normal((d, t))
    state = ModelState(q, w, b)
    for task in range(t):
        # naive double loop: theta_j = sum_l u[j,l] w[task,l] + b[j,task]
        expect = np.zeros(d)
        for j in range(d):
            acc = b[j, task]
            for l in range(r):
                acc += q[j, l] * w[task, l]
            expect[j] = acc
        assert np.max(np.abs(theta(state, task) - expect)) <= 1e-12


def test_theta_index_out_of_range():
    state = ModelState(np.eye(2)[:, :1], np.zeros((2, 1)), np.zeros((2, 2)))
    with pytest.raises(IndexError):
        state.theta(2)
    with pytest.raises(IndexError):
        state.theta(-1)


def test_theta_rotation_invariance(rng):
    d, r, t = 8, 3, 4
    q, _ = np.linalg.qr(rng.standard_normal((d, r)))
    w = rng.standard_normal((t, r))
    b = rng.standard_normal((d, t))
    rot, _ = np.linalg.qr(rng.standard_normal((r, r)))
    s1 = ModelState(q, w, b)
    s2 = ModelState(q @ rot, w @ rot, b)
    for task in range(t):
        assert np.max(np.abs(s1.theta(task) - s2.theta(task))) <= 1e-10


def test_ground_truth_validates_orthonormality():
    with pytest.raises(ConfigError):
        GroundTruth(np.ones((3, 1)), np.ones((2, 1)), np.zeros((3, 2)), 0.0, 0, 0)


def test_ground_truth_validates_budgets():
    u = np.eye(3)[:, :1]
    b = np.zeros((3, 2))
    b[0, 0] = b[1, 0] = 1.0
    with pytest.raises(ConfigError):
        GroundTruth(u, np.ones((2, 1)), b, 0.0, 1, 2)  # column has 2 > k=1
    with pytest.raises(ConfigError):
        GroundTruth(u, np.ones((2, 1)), np.ones((3, 2)), 0.0, 3, 1)  # rows have 2 > zeta=1


def test_task_dataset_validation():
    with pytest.raises(ConfigError):
        TaskDataset(np.zeros((3, 2)), np.zeros(4))


def test_model_state_b_nnz():
    b = np.zeros((4, 3))
    b[1, 0] = 2.0
    b[2, 2] = -1.0
    b[3, 2] = 0.5
    state = ModelState(np.eye(4)[:, :2], np.zeros((3, 2)), b)
    assert list(state.b_nnz()) == [1, 0, 2]


def test_solver_config_invariants():
    with pytest.raises(ConfigError):
        SolverConfig(r=1, k=0, outer_iters=1, c1=0.75)
    with pytest.raises(ConfigError):
        SolverConfig(r=1, k=0, outer_iters=1, eps=0.0)
    with pytest.raises(ConfigError):
        SolverConfig(r=1, k=0, outer_iters=1, batching="bogus")
    SolverConfig(r=1, k=0, outer_iters=0)  # L = 0 allowed: returns the initialization


def test_privacy_config_invariants():
    with pytest.raises(ConfigError):
        PrivacyConfig(1.0, 1.5, 1.0, 1, 1, 1, 1, 1)
    with pytest.raises(ConfigError):
        PrivacyConfig(0.0, 1e-5, 1.0, 1, 1, 1, 1, 1)
    pc = PrivacyConfig.from_epsilon(1.0, 1e-5, (1, 1, 1, 1), 5)
    assert pc.sigma_dp >= 2 * np.sqrt(np.log(1e5) + 1) - 1e-12
