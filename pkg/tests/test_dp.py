import math

import numpy as np
import pytest

from conftest import make_planted
from lrs import (
    DomainError,
    GroundTruth,
    PrivacyBudgetMismatch,
    PrivacyConfig,
    PrivacyLedger,
    PrivateLRSRegressor,
    SolverConfig,
    accountant_epsilon,
    calibrate_noise,
    calibrate_noise_simple,
    default_clip_levels,
    empirical_clip_levels,
    fit_lrs,
    fit_private,
    mom_init,
    noise_stds,
    private_update_u,
    theory_clip_levels,
    update_u,
)
from lrs.dp import _clip_rows, _symmetric_gaussian, noised_system

EPS_GRID = (0.5, 1.0, 2.0, 4.0, 8.0)
DELTA_GRID = (1e-3, 1e-5, 1e-7)


# ---------------------------------------------------------------- calibration

def test_calibrate_noise_frozen_value():
    # 2 sqrt(ln(1e5) + 1) / 1, computed independently from the closed form
    assert abs(calibrate_noise(1.0, 1e-5) - 7.0747227408486415) <= 1e-12
    # the high-privacy branch is looser here, so the general value is returned
    assert abs(calibrate_noise_simple(1.0, 1e-5) - 9.597051824376162) <= 1e-12
    assert calibrate_noise(1.0, 1e-5) < calibrate_noise_simple(1.0, 1e-5)


def test_calibrate_noise_domain_errors():
    with pytest.raises(DomainError):
        calibrate_noise(1.0, 1.0)
    with pytest.raises(DomainError):
        calibrate_noise(0.0, 1e-5)
    with pytest.raises(DomainError):
        calibrate_noise_simple(100.0, 1e-5)  # epsilon > ln(1/delta)


def test_calibration_soundness_grid():
    for eps in EPS_GRID:
        for delta in DELTA_GRID:
            sigma = calibrate_noise(eps, delta)
            assert accountant_epsilon(sigma, delta) <= eps + 1e-9


def test_accountant_epsilon_values():
    assert accountant_epsilon(1.0, math.exp(-1.0)) == pytest.approx(3.0, abs=1e-12)
    assert accountant_epsilon(1e9, 1e-5) <= 1e-3  # rho -> 0 limit
    # round trip within 5%
    sigma = calibrate_noise(1.0, 1e-5)
    assert accountant_epsilon(sigma, 1e-5) == pytest.approx(1.0, rel=0.05)


# ---------------------------------------------------------------- noise scales

def test_noise_stds_degenerate_and_unit():
    pc = PrivacyConfig(1.0, 1e-5, 0.0, 1.0, 0.5, 0.5, 1.0, 1)
    assert noise_stds(pc, 1) == (0.0, 0.0)
    pc = PrivacyConfig(1.0, 1e-5, 3.0, 1.0, 0.5, 0.5, 1.0, 1)
    s1, s2 = noise_stds(pc, 1)
    assert s1 == pytest.approx(3.0) and s2 == pytest.approx(3.0)


def test_noise_stds_sensitivity_ratio(rng):
    # per-user sensitivity of the quadratic sum is m A1^2 Aw^2, so the
    # per-release zCDP cost G^2/(2 sigma1^2) always equals 1/(2 L sigma_dp^2)
    for _ in range(3):
        a1, aw = rng.uniform(0.5, 5, size=2)
        a2, a3 = rng.uniform(0.5, 5, size=2)
        m = int(rng.integers(1, 200))
        L = int(rng.integers(1, 30))
        sd = rng.uniform(0.1, 10)
        pc = PrivacyConfig(1.0, 1e-5, sd, a1, a2, a3, aw, L)
        s1, s2 = noise_stds(pc, m)
        gamma1 = m * a1**2 * aw**2
        gamma2 = m * a1 * (a2 + a3) * aw
        assert gamma1**2 / (2 * s1**2) == pytest.approx(1.0 / (2 * L * sd**2), rel=1e-12)
        assert gamma2**2 / (2 * s2**2) == pytest.approx(1.0 / (2 * L * sd**2), rel=1e-12)


# ---------------------------------------------------------------- private update

def test_private_update_degenerate_equals_clean():
    gt, data = make_planted(d=8, r=2, t=10, m=15, k=2, zeta=4, sigma=0.0, seed=30)
    w = gt.w_star
    b = gt.b_star
    pc = PrivacyConfig(1.0, 1e-5, 0.0, 1e9, 1e9, 1e9, 1e9, 3)
    u_priv, rho = private_update_u(data, w, b, pc)
    u_clean = update_u(data, w, b)
    assert np.max(np.abs(u_priv - u_clean)) <= 1e-10
    assert math.isinf(rho)


def test_private_update_clipping_postconditions(rng):
    gt, data = make_planted(d=6, r=1, t=4, m=12, k=1, zeta=1, sigma=0.0, seed=31)
    w = gt.w_star
    b = gt.b_star
    pc = PrivacyConfig(1.0, 1e-5, 0.0, 0.8, 0.5, 0.2, 0.6, 1)
    # oracle: rebuild the clipped system entry by entry and solve directly
    a_sum = np.zeros((6, 6))
    v_sum = np.zeros((6, 1))
    for i, ds in enumerate(data):
        for j in range(ds.m):
            xj = ds.x[j] * min(1.0, 0.8 / np.linalg.norm(ds.x[j]))
            assert np.linalg.norm(xj) <= 0.8 + 1e-12
            yj = np.clip(ds.y[j], -0.5, 0.5)
            assert abs(yj) <= 0.5
            dot = np.clip(xj @ b[:, i], -0.2, 0.2)
            wi = w[i] * min(1.0, 0.6 / np.linalg.norm(w[i]))
            a_sum += np.outer(xj, xj) * wi[0] ** 2
            v_sum[:, 0] += xj * (yj - dot) * wi[0]
    oracle = np.linalg.solve(a_sum, v_sum)
    out, _ = private_update_u(data, w, b, pc)
    assert np.max(np.abs(out - oracle)) <= 1e-8


def test_reclipping_is_identity(rng):
    x = rng.standard_normal((40, 5))
    once = _clip_rows(x, 1.3)
    assert np.array_equal(_clip_rows(once, 1.3), once)
    assert np.all(np.linalg.norm(once, axis=1) <= 1.3 + 1e-12)


def test_noisy_system_mean_matches_clean(rng):
    # Monte Carlo: the empirical mean of the noised quadratic term equals the
    # clean clipped term within 3 sigma1 / (n sqrt(draws)) per entry
    gt, data = make_planted(d=4, r=1, t=2, m=10, k=1, zeta=1, sigma=0.0, seed=32)
    pc = PrivacyConfig(1.0, 1e-5, 0.5, 2.0, 2.0, 1.0, 1.5, 4)
    x_c = np.stack([_clip_rows(ds.x, pc.a1) for ds in data])
    y_c = np.stack([np.clip(ds.y, -pc.a2, pc.a2) for ds in data])
    gram_c = np.einsum("tma,tmb->tab", x_c, x_c)
    w_c = _clip_rows(gt.w_star, pc.aw)
    v_sum = np.zeros((4, 1))
    for i in range(2):
        dots = np.clip(x_c[i] @ gt.b_star[:, i], -pc.a3, pc.a3)
        v_sum += np.outer(x_c[i].T @ (y_c[i] - dots), w_c[i])
    n_total = 20
    clean_a = np.einsum("ti,tj,tab->ab", w_c, w_c, gram_c) / n_total
    draws = 200
    acc = np.zeros_like(clean_a)
    for rep in range(draws):
        a, v = noised_system(w_c, gram_c, v_sum, pc, 10, n_total, noise_seed=rep, release_index=1)
        acc += a
    sigma1, _ = noise_stds(pc, 10)
    tol = 3.0 * sigma1 / (n_total * math.sqrt(draws))
    assert np.max(np.abs(acc / draws - clean_a)) <= tol


def test_symmetric_gaussian_is_symmetric_with_correct_marginals():
    rng = np.random.default_rng(0)
    draws = np.stack([_symmetric_gaussian(6, 2.0, np.random.default_rng(i)) for i in range(400)])
    assert np.allclose(draws, draws.transpose(0, 2, 1))
    stds = draws.std(axis=0)
    assert np.all(np.abs(stds - 2.0) <= 0.35)


# ---------------------------------------------------------------- clip levels

def test_theory_clip_levels_hand_arithmetic():
    d, t = 4, 100
    u = np.full((d, 1), 0.5)  # unit column, |row| = 1/sqrt(d) -> mu* = 1
    gt = GroundTruth(u, np.ones((t, 1)), np.zeros((d, t)), 0.0, 0, 0)
    a1, a2, a3, aw = theory_clip_levels(gt, m=100, n_iters=10)  # mtL = 1e5
    log_term = 5.256521769756932  # sqrt(2 ln 1e6), frozen
    assert a1 == pytest.approx(2.0 * log_term, rel=1e-12)
    assert a2 == pytest.approx(1.0 * log_term, rel=1e-12)
    assert a3 == pytest.approx(1e-6)  # b* = 0 collapses to the floor
    assert aw == pytest.approx(1.0 * log_term, rel=1e-12)


def test_empirical_clip_levels_are_quantiles():
    gt, data = make_planted(d=6, r=1, t=20, m=30, k=1, zeta=4, sigma=0.0, seed=33)
    a1, a2, a3, aw = empirical_clip_levels(data, q=0.9)
    norms = np.concatenate([np.linalg.norm(ds.x, axis=1) for ds in data])
    ys = np.concatenate([np.abs(ds.y) for ds in data])
    assert a1 == pytest.approx(np.quantile(norms, 0.9))
    assert a2 == pytest.approx(np.quantile(ys, 0.9))
    assert a3 == a2  # no model state: falls back to the response level


def test_default_clip_levels_dispatch():
    gt, data = make_planted(d=6, r=1, t=8, m=10, k=1, zeta=2, sigma=0.0, seed=34)
    via_gt = default_clip_levels(gt=gt, m=10, n_iters=2)
    assert via_gt == theory_clip_levels(gt, 10, 2)
    via_data = default_clip_levels(datasets=data)
    assert all(v > 0 for v in via_data)


# ---------------------------------------------------------------- ledger / fit

def test_ledger_composition_and_budget():
    ledger = PrivacyLedger(planned_releases=3)
    for i in range(3):
        ledger.charge(i + 1, 0.125)
    assert ledger.rho_total == pytest.approx(0.375)
    with pytest.raises(PrivacyBudgetMismatch):
        ledger.charge(4, 0.125)
    # epsilon_at monotone in rho and in 1/delta
    eps1 = ledger.epsilon_at(1e-5)
    assert eps1 > PrivacyLedger(3, [(1, 0.1)]).epsilon_at(1e-5)
    assert ledger.epsilon_at(1e-7) > eps1


def test_fit_private_degenerate_equals_fit():
    gt, data = make_planted(d=12, r=2, t=40, m=30, k=2, zeta=8, sigma=0.0, seed=5)
    u0 = mom_init(data, 2)
    cfg = SolverConfig(r=2, k=2, outer_iters=6, gamma0=5.0)
    state_np, rep_np = fit_lrs(data, cfg, init_u=u0, gt=gt)
    pc = PrivacyConfig(1.0, 1e-5, 0.0, 1e9, 1e9, 1e9, 1e9, 6)
    state_p, rep_p, ledger = fit_private(data, cfg, pc, init_u=u0, gt=gt)
    for a, b in zip(rep_np.column("train_mse"), rep_p.column("train_mse")):
        assert abs(a - b) <= 1e-8
    assert np.max(np.abs(state_np.u - state_p.u)) <= 1e-8
    assert len(ledger.entries) == 6


def test_fit_private_ledger_accounting():
    gt, data = make_planted(d=6, r=1, t=10, m=12, k=1, zeta=2, sigma=0.0, seed=36)
    cfg = SolverConfig(r=1, k=1, outer_iters=4, gamma0=4.0)
    pc = PrivacyConfig.from_epsilon(2.0, 1e-5, (5.0, 5.0, 5.0, 3.0), planned_iters=4)
    state, rep, ledger = fit_private(data, cfg, pc, noise_seed=3)
    assert len(ledger.entries) == 4
    for _, rho in ledger.entries:
        assert rho == pytest.approx(1.0 / (4 * pc.sigma_dp**2), rel=1e-12)
    assert ledger.rho_total == pytest.approx(1.0 / pc.sigma_dp**2, rel=1e-9)
    assert ledger.epsilon_at(pc.delta) <= 2.0 + 1e-9


def test_fit_private_budget_mismatch():
    gt, data = make_planted(d=6, r=1, t=10, m=12, k=1, zeta=2, sigma=0.0, seed=37)
    cfg = SolverConfig(r=1, k=1, outer_iters=5, gamma0=4.0)
    pc = PrivacyConfig.from_epsilon(2.0, 1e-5, (5.0, 5.0, 5.0, 3.0), planned_iters=4)
    with pytest.raises(PrivacyBudgetMismatch):
        fit_private(data, cfg, pc)


def test_private_estimator_smoke():
    gt, data = make_planted(d=6, r=1, t=200, m=25, k=1, zeta=34, sigma=0.0, seed=38, shared_w=1.0)
    est = PrivateLRSRegressor(r=1, k=1, n_iters=4, epsilon=4.0, delta=1e-5,
                              gamma0=4.0, init="mom", noise_seed=9)
    est.fit(data)
    assert est.ledger_.rho_total == pytest.approx(1.0 / est.privacy_config_.sigma_dp**2, rel=1e-9)
    assert est.report_.rows[-1]["epsilon_at_delta"] <= 4.0 + 1e-9
    pred = est.predict(data[0].x, task=0)
    assert pred.shape == data[0].y.shape
