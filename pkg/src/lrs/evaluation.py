"""Recovery metrics, prediction error, and the reference baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .model import ModelState, SolverConfig
from .numerics import least_squares
from .validation import as_task_arrays, check_orthonormal


def subspace_distance(u, u_ref) -> float:
    """||(I - u_ref u_ref') u||_F, invariant to right-rotation of either input."""
    u = check_orthonormal(u, 1e-8, "u")
    u_ref = check_orthonormal(u_ref, 1e-8, "u_ref")
    if u.shape[0] != u_ref.shape[0]:
        raise DomainError("subspace distance needs matching ambient dimension")
    return float(np.linalg.norm(u - u_ref @ (u_ref.T @ u), "fro"))


@dataclass(frozen=True)
class RecoveryReport:
    subspace_dist: float
    max_b_err_inf: float      # max_i ||b(i) - b*(i)||_inf
    max_theta_err: float      # max_i ||theta(i) - theta*(i)||_2
    support_precision: float
    support_recall: float


def recovery_errors(state: ModelState, gt) -> RecoveryReport:
    """Parameter-recovery errors of a fitted state against the planted model."""
    dist = subspace_distance(state.u, gt.u_star)
    b_err = float(np.max(np.abs(state.b - gt.b_star))) if state.b.size else 0.0
    thetas = state.u @ state.w.T + state.b
    thetas_star = gt.u_star @ gt.w_star.T + gt.b_star
    theta_err = float(np.max(np.linalg.norm(thetas - thetas_star, axis=0)))
    est = state.b != 0
    true = gt.b_star != 0
    hits = int(np.sum(est & true))
    n_est = int(np.sum(est))
    n_true = int(np.sum(true))
    precision = hits / n_est if n_est else 1.0
    recall = hits / n_true if n_true else 1.0
    return RecoveryReport(dist, b_err, theta_err, precision, recall)


def _theta_columns(model, d, t):
    """Per-task parameter columns for a ModelState, a shared vector, or a (d, t) matrix."""
    if isinstance(model, ModelState):
        return model.u @ model.w.T + model.b
    arr = np.asarray(model, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != d:
            raise DomainError(f"parameter vector has length {arr.shape[0]}, expected {d}")
        return np.tile(arr[:, None], (1, t))
    if arr.shape != (d, t):
        raise DomainError(f"parameter matrix must be ({d}, {t}), got {arr.shape}")
    return arr


def rmse(model, datasets) -> float:
    """Root mean squared residual over all samples of all tasks."""
    xs, ys = as_task_arrays(datasets)
    d, t = xs[0].shape[1], len(xs)
    thetas = _theta_columns(model, d, t)
    sse = 0.0
    n = 0
    for i, (x, y) in enumerate(zip(xs, ys)):
        r = x @ thetas[:, i] - y
        sse += float(r @ r)
        n += len(y)
    return math.sqrt(sse / n)


def population_gap(state, task: int, gt) -> float:
    """Excess population risk ||theta(task) - theta*(task)||^2 under the isotropic design."""
    diff = state.theta(task) - gt.theta(task)
    return float(diff @ diff)


def _auto_ridge(gram, rows, d):
    # Data-starved fits need stabilizing; full-rank fits stay exact.
    if rows >= d:
        return 0.0
    return 1e-6 * float(np.trace(gram)) / d


def baseline_single(datasets, ridge=None) -> np.ndarray:
    """One pooled linear model shared by every task."""
    xs, ys = as_task_arrays(datasets)
    x = np.vstack(xs)
    y = np.concatenate(ys)
    if ridge is None:
        ridge = _auto_ridge(x.T @ x, x.shape[0], x.shape[1])
    return least_squares(x, y, ridge)


def baseline_full_finetune(datasets, ridge=None) -> np.ndarray:
    """An unconstrained d-dimensional model per task; returns (d, t)."""
    xs, ys = as_task_arrays(datasets)
    d = xs[0].shape[1]
    cols = []
    for x, y in zip(xs, ys):
        rr = ridge
        if rr is None:
            rr = _auto_ridge(x.T @ x, x.shape[0], d)
        cols.append(least_squares(x, y, rr))
    return np.column_stack(cols)


def baseline_rep_only(datasets, cfg: SolverConfig, init_u=None, init_seed=0) -> ModelState:
    """Representation learning only: the solver with the sparse budget disabled."""
    from .solver import fit_lrs

    cfg = SolverConfig(
        r=cfg.r,
        k=0,
        outer_iters=cfg.outer_iters,
        eps=cfg.eps,
        c1=cfg.c1,
        c3=cfg.c3,
        c4=cfg.c4,
        c5=cfg.c5,
        inner_cap=cfg.inner_cap,
        init_bound=cfg.init_bound,
        gamma0=cfg.gamma0,
        batching=cfg.batching,
        ridge_eps=cfg.ridge_eps,
        stop_tol=cfg.stop_tol,
    )
    state, _ = fit_lrs(datasets, cfg, init_u=init_u, init_seed=init_seed)
    return state
