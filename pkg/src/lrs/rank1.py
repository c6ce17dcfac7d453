"""Rank-1 special case: one shared dense vector plus per-task sparse fine-tuning.

The shared weight is absorbed into the (non-normalized) central vector, so the
returned ``u`` estimates the product of the shared scalar weight and the unit
direction.  The sparse step is a single hard-thresholded gradient update per
outer iteration; the central vector is the pooled least-squares solution over
all tasks, whose Gram factorization is computed once and reused.  Convergence
is global: both iterates start at zero.
"""

from __future__ import annotations

import math
import time

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator

from .errors import ConfigError, SingularSystem
from .model import FitReport
from .solver import _htp, _stuck_tasks
from .validation import as_task_arrays, stackable


def _oracle_delta(u, b, gt, m, t, d):
    """Threshold from the measured error norms (test-only oracle mode).

    The high-probability bound on the thresholded iterate's off-support
    entries is beta + c sqrt(log(t d / delta0) / m) (tau + alpha) in the
    current sup/2-norm errors of the central vector and sparse matrix; using
    the measured errors directly verifies the support-containment claim.
    """
    u_eff = (gt.u_star @ gt.w_star.T)[:, 0]
    beta_t = float(np.max(np.abs(u - u_eff)))
    tau_t = float(np.linalg.norm(u - u_eff))
    alpha_t = float(np.max(np.linalg.norm(b - gt.b_star, axis=0), initial=0.0))
    factor = math.sqrt(math.log(t * d / 1e-2) / m)
    return beta_t + factor * (tau_t + alpha_t)


def fit_rank1(
    datasets,
    k,
    iters,
    c1=0.1,
    c2=0.1,
    c3=0.1,
    gamma0=1.0,
    tau0=1.0,
    beta0=1.0,
    gt=None,
    sink=None,
):
    """Alternate hard-thresholded sparse updates with a pooled central solve.

    gamma0 / tau0 / beta0 bound the initial errors ||b*||_inf, ||u*||_2 and
    ||u*||_inf (u and b start at zero); alpha0 is sqrt(k) * gamma0.  Passing
    ``gt`` switches to the test-only oracle schedule -- thresholds computed
    from the measured error norms each iteration -- and adds recovery
    diagnostics (including per-iteration support containment) to the report.

    Returns (u, b, FitReport) with u (d,) and b (d, t).
    """
    xs, ys = as_task_arrays(datasets)
    t = len(xs)
    d = xs[0].shape[1]
    total = sum(x.shape[0] for x in xs)
    if total < d:
        raise SingularSystem(f"pooled system needs m*t >= d, got {total} < {d}")
    if iters < 0 or k < 0:
        raise ConfigError("iters and k must be nonnegative")

    if gt is not None:
        true_support = gt.b_star != 0

    u = np.zeros(d)
    b = np.zeros((d, t))
    report = FitReport()
    if iters == 0:
        return u, b, report

    pooled = np.zeros((d, d))
    for x in xs:
        pooled += x.T @ x
    tr = np.trace(pooled)
    lam_min = scipy.linalg.eigvalsh(pooled, subset_by_index=[0, 0])[0]
    if tr <= 0 or lam_min < 1e-12 * tr:
        raise SingularSystem(f"pooled Gram singular (min eig {lam_min:.3e})")
    gram_solve = scipy.linalg.cho_factor(pooled)

    batched = stackable(xs)
    if batched:
        x_stack = np.stack(xs)
        y_stack = np.stack(ys)
        m = x_stack.shape[1]

    gamma, tau, beta = gamma0, tau0, beta0
    alpha = math.sqrt(k) * gamma0 if k > 0 else 0.0
    sk = math.sqrt(k) if k > 0 else 1.0

    for ell in range(1, iters + 1):
        t0 = time.perf_counter()
        if gt is not None:
            delta = _oracle_delta(u, b, gt, max(x.shape[0] for x in xs), t, d)
        else:
            delta = beta + (c1 / sk) * (tau + alpha)
        if k > 0:
            # One thresholded gradient step per task, kept only when it does
            # not worsen that task's fit; entries beyond the k-budget pruned.
            if batched:
                resid = (x_stack @ (b.T + u)[..., None])[..., 0] - y_stack
                res_old = np.linalg.norm(resid, axis=1)
                c = b.T - (x_stack.transpose(0, 2, 1) @ resid[..., None])[..., 0] / m
                b_new = np.where(np.abs(c) > delta, c, 0.0)
                nnz = np.count_nonzero(b_new, axis=1)
                over = np.flatnonzero(nnz > k)
                if over.size:
                    cuts = np.partition(np.abs(b_new[over]), -k, axis=1)[:, -k]
                    b_new[over] = np.where(np.abs(b_new[over]) >= cuts[:, None], b_new[over], 0.0)
                res_new = np.linalg.norm((x_stack @ (b_new + u)[..., None])[..., 0] - y_stack, axis=1)
                keep = res_new <= res_old * (1.0 + 1e-9) + 1e-12
                b = np.where(keep[:, None], b_new, b.T).T
            else:
                for i, (x, y) in enumerate(zip(xs, ys)):
                    resid = x @ (u + b[:, i]) - y
                    c = b[:, i] - x.T @ resid / x.shape[0]
                    cand = np.where(np.abs(c) > delta, c, 0.0)
                    nnz = np.count_nonzero(cand)
                    if nnz > k:
                        cut = np.partition(np.abs(cand), -k)[-k]
                        cand = np.where(np.abs(cand) >= cut, cand, 0.0)
                    if np.linalg.norm(x @ (u + cand) - y) <= np.linalg.norm(resid) * (1.0 + 1e-9) + 1e-12:
                        b[:, i] = cand

            # Rescue tasks whose sparse state no longer tracks the data.
            # (Skipped in oracle-schedule mode, whose point is verifying the
            # threshold schedule's own support containment.)
            if t > 1 and gt is None:
                if batched:
                    res = np.linalg.norm((x_stack @ (b.T + u)[..., None])[..., 0] - y_stack, axis=1)
                else:
                    res = np.array([np.linalg.norm(x @ (u + b[:, i]) - y) for i, (x, y) in enumerate(zip(xs, ys))])
                for i in _stuck_tasks(res):
                    cand = _htp(xs[i], ys[i] - xs[i] @ u, k)
                    if np.linalg.norm(xs[i] @ (u + cand) - ys[i]) < res[i]:
                        b[:, i] = cand

        rhs = np.zeros(d)
        if batched:
            resid = y_stack - (x_stack @ b.T[..., None])[..., 0]
            rhs = np.einsum("tmd,tm->d", x_stack, resid)
        else:
            for i, (x, y) in enumerate(zip(xs, ys)):
                rhs += x.T @ (y - x @ b[:, i])
        u = scipy.linalg.cho_solve(gram_solve, rhs)

        gamma = 2.0 * beta + (2.0 * c1 / sk) * tau + 2.0 * c1 * gamma
        tau = c2 * sk * gamma
        beta = c3 * gamma
        alpha = sk * gamma

        row = dict(
            iteration=ell,
            train_mse=_mse(xs, ys, u, b),
            delta=delta,
            max_b_nnz=int(np.max(np.count_nonzero(b, axis=0), initial=0)),
            wall_time=time.perf_counter() - t0,
        )
        if gt is not None:
            shared = gt.u_star @ gt.w_star.T
            row["u_err_inf"] = float(np.max(np.abs(u - shared[:, 0])))
            row["max_b_err_inf"] = float(np.max(np.abs(b - gt.b_star)))
            row["support_contained"] = bool(np.all(true_support | (b == 0)))
        report.append(**row)
        if sink is not None:
            sink(row)
    return u, b, report


def _mse(xs, ys, u, b):
    sse = 0.0
    n = 0
    for i, (x, y) in enumerate(zip(xs, ys)):
        r = x @ (u + b[:, i]) - y
        sse += float(r @ r)
        n += len(y)
    return sse / n


class Rank1LRS(BaseEstimator):
    """Estimator wrapper for the shared-vector + sparse fine-tuning model.

    Attributes after fit: ``u_`` (d,) central vector, ``b_`` (d, t), ``report_``.
    """

    def __init__(self, k=0, n_iters=15, c1=0.1, c2=0.1, c3=0.1, gamma0=1.0, tau0=1.0, beta0=1.0):
        self.k = k
        self.n_iters = n_iters
        self.c1 = c1
        self.c2 = c2
        self.c3 = c3
        self.gamma0 = gamma0
        self.tau0 = tau0
        self.beta0 = beta0

    def fit(self, X, y=None, ground_truth=None):
        datasets = list(zip(X, y)) if y is not None else X
        self.u_, self.b_, self.report_ = fit_rank1(
            datasets,
            k=self.k,
            iters=self.n_iters,
            c1=self.c1,
            c2=self.c2,
            c3=self.c3,
            gamma0=self.gamma0,
            tau0=self.tau0,
            beta0=self.beta0,
            gt=ground_truth,
        )
        self.n_features_in_ = self.u_.shape[0]
        return self

    def predict(self, X, task):
        x = np.asarray(X, dtype=np.float64)
        if not 0 <= task < self.b_.shape[1]:
            raise IndexError(f"task {task} out of range [0, {self.b_.shape[1]})")
        return x @ (self.u_ + self.b_[:, task])
