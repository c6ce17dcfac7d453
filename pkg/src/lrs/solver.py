"""Alternating-minimization solver for low-rank + sparse multi-task regression.

One outer iteration updates, in order: every task's sparse vector by projected
gradient descent with hard thresholding, every task's weight vector by closed-
form least squares in the current subspace, and the shared representation by
the Kronecker-structured normal equations followed by QR re-orthonormalization.
The hard-thresholding schedule (alpha, beta, gamma) decays geometrically across
outer iterations so that surviving entries eventually match the planted support.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator

from .datagen import measure_incoherence
from .errors import ConfigError, DomainError, SingularSystem
from .model import FitReport, ModelState, SolverConfig, TaskDataset
from .numerics import StructuredSystem, hard_threshold, least_squares, qr_orthonormalize, solve_structured
from .validation import as_task_arrays, check_orthonormal, random_orthonormal, stackable, worker_count


def _keep_top_k(row: np.ndarray, k: int) -> np.ndarray:
    """Zero all but the k largest-magnitude entries (row already thresholded)."""
    nnz = np.count_nonzero(row)
    if nnz <= k:
        return row
    cut = np.partition(np.abs(row), -k)[-k]
    return np.where(np.abs(row) >= cut, row, 0.0)


def optimize_sparse_vector(data, v, b0, alpha, beta, gamma, iters, c1, k, cap_support=True):
    """Iterative hard thresholding for one task's sparse vector.

    Runs ``iters`` rounds of a unit-step gradient update on the residual
    X(b + v) - y followed by hard thresholding at
    delta = alpha + c1 * (gamma + beta / sqrt(k)), with gamma contracted as
    gamma <- 2 c1 gamma + 2 (alpha + c1 beta / sqrt(k)) after every round.

    Safeguards for the small-sample regime, where the unit-step map is
    expansive outside the sparse cone: iteration starts from the better of
    b0 and 0, surviving entries are pruned to the k largest magnitudes when
    cap_support is set, a task stops as soon as an update increases its
    residual norm, and the lowest-residual iterate seen is returned.
    """
    if k < 1:
        raise DomainError("the threshold schedule divides by sqrt(k); need k >= 1")
    if iters < 0:
        raise DomainError("iters must be nonnegative")
    x, y = data.x, data.y
    b0 = np.asarray(b0, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if iters == 0:
        return b0.copy()
    m = x.shape[0]
    sk = math.sqrt(k)
    base = y - x @ v
    res_b0 = float(np.linalg.norm(x @ b0 - base))
    res_zero = float(np.linalg.norm(base))
    b = b0.copy() if res_b0 <= res_zero else np.zeros_like(b0)
    best_b, best_res = b, min(res_b0, res_zero)
    prev_b, prev_res = b, math.inf
    for _ in range(iters):
        resid = x @ b - base
        res = float(np.linalg.norm(resid))
        if res < best_res:
            best_b, best_res = b, res
        if res > prev_res * (1.0 + 1e-9) + 1e-12:
            break
        prev_b, prev_res = b, res
        c = b - x.T @ resid / m
        delta = alpha + c1 * (gamma + beta / sk)
        b = hard_threshold(c, delta)
        if cap_support:
            b = _keep_top_k(b, k)
        gamma = 2.0 * c1 * gamma + 2.0 * (alpha + c1 * beta / sk)
    res = float(np.linalg.norm(x @ b - base))
    if res < best_res:
        best_b = b
    return best_b.copy()


def _osv_batch(x, y, v, b0, alpha, beta, gamma, iters, c1, k):
    """Vectorized optimize_sparse_vector (support cap on) over stacked tasks (t, m, d)."""
    t, m, _ = x.shape
    sk = math.sqrt(k)
    delta = math.nan
    if iters == 0:
        return b0.copy(), delta
    base = y - (x @ v[..., None])[..., 0]
    res_b0 = np.linalg.norm((x @ b0[..., None])[..., 0] - base, axis=1)
    res_zero = np.linalg.norm(base, axis=1)
    b = np.where((res_b0 <= res_zero)[:, None], b0, 0.0)
    best_b = b.copy()
    best_res = np.minimum(res_b0, res_zero)
    prev_res = np.full(t, np.inf)
    active = np.ones(t, dtype=bool)
    for _ in range(iters):
        resid = (x @ b[..., None])[..., 0] - base
        res = np.linalg.norm(resid, axis=1)
        better = res < best_res
        if np.any(better):
            best_b[better] = b[better]
            best_res = np.where(better, res, best_res)
        active &= ~(res > prev_res * (1.0 + 1e-9) + 1e-12)
        if not np.any(active):
            break
        prev_res = np.where(active, res, prev_res)
        c = b - (x.transpose(0, 2, 1) @ resid[..., None])[..., 0] / m
        delta = alpha + c1 * (gamma + beta / sk)
        b_new = np.where(np.abs(c) > delta, c, 0.0)
        nnz = np.count_nonzero(b_new, axis=1)
        over = np.flatnonzero(active & (nnz > k))
        if over.size:
            cuts = np.partition(np.abs(b_new[over]), -k, axis=1)[:, -k]
            b_new[over] = np.where(np.abs(b_new[over]) >= cuts[:, None], b_new[over], 0.0)
        b = np.where(active[:, None], b_new, b)
        gamma = 2.0 * c1 * gamma + 2.0 * (alpha + c1 * beta / sk)
    resid = (x @ b[..., None])[..., 0] - base
    res = np.linalg.norm(resid, axis=1)
    better = res < best_res
    if np.any(better):
        best_b[better] = b[better]
    return best_b, delta


def update_w(data, u, b, ridge_eps=0.0):
    """Closed-form weight update: least squares of y - Xb on the columns of XU."""
    return least_squares(data.x @ u, data.y - data.x @ b, ridge_eps)


def build_structured_system(datasets, w, b, gram_x=None):
    """Normal-equation blocks of the shared-representation subproblem."""
    xs, ys = as_task_arrays(datasets)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = xs[0].shape[1]
    if gram_x is None:
        gram_x = np.stack([x.T @ x for x in xs])
    rhs = np.zeros((d, w.shape[1]))
    for i, (x, y) in enumerate(zip(xs, ys)):
        rhs += np.outer(x.T @ (y - x @ b[:, i]), w[i])
    return StructuredSystem(w=w, gram_x=gram_x, rhs=rhs)


def update_u(datasets, w, b):
    """Pre-QR minimizer of the summed residuals over the shared representation."""
    return solve_structured(build_structured_system(datasets, w, b))


def _proj_dist(u, u_ref):
    """||(I - u_ref u_ref') u||_F without forming the projector."""
    return float(np.linalg.norm(u - u_ref @ (u_ref.T @ u), "fro"))


def _stack_mse(x, y, u, w, b):
    resid = (x @ (b.T + w @ u.T)[..., None])[..., 0] - y
    return float(np.sum(resid**2) / resid.size)


def _loop_mse(xs, ys, u, w, b):
    sse = 0.0
    n = 0
    for i, (x, y) in enumerate(zip(xs, ys)):
        r = x @ (u @ w[i] + b[:, i]) - y
        sse += float(r @ r)
        n += len(y)
    return sse / n


def _chunk_rows(m, n_chunks, chunk):
    rows = np.arange(m)
    return rows[rows % n_chunks == chunk % n_chunks]


def _w_step_batch(x, y, u, b, ridge, r):
    """Closed-form weight update for all tasks of a stacked batch at once."""
    z = x @ u
    g = z.transpose(0, 2, 1) @ z
    resid = y - (x @ b.T[..., None])[..., 0]
    rhs = (z.transpose(0, 2, 1) @ resid[..., None])[..., 0]
    if ridge == 0.0:
        traces = np.trace(g, axis1=1, axis2=2)
        lam_min = np.linalg.eigvalsh(g)[:, 0]
        bad = (traces <= 0) | (lam_min < 1e-12 * traces)
        if np.any(bad):
            raise SingularSystem(f"weight update singular for task {int(np.flatnonzero(bad)[0])}")
        return np.linalg.solve(g, rhs[..., None])[..., 0]
    return np.linalg.solve(g + ridge * np.eye(r), rhs[..., None])[..., 0]


def _w_step_loop(xs, ys, u, b, ridge, workers):
    def one(i):
        return update_w(TaskDataset(xs[i], ys[i]), u, b[:, i], ridge)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return np.stack(list(ex.map(one, range(len(xs)))))
    return np.stack([one(i) for i in range(len(xs))])


def _stuck_tasks(res):
    med = np.median(res)
    return np.flatnonzero(res > 4.0 * med + 1e-9)


def _htp(x, base, k, iters=6):
    """Support selection by thresholding pursuit with a least-squares debias.

    More robust than the unit-step update when the restricted isometry is
    weak, so it is the solver used to rescue stuck tasks.
    """
    m, d = x.shape
    b = np.zeros(d)
    best_b, best_res = b, float(np.linalg.norm(base))
    for _ in range(iters):
        c = b + x.T @ (base - x @ b) / m
        supp = np.argpartition(np.abs(c), -k)[-k:]
        coef, *_ = np.linalg.lstsq(x[:, supp], base, rcond=None)
        b = np.zeros(d)
        b[supp] = coef
        res = float(np.linalg.norm(x @ b - base))
        if res < best_res - 1e-12:
            best_b, best_res = b, res
        else:
            break
    return best_b


def _joint_solve(x, y, u, supp):
    """Exact least squares over (w, b restricted to supp)."""
    r = u.shape[1]
    z = np.hstack([x @ u, x[:, supp]])
    coef, *_ = np.linalg.lstsq(z, y, rcond=None)
    b = np.zeros(x.shape[1])
    b[supp] = coef[r:]
    return coef[:r], b


def _omp_support(x, y, u, k):
    """Greedy support selection with the subspace columns always in the model.

    Picks one coordinate at a time by residual correlation and re-solves the
    joint system after each pick; sequential selection survives the ranking
    errors that defeat one-shot thresholding when weights are co-adapted.
    """
    m, d = x.shape
    supp: list[int] = []
    w = update_w(TaskDataset(x, y), u, np.zeros(d), 0.0)
    resid = y - x @ (u @ w)
    col_norms = np.maximum(np.linalg.norm(x, axis=0), np.finfo(float).tiny)
    for _ in range(min(k, d)):
        scores = np.abs(x.T @ resid) / col_norms
        scores[supp] = -np.inf
        j = int(np.argmax(scores))
        supp.append(j)
        w, b = _joint_solve(x, y, u, np.asarray(supp))
        resid = y - x @ (u @ w + b)
    return np.asarray(sorted(supp))


def _refresh_task(x, y, u, ridge, k, supp0=None):
    """Re-solve one task against the frozen subspace.

    Candidate supports: the task's current one (when given), supports proposed
    by thresholding pursuit, and a greedy matching-pursuit selection; each
    candidate gets an exact joint least-squares solve over (w, b_support),
    and the best-fitting pair wins.
    """
    data = TaskDataset(x, y)
    d = x.shape[1]
    w_f = update_w(data, u, np.zeros(d), ridge)
    best = (w_f, np.zeros(d), float(np.linalg.norm(x @ (u @ w_f) - y)))
    candidates = [_omp_support(x, y, u, k)]
    if supp0 is not None and len(supp0):
        candidates.append(np.asarray(supp0))
    for _ in range(2):
        supp = np.flatnonzero(_htp(x, y - x @ (u @ w_f), k))
        if supp.size:
            candidates.append(supp)
        for cand in candidates:
            w_c, b_c = _joint_solve(x, y, u, cand)
            res = float(np.linalg.norm(x @ (u @ w_c + b_c) - y))
            if res < best[2]:
                best = (w_c, b_c, res)
        w_f = best[0]
        candidates = []
    return best[0], best[1]


def _refresh_stuck_batch(x, y, u, w, b, cfg):
    res = np.linalg.norm((x @ (b.T + w @ u.T)[..., None])[..., 0] - y, axis=1)
    idx = _stuck_tasks(res)
    if not idx.size:
        return w, b
    w = w.copy()
    b = b.copy()
    for i in idx:
        w_f, b_f = _refresh_task(x[i], y[i], u, cfg.ridge_eps, cfg.k,
                                 supp0=np.flatnonzero(b[:, i]))
        if np.linalg.norm(x[i] @ (u @ w_f + b_f) - y[i]) < res[i]:
            w[i] = w_f
            b[:, i] = b_f
    return w, b


def _refresh_stuck_loop(xs, ys, u, w, b, cfg):
    res = np.array([np.linalg.norm(x @ (u @ w[i] + b[:, i]) - y) for i, (x, y) in enumerate(zip(xs, ys))])
    idx = _stuck_tasks(res)
    if not idx.size:
        return w, b
    w = w.copy()
    b = b.copy()
    for i in idx:
        w_f, b_f = _refresh_task(xs[i], ys[i], u, cfg.ridge_eps, cfg.k,
                                 supp0=np.flatnonzero(b[:, i]))
        if np.linalg.norm(xs[i] @ (u @ w_f + b_f) - ys[i]) < res[i]:
            w[i] = w_f
            b[:, i] = b_f
    return w, b


def _auto_gamma0(xs, ys):
    """Generous bound on ||b* - 0||_inf from the marginal correlations."""
    peak = max(float(np.max(np.abs(x.T @ y))) / x.shape[0] for x, y in zip(xs, ys))
    return 2.0 * peak + 1.0


def fit_lrs(datasets, cfg: SolverConfig, init_u=None, gt=None, init_seed=0, sink=None):
    """Run the full alternating-minimization loop.

    datasets : sequence of TaskDataset (or (x, y) pairs) sharing d
    cfg      : SolverConfig; cfg.outer_iters = 0 returns the initialization
    init_u   : optional (d, r) orthonormal warm start; random when omitted
    gt       : optional GroundTruth; adds recovery diagnostics to the report
    sink     : optional callable receiving each report row as it is produced

    Returns (ModelState, FitReport).  Early-stops when the subspace change
    between consecutive iterates drops below cfg.stop_tol.
    """
    xs, ys = as_task_arrays(datasets)
    t = len(xs)
    d = xs[0].shape[1]
    if t < cfg.r:
        raise ConfigError(f"need at least r={cfg.r} tasks, got {t}")
    if cfg.r > d:
        raise ConfigError(f"need r <= d, got r={cfg.r}, d={d}")

    if init_u is None:
        u = random_orthonormal(d, cfg.r, np.random.Generator(np.random.Philox(key=init_seed)))
    else:
        u = check_orthonormal(init_u, 1e-8, "init_u")
        if u.shape != (d, cfg.r):
            raise ConfigError(f"init_u must be ({d}, {cfg.r}), got {u.shape}")

    w = np.zeros((t, cfg.r))
    b = np.zeros((d, t))
    report = FitReport()
    if cfg.outer_iters == 0:
        return ModelState(u, w, b, 0), report

    big = cfg.init_bound
    if big is None:
        if gt is not None:
            inc = measure_incoherence(gt)
            big = math.sqrt(inc.lambda_r / inc.lambda_1) if inc.lambda_1 > 0 else 1.0
        else:
            big = 1.0
    gamma0 = cfg.gamma0 if cfg.gamma0 is not None else _auto_gamma0(xs, ys)
    gamma = gamma0

    batched = stackable(xs)
    if batched:
        x_stack = np.stack(xs)
        y_stack = np.stack(ys)
    split = cfg.batching == "split"
    n_chunks = 3 * cfg.outer_iters if split else 1
    if split and min(x.shape[0] for x in xs) < n_chunks:
        raise ConfigError(f"batching='split' needs m >= 3*outer_iters = {n_chunks} rows per task")
    gram_full = None
    if not split:
        gram_full = np.einsum("tma,tmb->tab", x_stack, x_stack) if batched else np.stack([x.T @ x for x in xs])

    workers = worker_count()
    sk = math.sqrt(cfg.k) if cfg.k > 0 else 1.0
    iteration = 0

    # Weight initialization: the closed-form update against the starting
    # subspace, so the first sparse step sees the low-rank signal removed.
    if batched:
        w = _w_step_batch(x_stack, y_stack, u, b, cfg.ridge_eps, cfg.r)
    else:
        w = _w_step_loop(xs, ys, u, b, cfg.ridge_eps, workers)

    for ell in range(1, cfg.outer_iters + 1):
        t0 = time.perf_counter()
        inner_t = min(cfg.inner_cap, math.ceil(ell * math.log(max(gamma / cfg.eps, 2.0))))
        # The subspace-error bound enters the per-task thresholds scaled by the
        # task's weight norm; the largest current estimate covers every task.
        w_peak = max(float(np.max(np.linalg.norm(w, axis=1), initial=0.0)), 1.0)
        alpha = cfg.c4 ** (ell - 1) * big * w_peak / sk
        beta = cfg.c5 ** (ell - 1) * big * w_peak
        delta_used = math.nan

        def step_data(phase):
            if not split:
                return (x_stack, y_stack) if batched else (xs, ys)
            chunk = 3 * (ell - 1) + phase
            if batched:
                rows = _chunk_rows(x_stack.shape[1], n_chunks, chunk)
                return x_stack[:, rows, :], y_stack[:, rows]
            sl = [
                (x[_chunk_rows(x.shape[0], n_chunks, chunk)], y[_chunk_rows(x.shape[0], n_chunks, chunk)])
                for x, y in zip(xs, ys)
            ]
            return [s[0] for s in sl], [s[1] for s in sl]

        # Sparse step.
        if cfg.k > 0:
            bx, by = step_data(0)
            if batched:
                b_new, delta_used = _osv_batch(
                    bx, by, (u @ w.T).T, b.T, alpha, beta, gamma, inner_t, cfg.c1, cfg.k
                )
                b = b_new.T
            else:
                def one_b(i):
                    return optimize_sparse_vector(
                        TaskDataset(bx[i], by[i]), u @ w[i], b[:, i],
                        alpha, beta, gamma, inner_t, cfg.c1, cfg.k,
                    )
                if workers > 1:
                    with ThreadPoolExecutor(max_workers=workers) as ex:
                        cols = list(ex.map(one_b, range(t)))
                else:
                    cols = [one_b(i) for i in range(t)]
                b = np.column_stack(cols)
                delta_used = alpha + cfg.c1 * (gamma + beta / sk)
        mse_after_b = _stack_mse(x_stack, y_stack, u, w, b) if batched else _loop_mse(xs, ys, u, w, b)

        # Weight step.
        wx, wy = step_data(1)
        if batched:
            w = _w_step_batch(wx, wy, u, b, cfg.ridge_eps, cfg.r)
        else:
            w = _w_step_loop(wx, wy, u, b, cfg.ridge_eps, workers)

        # A task can lock into a co-adapted (w, b) pair fitting the data badly;
        # re-solving such tasks from scratch against the current subspace and
        # keeping the better fit unwinds them without touching healthy tasks.
        if cfg.k > 0 and not split and t > 1:
            if batched:
                w, b = _refresh_stuck_batch(x_stack, y_stack, u, w, b, cfg)
            else:
                w, b = _refresh_stuck_loop(xs, ys, u, w, b, cfg)
        mse_after_w = _stack_mse(x_stack, y_stack, u, w, b) if batched else _loop_mse(xs, ys, u, w, b)

        # Representation step.
        ux, uy = step_data(2)
        if batched:
            gram = gram_full if not split else np.einsum("tma,tmb->tab", ux, ux)
            resid = uy - (ux @ b.T[..., None])[..., 0]
            per = (ux.transpose(0, 2, 1) @ resid[..., None])[..., 0]
            rhs = per.T @ w
            system = StructuredSystem(w=w, gram_x=gram, rhs=rhs)
            u_raw = solve_structured(system)
        elif split:
            u_raw = update_u(list(zip(ux, uy)), w, b)
        else:
            u_raw = solve_structured(build_structured_system(list(zip(xs, ys)), w, b, gram_x=gram_full))
        u_prev = u
        u, r_factor = qr_orthonormalize(u_raw)
        # u_raw w = u (R w), so rotating the weights preserves every theta(i);
        # refitting them against the new basis is the exact block minimizer
        # and can only lower the objective further.
        w = w @ r_factor.T
        if batched:
            w = _w_step_batch(wx, wy, u, b, cfg.ridge_eps, cfg.r)
        else:
            w = _w_step_loop(wx, wy, u, b, cfg.ridge_eps, workers)
        mse_after_u = _stack_mse(x_stack, y_stack, u, w, b) if batched else _loop_mse(xs, ys, u, w, b)

        gamma = cfg.c3**ell * gamma0
        change = _proj_dist(u_prev, u)
        iteration = ell
        row = dict(
            iteration=ell,
            train_mse=mse_after_u,
            mse_after_b=mse_after_b,
            mse_after_w=mse_after_w,
            mse_after_u=mse_after_u,
            subspace_dist=_proj_dist(u, gt.u_star) if gt is not None else math.nan,
            subspace_change=change,
            max_b_nnz=int(np.max(np.count_nonzero(b, axis=0), initial=0)),
            delta=delta_used,
            inner_iters=inner_t,
            wall_time=time.perf_counter() - t0,
        )
        report.append(**row)
        if sink is not None:
            sink(row)
        if change < cfg.stop_tol:
            break

    return ModelState(u, w, b, iteration), report


class LRSRegressor(BaseEstimator):
    """Multi-task regressor with a shared low-rank subspace plus per-task sparse corrections.

    Parameters mirror SolverConfig; ``init`` selects the warm start: "random",
    "mom" (moment-based spectral initialization), or an explicit (d, r) array.

    Attributes after fit: ``u_`` (d, r), ``w_`` (t, r), ``b_`` (d, t),
    ``state_``, ``report_``.
    """

    def __init__(
        self,
        r=1,
        k=0,
        n_iters=15,
        eps=1e-6,
        c1=0.25,
        c3=0.5,
        c4=0.5,
        c5=0.5,
        inner_cap=50,
        init_bound=None,
        gamma0=None,
        batching="reuse",
        ridge_eps=0.0,
        stop_tol=1e-10,
        init="random",
        random_state=0,
    ):
        self.r = r
        self.k = k
        self.n_iters = n_iters
        self.eps = eps
        self.c1 = c1
        self.c3 = c3
        self.c4 = c4
        self.c5 = c5
        self.inner_cap = inner_cap
        self.init_bound = init_bound
        self.gamma0 = gamma0
        self.batching = batching
        self.ridge_eps = ridge_eps
        self.stop_tol = stop_tol
        self.init = init
        self.random_state = random_state

    def _config(self):
        return SolverConfig(
            r=self.r,
            k=self.k,
            outer_iters=self.n_iters,
            eps=self.eps,
            c1=self.c1,
            c3=self.c3,
            c4=self.c4,
            c5=self.c5,
            inner_cap=self.inner_cap,
            init_bound=self.init_bound,
            gamma0=self.gamma0,
            batching=self.batching,
            ridge_eps=self.ridge_eps,
            stop_tol=self.stop_tol,
        )

    def _initial_u(self, datasets):
        if isinstance(self.init, np.ndarray):
            return self.init
        if self.init == "random":
            return None
        if self.init == "mom":
            from .adapt import mom_init

            return mom_init(datasets, self.r)
        raise ConfigError(f"init must be 'random', 'mom', or an array, got {self.init!r}")

    def fit(self, X, y=None, ground_truth=None):
        """Fit on per-task data: X a sequence of (m_i, d) designs, y the responses.

        X may instead be a sequence of TaskDataset or (x, y) pairs with y omitted.
        """
        datasets = list(zip(X, y)) if y is not None else X
        xs, ys = as_task_arrays(datasets)
        pairs = [TaskDataset(x, yy) for x, yy in zip(xs, ys)]
        state, rep = fit_lrs(
            pairs,
            self._config(),
            init_u=self._initial_u(pairs),
            gt=ground_truth,
            init_seed=self.random_state,
        )
        self.state_ = state
        self.report_ = rep
        self.u_ = state.u
        self.w_ = state.w
        self.b_ = state.b
        self.n_features_in_ = state.d
        return self

    def predict(self, X, task):
        """Predict responses for new covariates of an already-fitted task."""
        x = np.asarray(X, dtype=np.float64)
        return x @ self.state_.theta(task)
