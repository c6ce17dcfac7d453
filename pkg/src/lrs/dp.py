"""User-level differential privacy for the shared-representation update.

Billboard architecture: only the shared subspace estimate is released, formed
from clipped per-user contributions plus Gaussian noise; the per-task weights
and sparse vectors are local state that never leaves a user, so they are
updated on clean data without noise.  Privacy is tracked in zCDP: each release
costs rho = 1/(L * sigma_dp^2) and the total after the planned L releases is
1/sigma_dp^2, converted to (epsilon, delta) on demand.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator

from .datagen import measure_incoherence
from .errors import ConfigError, DomainError, PrivacyBudgetMismatch
from .model import FitReport, ModelState, PrivacyConfig, SolverConfig, TaskDataset
from .numerics import StructuredSystem, qr_orthonormalize, solve_structured
from .solver import _osv_batch, _proj_dist, _refresh_stuck_batch, _stack_mse, _w_step_batch
from .validation import as_task_arrays, check_orthonormal, random_orthonormal, stackable


def calibrate_noise(epsilon: float, delta: float) -> float:
    """Smallest noise multiplier certified for an (epsilon, delta) target.

    The general bound 2 sqrt(ln(1/delta) + epsilon) / epsilon is never larger
    than the high-privacy bound sqrt(8 ln(1/delta)) / epsilon on that bound's
    own domain (epsilon <= ln(1/delta)), so it is returned for all inputs.
    """
    _check_eps_delta(epsilon, delta)
    return 2.0 * math.sqrt(math.log(1.0 / delta) + epsilon) / epsilon


def calibrate_noise_simple(epsilon: float, delta: float) -> float:
    """The sqrt(8 ln(1/delta))/epsilon bound, valid when epsilon <= ln(1/delta)."""
    _check_eps_delta(epsilon, delta)
    if epsilon > math.log(1.0 / delta):
        raise DomainError("the simplified bound requires epsilon <= ln(1/delta)")
    return math.sqrt(8.0 * math.log(1.0 / delta)) / epsilon


def accountant_epsilon(sigma_dp: float, delta: float) -> float:
    """(epsilon at delta) implied by total zCDP rho = 1/sigma_dp^2."""
    if sigma_dp < 0:
        raise DomainError("sigma_dp must be nonnegative")
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    if sigma_dp == 0:
        return math.inf
    rho = 1.0 / sigma_dp**2
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def _check_eps_delta(epsilon, delta):
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")


def zcdp_to_epsilon(rho: float, delta: float) -> float:
    """Tightest (epsilon, delta) conversion of a rho-zCDP guarantee."""
    if rho < 0:
        raise DomainError("rho must be nonnegative")
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    if math.isinf(rho):
        return math.inf
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def noise_stds(cfg: PrivacyConfig, m: int):
    """Standard deviations of the two noise matrices for per-user batch size m.

    sigma1 scales the quadratic term (sensitivity m A1^2 Aw^2), sigma2 the
    linear term (sensitivity m A1 (A2 + A3) Aw); both carry sqrt(L) so the
    planned release count composes to 1/sigma_dp^2 total.
    """
    if m < 1:
        raise DomainError("m must be positive")
    root_l = math.sqrt(cfg.planned_iters)
    sigma1 = m * cfg.a1**2 * cfg.aw**2 * root_l * cfg.sigma_dp
    sigma2 = m * cfg.a1 * (cfg.a2 + cfg.a3) * cfg.aw * root_l * cfg.sigma_dp
    return sigma1, sigma2


_CLIP_FLOOR = 1e-6


def theory_clip_levels(gt, m: int, n_iters: int):
    """Clip levels from the planted model's incoherence constants.

    All levels carry the sqrt(2 ln(10 m t L)) high-probability inflation; the
    response level adds the largest sparse-column norm and the noise sigma.
    """
    inc = measure_incoherence(gt)
    log_term = math.sqrt(2.0 * math.log(10.0 * m * gt.t * n_iters))
    mu_lam = math.sqrt(max(inc.mu_star * inc.lambda_r, 0.0))
    b_norm = float(np.max(np.linalg.norm(gt.b_star, axis=0), initial=0.0))
    a1 = math.sqrt(gt.d) * log_term
    a2 = (mu_lam + b_norm + gt.sigma) * log_term
    a3 = max(b_norm * log_term, _CLIP_FLOOR)
    aw = max(mu_lam * log_term, _CLIP_FLOOR)
    return a1, a2, a3, aw


def empirical_clip_levels(datasets, state=None, q=0.999):
    """Quantile-of-data clip levels: the q-quantile of each clipped quantity.

    Without a model state the sparse vectors are unknown, so the dot-product
    level falls back to the response level and the weight level to the
    per-task norm of the d-dimensional marginal estimate (an overestimate).
    """
    xs, ys = as_task_arrays(datasets)
    x_norms = np.concatenate([np.linalg.norm(x, axis=1) for x in xs])
    y_abs = np.concatenate([np.abs(y) for y in ys])
    a1 = float(np.quantile(x_norms, q))
    a2 = float(np.quantile(y_abs, q))
    if state is not None:
        dots = np.concatenate([np.abs(x @ state.b[:, i]) for i, x in enumerate(xs)])
        a3 = float(np.quantile(dots, q)) if np.any(dots) else _CLIP_FLOOR
        w_norms = np.linalg.norm(state.w, axis=1)
        aw = float(np.quantile(w_norms, q)) if np.any(w_norms) else _CLIP_FLOOR
    else:
        a3 = a2
        marginals = [np.linalg.norm(x.T @ y) / x.shape[0] for x, y in zip(xs, ys)]
        aw = float(np.quantile(np.asarray(marginals), q))
    return max(a1, _CLIP_FLOOR), max(a2, _CLIP_FLOOR), max(a3, _CLIP_FLOOR), max(aw, _CLIP_FLOOR)


def default_clip_levels(gt=None, datasets=None, state=None, m=None, n_iters=1, q=0.999):
    """Planted-model levels when gt is given, else the quantile fallback."""
    if gt is not None:
        if m is None:
            if datasets is None:
                raise ConfigError("m (or datasets) required with gt")
            m = max(x.shape[0] for x, _ in [(d.x, d.y) for d in datasets])
        return theory_clip_levels(gt, m, n_iters)
    if datasets is None:
        raise ConfigError("need gt or datasets")
    return empirical_clip_levels(datasets, state=state, q=q)


@dataclass
class PrivacyLedger:
    """Append-only record of zCDP spent on each release."""

    planned_releases: int
    entries: list = field(default_factory=list)

    def charge(self, iteration: int, rho: float):
        if len(self.entries) >= self.planned_releases:
            raise PrivacyBudgetMismatch(
                f"release {len(self.entries) + 1} exceeds the planned {self.planned_releases}"
            )
        self.entries.append((int(iteration), float(rho)))

    @property
    def rho_total(self) -> float:
        return float(sum(rho for _, rho in self.entries))

    def epsilon_at(self, delta: float) -> float:
        return zcdp_to_epsilon(self.rho_total, delta)

    def to_dict(self, delta=None):
        out = {
            "planned_releases": self.planned_releases,
            "releases": [{"iteration": it, "rho": rho} for it, rho in self.entries],
            "rho_total": self.rho_total,
        }
        if delta is not None:
            out["delta"] = delta
            out["epsilon_at_delta"] = self.epsilon_at(delta)
        return out


def _symmetric_gaussian(n, std, rng):
    """Symmetric matrix with N(0, std^2) marginals: upper triangle drawn, mirrored."""
    m = np.zeros((n, n))
    iu = np.triu_indices(n)
    m[iu] = rng.normal(0.0, std, size=len(iu[0]))
    return m + np.triu(m, 1).T


def _clip_rows(x, rho):
    """Row-wise norm clip; idempotent (rescales rows that overshoot by an ulp)."""
    out = np.asarray(x, dtype=np.float64).copy()
    for _ in range(4):
        norms = np.linalg.norm(out, axis=-1, keepdims=True)
        over = norms > rho
        if not np.any(over):
            break
        scale = np.where(over, rho / np.maximum(norms, np.finfo(float).tiny), 1.0)
        out = out * scale
    return out


def private_update_u(datasets, w, b, pcfg: PrivacyConfig, noise_seed=0, release_index=0):
    """One noisy shared-representation release.

    Clips covariates, responses, the covariate/sparse-vector dot products and
    the weight vectors to (A1, A2, A3, Aw), forms the quadratic and linear
    terms of the normal equations from the clipped data, perturbs them with
    Gaussian noise calibrated to the planned release count, and solves.

    Returns (pre-QR (d, r) matrix, rho spent by this release).
    """
    xs, ys = as_task_arrays(datasets)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = max(x.shape[0] for x in xs)
    n_total = sum(x.shape[0] for x in xs)
    x_c = [_clip_rows(x, pcfg.a1) for x in xs]
    y_c = [np.clip(y, -pcfg.a2, pcfg.a2) for y in ys]
    gram_c = np.stack([xc.T @ xc for xc in x_c])
    w_c = _clip_rows(w, pcfg.aw)
    v_sum = np.zeros((xs[0].shape[1], w.shape[1]))
    for i, (xc, yc) in enumerate(zip(x_c, y_c)):
        dots = np.clip(xc @ b[:, i], -pcfg.a3, pcfg.a3)
        v_sum += np.outer(xc.T @ (yc - dots), w_c[i])
    return _noisy_solve(w_c, gram_c, v_sum, pcfg, m, n_total, noise_seed, release_index)


def _release_from_clipped(gram_c, x_c, y_c, b, w, pcfg, n_total, noise_seed, release_index):
    """One release from precomputed clipped covariates and responses (stacked)."""
    m = x_c.shape[1]
    w_c = _clip_rows(w, pcfg.aw)
    dots = np.clip((x_c @ b.T[..., None])[..., 0], -pcfg.a3, pcfg.a3)
    per = (x_c.transpose(0, 2, 1) @ (y_c - dots)[..., None])[..., 0]
    v_sum = per.T @ w_c
    return _noisy_solve(w_c, gram_c, v_sum, pcfg, m, n_total, noise_seed, release_index)


def noised_system(w_c, gram_c, v_sum, pcfg, m, n_total, noise_seed, release_index):
    """The normalized release system (A, V) including the Gaussian perturbations."""
    d, r = v_sum.shape
    ww = np.einsum("ti,tj->tij", w_c, w_c)
    a_sum = np.einsum("tij,tab->iajb", ww, gram_c).reshape(r * d, r * d)
    sigma1, sigma2 = noise_stds(pcfg, m)
    rng = np.random.Generator(np.random.Philox(key=(np.uint64(noise_seed), np.uint64(release_index))))
    a = (a_sum + _symmetric_gaussian(r * d, sigma1, rng)) / n_total
    v = (v_sum + rng.normal(0.0, sigma2, size=(d, r))) / n_total
    return a, v


def _noisy_solve(w_c, gram_c, v_sum, pcfg, m, n_total, noise_seed, release_index):
    d, r = v_sum.shape
    if pcfg.sigma_dp == 0:
        # Degenerate mode: exactly the non-private structured solve.
        sol = solve_structured(StructuredSystem(w=w_c, gram_x=gram_c, rhs=v_sum))
        return sol, math.inf

    a, v = noised_system(w_c, gram_c, v_sum, pcfg, m, n_total, noise_seed, release_index)

    # The clean system must be nonsingular; under the added noise exact
    # singularity has probability zero, so an ill-conditioned draw is solved
    # in the least-squares sense (poor utility rather than an aborted run).
    vals = scipy.linalg.eigvalsh(a)
    scale = np.max(np.abs(vals))
    rhs = v.reshape(-1, order="F")
    if scale <= 0 or np.min(np.abs(vals)) < 1e-12 * scale:
        sol, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    else:
        sol = scipy.linalg.solve(a, rhs, assume_a="sym")
    rho = 1.0 / (pcfg.planned_iters * pcfg.sigma_dp**2)
    return sol.reshape((d, r), order="F"), rho


def fit_private(datasets, cfg: SolverConfig, pcfg: PrivacyConfig, init_u=None, gt=None,
                init_seed=0, noise_seed=0, on_release=None):
    """Alternating minimization with the representation step privatized.

    Identical to the non-private solver except that each shared-subspace
    update is a clipped, noised release charged to the ledger; the sparse and
    weight updates run on each user's clean local data.  Requires
    pcfg.planned_iters == cfg.outer_iters (the noise is calibrated to exactly
    that many releases) and batching='reuse'.

    Returns (ModelState, FitReport, PrivacyLedger).
    """
    if pcfg.planned_iters != cfg.outer_iters:
        raise PrivacyBudgetMismatch(
            f"noise calibrated for {pcfg.planned_iters} releases but solver plans {cfg.outer_iters}"
        )
    if cfg.batching != "reuse":
        raise ConfigError("the private solver supports batching='reuse' only")
    xs, ys = as_task_arrays(datasets)
    t = len(xs)
    d = xs[0].shape[1]
    if t < cfg.r:
        raise ConfigError(f"need at least r={cfg.r} tasks, got {t}")
    if not stackable(xs):
        raise ConfigError("the private solver requires the same sample count per user")

    if init_u is None:
        u = random_orthonormal(d, cfg.r, np.random.Generator(np.random.Philox(key=init_seed)))
    else:
        u = check_orthonormal(init_u, 1e-8, "init_u")

    b = np.zeros((d, t))
    ledger = PrivacyLedger(planned_releases=pcfg.planned_iters)
    report = FitReport()

    big = cfg.init_bound
    if big is None:
        if gt is not None:
            inc = measure_incoherence(gt)
            big = math.sqrt(inc.lambda_r / inc.lambda_1) if inc.lambda_1 > 0 else 1.0
        else:
            big = 1.0
    gamma0 = cfg.gamma0
    if gamma0 is None:
        gamma0 = 2.0 * max(float(np.max(np.abs(x.T @ y))) / x.shape[0] for x, y in zip(xs, ys)) + 1.0
    gamma = gamma0

    x_stack = np.stack(xs)
    y_stack = np.stack(ys)
    sk = math.sqrt(cfg.k) if cfg.k > 0 else 1.0
    # Clip levels are fixed inputs, so the clipped covariates, responses, and
    # per-user quadratic terms can be prepared once for all releases.
    x_c = _clip_rows(x_stack, pcfg.a1)
    y_c = np.clip(y_stack, -pcfg.a2, pcfg.a2)
    gram_c = np.einsum("tma,tmb->tab", x_c, x_c)
    n_total = t * x_stack.shape[1]
    w = _w_step_batch(x_stack, y_stack, u, b, cfg.ridge_eps, cfg.r)

    for ell in range(1, cfg.outer_iters + 1):
        t0 = time.perf_counter()
        inner_t = min(cfg.inner_cap, math.ceil(ell * math.log(max(gamma / cfg.eps, 2.0))))
        w_peak = max(float(np.max(np.linalg.norm(w, axis=1), initial=0.0)), 1.0)
        alpha = cfg.c4 ** (ell - 1) * big * w_peak / sk
        beta = cfg.c5 ** (ell - 1) * big * w_peak

        if cfg.k > 0:
            b_new, _ = _osv_batch(x_stack, y_stack, (u @ w.T).T, b.T,
                                  alpha, beta, gamma, inner_t, cfg.c1, cfg.k)
            b = b_new.T
        w = _w_step_batch(x_stack, y_stack, u, b, cfg.ridge_eps, cfg.r)
        if cfg.k > 0 and t > 1:
            w, b = _refresh_stuck_batch(x_stack, y_stack, u, w, b, cfg)

        u_raw, rho = _release_from_clipped(gram_c, x_c, y_c, b, w, pcfg,
                                           n_total, noise_seed, ell)
        ledger.charge(ell, rho)
        u_prev = u
        u, _ = qr_orthonormalize(u_raw)
        # Users refit their weights against every new release (local, clean
        # data): carrying the R-rotated weights forward would inherit the
        # arbitrary scale of the noisy pre-QR solution.
        w = _w_step_batch(x_stack, y_stack, u, b, cfg.ridge_eps, cfg.r)
        gamma = cfg.c3**ell * gamma0

        row = dict(
            iteration=ell,
            train_mse=_stack_mse(x_stack, y_stack, u, w, b),
            subspace_dist=_proj_dist(u, gt.u_star) if gt is not None else math.nan,
            subspace_change=_proj_dist(u_prev, u),
            max_b_nnz=int(np.max(np.count_nonzero(b, axis=0), initial=0)),
            rho_spent=rho,
            rho_total=ledger.rho_total,
            epsilon_at_delta=ledger.epsilon_at(pcfg.delta),
            wall_time=time.perf_counter() - t0,
        )
        report.append(**row)
        if on_release is not None:
            on_release(row)

    # Final local personalization: each user refits their private (w, b) pair
    # against the last released representation (local clean data, no privacy
    # cost).  This also discards local state poisoned by a bad noise draw.
    w = _w_step_batch(x_stack, y_stack, u, b, cfg.ridge_eps, cfg.r)
    if cfg.k > 0:
        inner_t = min(cfg.inner_cap, math.ceil(cfg.outer_iters * math.log(max(gamma0 / cfg.eps, 2.0))))
        b_new, _ = _osv_batch(x_stack, y_stack, (u @ w.T).T, b.T,
                              alpha, beta, gamma, inner_t, cfg.c1, cfg.k)
        b = b_new.T
        w = _w_step_batch(x_stack, y_stack, u, b, cfg.ridge_eps, cfg.r)

    return ModelState(u, w, b, cfg.outer_iters), report, ledger


class PrivateLRSRegressor(BaseEstimator):
    """Estimator wrapper around the private solver.

    Clip levels default to the quantile-of-data rule at fit time when not
    supplied.  ``sigma_dp=None`` derives the noise multiplier from
    (epsilon, delta).  Attributes after fit: ``u_``, ``w_``, ``b_``,
    ``state_``, ``report_``, ``ledger_``.
    """

    def __init__(self, r=1, k=0, n_iters=15, epsilon=1.0, delta=1e-5, sigma_dp=None,
                 a1=None, a2=None, a3=None, aw=None, clip_quantile=0.999,
                 eps=1e-6, c1=0.25, c3=0.5, c4=0.5, c5=0.5, inner_cap=50,
                 init_bound=None, gamma0=None, init="random", random_state=0, noise_seed=0):
        self.r = r
        self.k = k
        self.n_iters = n_iters
        self.epsilon = epsilon
        self.delta = delta
        self.sigma_dp = sigma_dp
        self.a1 = a1
        self.a2 = a2
        self.a3 = a3
        self.aw = aw
        self.clip_quantile = clip_quantile
        self.eps = eps
        self.c1 = c1
        self.c3 = c3
        self.c4 = c4
        self.c5 = c5
        self.inner_cap = inner_cap
        self.init_bound = init_bound
        self.gamma0 = gamma0
        self.init = init
        self.random_state = random_state
        self.noise_seed = noise_seed

    def fit(self, X, y=None, ground_truth=None):
        datasets = list(zip(X, y)) if y is not None else X
        xs, ys = as_task_arrays(datasets)
        pairs = [TaskDataset(x, yy) for x, yy in zip(xs, ys)]
        levels = (self.a1, self.a2, self.a3, self.aw)
        if any(v is None for v in levels):
            auto = empirical_clip_levels(pairs, q=self.clip_quantile)
            levels = tuple(v if v is not None else a for v, a in zip(levels, auto))
        sigma = self.sigma_dp
        if sigma is None:
            sigma = calibrate_noise(self.epsilon, self.delta)
        pcfg = PrivacyConfig(self.epsilon, self.delta, sigma, *levels, planned_iters=self.n_iters)
        cfg = SolverConfig(
            r=self.r, k=self.k, outer_iters=self.n_iters, eps=self.eps,
            c1=self.c1, c3=self.c3, c4=self.c4, c5=self.c5, inner_cap=self.inner_cap,
            init_bound=self.init_bound, gamma0=self.gamma0,
        )
        init_u = None
        if isinstance(self.init, np.ndarray):
            init_u = self.init
        elif self.init == "mom":
            from .adapt import mom_init

            init_u = mom_init(pairs, self.r)
        state, rep, ledger = fit_private(
            pairs, cfg, pcfg, init_u=init_u, gt=ground_truth,
            init_seed=self.random_state, noise_seed=self.noise_seed,
        )
        self.state_, self.report_, self.ledger_ = state, rep, ledger
        self.u_, self.w_, self.b_ = state.u, state.w, state.b
        self.privacy_config_ = pcfg
        self.n_features_in_ = state.d
        return self

    def predict(self, X, task):
        x = np.asarray(X, dtype=np.float64)
        return x @ self.state_.theta(task)
