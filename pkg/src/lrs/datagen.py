"""Synthetic ground truth and realizable Gaussian task data.

Reproducibility contract: every random draw comes from a counter-based Philox
stream keyed by (seed, stream id), so regeneration is bitwise identical under
any parallel schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, InfeasibleSparsity
from .model import GroundTruth, TaskDataset

# Stream ids carving up the Philox key space per seed.
_STREAM_TRUTH = 0
_STREAM_TASK = 1


def keyed_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Independent counter-based generator for (seed, stream, index)."""
    key = ((int(seed) & 0xFFFFFFFFFFFFFFFF) << 64) | ((int(stream) & 0xFFFF) << 48) | (int(index) & 0xFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class GenConfig:
    """Dimensions, sparsity budgets and noise level of the planted model."""

    d: int
    r: int
    t: int
    m: int
    k: int
    zeta: int
    sigma: float
    seed: int
    w_scale: float = 1.0

    def __post_init__(self):
        for name in ("d", "r", "t", "m"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.k <= self.d:
            raise ConfigError(f"need 0 <= k <= d, got k={self.k}, d={self.d}")
        if not 0 <= self.zeta <= self.t:
            raise ConfigError(f"need 0 <= zeta <= t, got zeta={self.zeta}, t={self.t}")
        if self.r > self.d:
            raise ConfigError(f"need r <= d, got r={self.r}, d={self.d}")
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        if not self.w_scale > 0:
            raise ConfigError("w_scale must be positive")


def _assign_supports(d, t, k, zeta, rng):
    """Random supports with at most k nonzeros per column and zeta per row.

    Uniform greedy assignment first; tight budgets can strand it even when a
    feasible assignment exists, so after a few global retries fall back to
    filling from the rows with the most remaining capacity (always succeeds
    when t*k <= d*zeta).
    """
    for _ in range(10):
        cap = np.full(d, zeta, dtype=np.int64)
        cols = []
        ok = True
        for _col in range(t):
            avail = np.flatnonzero(cap > 0)
            if avail.size < k:
                ok = False
                break
            pick = rng.choice(avail, size=k, replace=False)
            cap[pick] -= 1
            cols.append(np.sort(pick))
        if ok:
            return cols

    cap = np.full(d, zeta, dtype=np.int64)
    cols = []
    for _col in range(t):
        jitter = rng.random(d)
        order = np.lexsort((jitter, -cap))
        pick = order[:k]
        if np.any(cap[pick] <= 0):
            raise InfeasibleSparsity("support assignment failed despite feasible budgets")
        cap[pick] -= 1
        cols.append(np.sort(pick))
    return cols


def gen_ground_truth(cfg: GenConfig) -> GroundTruth:
    """Planted (U*, W*, B*) with orthonormal U* and budgeted sparse B*."""
    if cfg.t * cfg.k > cfg.d * cfg.zeta:
        raise InfeasibleSparsity(
            f"t*k = {cfg.t * cfg.k} supports needed but row budgets allow only "
            f"d*zeta = {cfg.d * cfg.zeta}"
        )
    rng = keyed_rng(cfg.seed, _STREAM_TRUTH)
    g = rng.standard_normal((cfg.d, cfg.r))
    q, rr = np.linalg.qr(g)
    u_star = q * np.sign(np.diag(rr))
    w_star = cfg.w_scale * rng.standard_normal((cfg.t, cfg.r))
    b_star = np.zeros((cfg.d, cfg.t))
    if cfg.k > 0:
        supports = _assign_supports(cfg.d, cfg.t, cfg.k, cfg.zeta, rng)
        for i, rows in enumerate(supports):
            b_star[rows, i] = rng.standard_normal(cfg.k)
    return GroundTruth(u_star, w_star, b_star, cfg.sigma, cfg.k, cfg.zeta)


def with_shared_weights(gt: GroundTruth, value: float = 1.0) -> GroundTruth:
    """Replace W* by a constant, the shared-model special case (requires r = 1)."""
    if gt.r != 1:
        raise ConfigError("shared weights are defined for rank 1 only")
    return replace(gt, w_star=np.full((gt.t, 1), float(value)))


def gen_samples(gt: GroundTruth, m: int, seed: int) -> list[TaskDataset]:
    """m realizable Gaussian samples per task: x ~ N(0, I), y = x'theta* + N(0, sigma^2)."""
    if m < 1:
        raise ConfigError("m must be positive")
    thetas = gt.u_star @ gt.w_star.T + gt.b_star   # (d, t)
    out = []
    for i in range(gt.t):
        rng = keyed_rng(seed, _STREAM_TASK, i)
        x = rng.standard_normal((m, gt.d))
        y = x @ thetas[:, i]
        if gt.sigma > 0:
            y = y + gt.sigma * rng.standard_normal(m)
        out.append(TaskDataset(x, y))
    return out


@dataclass(frozen=True)
class IncoherenceReport:
    """Measured constants of the diversity/incoherence conditions."""

    mu_star: float
    lambda_1: float
    lambda_r: float
    u_row_norm_max: float    # ||U*||_{2,inf}
    w_row_norm_max: float    # ||W*||_{2,inf}
    max_col_nnz: int
    max_row_nnz: int


def measure_incoherence(gt: GroundTruth) -> IncoherenceReport:
    """Extreme eigenvalues of (r/t) W*'W* and the smallest incoherence constant.

    mu* is the least constant making both ||W*||_{2,inf} <= sqrt(mu* lambda_r)
    and ||U*||_{2,inf} <= sqrt(mu* r / d) hold.
    """
    t, r = gt.w_star.shape
    diversity = (r / t) * (gt.w_star.T @ gt.w_star)
    vals = np.linalg.eigvalsh(diversity)
    lam_1, lam_r = float(vals[-1]), float(vals[0])
    w_inf = float(np.max(np.linalg.norm(gt.w_star, axis=1)))
    u_inf = float(np.max(np.linalg.norm(gt.u_star, axis=1)))
    mu_w = w_inf**2 / lam_r if lam_r > 0 else np.inf
    mu_u = u_inf**2 * gt.d / r
    return IncoherenceReport(
        mu_star=float(max(mu_w, mu_u)),
        lambda_1=lam_1,
        lambda_r=lam_r,
        u_row_norm_max=u_inf,
        w_row_norm_max=w_inf,
        max_col_nnz=int(np.max(np.count_nonzero(gt.b_star, axis=0), initial=0)),
        max_row_nnz=int(np.max(np.count_nonzero(gt.b_star, axis=1), initial=0)),
    )
