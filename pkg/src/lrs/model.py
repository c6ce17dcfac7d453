"""Domain types: planted truth, task data, solver state, and configurations.

All types are immutable value objects; the held numpy arrays are treated as
read-only by every routine in the package, so instances are safe to share
across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError


def _freeze(obj, name, value):
    object.__setattr__(obj, name, value)


@dataclass(frozen=True)
class GroundTruth:
    """The planted model generating the data.

    u_star : (d, r) orthonormal columns
    w_star : (t, r), row i is the i-th task's weight vector
    b_star : (d, t), column i is the i-th task's sparse correction
    sigma  : response-noise standard deviation
    k      : per-column sparsity budget of b_star
    zeta   : per-row sparsity budget of b_star
    """

    u_star: np.ndarray
    w_star: np.ndarray
    b_star: np.ndarray
    sigma: float
    k: int
    zeta: int

    def __post_init__(self):
        _freeze(self, "u_star", np.asarray(self.u_star, dtype=np.float64))
        _freeze(self, "w_star", np.asarray(self.w_star, dtype=np.float64))
        _freeze(self, "b_star", np.asarray(self.b_star, dtype=np.float64))
        d, r = self.u_star.shape
        t = self.w_star.shape[0]
        if not (d >= r >= 1 and t >= 1):
            raise ConfigError(f"need d >= r >= 1 and t >= 1, got d={d}, r={r}, t={t}")
        if self.w_star.shape != (t, r) or self.b_star.shape != (d, t):
            raise ConfigError("ground-truth shapes are inconsistent")
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        gram_err = np.linalg.norm(self.u_star.T @ self.u_star - np.eye(r), "fro")
        if gram_err > 1e-10:
            raise ConfigError(f"u_star columns not orthonormal (||U'U-I||_F={gram_err:.2e})")
        col_nnz = np.count_nonzero(self.b_star, axis=0)
        row_nnz = np.count_nonzero(self.b_star, axis=1)
        if col_nnz.size and col_nnz.max() > self.k:
            raise ConfigError(f"a column of b_star has {col_nnz.max()} > k={self.k} nonzeros")
        if row_nnz.size and row_nnz.max() > self.zeta:
            raise ConfigError(f"a row of b_star has {row_nnz.max()} > zeta={self.zeta} nonzeros")

    @property
    def d(self) -> int:
        return self.u_star.shape[0]

    @property
    def r(self) -> int:
        return self.u_star.shape[1]

    @property
    def t(self) -> int:
        return self.w_star.shape[0]

    def theta(self, task: int) -> np.ndarray:
        """Planted per-task parameter U* w*(i) + b*(i)."""
        if not 0 <= task < self.t:
            raise IndexError(f"task {task} out of range [0, {self.t})")
        return self.u_star @ self.w_star[task] + self.b_star[:, task]


@dataclass(frozen=True)
class TaskDataset:
    """One task's design matrix (m, d) and response vector (m,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        _freeze(self, "x", np.asarray(self.x, dtype=np.float64))
        _freeze(self, "y", np.asarray(self.y, dtype=np.float64))
        if self.x.ndim != 2 or self.y.ndim != 1:
            raise ConfigError("x must be 2-D and y 1-D")
        if self.x.shape[0] != self.y.shape[0] or self.x.shape[0] < 1:
            raise ConfigError(f"x has {self.x.shape[0]} rows, y has {self.y.shape[0]}; need equal and >= 1")

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class ModelState:
    """Current estimates: orthonormal u (d, r), per-task weights w (t, r), sparse b (d, t)."""

    u: np.ndarray
    w: np.ndarray
    b: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        _freeze(self, "u", np.asarray(self.u, dtype=np.float64))
        _freeze(self, "w", np.asarray(self.w, dtype=np.float64))
        _freeze(self, "b", np.asarray(self.b, dtype=np.float64))
        d, r = self.u.shape
        if self.w.ndim != 2 or self.w.shape[1] != r:
            raise ConfigError(f"w must be (t, {r}), got {self.w.shape}")
        if self.b.shape != (d, self.w.shape[0]):
            raise ConfigError(f"b must be ({d}, {self.w.shape[0]}), got {self.b.shape}")
        if self.iteration < 0:
            raise ConfigError("iteration must be nonnegative")

    @property
    def d(self) -> int:
        return self.u.shape[0]

    @property
    def r(self) -> int:
        return self.u.shape[1]

    @property
    def t(self) -> int:
        return self.w.shape[0]

    def theta(self, task: int) -> np.ndarray:
        """Per-task parameter u w(i) + b(i); the rotation-invariant quantity."""
        if not 0 <= task < self.t:
            raise IndexError(f"task {task} out of range [0, {self.t})")
        return self.u @ self.w[task] + self.b[:, task]

    def b_nnz(self) -> np.ndarray:
        """Nonzero count of each task's sparse vector (b is stored dense)."""
        return np.count_nonzero(self.b, axis=0)


def theta(state, task: int) -> np.ndarray:
    """Per-task parameter of a GroundTruth or ModelState."""
    return state.theta(task)


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for the alternating-minimization solver.

    init_bound is the assumed bound on the initial subspace error
    ||(I - U* U*') U0||_F; None means "estimate from the ground truth when
    available, else 1".  gamma0 bounds the initial sup-norm error of the sparse
    vectors; None means "estimate from the data".
    """

    r: int
    k: int
    outer_iters: int
    eps: float = 1e-6
    c1: float = 0.25
    c3: float = 0.5
    c4: float = 0.5
    c5: float = 0.5
    inner_cap: int = 50
    init_bound: float | None = None
    gamma0: float | None = None
    batching: str = "reuse"
    ridge_eps: float = 0.0
    stop_tol: float = 1e-10

    def __post_init__(self):
        if self.r < 1 or self.k < 0:
            raise ConfigError("need r >= 1 and k >= 0")
        if self.outer_iters < 0:
            raise ConfigError("outer_iters must be nonnegative")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if not 0 <= self.c1 <= 0.5:
            raise ConfigError("c1 must lie in [0, 1/2]")
        for name in ("c3", "c4", "c5"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if self.inner_cap < 1:
            raise ConfigError("inner_cap must be positive")
        if self.batching not in ("reuse", "split"):
            raise ConfigError(f"batching must be 'reuse' or 'split', got {self.batching!r}")
        if self.ridge_eps < 0 or self.stop_tol < 0:
            raise ConfigError("ridge_eps and stop_tol must be nonnegative")
        if self.init_bound is not None and not self.init_bound > 0:
            raise ConfigError("init_bound must be positive")
        if self.gamma0 is not None and not self.gamma0 > 0:
            raise ConfigError("gamma0 must be positive")


@dataclass(frozen=True)
class PrivacyConfig:
    """Privacy target, noise multiplier, clip levels and planned release count.

    sigma_dp = 0 disables the noise (and the guarantee); used for degeneracy tests.
    """

    epsilon: float
    delta: float
    sigma_dp: float
    a1: float
    a2: float
    a3: float
    aw: float
    planned_iters: int

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.sigma_dp < 0:
            raise ConfigError("sigma_dp must be nonnegative")
        for name in ("a1", "a2", "a3", "aw"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"clip level {name} must be positive")
        if self.planned_iters < 1:
            raise ConfigError("planned_iters must be positive")

    @classmethod
    def from_epsilon(cls, epsilon, delta, clip_levels, planned_iters):
        """Derive the noise multiplier from the (epsilon, delta) target."""
        if not epsilon > 0 or not 0 < delta < 1:
            raise DomainError("need epsilon > 0 and 0 < delta < 1")
        sigma = 2.0 * math.sqrt(math.log(1.0 / delta) + epsilon) / epsilon
        a1, a2, a3, aw = clip_levels
        return cls(epsilon, delta, sigma, a1, a2, a3, aw, planned_iters)


@dataclass
class FitReport:
    """Per-iteration records emitted by the solvers."""

    rows: list = field(default_factory=list)

    def append(self, **kw):
        self.rows.append(dict(kw))

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [row.get(name) for row in self.rows]
