"""Shared numerical kernels.

Hard thresholding, norm clipping, QR with a fixed sign convention, regularized
least squares, top eigenvectors, and the Kronecker-structured solve behind the
shared-representation update.  All kernels are pure functions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import DegenerateMomentWarning, DomainError, RankDeficient, SingularSystem
from .validation import as_matrix, as_vector


def hard_threshold(v: np.ndarray, delta: float) -> np.ndarray:
    """Zero every entry with |v_i| <= delta (strictly larger entries survive)."""
    if delta < 0:
        raise DomainError("threshold must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    return np.where(np.abs(v) > delta, v, 0.0)


def clip_vector(v: np.ndarray, rho: float) -> np.ndarray:
    """Scale v onto the closed L2 ball of radius rho; direction preserved.

    Idempotent: the rescaled norm can overshoot rho by an ulp, so the scaling
    is repeated until the result is strictly inside the ball.
    """
    if not rho > 0:
        raise DomainError("clip radius must be positive")
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n <= rho:
        return v.copy()
    for _ in range(4):
        v = v * (rho / n)
        n = np.linalg.norm(v)
        if n <= rho:
            break
    return v


def clip_scalar(x: float, rho: float) -> float:
    """Magnitude clip: x * min(1, rho/|x|)."""
    if not rho > 0:
        raise DomainError("clip radius must be positive")
    ax = abs(x)
    if ax <= rho:
        return float(x)
    return float(x) * (rho / ax)


def clip_frobenius(m: np.ndarray, rho: float) -> np.ndarray:
    """Scale a matrix onto the Frobenius ball of radius rho; idempotent."""
    if not rho > 0:
        raise DomainError("clip radius must be positive")
    m = np.asarray(m, dtype=np.float64)
    n = np.linalg.norm(m, "fro")
    if n <= rho:
        return m.copy()
    for _ in range(4):
        m = m * (rho / n)
        n = np.linalg.norm(m, "fro")
        if n <= rho:
            break
    return m


def qr_orthonormalize(m: np.ndarray):
    """Thin QR with positive diagonal of R, so the factorization is unique.

    Returns (q, r_factor) with q (d, r) orthonormal and r_factor (r, r) upper
    triangular.  Raises RankDeficient when a diagonal pivot of R is smaller
    than 1e-12 * ||m||_F.
    """
    m = as_matrix(m, "m")
    q, r = np.linalg.qr(m)
    scale = np.linalg.norm(m, "fro")
    diag = np.diag(r)
    if np.min(np.abs(diag)) < 1e-12 * scale or scale == 0.0:
        raise RankDeficient(f"matrix is numerically column-rank-deficient (min pivot {np.min(np.abs(diag)):.3e})")
    signs = np.sign(diag)
    return q * signs, r * signs[:, None]


def least_squares(a: np.ndarray, y: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """argmin_z ||a z - y||^2 + ridge ||z||^2 via the normal equations."""
    a = as_matrix(a, "a")
    y = as_vector(y, "y")
    if ridge < 0:
        raise DomainError("ridge must be nonnegative")
    gram = a.T @ a
    rhs = a.T @ y
    if ridge == 0.0:
        tr = np.trace(gram)
        lam_min = scipy.linalg.eigvalsh(gram, subset_by_index=[0, 0])[0] if gram.size else 0.0
        if tr <= 0 or lam_min < 1e-12 * tr:
            raise SingularSystem(f"normal equations singular (min eig {lam_min:.3e}, trace {tr:.3e})")
        return np.linalg.solve(gram, rhs)
    return np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), rhs)


@dataclass(frozen=True)
class StructuredSystem:
    """The per-task blocks of the shared-representation normal equations.

    The implied operator on a (d, r) matrix U is
        A(U) = sum_i gram_x[i] @ U @ outer(w[i], w[i]),
    equal to sum_i (w_i w_i' kron X_i'X_i) acting on the column-stacked vec(U);
    rhs is the (d, r) right-hand side.
    """

    w: np.ndarray          # (t, r)
    gram_x: np.ndarray     # (t, d, d), X_i' X_i per task
    rhs: np.ndarray        # (d, r)

    @property
    def d(self):
        return self.rhs.shape[0]

    @property
    def r(self):
        return self.rhs.shape[1]

    def materialize(self) -> np.ndarray:
        """Dense (rd, rd) operator; index (i*d + a, j*d + c) = sum_t ww'[i,j] * XtX[a,c]."""
        ww = np.einsum("ti,tj->tij", self.w, self.w)
        full = np.einsum("tij,tac->iajc", ww, self.gram_x)
        n = self.r * self.d
        return full.reshape(n, n)

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Matrix-free A(U) for the conjugate-gradient path."""
        xu = np.einsum("tac,cr->tar", self.gram_x, u)
        ww = np.einsum("ti,tj->tij", self.w, self.w)
        return np.einsum("tar,trj->aj", xu, ww)


# Above this vec-dimension, materializing the rd x rd operator is replaced by CG.
_DIRECT_LIMIT = 2048


def solve_structured(sys: StructuredSystem) -> np.ndarray:
    """Solve A vec(U) = vec(rhs) for the (d, r) matrix U.

    Direct dense factorization for rd <= 2048, otherwise conjugate gradients
    with the structured matrix-vector product (tol 1e-10, cap 10*rd).
    """
    d, r = sys.d, sys.r
    n = d * r
    vec_rhs = sys.rhs.reshape(-1, order="F")
    rhs_norm = np.linalg.norm(vec_rhs)
    if n <= _DIRECT_LIMIT:
        a = sys.materialize()
        tr = np.trace(a)
        if tr <= 0:
            raise SingularSystem("structured operator is zero or indefinite (all weights zero?)")
        lam_min = scipy.linalg.eigvalsh(a, subset_by_index=[0, 0])[0]
        if lam_min < 1e-12 * tr:
            raise SingularSystem(f"structured system singular (min eig {lam_min:.3e}, trace {tr:.3e})")
        sol = np.linalg.solve(a, vec_rhs)
        residual = np.linalg.norm(a @ sol - vec_rhs)
        if rhs_norm > 0 and residual > 1e-8 * rhs_norm:
            sol = scipy.linalg.solve(a, vec_rhs, assume_a="sym")
        return sol.reshape((d, r), order="F")

    op = scipy.sparse.linalg.LinearOperator(
        (n, n),
        matvec=lambda z: sys.apply(z.reshape((d, r), order="F")).reshape(-1, order="F"),
    )
    sol, info = scipy.sparse.linalg.cg(op, vec_rhs, rtol=1e-10, atol=0.0, maxiter=10 * n)
    if info != 0:
        raise SingularSystem(f"conjugate gradients failed to converge (info={info})")
    return sol.reshape((d, r), order="F")


def top_r_eigvecs(s: np.ndarray, r: int) -> np.ndarray:
    """Orthonormal eigenvectors of (s + s')/2 for the r largest eigenvalues, descending.

    Warns DegenerateMomentWarning when the r-th and (r+1)-th eigenvalues are
    separated by less than 1e-12 * ||s||_2 (subspace ill-defined).
    """
    s = as_matrix(s, "s")
    d = s.shape[0]
    if s.shape[1] != d:
        raise DomainError("matrix must be square")
    if not 1 <= r <= d:
        raise DomainError(f"need 1 <= r <= {d}, got r={r}")
    asym = np.max(np.abs(s - s.T)) if d else 0.0
    scale = np.linalg.norm(s, 2) if d else 0.0
    if asym > 1e-10 * max(scale, 1.0):
        raise DomainError(f"matrix is not symmetric within tolerance (max |s - s'| = {asym:.3e})")
    sym = 0.5 * (s + s.T)
    vals, vecs = np.linalg.eigh(sym)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if r < d and (vals[r - 1] - vals[r]) < 1e-12 * max(scale, np.finfo(float).tiny):
        warnings.warn(
            f"top-{r} eigengap is {vals[r - 1] - vals[r]:.3e}; the subspace is ill-defined",
            DegenerateMomentWarning,
        )
    return vecs[:, :r]
